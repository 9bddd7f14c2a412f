"""Training loop: seeded shuffling, per-epoch JSONL metrics, best-dev and resumable checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, TrainConfig, write_snapshot
from .data import FeatureSet
from .joint import COMPONENTS, JointModel, LossWeights, ModelConfig, total_loss

log = logging.getLogger(__name__)

FORMAT = "jointvt-checkpoint"
# per-component seed offsets from the single run seed
INIT_OFFSET, SHUFFLE_OFFSET, SPLIT_OFFSET, GL_OFFSET = 1, 2, 3, 4


class TrainingDiverged(FloatingPointError):
    def __init__(self, component, epoch, step):
        super().__init__(f"non-finite {component} at epoch {epoch}, step {step}")
        self.component = component


class CheckpointMismatch(ValueError):
    pass


def split_counts(n, fractions):
    n_dev = math.floor(fractions[1] * n)
    n_test = math.floor(fractions[2] * n)
    return n - n_dev - n_test, n_dev, n_test


def split_dataset(ids, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded shuffle, then floor-sized dev and test sets; the remainder trains."""
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty manifest")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_dev, _ = split_counts(len(ids), fractions)
    shuffled = [ids[i] for i in order]
    return (shuffled[:n_train], shuffled[n_train:n_train + n_dev],
            shuffled[n_train + n_dev:])


def run_split(cfg: RunConfig, ids):
    return split_dataset(ids, cfg.split, cfg.seed + SPLIT_OFFSET)


def build_model(cfg: RunConfig) -> JointModel:
    return JointModel(cfg.model(), seed=cfg.seed + INIT_OFFSET)


# checkpoints

def save_checkpoint(path, model: JointModel, cfg: RunConfig, extra=None, opt=None):
    arrays = ad.module_arrays(model)
    meta = {"format": FORMAT, "config": cfg.to_dict(), "fingerprint": cfg.fingerprint(),
            "model_config": model.cfg.to_dict()}
    if opt is not None:
        arrays.update(opt.state_arrays())
        meta["adam_step"] = opt.step_count
    meta.update(extra or {})
    ad.save_arrays(path, arrays, meta)


def load_checkpoint(path):
    """Returns ``(model, cfg, arrays, manifest)``; raises CheckpointMismatch on bad contents."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"{path}: not a checkpoint directory")
    try:
        arrays, manifest = ad.load_arrays(path)
        if manifest.get("format") != FORMAT:
            raise CheckpointMismatch(f"{path}: not a joint-model checkpoint")
        cfg = RunConfig.from_dict(manifest["config"])
        model = JointModel(ModelConfig.from_dict(manifest["model_config"]), seed=0)
        ad.load_module_arrays(model, arrays)
    except (KeyError, ValueError, TypeError) as e:
        if isinstance(e, CheckpointMismatch):
            raise
        raise CheckpointMismatch(f"{path}: {e}") from e
    model.eval()
    return model, cfg, arrays, manifest


# loop

def _check_finite(parts, epoch, step):
    for name in COMPONENTS:
        if not np.isfinite(parts[name].item()):
            raise TrainingDiverged(name, epoch, step)


def evaluate_split(model: JointModel, data: FeatureSet, idx, weights: LossWeights, batch=50):
    """Dev/test metrics in eval mode: batch-size weighted means of every component."""
    model.eval()
    sums = {k: 0.0 for k in COMPONENTS + ("total",)}
    elbo = {"data_term": 0.0, "prior_term": 0.0, "entropy_term": 0.0, "elbo": 0.0}
    n = 0
    with ad.no_grad():
        for start in range(0, len(idx), batch):
            b = idx[start:start + batch]
            xg, xs = data.geometry[b], data.mel[b]
            parts, recons = model.loss_parts(xg, xs)
            parts_t = dict(parts)
            sums["total"] += total_loss(parts_t, weights).item() * len(b)
            for k in COMPONENTS:
                sums[k] += parts[k].item() * len(b)
            for k, v in model.elbo_report(xg, xs, parts, recons).items():
                elbo[k] += v * len(b)
            n += len(b)
    n = max(n, 1)
    out = {k: v / n for k, v in sums.items()}
    out["elbo"] = {k: v / n for k, v in elbo.items()}
    return out


class Trainer:
    def __init__(self, cfg: RunConfig, data: FeatureSet, out_dir, model=None):
        self.cfg = cfg
        self.tc: TrainConfig = cfg.train()
        self.weights = cfg.weights()
        self.data = data
        self.out_dir = Path(out_dir)
        self.model = model or build_model(cfg)
        params = self.model.parameters()
        prior = {id(q) for m in (self.model.prior_g, self.model.prior_s) for q in m.parameters()}
        scale = [cfg.prior_lr_scale if id(q) in prior else 1.0 for q in params]
        self.opt = ad.Adam(params, lr=self.tc.lr, lr_scale=scale)
        self.rng = np.random.default_rng(cfg.seed + SHUFFLE_OFFSET)
        train_ids, dev_ids, test_ids = run_split(cfg, data.ids)
        self.train_idx = data.index(train_ids)
        self.dev_idx = data.index(dev_ids)
        self.test_ids = test_ids
        self.epoch = 0
        self.best = None  # (dev_total, epoch)

    @property
    def metrics_path(self):
        return self.out_dir / "metrics.jsonl"

    def _extra(self):
        return {"epoch": self.epoch, "rng_state": self.rng.bit_generator.state,
                "best": list(self.best) if self.best else None,
                "mel_shape": list(self.data.mel_shape)}

    def resume(self, ckpt=None):
        ckpt = Path(ckpt or self.out_dir / "last.ckpt")
        model, cfg, arrays, manifest = load_checkpoint(ckpt)
        if cfg.fingerprint() != self.cfg.fingerprint():
            raise CheckpointMismatch(f"{ckpt}: config differs from the current run")
        ad.load_module_arrays(self.model, arrays)
        self.opt.load_state_arrays(arrays, manifest["adam_step"])
        self.rng.bit_generator.state = manifest["rng_state"]
        self.epoch = manifest["epoch"]
        self.best = tuple(manifest["best"]) if manifest["best"] else None
        # drop metric lines written after that checkpoint
        if self.metrics_path.exists():
            lines = self.metrics_path.read_text().splitlines(keepends=True)
            self.metrics_path.write_text("".join(lines[:self.epoch]))

    def train_epoch(self):
        model, tc = self.model, self.tc
        model.train()
        order = self.train_idx[self.rng.permutation(len(self.train_idx))]
        sums = {k: 0.0 for k in COMPONENTS + ("total",)}
        n = 0
        for step, start in enumerate(range(0, len(order), tc.batch_size)):
            b = order[start:start + tc.batch_size]
            if len(b) < 2:
                continue  # batch norm needs two samples
            self.opt.zero_grad()
            parts, _ = model.loss_parts(self.data.geometry[b], self.data.mel[b],
                                        self.weights.prior_encoder)
            _check_finite(parts, self.epoch + 1, step)
            loss = total_loss(parts, self.weights)
            loss.backward()
            try:
                self.opt.step()
            except FloatingPointError as e:
                raise TrainingDiverged("gradient", self.epoch + 1, step) from e
            sums["total"] += loss.item() * len(b)
            for k in COMPONENTS:
                sums[k] += parts[k].item() * len(b)
            n += len(b)
        return {k: v / max(n, 1) for k, v in sums.items()}

    def run(self, epochs=None, progress=None):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_snapshot(self.cfg, self.out_dir)
        (self.out_dir / "split.json").write_text(json.dumps(
            {"train": len(self.train_idx), "dev": len(self.dev_idx), "test": self.test_ids}))
        if self.epoch == 0 and self.metrics_path.exists():
            self.metrics_path.unlink()
        stop = self.tc.epochs if epochs is None else min(self.tc.epochs, self.epoch + epochs)
        while self.epoch < stop:
            t0 = time.perf_counter()
            train_m = self.train_epoch()
            self.epoch += 1
            dev_m = evaluate_split(self.model, self.data, self.dev_idx, self.weights)
            if not np.isfinite(dev_m["total"]):
                bad = next((k for k in COMPONENTS if not np.isfinite(dev_m[k])), "total")
                raise TrainingDiverged("dev " + bad, self.epoch, -1)
            row = {"epoch": self.epoch, "train": train_m, "dev": dev_m,
                   "fingerprint": self.cfg.fingerprint()}
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
            if self.best is None or dev_m["total"] < self.best[0]:
                self.best = (dev_m["total"], self.epoch)
                save_checkpoint(self.out_dir / "best.ckpt", self.model, self.cfg,
                                {"epoch": self.epoch, "dev_total": dev_m["total"],
                                 "mel_shape": list(self.data.mel_shape)})
            if self.epoch % self.tc.checkpoint_every == 0 or self.epoch == stop:
                save_checkpoint(self.out_dir / "last.ckpt", self.model, self.cfg,
                                self._extra(), self.opt)
            dt = time.perf_counter() - t0
            log.info("epoch %d  train %.4f  dev %.4f  (%.1fs)", self.epoch, train_m["total"],
                     dev_m["total"], dt)
            if progress:
                progress(self.epoch, row, dt)
        return self.best


def read_metrics(run_dir):
    with open(Path(run_dir) / "metrics.jsonl", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
