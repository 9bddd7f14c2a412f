"""End-to-end desk run: generate the sweep, train, evaluate, with wall times."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from .config import RunConfig, write_snapshot
from .data import load_features
from .evaluate import emit_figures, run_evaluation
from .synth import sweep_dataset
from .train import GL_OFFSET, Trainer, load_checkpoint, read_metrics, run_split

log = logging.getLogger(__name__)


def desk_run(cfg: RunConfig, out_dir, reuse=True, progress=None):
    """Run (or resume from files) the full pipeline under ``out_dir``.

    Layout: ``data/`` (sweep), ``run/`` (training), ``report.json`` and
    ``report_figures/``. ``timings.json`` records seconds per stage. With
    ``reuse``, stages whose outputs exist for the same config are skipped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir, run_dir = out / "data", out / "run"
    timing_path = out / "timings.json"
    timings = json.loads(timing_path.read_text()) if reuse and timing_path.exists() else {}
    fp = cfg.fingerprint()
    if timings.get("fingerprint") != fp:
        timings = {"fingerprint": fp}

    def stage(name, done, fn):
        if reuse and name in timings and done():
            return
        t0 = time.perf_counter()
        fn()
        timings[name] = time.perf_counter() - t0
        timing_path.write_text(json.dumps(timings, indent=2, sort_keys=True))
        log.info("%s took %.1fs", name, timings[name])

    stage("gen", lambda: (data_dir / "manifest.jsonl").exists(),
          lambda: (sweep_dataset(cfg.grid(), data_dir, seed=cfg.seed),
                   write_snapshot(cfg, data_dir)))

    data = load_features(data_dir, cfg.features())

    def train():
        Trainer(cfg, data, run_dir).run(progress=progress)

    stage("train", lambda: (run_dir / "best.ckpt").exists()
          and len(read_metrics(run_dir)) == cfg.epochs, train)

    def evaluate():
        model, ck_cfg, _, _ = load_checkpoint(run_dir / "best.ckpt")
        _, _, test_ids = run_split(ck_cfg, data.ids)
        report, cardinal = run_evaluation(model, data, test_ids, data_dir, ck_cfg,
                                          seed=ck_cfg.seed + GL_OFFSET)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        emit_figures(cardinal, out / "report_figures")

    stage("eval", lambda: (out / "report.json").exists(), evaluate)
    return {"data": data_dir, "run": run_dir, "report": out / "report.json",
            "timings": timings, "metrics": read_metrics(run_dir)}
