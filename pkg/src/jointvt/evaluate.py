"""Held-out evaluation: formant error of geometry->speech audio, MAE of speech->geometry images."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import (FormantError, MelSpectrogram, estimate_formants, griffin_lim, mel_spectrogram,
                    resize, save_mel_png)
from .config import RunConfig
from .data import FeatureSet
from .joint import JointModel
from .synth import SAMPLE_RATE, AudioClip, VtImage, read_manifest, read_wav, write_png, write_wav

log = logging.getLogger(__name__)

# full-scale reference numbers, printed next to ours
REFERENCE = {"formant_error_pct": [18.57, 24.21, 7.69], "image_mae": 0.0397}

# (tongue_position, tongue_diameter) for vowel-like corners of the control space
CARDINAL = {"a": (0.15, 0.25), "ae": (0.35, 0.7), "i": (0.8, 0.15), "u": (0.55, 0.25)}


def formant_error(pairs):
    """Mean percent error per formant over (original, synthesized) formant lists.

    Pairs may hold AudioClips or precomputed formant lists. Samples whose
    formants cannot be estimated are skipped and counted.
    """
    errs, failed = [], 0
    for orig, synth in pairs:
        try:
            fo = orig if not isinstance(orig, AudioClip) else estimate_formants(orig)
            fs = synth if not isinstance(synth, AudioClip) else estimate_formants(synth)
        except FormantError:
            failed += 1
            continue
        fo, fs = np.asarray(fo, float), np.asarray(fs, float)
        errs.append(np.abs(fs - fo) / fo * 100.0)
    mean = np.mean(errs, axis=0).tolist() if errs else [float("nan")] * 3
    return {"percent": mean, "n_used": len(errs), "n_failed": failed}


def image_mae(pairs):
    """Mean over pairs of the per-pixel absolute difference."""
    vals = []
    for a, b in pairs:
        a = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
        b = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        vals.append(np.abs(a - b).mean())
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalReport:
    formant_error_pct: list
    image_mae: float
    n_samples: int
    formant_failures: int
    cardinal: dict
    reference: dict
    fingerprint: str
    records: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def summary(self):
        f = ", ".join(f"F{k + 1} {v:.2f}%" for k, v in enumerate(self.formant_error_pct))
        r = ", ".join(f"F{k + 1} {v:.2f}%" for k, v in enumerate(self.reference["formant_error_pct"]))
        return (f"formant error: {f}  (reference: {r})\n"
                f"geometry MAE: {self.image_mae:.4f}  (reference: {self.reference['image_mae']})\n"
                f"samples: {self.n_samples}, formant failures: {self.formant_failures}")


def mel_from_image(img, mel_shape, cfg: RunConfig) -> MelSpectrogram:
    """Model-grid mel image -> mel spectrogram at the analysis resolution."""
    values = resize(np.asarray(img).reshape(img.shape[-2:]), mel_shape)
    fc = cfg.features()
    return MelSpectrogram(values, SAMPLE_RATE, fc.stft, norm_floor_db=fc.norm_floor_db)


def synthesize_audio(model: JointModel, geometry, mel_shape, cfg: RunConfig, seed=0):
    mel_img, code = model.geometry_to_spectrogram(geometry)
    out = []
    for img in mel_img:
        m = mel_from_image(img, mel_shape, cfg)
        out.append((m, griffin_lim(m, cfg.gl_iterations, seed=seed, method=cfg.gl_method)))
    return out, code


def _formants_or_none(clip):
    try:
        return estimate_formants(clip)
    except FormantError:
        return None


def evaluate(model: JointModel, data: FeatureSet, test_ids, data_dir, cfg: RunConfig,
             seed=0, batch=50, keep=()):
    """Run both mapping directions over ``test_ids``.

    ``keep`` lists ids whose synthesized outputs are retained on the records
    (as ``_mel`` / ``_audio`` / ``_geometry``) for figures.
    """
    model.eval()
    rows = {r["id"]: r for r in read_manifest(data_dir)}
    idx = data.index(test_ids)
    fc = cfg.features()
    records = []
    for start in range(0, len(idx), batch):
        b = idx[start:start + batch]
        geo_pred, _ = model.spectrogram_to_geometry(data.mel[b])
        synth, _ = synthesize_audio(model, data.geometry[b], data.mel_shape, cfg, seed)
        for k, i in enumerate(b):
            sid = data.ids[i]
            row = rows[sid]
            orig = read_wav(Path(data_dir) / row["wav_path"]).trimmed(fc.trim)
            fo, fs = _formants_or_none(orig), _formants_or_none(synth[k][1])
            rec = {"id": sid, "tongue_position": row["tongue_position"],
                   "tongue_diameter": row["tongue_diameter"],
                   "image_mae": float(np.abs(geo_pred[k] - data.geometry[i]).mean()),
                   "formants_orig": fo, "formants_synth": fs}
            if sid in keep:
                rec["_mel"], rec["_audio"] = synth[k]
                rec["_geometry"] = geo_pred[k]
                rec["_orig_mel"] = mel_spectrogram(orig, fc.stft, fc.n_mels,
                                                   norm_floor_db=fc.norm_floor_db)
            records.append(rec)
    return records


def summarize(records):
    ok = [r for r in records if r["formants_orig"] and r["formants_synth"]]
    fe = formant_error([(r["formants_orig"], r["formants_synth"]) for r in ok])
    mae = float(np.mean([r["image_mae"] for r in records])) if records else float("nan")
    return {"formant_error_pct": fe["percent"], "image_mae": mae, "n_samples": len(records),
            "formant_failures": len(records) - len(ok)}


def cardinal_ids(rows, test_ids):
    """Nearest held-out item to each cardinal tongue setting."""
    test = [r for r in rows if r["id"] in set(test_ids)]
    out = {}
    for name, (pos, diam) in CARDINAL.items():
        if test:
            best = min(test, key=lambda r: (r["tongue_position"] - pos) ** 2
                       + (r["tongue_diameter"] - diam) ** 2)
            out[name] = best["id"]
    return out


def run_evaluation(model, data, test_ids, data_dir, cfg: RunConfig, seed=0):
    rows = read_manifest(data_dir)
    card = cardinal_ids(rows, test_ids)
    records = evaluate(model, data, test_ids, data_dir, cfg, seed, keep=set(card.values()))
    by_id = {r["id"]: r for r in records}
    card_records = [by_id[v] for v in card.values()]
    s = summarize(records)
    report = EvalReport(s["formant_error_pct"], s["image_mae"], s["n_samples"],
                        s["formant_failures"],
                        {"ids": card, **summarize(card_records)},
                        REFERENCE, cfg.fingerprint(),
                        [{k: v for k, v in r.items() if not k.startswith("_")} for r in records])
    return report, {name: by_id[sid] for name, sid in card.items()}


def emit_figures(cardinal_records: dict, out_dir, vowels=("a", "u")):
    """Mel panels (original, synthesized) for ``vowels``, geometry images
    recovered from audio for every cardinal vowel, and the recovered WAVs."""
    out_dir = Path(out_dir)
    if not cardinal_records:
        log.warning("empty evaluation set: no figures written")
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in vowels:
        rec = cardinal_records.get(name)
        if rec is None:
            continue
        for tag, m in (("orig", rec["_orig_mel"]), ("synth", rec["_mel"])):
            p = out_dir / f"mel_{name}_{tag}.png"
            save_mel_png(p, m, {"id": rec["id"]})
            written.append(p)
    for name, rec in cardinal_records.items():
        p = out_dir / f"geometry_{name}.png"
        write_png(p, VtImage(np.clip(rec["_geometry"], 0, 1)))
        written.append(p)
        w = out_dir / f"audio_{name}.wav"
        write_wav(w, rec["_audio"])
        written.append(w)
    return written
