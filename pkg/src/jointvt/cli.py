"""Command-line entry point: ``jointvt gen-data | train | map | eval``.

Exit codes: 2 config or input error, 3 I/O error, 4 training diverged,
5 checkpoint does not match the input or configuration.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
import warnings
import wave
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, write_snapshot

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 2, 3, 4, 5

log = logging.getLogger("jointvt")


class InputError(ValueError):
    pass


def _single_thread():
    from threadpoolctl import threadpool_limits
    import numba
    with warnings.catch_warnings():
        # numba reports an unusable TBB layer here; the fallback layer is fine
        warnings.simplefilter("ignore", numba.NumbaWarning)
        numba.set_num_threads(1)
    return threadpool_limits(limits=1)


def cmd_gen_data(args):
    from .synth import sweep_dataset
    cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    out = Path(args.out)
    manifest = sweep_dataset(cfg.grid(), out, seed=cfg.seed)
    write_snapshot(cfg, out)
    n = sum(1 for _ in open(manifest, encoding="utf-8"))
    print(f"{manifest}  ({n} pairs)")


def _load_data(cfg, data_dir):
    from .data import load_features
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.jsonl").exists():
        raise InputError(f"{data_dir}: no manifest.jsonl")
    return load_features(data_dir, cfg.features())


def cmd_train(args):
    from .train import Trainer
    cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    data = _load_data(cfg, args.data)
    trainer = Trainer(cfg, data, args.out)
    if args.resume:
        trainer.resume()

    def progress(epoch, row, dt):
        print(f"epoch {epoch:3d}  train {row['train']['total']:.4f}  "
              f"dev {row['dev']['total']:.4f}  ({dt:.1f}s)", flush=True)

    loss, epoch = trainer.run(progress=progress)
    print(f"best dev total {loss:.4f} at epoch {epoch}: {Path(args.out) / 'best.ckpt'}")


def _read_geometry(path, model, resize_input):
    from .audio import resize
    from .synth import read_png
    try:
        img = read_png(path)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read geometry image {path}: {e}") from e
    want = (model.cfg.geometry_channels, model.cfg.height, model.cfg.width)
    px = img.pixels
    if px.shape != want:
        if not resize_input:
            from .train import CheckpointMismatch
            raise CheckpointMismatch(f"image is {px.shape}, checkpoint expects {want}; "
                                     "pass --resize to rescale")
        if px.shape[0] != want[0]:
            px = np.repeat(px.mean(axis=0, keepdims=True), want[0], axis=0)
        px = np.stack([resize(ch, want[1:]) for ch in px])
    return px.astype(np.float32)


def cmd_map(args):
    from .audio import griffin_lim, save_mel_png
    from .data import mel_input
    from .evaluate import mel_from_image
    from .synth import VtImage, read_wav, write_png, write_wav
    from .train import GL_OFFSET, load_checkpoint
    model, cfg, _, manifest = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out)
    fc = cfg.features()
    if args.from_geometry:
        x = _read_geometry(args.from_geometry, model, args.resize)
        mel_img, code = model.geometry_to_spectrogram(x)
        m = mel_from_image(mel_img[0], tuple(manifest["mel_shape"]), cfg)
        clip = griffin_lim(m, cfg.gl_iterations, seed=cfg.seed + GL_OFFSET,
                           method=cfg.gl_method)
        stem = Path(args.from_geometry).stem
        save_mel_png(out / f"{stem}_mel.png", m, {"fingerprint": cfg.fingerprint()})
        write_wav(out / f"{stem}.wav", clip)
        print(f"wrote {out / (stem + '_mel.png')} and {out / (stem + '.wav')}")
    else:
        try:
            clip = read_wav(args.from_audio)
        except (OSError, EOFError, ValueError, wave.Error) as e:
            raise InputError(f"cannot read audio {args.from_audio}: {e}") from e
        if clip.duration <= fc.trim + fc.n_fft / clip.sample_rate:
            raise InputError(f"{args.from_audio}: clip is too short")
        x, _ = mel_input(clip, fc)
        geo, code = model.spectrogram_to_geometry(x[None])
        stem = Path(args.from_audio).stem
        write_png(out / f"{stem}_geometry.png", VtImage(np.clip(geo[0], 0, 1)))
        print(f"wrote {out / (stem + '_geometry.png')}")
    print(f"shared-slice norm {np.linalg.norm(code.shared[0]):.4f}  "
          f"domain-only norm {np.linalg.norm(code.domain_only[0]):.4f}")


def cmd_eval(args):
    from .evaluate import emit_figures, run_evaluation
    from .train import GL_OFFSET, load_checkpoint, run_split
    model, cfg, _, _ = load_checkpoint(args.checkpoint)
    data = _load_data(cfg, args.data)
    _, _, test_ids = run_split(cfg, data.ids)
    if not test_ids:
        raise InputError("the test split is empty")
    report, cardinal = run_evaluation(model, data, test_ids, args.data, cfg,
                                      seed=cfg.seed + GL_OFFSET)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    fig_dir = out.with_suffix("")
    fig_dir = fig_dir.parent / (fig_dir.name + "_figures")
    emit_figures(cardinal, fig_dir)
    fig_dir.mkdir(exist_ok=True)
    write_snapshot(cfg, fig_dir)
    print(report.summary())
    print(f"report: {out}")


def build_parser():
    p = argparse.ArgumentParser(prog="jointvt", description=__doc__.splitlines()[0])
    p.add_argument("--single-thread", action="store_true",
                   help="limit BLAS and numba to one thread for bit-exact reruns")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize the paired geometry/audio sweep")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the joint model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("map", help="map one geometry image to audio or one WAV to geometry")
    m.add_argument("--checkpoint", required=True)
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--from-geometry")
    src.add_argument("--from-audio")
    m.add_argument("--out", required=True)
    m.add_argument("--resize", action="store_true", help="rescale input images to the model grid")
    m.set_defaults(func=cmd_map)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    from .train import CheckpointMismatch, TrainingDiverged
    limiter = _single_thread() if args.single_thread else contextlib.nullcontext()
    try:
        with limiter:
            args.func(args)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
