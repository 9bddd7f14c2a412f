"""Generate the 2,000-pair sweep, train 40 epochs, evaluate, and print the report.

    python scripts/desk_run.py --out runs/desk [--config configs/desk.toml] [--fresh]

Stages already present in ``--out`` for the same config are reused.
"""
import argparse
import json
import logging
from pathlib import Path

from jointvt.config import load_config
from jointvt.evaluate import REFERENCE
from jointvt.pipeline import desk_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", default=Path(__file__).parent.parent / "configs" / "desk.toml")
    ap.add_argument("--fresh", action="store_true", help="ignore outputs already in --out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)

    def progress(epoch, row, dt):
        print(f"epoch {epoch:3d}  train {row['train']['total']:9.4f}  "
              f"dev {row['dev']['total']:9.4f}  {dt:5.1f}s", flush=True)

    res = desk_run(cfg, args.out, reuse=not args.fresh, progress=progress)
    rep = json.loads(res["report"].read_text())
    t = res["timings"]
    print(f"gen {t['gen']:.0f}s  train {t['train']:.0f}s  eval {t['eval']:.0f}s")
    for i, (got, ref) in enumerate(zip(rep["formant_error_pct"], REFERENCE["formant_error_pct"])):
        print(f"F{i + 1} error  {got:6.1f}%   (reference {ref}%)")
    print(f"geometry MAE {rep['image_mae']:.4f}  (reference {REFERENCE['image_mae']})")


if __name__ == "__main__":
    main()
