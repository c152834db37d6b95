"""Run a scheme comparison grid and print per-cell means.

    python scripts/run_comparison.py --config configs/directional.cfg \
        --seeds 5 --cells scratch:rnnt,cpc:rnnt,gcpc:rnnt --out runs/directional

Thin wrapper over ``gcpc compare`` that also prints a summary table.
"""
import argparse
import csv
import sys
from pathlib import Path

from gcpc.cli import run_cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/directional.cfg")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--cells", default=None, help="scheme:loss list; full grid when omitted")
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    argv = ["compare", "--config", args.config, "--run-dir", args.out, "--seeds", str(args.seeds), "-v"]
    if args.cells:
        argv += ["--cells", args.cells]
    for s in args.set:
        argv += ["--set", s]
    code = run_cli(argv)
    if code:
        return code
    with open(Path(args.out) / "tables" / "compare_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    print(f"\n{'scheme':>9} {'loss':>8} {'WER':>8} {'WERR%':>8} {'fisher':>8}")
    for r in rows:
        fisher = f"{float(r['fisher_mean']):8.2f}" if r["fisher_mean"] else "       -"
        print(f"{r['scheme']:>9} {r['finetune_loss']:>8} {float(r['wer_mean']):8.4f} "
              f"{float(r['werr_mean']):8.2f} {fisher}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
