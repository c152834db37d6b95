"""Temperature sweep for CPC and GCPC pre-training on the default corpus.

For every kappa, pre-trains each scheme, fine-tunes a transducer and
reports mean WER and fisher ratio over the given seeds.  Scratch is run
once per seed as the WERR baseline.

    python scripts/kappa_sweep.py --kappas 0.1,0.5,1.0,2.0 --seeds 0,1,2
"""
import argparse
import logging
from dataclasses import replace

import numpy as np

from gcpc import nets
from gcpc.pipeline import TrainConfig, run_comparison
from gcpc.synthdata import CorpusConfig, generate_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--kappas", default="0.1,0.5,1.0,2.0")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--finetune-steps", type=int, default=750)
    ap.add_argument("--schemes", default="cpc,gcpc")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    corpus = generate_corpus(CorpusConfig(), 0)
    topo = nets.Topology()
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = [(s, "rnnt") for s in args.schemes.split(",")]
    print(f"{'kappa':>6} {'scheme':>8} {'WER':>8} {'WERR%':>8} {'fisher':>8}")
    for kappa in (float(k) for k in args.kappas.split(",")):
        cfg = replace(TrainConfig(finetune_steps=args.finetune_steps), kappa_cpc=kappa, kappa_gcpc=kappa)
        rows = run_comparison(corpus, topo, cfg, seeds, cells)
        for scheme in ["scratch"] + [s for s, _ in cells]:
            sel = [r for r in rows if r.scheme == scheme and r.error is None]
            wer = np.mean([r.wer for r in sel])
            werr = np.mean([r.werr for r in sel])
            fisher = np.mean([r.fisher for r in sel]) if sel and sel[0].fisher is not None else float("nan")
            print(f"{kappa:6.2f} {scheme:>8} {wer:8.4f} {werr:8.2f} {fisher:8.2f}", flush=True)


if __name__ == "__main__":
    main()
