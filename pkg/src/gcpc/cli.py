"""Command-line entry point: ``gcpc <subcommand> [options]``.

Every subcommand writes into a run directory::

    <run>/config.resolved
    <run>/checkpoints/*.gcpc
    <run>/metrics.jsonl
    <run>/tables/*.csv
    <run>/embeddings/*.csv

Exit codes: 0 success, 2 usage, 3 config, 4 data/format, 5 numeric.
``GCPC_SEED`` in the environment overrides ``run.seed``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import nets
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config
from .evaluate import compute_wer_werr, fisher_ratio, pca_project
from .numcore import ContractError, DimensionError, NumericError, ParameterStore
from .pipeline import (
    DEFAULT_CELLS,
    Checkpoint,
    DependencyError,
    FinetuneLoss,
    Scheme,
    aggregate,
    context_embeddings,
    evaluate_transducer,
    finetune_transducer,
    initialize_downstream,
    pretrain_encoder,
    run_comparison,
    train_prior_classifier,
)
from .synthdata import FormatError, corpus_stats, generate_corpus, read_corpus, write_corpus

log = logging.getLogger("gcpc")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5
COMPARE_COLUMNS = ["scheme", "seed", "wer", "werr", "sub", "ins", "del", "finetune_loss", "ref_len",
                   "subr", "insr", "delr", "fisher", "error"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


class RunDir:
    def __init__(self, path, config: Config):
        self.path = Path(path)
        for sub in ("checkpoints", "tables", "embeddings"):
            (self.path / sub).mkdir(parents=True, exist_ok=True)
        (self.path / "config.resolved").write_text(config.resolved_text())
        self.config = config

    def metric(self, record: dict) -> None:
        with open(self.path / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")

    def checkpoint_path(self, name: str) -> Path:
        return self.path / "checkpoints" / f"{name}.gcpc"

    def save(self, name: str, store: ParameterStore, **meta) -> Path:
        path = self.checkpoint_path(name)
        save_checkpoint(path, store, {"config_hash": self.config.hash(), **meta})
        return path

    def table(self, name: str, rows: list[dict], columns: list[str]) -> Path:
        path = self.path / "tables" / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: _csv_value(r.get(k)) for k in columns})
        return path


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}" if math.isfinite(v) else ""
    return v


# ---------------------------------------------------------------- helpers

def _resolve_config(args) -> Config:
    cfg = load_config(Path(args.config) if args.config else None)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if os.environ.get("GCPC_SEED"):
        try:
            overrides["run.seed"] = int(os.environ["GCPC_SEED"])
        except ValueError:
            raise ConfigError("GCPC_SEED", "must be an integer") from None
    if overrides:
        text = cfg.resolved_text() + "".join(f"{k} = {v}\n" for k, v in overrides.items())
        cfg = load_config(text)
    return cfg


def _load_corpus(args, cfg: Config):
    if getattr(args, "corpus", None):
        return read_corpus(args.corpus)
    return generate_corpus(cfg.corpus_config(), cfg.corpus_seed)


def _load_prior(path, cfg: Config, n_phones: int) -> nets.PhoneClassifier:
    store, meta = load_checkpoint(path, cfg.hash())
    clf = nets.PhoneClassifier(cfg.topology(), n_phones, np.random.default_rng(0))
    for name in clf.store.names():
        if name not in store:
            raise FormatError(f"prior checkpoint lacks {name}", 0)
        clf.store.set_value(name, store[name].data)
    clf.freeze()
    return clf


def _load_model(path, cfg: Config, vocab: int) -> nets.TransducerModel:
    store, meta = load_checkpoint(path, cfg.hash())
    model = nets.TransducerModel(cfg.topology(), vocab, np.random.default_rng(0))
    for name in model.store.names():
        if name not in store:
            raise FormatError(f"model checkpoint lacks {name}", 0)
        model.store.set_value(name, store[name].data)
    return model


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg: Config, run: RunDir) -> None:
    corpus = generate_corpus(cfg.corpus_config(), cfg.corpus_seed)
    out = Path(args.out) if args.out else run.path / "corpus.gcds"
    write_corpus(corpus, out)
    stats = corpus_stats(corpus)
    run.metric({"event": "gen-data", "path": str(out), **stats})
    print(f"wrote {out} ({len(corpus.utterances)} utterances, {stats['total_frames']} frames)")


def cmd_train_prior(args, cfg: Config, run: RunDir) -> None:
    corpus = _load_corpus(args, cfg)
    seed = cfg["run.seed"]
    clf, acc = train_prior_classifier(corpus, cfg.topology(), cfg.train_config(), seed)
    path = run.save(f"prior-s{seed}", clf.store, kind="prior", seed=seed, n_phones=clf.n_phones)
    run.metric({"event": "train-prior", "seed": seed, "frame_accuracy": acc, "checkpoint": str(path)})
    print(f"prior classifier frame accuracy {acc:.4f} -> {path}")


def cmd_pretrain(args, cfg: Config, run: RunDir) -> None:
    corpus = _load_corpus(args, cfg)
    seed, scheme = cfg["run.seed"], cfg.scheme
    clf = None
    if scheme.needs_classifier:
        if not args.prior:
            raise DependencyError(f"{scheme.value} pre-training needs --prior <checkpoint>")
        clf = _load_prior(args.prior, cfg, corpus.inventory.n_phones)
    ckpt = pretrain_encoder(corpus, scheme, cfg.topology(), cfg.train_config(), seed, clf)
    path = run.save(f"pretrain-{scheme.value}-s{seed}", ckpt.store, kind="pretrain",
                    scheme=scheme.value, seed=seed)
    run.metric({"event": "pretrain", "scheme": scheme.value, "seed": seed, "checkpoint": str(path),
                "loss_curve": ckpt.loss_curve})
    print(f"pretrained {scheme.value} ({len(ckpt.store)} tensors) -> {path}")


def cmd_finetune(args, cfg: Config, run: RunDir) -> None:
    corpus = _load_corpus(args, cfg)
    seed = cfg["run.seed"]
    ckpt = None
    if args.checkpoint:
        store, meta = load_checkpoint(args.checkpoint, cfg.hash())
        ckpt = Checkpoint(Scheme(meta.get("scheme", "scratch")), int(meta.get("seed", seed)), store, meta)
    model = initialize_downstream(ckpt, cfg.init_spec(), cfg.topology(), corpus.inventory.n_phones, seed)
    model, info = finetune_transducer(model, corpus, cfg.finetune_loss, cfg.train_config(), seed)
    tag = ckpt.scheme.value if ckpt else "scratch"
    path = run.save(f"transducer-{tag}-{cfg.finetune_loss.value}-s{seed}", model.store, kind="transducer",
                    scheme=tag, seed=seed, vocab=model.vocab, frozen=model.frozen)
    run.metric({"event": "finetune", "scheme": tag, "finetune_loss": cfg.finetune_loss.value, "seed": seed,
                "checkpoint": str(path), **info})
    print(f"fine-tuned transducer -> {path}")


def cmd_evaluate(args, cfg: Config, run: RunDir) -> None:
    corpus = _load_corpus(args, cfg)
    vocab = corpus.inventory.n_phones
    test = corpus.split("test")
    counts = evaluate_transducer(_load_model(args.model, cfg, vocab), test, cfg["run.emission_cap"])
    base = None
    if args.baseline:
        base = evaluate_transducer(_load_model(args.baseline, cfg, vocab), test, cfg["run.emission_cap"])
    rep = compute_wer_werr(counts, base)
    row = {"model": args.model, "seed": cfg["run.seed"], **rep.as_dict()}
    run.metric({"event": "evaluate", **row})
    run.table("evaluate", [row], ["model", "wer", "werr", "sub", "ins", "del", "ref_len", "subr", "insr", "delr"])
    print(json.dumps(_jsonable(row)))


def cmd_analyze(args, cfg: Config, run: RunDir) -> None:
    corpus = _load_corpus(args, cfg)
    store, meta = load_checkpoint(args.checkpoint, cfg.hash())
    topo = cfg.topology()
    E, y = context_embeddings(store, topo, corpus.split("test"), cfg["run.analysis_frames"])
    proj, comps, ratio = pca_project(E, 2)
    ratio_value = fisher_ratio(E, y)
    name = Path(args.checkpoint).stem
    emb = run.path / "embeddings" / f"{name}.csv"
    with open(emb, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "phone_label"])
        for (a, b), lab in zip(proj, y):
            w.writerow([f"{a:.9g}", f"{b:.9g}", int(lab)])
    report = {"checkpoint": args.checkpoint, "frames": int(len(y)), "fisher_ratio": ratio_value,
              "explained_variance": [float(r) for r in ratio]}
    run.metric({"event": "analyze", **report})
    run.table(f"analysis-{name}", [report], ["checkpoint", "frames", "fisher_ratio"])
    print(json.dumps(_jsonable(report)))


def _parse_cells(spec: str | None):
    if not spec:
        return DEFAULT_CELLS
    cells = []
    for item in spec.split(","):
        scheme, _, loss = item.strip().partition(":")
        try:
            cells.append((Scheme(scheme), FinetuneLoss(loss or "rnnt")))
        except ValueError:
            raise UsageError(f"bad cell {item!r}; use scheme:loss, e.g. gcpc:rnnt") from None
    return tuple(cells)


def cmd_compare(args, cfg: Config, run: RunDir) -> None:
    corpus = _load_corpus(args, cfg)
    n = args.seeds if args.seeds is not None else cfg["run.seeds"]
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [cfg["run.seed"] + i for i in range(n)]

    def on_row(m):
        run.metric({"event": "cell", **m.row(), "pretrain_curve": m.pretrain_curve,
                    "finetune_curve": m.finetune_curve})

    def on_ckpt(ck):
        if args.save_checkpoints and not ck.is_empty:
            run.save(f"pretrain-{ck.scheme.value}-s{ck.seed}", ck.store, kind="pretrain",
                     scheme=ck.scheme.value, seed=ck.seed)

    rows = run_comparison(corpus, cfg.topology(), cfg.train_config(), seeds, _parse_cells(args.cells),
                          cfg.init_spec(), on_row=on_row, on_checkpoint=on_ckpt)
    table = [r.row() for r in rows]
    path = run.table("compare", table, COMPARE_COLUMNS)
    summary = aggregate(rows)
    run.table("compare_summary", summary, ["scheme", "finetune_loss", "n_seeds", "wer_mean", "wer_std",
                                           "werr_mean", "werr_std", "fisher_mean", "fisher_std"])
    for rec in summary:
        run.metric({"event": "aggregate", **rec})
    failed = [r for r in rows if r.error]
    print(f"wrote {path} ({len(rows)} rows, {len(failed)} failed)")
    for rec in summary:
        print(f"  {rec['scheme']:>9} {rec['finetune_loss']:>8}  WER {rec['wer_mean']:.4f}  "
              f"WERR {rec['werr_mean']:+.2f}%")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-prior": cmd_train_prior,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gcpc", description="Guided CPC pre-training lab on synthetic phone data")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key=value config file (defaults when omitted)")
        s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one key")
        s.add_argument("--run-dir", default="run", help="output directory (default: ./run)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name != "gen-data":
            s.add_argument("--corpus", help="GCDS dataset file (generated from the config when omitted)")
    sub.choices["gen-data"].add_argument("--out", help="dataset path (default: <run-dir>/corpus.gcds)")
    sub.choices["pretrain"].add_argument("--prior", help="prior classifier checkpoint (pce/gcpc/cpc+gcpc)")
    sub.choices["finetune"].add_argument("--checkpoint", help="pre-trained encoder checkpoint")
    sub.choices["evaluate"].add_argument("--model", required=True, help="transducer checkpoint")
    sub.choices["evaluate"].add_argument("--baseline", help="baseline transducer checkpoint for WERR")
    sub.choices["analyze"].add_argument("--checkpoint", required=True, help="pre-trained encoder checkpoint")
    c = sub.choices["compare"]
    c.add_argument("--seeds", type=int, help="number of seeds, starting at run.seed")
    c.add_argument("--cells", help="comma list of scheme:loss cells (default: full grid)")
    c.add_argument("--save-checkpoints", action="store_true", help="keep pre-trained encoders")
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        cfg = _resolve_config(args)
        run = RunDir(args.run_dir, cfg)
        COMMANDS[args.command](args, cfg, run)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError, DependencyError, ContractError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
