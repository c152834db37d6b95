"""Experiment schemes: prior classifier, encoder pre-training, transducer
initialisation and fine-tuning, and the scheme x seed comparison grid."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import nets
from .evaluate import AlignmentCounts, align_and_count_errors, compute_wer_werr, fisher_ratio, greedy_decode
from .losses import (
    KAPPA_CPC,
    KAPPA_GCPC,
    ContrastiveConfig,
    contrastive_loss_batch,
    frame_cross_entropy,
    joint_contrastive_loss,
    negative_table,
    rnnt_loss_batch,
)
from .numcore import AdamState, ContractError, ParameterStore, Tensor, adam_step, affine_forward, backward_pass
from .synthdata import Corpus, Utterance

log = logging.getLogger(__name__)


class Scheme(str, Enum):
    SCRATCH = "scratch"
    PCE = "pce"
    CPC = "cpc"
    GCPC = "gcpc"
    CPC_GCPC = "cpc+gcpc"

    @property
    def needs_classifier(self) -> bool:
        return self in (Scheme.PCE, Scheme.GCPC, Scheme.CPC_GCPC)


class FinetuneLoss(str, Enum):
    RNNT = "rnnt"
    RNNT_PLUS_C = "rnnt+lc"


class DependencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    prior_steps: int = 500
    pretrain_steps: int = 2000
    finetune_steps: int = 2000
    prior_holdout: float = 0.1
    emission_cap: int = 3
    K: int = 4
    n_neg: int = 8
    kappa_cpc: float = KAPPA_CPC
    kappa_gcpc: float = KAPPA_GCPC
    include_positive: bool = True
    redraw_per_step: bool = False
    analysis_frames: int = 4000

    def contrastive(self, guided: bool) -> ContrastiveConfig:
        return ContrastiveConfig(K=self.K, kappa=self.kappa_gcpc if guided else self.kappa_cpc,
                                 n_neg=self.n_neg, target_mode="guidance" if guided else "latent",
                                 include_positive=self.include_positive,
                                 redraw_per_step=self.redraw_per_step)


@dataclass
class Checkpoint:
    scheme: Scheme
    seed: int
    store: ParameterStore
    meta: dict = field(default_factory=dict)
    loss_curve: list = field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return len(self.store) == 0


@dataclass(frozen=True)
class InitSpec:
    """Which encoder prefix to copy: f_enc plus the first ``ar_layers`` LSTM
    layers (None copies all of f_ar); ``frozen`` holds copied weights fixed."""

    ar_layers: int | None = None
    frozen: bool = False


@dataclass
class RunMetrics:
    scheme: str
    finetune_loss: str
    seed: int
    wer: float = float("nan")
    werr: float = float("nan")
    counts: AlignmentCounts = field(default_factory=AlignmentCounts)
    subr: float | None = None
    insr: float | None = None
    delr: float | None = None
    pretrain_curve: list = field(default_factory=list)
    finetune_curve: list = field(default_factory=list)
    fisher: float | None = None
    skipped_contrastive: int = 0
    wall_time: float = 0.0
    error: str | None = None

    def row(self) -> dict:
        c = self.counts
        return {"scheme": self.scheme, "finetune_loss": self.finetune_loss, "seed": self.seed,
                "wer": self.wer, "werr": self.werr, "sub": c.sub, "ins": c.ins, "del": c.dele,
                "ref_len": c.ref_len, "subr": self.subr, "insr": self.insr, "delr": self.delr,
                "fisher": self.fisher, "skipped_contrastive": self.skipped_contrastive,
                "wall_time": self.wall_time, "error": self.error}


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    features: np.ndarray        # (B, Tm, d)
    lengths: np.ndarray         # (B,)
    frame_labels: np.ndarray    # (B, Tm), zero padded
    mask: np.ndarray            # (B, Tm) 1.0 on valid frames
    tokens: list                # list of int arrays
    index: np.ndarray           # utterance indices into the source list


def make_batch(utts: Sequence[Utterance], index, frame_stack: int = 1) -> Batch:
    chosen = [utts[i] for i in index]
    lengths = np.array([u.n_frames for u in chosen])
    Tm = int(lengths.max())
    d = chosen[0].frames.shape[1]
    X = np.zeros((len(chosen), Tm, d))
    Y = np.zeros((len(chosen), Tm), dtype=np.int64)
    M = np.zeros((len(chosen), Tm))
    for b, u in enumerate(chosen):
        X[b, :u.n_frames] = u.frames
        Y[b, :u.n_frames] = u.frame_labels
        M[b, :u.n_frames] = 1.0
    return Batch(nets.stack_frames(X, frame_stack), lengths, Y, M,
                 [u.tokens for u in chosen], np.asarray(index))


def _train_loop(store: ParameterStore, n_steps: int, lr: float, n_items: int, batch_size: int,
                rng: np.random.Generator, loss_fn: Callable[[np.ndarray], Tensor]) -> list[float]:
    state = AdamState(lr=lr)
    curve = []
    for _ in range(n_steps):
        idx = np.sort(rng.choice(n_items, size=min(batch_size, n_items), replace=False))
        store.zero_grad()
        loss = loss_fn(idx)
        grads = backward_pass(loss, store)
        adam_step(store, grads, state)
        curve.append(loss.item())
    return curve


# ---------------------------------------------------------------- prior classifier

def frame_accuracy(classifier: nets.PhoneClassifier, utts: Sequence[Utterance], batch_size: int = 64) -> float:
    correct = total = 0
    for s in range(0, len(utts), batch_size):
        b = make_batch(utts, range(s, min(s + batch_size, len(utts))), classifier.topo.frame_stack)
        pred = classifier.logits(Tensor(b.features)).data.argmax(axis=-1)
        correct += int(((pred == b.frame_labels) * b.mask).sum())
        total += int(b.mask.sum())
    return correct / total


def train_prior_classifier(corpus: Corpus, topo: nets.Topology, cfg: TrainConfig, seed: int,
                           steps: int | None = None) -> tuple[nets.PhoneClassifier, float]:
    """Frame-level phone classifier on the labeled split, returned frozen.

    The last ``prior_holdout`` fraction of labeled utterances is held out for
    the reported accuracy; the test split is never touched.
    """
    labeled = corpus.split("train")
    if not labeled:
        raise ContractError("no labeled utterances to train the phone classifier")
    n_hold = max(1, int(round(len(labeled) * cfg.prior_holdout))) if len(labeled) > 1 else 0
    fit, held = labeled[:len(labeled) - n_hold], labeled[len(labeled) - n_hold:] or labeled
    rng = np.random.default_rng([seed, 101])
    clf = nets.PhoneClassifier(topo, corpus.inventory.n_phones, rng)

    def loss_fn(idx):
        b = make_batch(fit, idx, topo.frame_stack)
        return frame_cross_entropy(clf.logits(Tensor(b.features)), b.frame_labels, b.mask)

    steps = cfg.prior_steps if steps is None else steps
    _train_loop(clf.store, steps, cfg.lr, len(fit), cfg.batch_size, rng, loss_fn)
    clf.freeze()
    return clf, frame_accuracy(clf, held)


# ---------------------------------------------------------------- pre-training

def _negatives_for(batch: Batch, cfg: ContrastiveConfig, rng) -> list[np.ndarray]:
    return [negative_table(int(T), cfg.K, cfg.n_neg, rng, per_step=cfg.redraw_per_step)
            for T in batch.lengths]


def pretrain_encoder(corpus: Corpus, scheme: Scheme, topo: nets.Topology, cfg: TrainConfig, seed: int,
                     classifier: nets.PhoneClassifier | None = None) -> Checkpoint:
    """Train f_enc + f_ar (and the scheme's auxiliary heads) on the unlabeled split.

    The checkpoint holds exactly the parameters the scheme trained.  Scratch
    returns an empty checkpoint.
    """
    scheme = Scheme(scheme)
    if scheme == Scheme.SCRATCH:
        return Checkpoint(scheme, seed, ParameterStore(), meta={"scheme": scheme.value, "seed": seed})
    if scheme.needs_classifier and (classifier is None or not classifier.frozen):
        raise DependencyError(f"{scheme.value} pre-training needs a trained, frozen phone classifier")
    utts = corpus.split("pretrain")
    if not utts:
        raise ContractError("no unlabeled utterances for pre-training")
    P = corpus.inventory.n_phones
    rng = np.random.default_rng([seed, 202])
    store = ParameterStore()
    nets.init_encoder(store, topo, rng)
    regular = scheme in (Scheme.CPC, Scheme.CPC_GCPC)
    guided = scheme in (Scheme.GCPC, Scheme.CPC_GCPC)
    cfg_c, cfg_g = cfg.contrastive(False), cfg.contrastive(True)
    if regular:
        nets.init_step_heads(store, "heads", cfg.K, topo.context_dim, topo.latent_dim, rng)
    if guided:
        nets.init_guidance(store, topo, P, rng)
        nets.init_step_heads(store, "gheads", cfg.K, topo.context_dim, nets.guidance_dim(topo, P), rng)
    if scheme == Scheme.PCE:
        nets.init_linear(store, "pce.out", topo.context_dim, P, rng)

    def loss_fn(idx):
        b = make_batch(utts, idx, topo.frame_stack)
        z, c = nets.run_encoder(Tensor(b.features), store, topo)
        if scheme == Scheme.PCE:
            pseudo = classifier.logits(Tensor(b.features)).data.argmax(axis=-1)
            logits = affine_forward(c, store["pce.out.W"], store["pce.out.b"])
            return frame_cross_entropy(logits, pseudo, b.mask)
        negs = _negatives_for(b, cfg_c, rng)
        terms = []
        if regular:
            terms.append(contrastive_loss_batch(z, c, b.lengths, store, cfg_c, negs, prefix="heads"))
        if guided:
            p = classifier.logits(Tensor(b.features))
            q = nets.run_guidance(p, store, topo.genc_depth)
            terms.append(contrastive_loss_batch(q, c, b.lengths, store, cfg_g, negs, prefix="gheads"))
        return terms[0] if len(terms) == 1 else joint_contrastive_loss(*terms)

    t0 = time.perf_counter()
    curve = _train_loop(store, cfg.pretrain_steps, cfg.lr, len(utts), cfg.batch_size, rng, loss_fn)
    log.info("pretrain %s seed=%d: %d steps in %.1fs, loss %.4f -> %.4f", scheme.value, seed,
             cfg.pretrain_steps, time.perf_counter() - t0, curve[0] if curve else float("nan"),
             curve[-1] if curve else float("nan"))
    return Checkpoint(scheme, seed, store, meta={"scheme": scheme.value, "seed": seed}, loss_curve=curve)


def encoder_prefix_names(topo: nets.Topology, ar_layers: int | None = None) -> list[str]:
    n = topo.ar_layers if ar_layers is None else ar_layers
    if not 0 <= n <= topo.ar_layers:
        raise ContractError(f"prefix depth {n} exceeds encoder depth {topo.ar_layers}")
    names = []
    for i in range(topo.enc_layers):
        names += [f"enc.dense{i}.W", f"enc.dense{i}.b"]
    for i in range(n):
        names += [f"ar.lstm{i}.Wx", f"ar.lstm{i}.Wh", f"ar.lstm{i}.b"]
    return names


def initialize_downstream(checkpoint: Checkpoint | None, init: InitSpec, topo: nets.Topology,
                          vocab: int, seed: int) -> nets.TransducerModel:
    """Fresh transducer with the checkpoint's encoder prefix copied in bit-exactly."""
    model = nets.TransducerModel(topo, vocab, np.random.default_rng([seed, 303]))
    if checkpoint is None or checkpoint.is_empty:
        return model
    names = encoder_prefix_names(topo, init.ar_layers)
    for name in names:
        if name not in checkpoint.store:
            raise ContractError(f"checkpoint lacks {name}")
        src = checkpoint.store[name].data
        if src.shape != model.store[name].shape:
            raise ContractError(f"{name}: checkpoint shape {src.shape} != model {model.store[name].shape}")
        model.store.set_value(name, src.copy())
    if init.frozen:
        for name in names:
            model.store.set_trainable(name, False)
        model.frozen = names
    return model


# ---------------------------------------------------------------- fine-tuning

def transducer_losses(model: nets.TransducerModel, b: Batch, cfg: TrainConfig,
                      with_contrastive: bool, rng) -> tuple[Tensor, Tensor | None, int]:
    """(L_RNNT, L_C or None, number of utterances too short for L_C)."""
    z, c = model.encode(Tensor(b.features))
    Um = max(len(t) for t in b.tokens)
    prev = np.full((len(b.tokens), Um + 1), model.blank, dtype=np.int64)
    for i, t in enumerate(b.tokens):
        prev[i, 1:len(t) + 1] = t
    lp = model.log_probs(c, prev)
    l_rnnt = rnnt_loss_batch(lp, b.tokens, b.lengths)
    if not with_contrastive:
        return l_rnnt, None, 0
    cc = cfg.contrastive(False)
    keep = np.flatnonzero(b.lengths > cc.K)
    skipped = len(b.lengths) - len(keep)
    if len(keep) == 0:
        return l_rnnt, None, skipped
    zk, ck = z[keep], c[keep]
    lens = b.lengths[keep]
    negs = [negative_table(int(T), cc.K, cc.n_neg, rng, per_step=cc.redraw_per_step) for T in lens]
    l_c = contrastive_loss_batch(zk, ck, lens, model.store, cc, negs, prefix="heads")
    return l_rnnt, l_c, skipped


def finetune_transducer(model: nets.TransducerModel, corpus: Corpus, loss: FinetuneLoss, cfg: TrainConfig,
                        seed: int, steps: int | None = None) -> tuple[nets.TransducerModel, dict]:
    """Minimise L_RNNT (optionally + L_C) on the labeled split with Adam."""
    loss = FinetuneLoss(loss)
    utts = corpus.split("train")
    if not utts:
        raise ContractError("no labeled utterances for fine-tuning")
    rng = np.random.default_rng([seed, 404])
    joint = loss == FinetuneLoss.RNNT_PLUS_C
    if joint and "heads.k1.W" not in model.store:
        nets.init_step_heads(model.store, "heads", cfg.K, model.topo.context_dim, model.topo.latent_dim, rng)
    rnnt_curve: list[float] = []
    skipped = [0]

    def loss_fn(idx):
        b = make_batch(utts, idx, model.topo.frame_stack)
        l_rnnt, l_c, n_skip = transducer_losses(model, b, cfg, joint, rng)
        skipped[0] += n_skip
        rnnt_curve.append(l_rnnt.item())
        return l_rnnt if l_c is None else l_rnnt + l_c

    steps = cfg.finetune_steps if steps is None else steps
    t0 = time.perf_counter()
    curve = _train_loop(model.store, steps, cfg.lr, len(utts), cfg.batch_size, rng, loss_fn)
    log.info("finetune %s seed=%d: %d steps in %.1fs, rnnt %.3f -> %.3f", loss.value, seed, steps,
             time.perf_counter() - t0, rnnt_curve[0] if rnnt_curve else float("nan"),
             rnnt_curve[-1] if rnnt_curve else float("nan"))
    return model, {"loss_curve": curve, "rnnt_curve": rnnt_curve, "skipped_contrastive": skipped[0]}


def evaluate_transducer(model: nets.TransducerModel, utts: Sequence[Utterance], cap: int = 3) -> AlignmentCounts:
    total = AlignmentCounts()
    for u in utts:
        feats = nets.stack_frames(u.frames, model.topo.frame_stack)
        total = total + align_and_count_errors(u.tokens, greedy_decode(model, feats, cap))
    return total


def context_embeddings(store: ParameterStore, topo: nets.Topology, utts: Sequence[Utterance],
                       max_frames: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Frame-level f_ar outputs with their phone labels, in corpus order."""
    feats, labels, n = [], [], 0
    for s in range(0, len(utts), 64):
        b = make_batch(utts, range(s, min(s + 64, len(utts))), topo.frame_stack)
        _, c = nets.run_encoder(Tensor(b.features), store, topo)
        valid = b.mask.astype(bool)
        feats.append(c.data[valid])
        labels.append(b.frame_labels[valid])
        n += int(valid.sum())
        if max_frames is not None and n >= max_frames:
            break
    E, y = np.concatenate(feats), np.concatenate(labels)
    if max_frames is not None:
        E, y = E[:max_frames], y[:max_frames]
    return E, y


# ---------------------------------------------------------------- comparison grid

DEFAULT_CELLS: tuple[tuple[Scheme, FinetuneLoss], ...] = (
    (Scheme.SCRATCH, FinetuneLoss.RNNT),
    (Scheme.PCE, FinetuneLoss.RNNT),
    (Scheme.CPC, FinetuneLoss.RNNT),
    (Scheme.GCPC, FinetuneLoss.RNNT),
    (Scheme.CPC_GCPC, FinetuneLoss.RNNT),
    (Scheme.SCRATCH, FinetuneLoss.RNNT_PLUS_C),
    (Scheme.CPC, FinetuneLoss.RNNT_PLUS_C),
)


def run_comparison(corpus: Corpus, topo: nets.Topology, cfg: TrainConfig, seeds: Sequence[int],
                   cells: Sequence[tuple[Scheme, FinetuneLoss]] = DEFAULT_CELLS,
                   init: InitSpec = InitSpec(), on_row: Callable[[RunMetrics], None] | None = None,
                   on_checkpoint: Callable[[Checkpoint], None] | None = None) -> list[RunMetrics]:
    """pretrain -> initialise -> fine-tune -> evaluate for every (cell, seed).

    WERR is taken against the (Scratch, RNNT) cell of the same seed.  A failing
    cell is recorded with its error and the grid carries on.
    """
    if not seeds:
        raise ContractError("need at least one seed")
    cells = [(Scheme(s), FinetuneLoss(l)) for s, l in cells]
    baseline_cell = (Scheme.SCRATCH, FinetuneLoss.RNNT)
    if baseline_cell in cells:
        cells.remove(baseline_cell)
    cells.insert(0, baseline_cell)
    vocab = corpus.inventory.n_phones
    test = corpus.split("test")
    rows: list[RunMetrics] = []
    for seed in seeds:
        classifier = None
        checkpoints: dict[Scheme, Checkpoint] = {}
        baseline: AlignmentCounts | None = None
        for scheme, ft_loss in cells:
            m = RunMetrics(scheme.value, ft_loss.value, seed)
            t0 = time.perf_counter()
            try:
                if scheme.needs_classifier and classifier is None:
                    classifier, acc = train_prior_classifier(corpus, topo, cfg, seed)
                    log.info("seed=%d prior classifier frame accuracy %.4f", seed, acc)
                if scheme not in checkpoints:
                    checkpoints[scheme] = pretrain_encoder(corpus, scheme, topo, cfg, seed, classifier)
                    if on_checkpoint is not None:
                        on_checkpoint(checkpoints[scheme])
                ckpt = checkpoints[scheme]
                m.pretrain_curve = ckpt.loss_curve
                if not ckpt.is_empty:
                    E, y = context_embeddings(ckpt.store, topo, test, cfg.analysis_frames)
                    m.fisher = fisher_ratio(E, y)
                model = initialize_downstream(ckpt, init, topo, vocab, seed)
                model, info = finetune_transducer(model, corpus, ft_loss, cfg, seed)
                m.finetune_curve = info["rnnt_curve"]
                m.skipped_contrastive = info["skipped_contrastive"]
                m.counts = evaluate_transducer(model, test, cfg.emission_cap)
                if (scheme, ft_loss) == baseline_cell:
                    baseline = m.counts
                rep = compute_wer_werr(m.counts, baseline)
                m.wer = rep.wer
                if baseline is not None:
                    m.werr, m.subr, m.insr, m.delr = rep.werr, rep.subr, rep.insr, rep.delr
            except Exception as exc:  # grid cells fail independently
                log.exception("cell %s/%s seed=%d failed", scheme.value, ft_loss.value, seed)
                m.error = f"{type(exc).__name__}: {exc}"
            m.wall_time = time.perf_counter() - t0
            rows.append(m)
            if on_row is not None:
                on_row(m)
    return rows


def aggregate(rows: Sequence[RunMetrics]) -> list[dict]:
    """Mean and sample std of WER/WERR/fisher per (scheme, finetune_loss)."""
    groups: dict[tuple[str, str], list[RunMetrics]] = {}
    for r in rows:
        if r.error is None:
            groups.setdefault((r.scheme, r.finetune_loss), []).append(r)
    out = []
    for (scheme, ft), rs in groups.items():
        rec = {"scheme": scheme, "finetune_loss": ft, "n_seeds": len(rs)}
        for key in ("wer", "werr", "fisher"):
            vals = np.array([getattr(r, key) for r in rs if getattr(r, key) is not None], dtype=float)
            rec[f"{key}_mean"] = float(vals.mean()) if vals.size else None
            rec[f"{key}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0 if vals.size else None
        out.append(rec)
    return out
