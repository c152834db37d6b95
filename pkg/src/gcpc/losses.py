"""Training objectives.

Contrastive losses score a target frame ``t+k`` against negatives drawn from
the same utterance using the step head ``h_k(c_t)``.  The target matrix is the
latent sequence z for plain CPC and the guidance sequence q for the guided
variant; nothing else differs.  The transducer loss is a fused graph node:
forward variables are computed row by row with ``logaddexp.accumulate`` and
the gradient comes from the matching backward variables.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import (
    ContractError,
    DimensionError,
    ParameterStore,
    Tensor,
    _node,
    affine_forward,
    as_tensor,
    concat,
    log_softmax,
    logsumexp,
    mul,
    sum_,
    take,
)

KAPPA_CPC = 0.1
KAPPA_GCPC = 0.01


@dataclass(frozen=True)
class ContrastiveConfig:
    K: int = 4
    kappa: float = KAPPA_CPC
    n_neg: int = 8
    target_mode: str = "latent"   # "latent" (CPC) or "guidance" (GCPC)
    include_positive: bool = True
    redraw_per_step: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if not self.kappa > 0:
            raise ContractError("kappa must be > 0")
        if self.n_neg < 1:
            raise ContractError("n_neg must be >= 1")
        if self.target_mode not in ("latent", "guidance"):
            raise ContractError(f"unknown target_mode {self.target_mode!r}")


# ---------------------------------------------------------------- negatives

def _draw_rows(excluded: np.ndarray, n_neg: int, rng: np.random.Generator) -> np.ndarray:
    """One draw of n_neg columns per row from the non-excluded columns.

    Rows with at least n_neg allowed columns sample without replacement (random
    keys, take the smallest); smaller pools fall back to uniform draws with
    replacement.
    """
    keys = rng.random(excluded.shape)
    keys[excluded] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    out = order[:, :n_neg].copy() if order.shape[1] >= n_neg else np.zeros((len(order), n_neg), dtype=np.int64)
    sizes = (~excluded).sum(axis=1)
    for r in np.flatnonzero(sizes < n_neg):
        out[r] = order[r, rng.integers(0, sizes[r], size=n_neg)]
    return np.sort(out, axis=1)


def sample_negatives(T: int, t: int, k: int, n_neg: int, rng) -> np.ndarray:
    """n_neg frame indices in [0, T) excluding the positive t+k.

    Without replacement when enough frames exist, otherwise with replacement.
    """
    if T < 2:
        raise ContractError("need at least 2 frames to sample negatives")
    if not 0 <= t + k < T:
        raise ContractError(f"positive index {t + k} outside [0, {T})")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    excluded = np.zeros((1, T), dtype=bool)
    excluded[0, t + k] = True
    return _draw_rows(excluded, n_neg, rng)[0]


def negative_table(T: int, K: int, n_neg: int, rng, per_step: bool = False) -> np.ndarray:
    """Negatives for every anchor of one utterance, shape (K, T, n_neg).

    Shared mode draws once per anchor t, excluding every in-range positive
    t+1..t+K, and reuses the draw for all steps.  Rows for anchors without a
    valid step stay zero and are never read.
    """
    out = np.zeros((K, T, n_neg), dtype=np.int64)
    if T < 2:
        return out
    cols = np.arange(T)[None, :]
    if per_step:
        for k in range(1, min(K, T - 1) + 1):
            anchors = np.arange(T - k)[:, None]
            out[k - 1, :T - k] = _draw_rows(cols == anchors + k, n_neg, rng)
    else:
        anchors = np.arange(T - 1)[:, None]
        excluded = (cols > anchors) & (cols <= anchors + K)
        out[:, :T - 1] = _draw_rows(excluded, n_neg, rng)[None]
    return out


# ---------------------------------------------------------------- InfoNCE

def _step_scores(targets: Tensor, pred: Tensor, k: int, negatives: np.ndarray,
                 kappa: float) -> Tensor:
    """Candidate logits (B, A, 1 + n_neg) with the positive in column 0.

    targets (B, T, d); pred = h_k(c) for anchors 0..A-1, shape (B, A, d);
    negatives (B, A, n_neg) frame indices.
    """
    B, A, _ = pred.shape
    pos = take(targets, (slice(None), slice(k, k + A)))
    pos_s = sum_(mul(pos, pred), axis=-1).reshape(B, A, 1)
    bidx = np.arange(B)[:, None, None]
    neg = take(targets, (bidx, negatives))                       # (B, A, N, d)
    neg_s = sum_(mul(neg, pred.reshape(B, A, 1, pred.shape[-1])), axis=-1)
    return mul(concat([pos_s, neg_s], axis=-1), 1.0 / kappa)


def _anchor_losses(scores: Tensor, include_positive: bool) -> Tensor:
    if include_positive:
        return take(log_softmax(scores, axis=-1), (..., 0)) * -1.0
    pos = take(scores, (..., 0))
    neg = take(scores, (..., slice(1, None)))
    return logsumexp(neg, axis=-1) - pos


def infonce_step_loss(targets, contexts, heads: ParameterStore, k: int, kappa: float,
                      negatives: np.ndarray, K: int | None = None, prefix: str = "heads",
                      include_positive: bool = True) -> Tensor:
    """L_k for one utterance.

    targets (T, d_target), contexts (T, d_c); negatives (T-k, n_neg) holds the
    negative frame indices for anchors t = 0..T-k-1.
    """
    targets, contexts = as_tensor(targets), as_tensor(contexts)
    T = targets.shape[0]
    if contexts.shape[0] != T:
        raise DimensionError("targets and contexts differ in length")
    if T <= k:
        raise ContractError(f"T={T} leaves no anchors for step {k}")
    if K is not None and not 1 <= k <= K:
        raise ContractError(f"step {k} outside 1..{K}")
    negatives = np.asarray(negatives)
    if negatives.shape[0] != T - k:
        raise DimensionError("need one negative row per anchor")
    A = T - k
    c = take(contexts, slice(0, A))
    pred = affine_forward(c, heads[f"{prefix}.k{k}.W"], heads[f"{prefix}.k{k}.b"])
    scores = _step_scores(targets.reshape(1, T, -1), pred.reshape(1, A, -1), k,
                          negatives.reshape(1, A, -1), kappa)
    return _anchor_losses(scores, include_positive).mean()


def contrastive_loss_batch(targets, contexts, lengths: Sequence[int], heads: ParameterStore,
                           config: ContrastiveConfig, negatives: Sequence[np.ndarray],
                           prefix: str = "heads") -> Tensor:
    """Averaged-over-steps InfoNCE for a right-padded batch.

    negatives[b] is the (K, T_b, n_neg) table from :func:`negative_table`.
    Step k averages L_k over the utterances long enough to have anchors for it;
    steps no utterance supports are dropped from the average.
    """
    targets, contexts = as_tensor(targets), as_tensor(contexts)
    B, Tm, _ = targets.shape
    lengths = np.asarray(lengths)
    terms = []
    for k in range(1, config.K + 1):
        A = Tm - k
        support = lengths > k
        if A <= 0 or not support.any():
            continue
        c = take(contexts, (slice(None), slice(0, A)))
        pred = affine_forward(c, heads[f"{prefix}.k{k}.W"], heads[f"{prefix}.k{k}.b"])
        neg = np.zeros((B, A, config.n_neg), dtype=np.int64)
        weight = np.zeros((B, A))
        n_sup = int(support.sum())
        for b in range(B):
            nb = lengths[b] - k
            if nb <= 0:
                continue
            neg[b, :nb] = negatives[b][k - 1, :nb]
            weight[b, :nb] = 1.0 / (nb * n_sup)
        scores = _step_scores(targets, pred, k, neg, config.kappa)
        terms.append(sum_(mul(_anchor_losses(scores, config.include_positive), weight)))
    if not terms:
        raise ContractError(f"no utterance longer than any step (K={config.K})")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def contrastive_loss(targets, contexts, heads: ParameterStore, config: ContrastiveConfig,
                     rng=None, negatives: np.ndarray | None = None, prefix: str = "heads") -> Tensor:
    """L_C = mean over k = 1..K of L_k for one utterance (needs T > K)."""
    targets = as_tensor(targets)
    T = targets.shape[0]
    if T <= config.K:
        raise ContractError(f"T={T} too short for K={config.K}")
    if negatives is None:
        negatives = negative_table(T, config.K, config.n_neg, np.random.default_rng(rng),
                                   per_step=config.redraw_per_step)
    return contrastive_loss_batch(targets.reshape(1, T, -1), as_tensor(contexts).reshape(1, T, -1),
                                  [T], heads, config, [negatives], prefix=prefix)


def joint_contrastive_loss(regular: Tensor, guided: Tensor) -> Tensor:
    """L_C^joint = L_C + L_C^guided."""
    return regular + guided


# ---------------------------------------------------------------- frame CE

def frame_cross_entropy(logits, labels, mask: np.ndarray | None = None) -> Tensor:
    """Mean over (unmasked) frames of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    P = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= P):
        raise ContractError(f"label outside [0, {P})")
    lp = log_softmax(logits, axis=-1)
    picked = take(lp, tuple(np.indices(labels.shape)) + (labels,))
    if mask is None:
        return picked.mean() * -1.0
    mask = np.asarray(mask, dtype=np.float64)
    return sum_(mul(picked, mask / mask.sum())) * -1.0


# ---------------------------------------------------------------- transducer

def _check_normalised(lp: np.ndarray, T: int, U: int, tol: float = 1e-8) -> None:
    m = lp[:T, :U + 1].max(axis=-1, keepdims=True)
    z = np.squeeze(m, -1) + np.log(np.exp(lp[:T, :U + 1] - m).sum(axis=-1))
    if np.abs(z).max() > tol:
        raise ContractError("transducer inputs must be normalised log-distributions")


def _rnnt_single(lp: np.ndarray, labels: np.ndarray, T: int, blank: int):
    """Forward/backward variables on the (T, U+1) lattice; returns (logP, dlogP/dlp)."""
    U = len(labels)
    blank_lp = lp[:T, :U + 1, blank]                                # (T, U+1)
    emit_lp = lp[np.arange(T)[:, None], np.arange(U)[None, :], labels[None, :]] if U else np.zeros((T, 0))
    alpha = np.full((T, U + 1), -np.inf)
    cum_b = np.zeros((T, U + 1))
    cum_b[1:] = np.cumsum(blank_lp[:-1], axis=0)
    for u in range(U + 1):
        if u == 0:
            entry = np.full(T, -np.inf)
            entry[0] = 0.0
        else:
            entry = alpha[:, u - 1] + emit_lp[:, u - 1]
        alpha[:, u] = np.logaddexp.accumulate(entry - cum_b[:, u]) + cum_b[:, u]
    log_p = alpha[T - 1, U] + blank_lp[T - 1, U]

    beta = np.full((T, U + 1), -np.inf)
    suf_b = np.cumsum(blank_lp[::-1], axis=0)[::-1]                 # sum_{r>=t} blank(r, u)
    for u in range(U, -1, -1):
        if u == U:
            exit_ = np.full(T, -np.inf)
            exit_[T - 1] = blank_lp[T - 1, U]
        else:
            exit_ = beta[:, u + 1] + emit_lp[:, u]
        # beta_t = sum_{s>=t} exit_s * prod_{r=t}^{s-1} blank_r
        shifted = exit_ - suf_b[:, u]
        beta[:, u] = np.logaddexp.accumulate(shifted[::-1])[::-1] + suf_b[:, u]

    grad = np.zeros_like(lp)
    nxt = np.full((T, U + 1), -np.inf)
    nxt[:-1] = beta[1:]
    nxt[T - 1, U] = 0.0
    grad[:T, :U + 1, blank] = np.exp(alpha + blank_lp + nxt - log_p)
    if U:
        occ = np.exp(alpha[:, :U] + emit_lp + beta[:, 1:] - log_p)
        np.add.at(grad, (np.arange(T)[:, None], np.arange(U)[None, :], labels[None, :]), occ)
    return log_p, grad


def rnnt_loss_batch(logprobs, labels: Sequence[Sequence[int]], frame_lengths: Sequence[int],
                    blank: int | None = None, reduction: str = "mean") -> Tensor:
    """-log P(y | x) per utterance over a padded (B, T, U+1, V+1) tensor.

    Slices beyond each utterance's (T_b, U_b+1) are ignored.
    """
    logprobs = as_tensor(logprobs)
    B, Tm, U1, V1 = logprobs.shape
    blank = V1 - 1 if blank is None else blank
    lp = logprobs.data
    losses = np.empty(B)
    grads = np.zeros_like(lp)
    for b in range(B):
        y = np.asarray(labels[b], dtype=np.int64)
        T, U = int(frame_lengths[b]), len(y)
        if T < 1 or T > Tm or U + 1 > U1:
            raise DimensionError(f"utterance {b}: T={T}, U={U} do not fit {logprobs.shape}")
        if U and (y.min() < 0 or y.max() >= V1 or (y == blank).any()):
            raise ContractError("label outside vocabulary or equal to blank")
        _check_normalised(lp[b], T, U)
        log_p, g = _rnnt_single(lp[b], y, T, blank)
        losses[b] = -log_p
        grads[b] = -g
    scale = 1.0 / B if reduction == "mean" else 1.0
    value = losses.sum() * scale
    return _node(np.array(value), (logprobs,), lambda g: (grads * (g * scale),), "rnnt_loss")


def rnnt_loss(token_logprobs, labels: Sequence[int], blank: int | None = None) -> Tensor:
    """Transducer loss for one utterance; token_logprobs is (T, U+1, V+1)."""
    lp = as_tensor(token_logprobs)
    if lp.ndim != 3:
        raise DimensionError("expected (T, U+1, V+1) log-probabilities")
    T = lp.shape[0]
    return rnnt_loss_batch(lp.reshape(1, *lp.shape), [list(labels)], [T], blank=blank)


def rnnt_brute_force(token_logprobs, labels: Sequence[int], blank: int | None = None) -> float:
    """Enumerate every blank-augmented alignment and sum path probabilities.

    Each alignment interleaves T-1 blanks with the U labels and ends in a
    final blank at (T-1, U).
    """
    lp = np.asarray(token_logprobs.data if isinstance(token_logprobs, Tensor) else token_logprobs)
    T, U1, V1 = lp.shape
    U = len(labels)
    blank = V1 - 1 if blank is None else blank
    if T > 6 or U > 4:
        raise ContractError("brute force limited to T <= 6, U <= 4")
    if U1 != U + 1:
        raise DimensionError("lattice width must be U+1")
    path_scores = []
    n = T - 1 + U
    for label_pos in itertools.combinations(range(n), U):
        label_pos = set(label_pos)
        t = u = 0
        s = 0.0
        for i in range(n):
            if i in label_pos:
                s += lp[t, u, labels[u]]
                u += 1
            else:
                s += lp[t, u, blank]
                t += 1
        s += lp[T - 1, U, blank]
        path_scores.append(s)
    m = max(path_scores)
    return -(m + math.log(math.fsum(math.exp(s - m) for s in path_scores)))
