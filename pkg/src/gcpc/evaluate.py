"""Greedy transducer decoding, error counting and embedding analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import TransducerModel


class UndefinedRatioError(ZeroDivisionError):
    pass


def greedy_decode(model: TransducerModel, features: np.ndarray, max_symbols_per_frame: int = 3) -> list[int]:
    """Frame-synchronous greedy search.

    At each frame keep emitting the argmax token until blank wins or the
    per-frame cap is reached; blank moves on to the next frame.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("greedy_decode needs a non-empty (T, d) feature matrix")
    enc = model.encoder_states(features)
    h, c = model.pred_start()
    g = h
    hyp: list[int] = []
    for t in range(enc.shape[0]):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(model.joint_logits(enc[t], g)))
            if k == model.blank:
                break
            hyp.append(k)
            h, c = model.pred_step(k, h, c)
            g = h
    return hyp


# ---------------------------------------------------------------- error counting

@dataclass(frozen=True)
class AlignmentCounts:
    sub: int = 0
    ins: int = 0
    dele: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.ins + self.dele

    def __add__(self, other: "AlignmentCounts") -> "AlignmentCounts":
        return AlignmentCounts(self.sub + other.sub, self.ins + other.ins,
                               self.dele + other.dele, self.ref_len + other.ref_len)


def align_and_count_errors(ref, hyp) -> AlignmentCounts:
    """Unit-cost Levenshtein alignment with S/I/D decomposition.

    Among minimal alignments the backtrace prefers substitution (or match),
    then insertion, then deletion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i, j - 1] + 1,
                          d[i - 1, j] + 1)
    i, j = n, m
    s = ins = dele = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dele += 1
            i -= 1
    return AlignmentCounts(int(s), ins, dele, n)


@dataclass(frozen=True)
class WERReport:
    wer: float
    counts: AlignmentCounts
    werr: float | None = None
    subr: float | None = None
    insr: float | None = None
    delr: float | None = None

    def as_dict(self) -> dict:
        c = self.counts
        return {"wer": self.wer, "werr": self.werr, "sub": c.sub, "ins": c.ins, "del": c.dele,
                "ref_len": c.ref_len, "subr": self.subr, "insr": self.insr, "delr": self.delr}


def word_error_rate(counts: AlignmentCounts) -> float:
    if counts.ref_len == 0:
        raise UndefinedRatioError("WER undefined for an empty reference")
    return counts.errors / counts.ref_len


def _relative_reduction(base: float, system: float, what: str) -> float:
    if base == 0:
        raise UndefinedRatioError(f"baseline {what} is zero")
    return 100.0 * (base - system) / base


def compute_wer_werr(system: AlignmentCounts, baseline: AlignmentCounts | None = None) -> WERReport:
    """WER of ``system``; with a baseline also WERR% and per-type reductions.

    Per-type reductions are left as None when the baseline has no errors of
    that type.
    """
    wer = word_error_rate(system)
    if baseline is None:
        return WERReport(wer=wer, counts=system)
    if baseline.ref_len != system.ref_len:
        raise ValueError("system and baseline were scored on different references")
    werr = _relative_reduction(word_error_rate(baseline), wer, "WER")

    def per_type(b: int, s: int):
        return None if b == 0 else 100.0 * (b - s) / b

    return WERReport(wer=wer, counts=system, werr=werr,
                     subr=per_type(baseline.sub, system.sub),
                     insr=per_type(baseline.ins, system.ins),
                     delr=per_type(baseline.dele, system.dele))


# ---------------------------------------------------------------- embeddings

def pca_project(E: np.ndarray, out_dim: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project centred rows of E onto the leading covariance eigenvectors.

    Returns (projection N x out_dim, components d x out_dim, explained
    variance ratios).  Each component is signed so its largest-magnitude
    coordinate is positive.
    """
    E = np.asarray(E, dtype=np.float64)
    N, d = E.shape
    if N <= out_dim:
        raise ValueError(f"need more than {out_dim} rows")
    X = E - E.mean(axis=0)
    cov = X.T @ X / N
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:out_dim]
    comps = evecs[:, order]
    if comps.shape[1] < out_dim:
        comps = np.pad(comps, ((0, 0), (0, out_dim - comps.shape[1])))
    for j in range(comps.shape[1]):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    total = evals.clip(min=0).sum()
    ratio = evals[order].clip(min=0) / total if total > 0 else np.zeros(len(order))
    return X @ comps, comps, ratio


def scatter_matrices(E: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Prior-weighted within- and between-class scatter (population normalisation)."""
    E = np.asarray(E, dtype=np.float64)
    labels = np.asarray(labels)
    N, d = E.shape
    mu = E.mean(axis=0)
    Sw = np.zeros((d, d))
    Sb = np.zeros((d, d))
    for c in np.unique(labels):
        Xc = E[labels == c]
        if len(Xc) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        mc = Xc.mean(axis=0)
        D = Xc - mc
        Sw += D.T @ D / N
        diff = (mc - mu)[:, None]
        Sb += (len(Xc) / N) * (diff @ diff.T)
    return Sw, Sb


def fisher_ratio(E: np.ndarray, labels) -> float:
    """trace(pinv(S_W) S_B); larger means better separated classes."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("fisher_ratio needs at least two classes")
    Sw, Sb = scatter_matrices(E, labels)
    return float(np.trace(np.linalg.pinv(Sw, hermitian=True) @ Sb))
