import itertools
import numpy as np
import pytest
from hypothesis import given, strategies as st

from gcpc import evaluate as ev
from gcpc.nets import Topology, TransducerModel
from gcpc.numcore import ParameterStore

TOPO = Topology(input_dim=3, enc_layers=1, enc_width=4, ar_width=4, pred_width=3)


def _forced_model(bias):
    """Model whose joint output is dominated by a fixed bias vector."""
    m = TransducerModel(TOPO, 3, np.random.default_rng(0))
    m.store.set_value("joint.W_enc", np.zeros_like(m.store["joint.W_enc"].data))
    m.store.set_value("joint.W_pred", np.zeros_like(m.store["joint.W_pred"].data))
    m.store.set_value("joint.b", np.asarray(bias, dtype=float))
    return m


# ---------------------------------------------------------------- decoding

def test_blank_model_decodes_empty():
    assert ev.greedy_decode(_forced_model([0, 0, 0, 5.0]), np.ones((6, 3))) == []


def test_forced_single_token():
    m = _forced_model([0, 0, 0, 1.0])
    # token 2 wins only before anything was emitted: make it depend on the
    # prediction state through W_pred acting on the start state vs later states
    m.store.set_value("pred.embed", np.zeros_like(m.store["pred.embed"].data))
    m.store.set_value("pred.lstm0.b", np.zeros_like(m.store["pred.lstm0.b"].data))
    m.store.set_value("pred.lstm0.Wx", np.zeros_like(m.store["pred.lstm0.Wx"].data))
    m.store.set_value("pred.lstm0.Wh", np.zeros_like(m.store["pred.lstm0.Wh"].data))
    emb = np.zeros_like(m.store["pred.embed"].data)
    emb[2] = 5.0                     # after emitting 2 the cell input is large
    m.store.set_value("pred.embed", emb)
    Wx = np.zeros_like(m.store["pred.lstm0.Wx"].data)
    H = TOPO.pred_width
    Wx[:H] = 1.0                     # input gate opens
    Wx[2 * H:3 * H] = 1.0            # candidate positive
    Wx[3 * H:] = 1.0                 # output gate opens
    m.store.set_value("pred.lstm0.Wx", Wx)
    Wp = np.zeros_like(m.store["joint.W_pred"].data)
    Wp[3] = 2.0                      # blank gains once the state is non-zero
    m.store.set_value("joint.W_pred", Wp)
    m.store.set_value("joint.b", np.array([0, 0, 2.0, 1.0]))
    assert ev.greedy_decode(m, np.ones((4, 3))) == [2]


@pytest.mark.parametrize("cap", [1, 2, 3])
def test_emission_cap_bounds_hypothesis(cap):
    m = _forced_model([0, 9.0, 0, 0])
    hyp = ev.greedy_decode(m, np.ones((5, 3)), max_symbols_per_frame=cap)
    assert len(hyp) == cap * 5


def test_decode_rejects_empty():
    with pytest.raises(ValueError):
        ev.greedy_decode(_forced_model([0, 0, 0, 1.0]), np.zeros((0, 3)))


# ---------------------------------------------------------------- alignment

def test_alignment_examples():
    assert ev.align_and_count_errors("abc", "abc") == ev.AlignmentCounts(0, 0, 0, 3)
    assert ev.align_and_count_errors("abc", "ac") == ev.AlignmentCounts(0, 0, 1, 3)
    assert ev.align_and_count_errors("ab", "axb") == ev.AlignmentCounts(0, 1, 0, 2)
    assert ev.align_and_count_errors("", "ab") == ev.AlignmentCounts(0, 2, 0, 0)
    assert ev.align_and_count_errors("ab", "") == ev.AlignmentCounts(0, 0, 2, 2)
    # tie: substitution preferred over an insertion/deletion pair
    assert ev.align_and_count_errors("a", "b") == ev.AlignmentCounts(1, 0, 0, 1)


def exhaustive_distances(n, m, refs, hyps):
    """Minimum over every monotone matching of ref and hyp positions.

    A matching pairs k ref positions with k hyp positions in order; its cost
    is the number of unequal pairs plus the unmatched positions on each side.
    """
    best = np.full((len(refs), len(hyps)), n + m)
    for k in range(min(n, m) + 1):
        for I in itertools.combinations(range(n), k):
            for J in itertools.combinations(range(m), k):
                if k:
                    mism = (refs[:, I][:, None, :] != hyps[:, J][None, :, :]).sum(-1)
                else:
                    mism = np.zeros_like(best)
                np.minimum(best, mism + (n - k) + (m - k), out=best)
    return best


def all_sequences(n, alphabet=3):
    seqs = list(itertools.product(range(alphabet), repeat=n))
    return np.array(seqs, dtype=int).reshape(len(seqs), n)


def check_all_pairs(max_len=5, alphabet=3):
    """Returns the number of mismatching pairs (0 means the DP is exact)."""
    bad = 0
    for n in range(max_len + 1):
        refs = all_sequences(n, alphabet)
        for m in range(max_len + 1):
            hyps = all_sequences(m, alphabet)
            oracle = exhaustive_distances(n, m, refs, hyps)
            for a, r in enumerate(refs):
                for b, h in enumerate(hyps):
                    c = ev.align_and_count_errors(r.tolist(), h.tolist())
                    ok = (c.errors == oracle[a, b] and c.sub + c.dele <= n
                          and m == n - c.dele + c.ins)
                    bad += not ok
    return bad


def test_exhaustive_oracle_small():
    assert check_all_pairs(max_len=3) == 0


@given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
def test_alignment_swap_symmetry(ref, hyp):
    a = ev.align_and_count_errors(ref, hyp)
    b = ev.align_and_count_errors(hyp, ref)
    assert a.errors == b.errors
    assert a.sub + a.dele <= len(ref)
    assert len(hyp) == len(ref) - a.dele + a.ins


# ---------------------------------------------------------------- WER / WERR

def test_wer_examples():
    assert ev.word_error_rate(ev.AlignmentCounts(1, 0, 1, 10)) == pytest.approx(0.2)
    base, sys_ = ev.AlignmentCounts(20, 0, 0, 100), ev.AlignmentCounts(18, 0, 0, 100)
    assert ev.compute_wer_werr(sys_, base).werr == pytest.approx(10.0)
    same = ev.compute_wer_werr(base, base)
    assert same.werr == 0.0 and same.subr == 0.0
    assert same.insr is None and same.delr is None


def test_wer_errors():
    with pytest.raises(ev.UndefinedRatioError):
        ev.word_error_rate(ev.AlignmentCounts(0, 1, 0, 0))
    with pytest.raises(ev.UndefinedRatioError):
        ev.compute_wer_werr(ev.AlignmentCounts(1, 0, 0, 5), ev.AlignmentCounts(0, 0, 0, 5))


@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(1, 40))
def test_wer_identity(s, i, d, extra):
    n = s + d + extra
    c = ev.AlignmentCounts(s, i, d, n)
    assert ev.word_error_rate(c) * n == pytest.approx(s + i + d)
    if s + i + d:
        assert ev.compute_wer_werr(c, c).werr == 0.0


# ---------------------------------------------------------------- PCA / fisher

def test_pca_two_d_is_rotation(rng):
    E = rng.normal(size=(50, 2)) @ np.array([[2.0, 0.3], [0.3, 1.0]])
    P, comps, _ = ev.pca_project(E)
    assert np.allclose(comps.T @ comps, np.eye(2), atol=1e-12)
    d0 = np.linalg.norm(E[:, None] - E[None], axis=-1)
    d1 = np.linalg.norm(P[:, None] - P[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-9


def test_pca_collinear(rng):
    t = rng.normal(size=40)
    E = np.outer(t, [1.0, 2.0, -1.0])
    _, _, ratio = ev.pca_project(E)
    assert ratio[0] == pytest.approx(1.0, abs=1e-12)


def test_pca_diagonal_gaussian_recovers_axes():
    rng = np.random.default_rng(0)
    E = rng.normal(size=(20000, 5)) * np.sqrt([5.0, 4.0, 3.0, 2.0, 1.0])
    _, comps, _ = ev.pca_project(E)
    assert abs(comps[0, 0]) > 0.98 and abs(comps[1, 1]) > 0.98
    assert (comps[np.abs(comps).argmax(axis=0), [0, 1]] > 0).all()


def test_pca_deterministic_and_rejects_small(rng):
    E = rng.normal(size=(30, 4))
    a, b = ev.pca_project(E), ev.pca_project(E.copy())
    assert a[0].tobytes() == b[0].tobytes()
    with pytest.raises(ValueError):
        ev.pca_project(E[:2])


def test_fisher_closed_form():
    E = np.array([-2.0, 0.0, 0.0, 2.0])[:, None]
    labels = np.array([0, 0, 1, 1])
    # each class has mean +-1 and population variance 1
    assert ev.fisher_ratio(E, labels) == pytest.approx(1.0, abs=1e-12)


def test_fisher_identical_means_is_zero(rng):
    E = rng.normal(size=(40, 3))
    E -= E.mean(axis=0)
    labels = np.repeat([0, 1], 20)
    E[labels == 1] -= E[labels == 1].mean(axis=0)
    E[labels == 0] -= E[labels == 0].mean(axis=0)
    assert abs(ev.fisher_ratio(E, labels)) < 1e-10


def test_fisher_invariant_to_translation_rotation(rng):
    E = rng.normal(size=(60, 3)) + np.repeat(np.eye(3) * 2, 20, axis=0)
    labels = np.repeat([0, 1, 2], 20)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    a = ev.fisher_ratio(E, labels)
    b = ev.fisher_ratio(E @ Q + 7.5, labels)
    assert abs(a - b) < 1e-9 * max(1.0, a)


def test_fisher_grows_with_separation(rng):
    base = rng.normal(size=(50, 2))
    labels = np.repeat([0, 1], 25)
    vals = []
    for gap in [0.5, 1.0, 2.0, 4.0]:
        E = base.copy()
        E[labels == 1, 0] += gap
        vals.append(ev.fisher_ratio(E, labels))
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_fisher_errors(rng):
    with pytest.raises(ValueError):
        ev.fisher_ratio(rng.normal(size=(5, 2)), [0, 0, 0, 0, 1])
    with pytest.raises(ValueError):
        ev.fisher_ratio(rng.normal(size=(5, 2)), [0] * 5)
