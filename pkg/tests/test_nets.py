import numpy as np
import pytest
from hypothesis import given, strategies as st

from gcpc import nets
from gcpc.numcore import ContractError, DimensionError, ParameterStore, Tensor, backward_pass, \
    finite_diff_gradient, relative_error

SMALL = nets.Topology(input_dim=3, enc_layers=1, enc_width=4, ar_layers=2, ar_width=5,
                      genc_depth=2, genc_width=3, prior_width=4, pred_width=4)


def _zero_lstm(I, H):
    return Tensor(np.zeros((4 * H, I))), Tensor(np.zeros((4 * H, H))), np.zeros(4 * H)


def test_lstm_cell_zero_params_stay_zero(rng):
    Wx, Wh, b = _zero_lstm(3, 2)
    h, c = nets.lstm_cell_step(rng.normal(size=3), np.zeros(2), np.zeros(2), Wx, Wh, Tensor(b))
    assert np.array_equal(h.data, np.zeros(2)) and np.array_equal(c.data, np.zeros(2))


def test_lstm_cell_forget_bias_value():
    H = 1
    Wx, Wh, b = _zero_lstm(1, H)
    b[H:2 * H] = 10.0
    h, c = nets.lstm_cell_step(np.zeros(1), np.zeros(1), np.ones(1), Wx, Wh, Tensor(b))
    f = 1 / (1 + np.exp(-10.0))
    assert c.data[0] == pytest.approx(f, abs=1e-15)
    assert h.data[0] == pytest.approx(0.5 * np.tanh(f), abs=1e-15)
    assert h.data[0] == pytest.approx(0.3808, abs=1e-4)


def test_lstm_zero_sequence_zero_params_stays_zero():
    store = ParameterStore()
    for n in ("Wx", "Wh"):
        store.add(n, np.zeros((8, 2)))
    store.add("b", np.zeros(8))
    out = nets.lstm_stack_forward(np.zeros((1, 6, 2)), ParameterStore(), "x", 0)
    assert np.array_equal(out.data, np.zeros((1, 6, 2)))
    from gcpc.numcore import lstm_sequence
    assert np.array_equal(lstm_sequence(Tensor(np.zeros((1, 6, 2))), store["Wx"], store["Wh"], store["b"]).data,
                          np.zeros((1, 6, 2)))


def test_lstm_cell_dimension_error():
    Wx, Wh, b = _zero_lstm(3, 2)
    with pytest.raises(DimensionError):
        nets.lstm_cell_step(np.zeros(4), np.zeros(2), np.zeros(2), Wx, Wh, Tensor(b))


def test_dense_stack_examples():
    x = np.array([0.5, 1.0, 2.0])
    assert np.array_equal(nets.dense_stack_forward(x, ParameterStore(), "d", 0).data, x)
    store = ParameterStore()
    store.add("d.dense0.W", np.eye(3))
    store.add("d.dense0.b", np.zeros(3))
    assert np.array_equal(nets.dense_stack_forward(x, store, "d", 1).data, x)
    store = ParameterStore()
    store.add("d.dense0.W", np.array([[1.0, -1.0], [0.5, 2.0]]))
    store.add("d.dense0.b", np.array([0.0, -1.0]))
    store.add("d.dense1.W", np.array([[2.0, 1.0]]))
    store.add("d.dense1.b", np.array([0.25]))
    # layer 0: [1-2, 0.5+4-1] = [-1, 3.5] -> relu [0, 3.5]; layer 1: 3.5 + 0.25 -> relu 3.75
    out = nets.dense_stack_forward(np.array([1.0, 2.0]), store, "d", 2)
    assert out.data.tolist() == [3.75]
    with pytest.raises(DimensionError):
        nets.dense_stack_forward(np.ones(3), store, "d", 2)


def test_encoder_shapes_and_errors(rng):
    store = ParameterStore()
    nets.init_encoder(store, SMALL, rng)
    z, c = nets.run_encoder(rng.normal(size=(1, 3)), store, SMALL)
    assert z.shape == (1, 4) and c.shape == (1, 5)
    with pytest.raises(DimensionError):
        nets.run_encoder(np.zeros(3), store, SMALL)


@given(st.integers(2, 9), st.integers(0, 2**31))
def test_encoder_is_causal(T, seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    nets.init_encoder(store, SMALL, np.random.default_rng(0))
    x = rng.normal(size=(T, 3))
    t = int(rng.integers(0, T - 1))
    _, c = nets.run_encoder(x, store, SMALL)
    y = x.copy()
    y[t + 1:] += rng.normal(size=y[t + 1:].shape) * 5
    _, c2 = nets.run_encoder(y, store, SMALL)
    assert c.data[:t + 1].tobytes() == c2.data[:t + 1].tobytes()


def test_encoder_deterministic(rng):
    x = rng.normal(size=(6, 3))
    outs = []
    for _ in range(2):
        store = ParameterStore()
        nets.init_encoder(store, SMALL, np.random.default_rng(5))
        outs.append(nets.run_encoder(x, store, SMALL)[1].data.tobytes())
    assert outs[0] == outs[1]


def test_padding_does_not_leak_into_valid_frames(rng):
    store = ParameterStore()
    nets.init_encoder(store, SMALL, rng)
    x = rng.normal(size=(4, 3))
    padded = np.zeros((2, 7, 3))
    padded[0, :4] = x
    padded[1] = rng.normal(size=(7, 3))
    _, c = nets.run_encoder(padded, store, SMALL)
    assert np.allclose(c.data[0, :4], nets.run_encoder(x, store, SMALL)[1].data, atol=1e-15)


def test_guidance_examples(rng):
    p = rng.normal(size=(5, 8))
    assert nets.run_guidance(p, ParameterStore(), 0).data.tobytes() == p.tobytes()
    store = ParameterStore()
    nets.init_guidance(store, SMALL, 8, rng)
    assert nets.run_guidance(p, store, 2).shape == (5, SMALL.genc_width)
    assert nets.run_guidance(p[:1], store, 2).shape == (1, SMALL.genc_width)
    # the last guidance layer is linear, so negative outputs can occur
    many = nets.run_guidance(rng.normal(size=(200, 8)) * 3, store, 2).data
    assert (many < 0).any()


def test_step_head_examples():
    store = ParameterStore()
    store.add("heads.k1.W", np.eye(2))
    store.add("heads.k1.b", np.zeros(2))
    store.add("heads.k2.W", np.array([[1.0, 2.0], [3.0, 4.0]]))
    store.add("heads.k2.b", np.array([0.5, -0.5]))
    c = np.array([1.0, -1.0])
    assert nets.apply_step_head(c, 1, store, 2).data.tolist() == [1.0, -1.0]
    assert nets.apply_step_head(c, 2, store, 2).data.tolist() == [-0.5, -1.5]
    with pytest.raises(ContractError):
        nets.apply_step_head(c, 3, store, 2)
    with pytest.raises(ContractError):
        nets.apply_step_head(c, 0, store, 2)


def test_phone_classifier_shape_and_frozen(rng):
    clf = nets.PhoneClassifier(SMALL, 6, rng)
    x = rng.normal(size=(9, 3))
    assert nets.run_phone_classifier(x, clf).shape == (9, 6)
    with pytest.raises(DimensionError):
        clf.logits(np.zeros((4, 5)))
    clf.freeze()
    assert clf.store.trainable_names() == []
    before = clf.logits(x).data.tobytes()
    logits = clf.logits(x)
    assert not logits.requires_grad
    assert clf.logits(x).data.tobytes() == before


def test_stack_frames_causal():
    x = np.arange(8.0).reshape(4, 2)
    s = nets.stack_frames(x, 2)
    assert s.shape == (4, 4)
    # current frame first, then its predecessor
    assert s[0].tolist() == [0, 1, 0, 0]
    assert s[2].tolist() == [4, 5, 2, 3]
    assert np.array_equal(nets.stack_frames(x, 1), x)


def test_transducer_joint_normalises_and_gradients(rng):
    topo = SMALL
    model = nets.TransducerModel(topo, 3, rng)
    x = rng.normal(size=(2, 4, 3))
    prev = np.array([[3, 0, 1], [3, 2, 3]])
    _, c = model.encode(Tensor(x))
    lp = model.log_probs(c, prev)
    assert lp.shape == (2, 4, 3, 4)
    assert np.allclose(np.logaddexp.reduce(lp.data, axis=-1), 0.0, atol=1e-12)
    w = rng.normal(size=lp.shape)

    def loss():
        _, cc = model.encode(Tensor(x))
        return (model.log_probs(cc, prev) * w).sum()

    names = ["joint.W_pred", "pred.lstm0.Wh", "pred.embed", "enc.dense0.W"]
    model.store.zero_grad()
    g = backward_pass(loss(), model.store)
    fd = finite_diff_gradient(lambda: loss().item(), model.store, names=names)
    assert relative_error([g[n] for n in names], list(fd.values())) < 1e-6


def test_numpy_decoder_helpers_match_graph(rng):
    model = nets.TransducerModel(SMALL, 3, rng)
    x = rng.normal(size=(5, 3))
    enc = model.encoder_states(x)
    h, c = model.pred_start()
    h, c = model.pred_step(1, h, c)
    graph_pred = nets.run_prediction_network(np.array([[3, 1]]), model.store).data[0, 1]
    assert np.allclose(h, graph_pred, atol=1e-13)
    prev = np.array([[3, 1]])
    lp = model.log_probs(Tensor(enc[None]), prev).data[0, 2, 1]
    logits = model.joint_logits(enc[2], h)
    assert np.allclose(logits - np.logaddexp.reduce(logits), lp, atol=1e-12)
