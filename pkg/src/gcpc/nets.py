"""Network pieces: feature encoder, context LSTM, guidance encoder, step
heads, phone classifier and the transducer prediction/joint networks.

All parameters live in a :class:`~gcpc.numcore.ParameterStore` under
dotted names (``enc.dense0.W``, ``ar.lstm0.Wx``, ``heads.k1.b`` ...), so
checkpoints and partial initialisation work on plain name prefixes.
Sequence inputs are (T, d) or batched (B, T, d); batched inputs are
right-padded and every op here is causal, so padding never leaks into
valid frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    ContractError,
    DimensionError,
    ParameterStore,
    Tensor,
    add,
    affine_forward,
    as_tensor,
    glorot_uniform,
    log_softmax,
    lstm_sequence,
    relu,
    sigmoid,
    tanh,
    take,
)


@dataclass(frozen=True)
class Topology:
    """Layer sizes for every sub-network (desk-scale defaults)."""

    input_dim: int = 16
    enc_layers: int = 2
    enc_width: int = 32
    ar_layers: int = 1
    ar_width: int = 64
    genc_depth: int = 2
    genc_width: int = 32
    prior_layers: int = 1
    prior_width: int = 32
    pred_width: int = 32
    frame_stack: int = 1

    def __post_init__(self):
        if self.enc_layers < 1:
            raise ContractError("f_enc needs at least one layer")
        if self.genc_depth not in (0, 1, 2, 3):
            raise ContractError("genc_depth must be 0..3")
        if self.ar_layers < 1 or self.frame_stack < 1:
            raise ContractError("ar_layers and frame_stack must be >= 1")

    @property
    def stacked_dim(self) -> int:
        return self.input_dim * self.frame_stack

    @property
    def latent_dim(self) -> int:
        return self.enc_width

    @property
    def context_dim(self) -> int:
        return self.ar_width


def stack_frames(features: np.ndarray, n: int) -> np.ndarray:
    """Concatenate each frame with its n-1 predecessors (zeros before t=0).

    Keeps the frame count and causality; works on (T, d) or (B, T, d).
    """
    if n == 1:
        return features
    x = np.asarray(features)
    pad = [(0, 0)] * x.ndim
    pad[-2] = (n - 1, 0)
    padded = np.pad(x, pad)
    T = x.shape[-2]
    parts = [padded[..., n - 1 - j:n - 1 - j + T, :] for j in range(n)]
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------- init helpers

def init_dense_stack(store: ParameterStore, prefix: str, in_dim: int, widths, rng) -> None:
    d = in_dim
    for i, w in enumerate(widths):
        store.add(f"{prefix}.dense{i}.W", glorot_uniform(rng, w, d))
        store.add(f"{prefix}.dense{i}.b", np.zeros(w))
        d = w


def init_lstm(store: ParameterStore, prefix: str, in_dim: int, width: int, rng) -> None:
    Wx = glorot_uniform(rng, 4 * width, in_dim)
    Wh = glorot_uniform(rng, 4 * width, width)
    b = np.zeros(4 * width)
    b[width:2 * width] = 1.0  # forget gate
    store.add(f"{prefix}.Wx", Wx)
    store.add(f"{prefix}.Wh", Wh)
    store.add(f"{prefix}.b", b)


def init_linear(store: ParameterStore, prefix: str, in_dim: int, out_dim: int, rng) -> None:
    store.add(f"{prefix}.W", glorot_uniform(rng, out_dim, in_dim))
    store.add(f"{prefix}.b", np.zeros(out_dim))


def init_encoder(store: ParameterStore, topo: Topology, rng) -> None:
    """f_enc (``enc.*``) followed by the f_ar LSTM stack (``ar.*``)."""
    init_dense_stack(store, "enc", topo.stacked_dim, [topo.enc_width] * topo.enc_layers, rng)
    d = topo.enc_width
    for i in range(topo.ar_layers):
        init_lstm(store, f"ar.lstm{i}", d, topo.ar_width, rng)
        d = topo.ar_width


def init_guidance(store: ParameterStore, topo: Topology, n_phones: int, rng) -> None:
    init_dense_stack(store, "genc", n_phones, [topo.genc_width] * topo.genc_depth, rng)


def guidance_dim(topo: Topology, n_phones: int) -> int:
    return topo.genc_width if topo.genc_depth > 0 else n_phones


def init_step_heads(store: ParameterStore, prefix: str, K: int, context_dim: int,
                    target_dim: int, rng) -> None:
    for k in range(1, K + 1):
        init_linear(store, f"{prefix}.k{k}", context_dim, target_dim, rng)


# ---------------------------------------------------------------- forward blocks

def dense_stack_forward(x, store: ParameterStore, prefix: str, n_layers: int,
                        final_relu: bool = True) -> Tensor:
    """Affine + ReLU layers; zero layers is the identity.

    With ``final_relu=False`` the last layer stays linear (ReLU only between
    layers).
    """
    h = as_tensor(x)
    for i in range(n_layers):
        W, b = store[f"{prefix}.dense{i}.W"], store[f"{prefix}.dense{i}.b"]
        if h.shape[-1] != W.shape[1]:
            raise DimensionError(f"{prefix}.dense{i}: input dim {h.shape[-1]} != {W.shape[1]}")
        h = affine_forward(h, W, b)
        if final_relu or i < n_layers - 1:
            h = relu(h)
    return h


def lstm_cell_step(x, h, c, Wx: Tensor, Wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step built from primitive graph ops (gate order i, f, g, o)."""
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    H = Wh.shape[1]
    if x.shape[-1] != Wx.shape[1] or h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionError("lstm_cell_step: inconsistent dimensions")
    a = add(affine_forward(x, Wx, b), affine_forward(h, Wh, Tensor(np.zeros(4 * H))))
    i = sigmoid(take(a, (..., slice(0, H))))
    f = sigmoid(take(a, (..., slice(H, 2 * H))))
    g = tanh(take(a, (..., slice(2 * H, 3 * H))))
    o = sigmoid(take(a, (..., slice(3 * H, 4 * H))))
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def lstm_stack_forward(x, store: ParameterStore, prefix: str, n_layers: int) -> Tensor:
    h = as_tensor(x)
    for i in range(n_layers):
        p = f"{prefix}.lstm{i}"
        h = lstm_sequence(h, store[f"{p}.Wx"], store[f"{p}.Wh"], store[f"{p}.b"])
    return h


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected (T, d) or (B, T, d), got {x.shape}")
    return x, False


def run_encoder(features, store: ParameterStore, topo: Topology) -> tuple[Tensor, Tensor]:
    """Return (z, c): per-frame latents from f_enc and causal contexts from f_ar."""
    x, single = _batched(features)
    if x.shape[1] < 1:
        raise ContractError("empty sequence")
    z = dense_stack_forward(x, store, "enc", topo.enc_layers)
    c = lstm_stack_forward(z, store, "ar", topo.ar_layers)
    if single:
        return z.reshape(z.shape[1:]), c.reshape(c.shape[1:])
    return z, c


def run_guidance(logits, store: ParameterStore, depth: int) -> Tensor:
    """q = g_enc(p) applied framewise; depth 0 hands the logits back unchanged."""
    p = as_tensor(logits)
    if depth == 0:
        return p
    return dense_stack_forward(p, store, "genc", depth, final_relu=False)


def apply_step_head(c, k: int, store: ParameterStore, K: int, prefix: str = "heads") -> Tensor:
    """h_k(c) = W_k c + b_k."""
    if not 1 <= k <= K:
        raise ContractError(f"step {k} outside 1..{K}")
    return affine_forward(c, store[f"{prefix}.k{k}.W"], store[f"{prefix}.k{k}.b"])


# ---------------------------------------------------------------- phone classifier

class PhoneClassifier:
    """Recurrent frame classifier producing unnormalised phone logits."""

    def __init__(self, topo: Topology, n_phones: int, rng):
        self.topo = topo
        self.n_phones = n_phones
        self.store = ParameterStore()
        d = topo.stacked_dim
        for i in range(topo.prior_layers):
            init_lstm(self.store, f"prior.lstm{i}", d, topo.prior_width, rng)
            d = topo.prior_width
        init_linear(self.store, "prior.out", d, n_phones, rng)
        self.frozen = False

    def freeze(self) -> None:
        self.store.freeze()
        self.frozen = True

    def logits(self, features) -> Tensor:
        x, single = _batched(features)
        if x.shape[-1] != self.topo.stacked_dim:
            raise DimensionError(f"classifier expects dim {self.topo.stacked_dim}, got {x.shape[-1]}")
        h = lstm_stack_forward(x, self.store, "prior", self.topo.prior_layers)
        out = affine_forward(h, self.store["prior.out.W"], self.store["prior.out.b"])
        return out.reshape(out.shape[1:]) if single else out


def run_phone_classifier(features, classifier: PhoneClassifier) -> Tensor:
    return classifier.logits(features)


# ---------------------------------------------------------------- transducer

def init_transducer_heads(store: ParameterStore, topo: Topology, vocab: int, rng) -> None:
    """Prediction network (embedding + 1 LSTM) and the single-layer joint network.

    Output classes are the ``vocab`` tokens plus blank at index ``vocab``; the
    blank row of the embedding doubles as the start-of-sequence input.
    """
    store.add("pred.embed", rng.uniform(-0.1, 0.1, size=(vocab + 1, topo.pred_width)))
    init_lstm(store, "pred.lstm0", topo.pred_width, topo.pred_width, rng)
    store.add("joint.W_enc", glorot_uniform(rng, vocab + 1, topo.ar_width))
    store.add("joint.W_pred", glorot_uniform(rng, vocab + 1, topo.pred_width))
    store.add("joint.b", np.zeros(vocab + 1))


def run_prediction_network(prev_tokens: np.ndarray, store: ParameterStore) -> Tensor:
    """prev_tokens: (B, U+1) int array starting with the blank/start id."""
    emb = take(store["pred.embed"], np.asarray(prev_tokens))
    return lstm_sequence(emb, store["pred.lstm0.Wx"], store["pred.lstm0.Wh"], store["pred.lstm0.b"])


def run_joint(enc: Tensor, pred: Tensor, store: ParameterStore) -> Tensor:
    """Joint logits (B, T, U+1, V+1) = W_enc h_t + W_pred g_u + b."""
    zero = Tensor(np.zeros(store["joint.b"].shape))
    e = affine_forward(enc, store["joint.W_enc"], store["joint.b"])     # (B, T, V+1)
    p = affine_forward(pred, store["joint.W_pred"], zero)               # (B, U+1, V+1)
    B, T, V1 = e.shape
    U1 = p.shape[1]
    return add(e.reshape(B, T, 1, V1), p.reshape(B, 1, U1, V1))


def _lstm_step_np(x: np.ndarray, h: np.ndarray, c: np.ndarray, Wx, Wh, b):
    H = h.shape[-1]
    a = x @ Wx.T + h @ Wh.T + b
    i = 1.0 / (1.0 + np.exp(-a[..., :H]))
    f = 1.0 / (1.0 + np.exp(-a[..., H:2 * H]))
    g = np.tanh(a[..., 2 * H:3 * H])
    o = 1.0 / (1.0 + np.exp(-a[..., 3 * H:]))
    c = f * c + i * g
    return o * np.tanh(c), c


class TransducerModel:
    """Encoder (f_enc + f_ar), prediction network and joint network in one store.

    ``frozen`` lists parameter names held fixed during fine-tuning.
    """

    def __init__(self, topo: Topology, vocab: int, rng, store: ParameterStore | None = None):
        self.topo = topo
        self.vocab = vocab
        self.blank = vocab
        if store is None:
            store = ParameterStore()
            init_encoder(store, topo, rng)
            init_transducer_heads(store, topo, vocab, rng)
        self.store = store
        self.frozen: list[str] = []

    def encode(self, features) -> tuple[Tensor, Tensor]:
        return run_encoder(features, self.store, self.topo)

    def log_probs(self, enc: Tensor, prev_tokens: np.ndarray) -> Tensor:
        pred = run_prediction_network(prev_tokens, self.store)
        return log_softmax(run_joint(enc, pred, self.store), axis=-1)

    # numpy-only helpers for decoding
    def encoder_states(self, features: np.ndarray) -> np.ndarray:
        _, c = self.encode(Tensor(features))
        return c.data

    def pred_start(self):
        H = self.topo.pred_width
        return self.pred_step(self.blank, np.zeros(H), np.zeros(H))

    def pred_step(self, token: int, h: np.ndarray, c: np.ndarray):
        s = self.store
        x = s["pred.embed"].data[token]
        return _lstm_step_np(x, h, c, s["pred.lstm0.Wx"].data, s["pred.lstm0.Wh"].data, s["pred.lstm0.b"].data)

    def joint_logits(self, enc_t: np.ndarray, pred_u: np.ndarray) -> np.ndarray:
        s = self.store
        return s["joint.W_enc"].data @ enc_t + s["joint.W_pred"].data @ pred_u + s["joint.b"].data
