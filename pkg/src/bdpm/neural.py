"""LSTM + self-attention feature extractor trained with Adam.

Each sample is a pseudo-sequence of scalars (one selected taxon per step).
The network runs an LSTM over it, applies scaled dot-product self-attention
to the hidden states, mean-pools over time, compresses with a dense layer to
the embedding used by the SVM, and scores the embedding with a logistic head
so the whole extractor can be trained with binary cross-entropy.

Parameters are a plain ``dict`` of arrays in ``config.dtype``:

    W_f, W_i, W_c, W_o   hidden x (hidden + input), acting on [h_{t-1}, x_t]
    b_f, b_i, b_c, b_o   hidden
    W_Q, W_K, W_V        hidden x attn            (absent without attention)
    W_dense              embed x attn  (embed x hidden without attention)
    b_dense              embed
    w_out                embed
    b_out                (1,)
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import PD

GATES = ("f", "i", "c", "o")
LSTM_KEYS = tuple(f"W_{g}" for g in GATES) + tuple(f"b_{g}" for g in GATES)
ATTN_KEYS = ("W_Q", "W_K", "W_V")
HEAD_KEYS = ("W_dense", "b_dense", "w_out", "b_out")


class TrainingDivergence(RuntimeError):
    def __init__(self, message, epoch=None, sample=None):
        super().__init__(message)
        self.epoch = epoch
        self.sample = sample


@dataclass(frozen=True)
class NetworkConfig:
    seq_len: int = 40
    input_dim: int = 1
    hidden_dim: int = 240
    attn_dim: int = 64
    embed_dim: int = 16
    epochs: int = 500
    learning_rate: float = 0.001
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    attention: bool = True
    forget_bias: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("seq_len", "input_dim", "hidden_dim", "attn_dim", "embed_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.input_dim != 1:
            raise ValueError("only scalar inputs per step (input_dim = 1) are supported")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.adam_epsilon > 0:
            raise ValueError("adam_epsilon must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def pooled_dim(self) -> int:
        return self.attn_dim if self.attention else self.hidden_dim


def sigmoid(z):
    z = np.asarray(z)
    if z.dtype.kind != "f":
        z = z.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    z = np.asarray(z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def param_shapes(config: NetworkConfig) -> dict:
    H, A, E = config.hidden_dim, config.attn_dim, config.embed_dim
    shapes = {}
    for g in GATES:
        shapes[f"W_{g}"] = (H, H + config.input_dim)
    for g in GATES:
        shapes[f"b_{g}"] = (H,)
    if config.attention:
        for k in ATTN_KEYS:
            shapes[k] = (H, A)
    shapes["W_dense"] = (E, config.pooled_dim)
    shapes["b_dense"] = (E,)
    shapes["w_out"] = (E,)
    shapes["b_out"] = (1,)
    return shapes


def init_params(config: NetworkConfig, seed: int) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget bias 1."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if name in ATTN_KEYS:
            fan_in = shape[0]
        elif name == "w_out":
            fan_in = shape[0]
        else:
            fan_in = shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    params["b_f"][:] = config.forget_bias
    return params


def zero_params(config: NetworkConfig) -> dict:
    return {k: np.zeros(s, dtype=config.dtype) for k, s in param_shapes(config).items()}


def lstm_cell(x_t, h_prev, c_prev, params):
    """One LSTM step for a single sample (or a batch along axis 0).

    Returns ``(h_t, c_t, cache)`` with the gate activations in ``cache``.
    """
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    H = params["W_f"].shape[0]
    if h_prev.shape[-1] != H or c_prev.shape != h_prev.shape:
        raise ValueError(f"hidden/cell state must have trailing size {H}")
    if x_t.shape[-1] != params["W_f"].shape[1] - H:
        raise ValueError("input width does not match the LSTM weights")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(h_prev)) and np.all(np.isfinite(c_prev))):
        raise ValueError("non-finite input to lstm_cell")
    hx = np.concatenate([h_prev, x_t], axis=-1)
    f = sigmoid(hx @ params["W_f"].T + params["b_f"])
    i = sigmoid(hx @ params["W_i"].T + params["b_i"])
    g = np.tanh(hx @ params["W_c"].T + params["b_c"])
    o = sigmoid(hx @ params["W_o"].T + params["b_o"])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, {"f": f, "i": i, "g": g, "o": o, "c_prev": c_prev, "hx": hx}


def softmax_rows(S):
    S = S - S.max(axis=-1, keepdims=True)
    e = np.exp(S)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention(H, params):
    """Scaled dot-product self-attention over the rows of ``H`` (seq x hidden).

    Works on a leading batch axis too. Returns ``(output, scores)``.
    """
    H = np.asarray(H, dtype=np.float64)
    Q = H @ params["W_Q"]
    K = H @ params["W_K"]
    V = H @ params["W_V"]
    d_k = Q.shape[-1]
    S = (Q @ np.swapaxes(K, -1, -2)) / np.sqrt(d_k)
    P = softmax_rows(S)
    out = P @ V
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite value in self-attention")
    return out, P


@dataclass
class ForwardTrace:
    """Everything the backward pass needs.

    The recurrence is stored time-major and feature-by-batch within a step:
    ``act`` is (T, 4H, B) holding the f, i, candidate and o activations
    stacked along axis 1, ``cells`` is (T+1, H, B) with the zero initial state
    at time 0, and ``hx`` is (T+1, H+2, B) holding ``[h_{t-1}; x_t; 1]`` for
    step t, i.e. the LSTM input vector with a constant row for the bias.
    """
    x: np.ndarray            # (B, T)
    act: np.ndarray
    cells: np.ndarray
    hx: np.ndarray
    states: np.ndarray       # (B, T, H) LSTM outputs, batch-major
    attn: np.ndarray | None  # (B, T, T) row-stochastic attention scores
    Q: np.ndarray | None
    K: np.ndarray | None
    V: np.ndarray | None
    context: np.ndarray      # (B, T, pooled_dim)
    pooled: np.ndarray       # (B, pooled_dim)
    embedding: np.ndarray    # (B, E)
    logit: np.ndarray        # (B,)
    lstm_weights: np.ndarray  # (4H, H+2) stacked gate weights with the bias column

    @property
    def probability(self) -> np.ndarray:
        return sigmoid(self.logit.astype(np.float64))

    @property
    def gates(self) -> dict:
        H = self.cells.shape[1]
        return {g: self.act[:, k * H:(k + 1) * H].transpose(2, 0, 1)
                for k, g in enumerate(("f", "i", "g", "o"))}

    @property
    def cell_states(self) -> np.ndarray:
        return self.cells[1:].transpose(2, 0, 1)


def stacked_lstm_weights(params):
    """(4H, H+2) matrix acting on ``[h_{t-1}; x_t; 1]``; gate blocks f, i, c, o."""
    W = np.concatenate([params[f"W_{g}"] for g in GATES], axis=0)
    b = np.concatenate([params[f"b_{g}"] for g in GATES])
    return np.concatenate([W, b[:, None]], axis=1)


# sigmoid(z) = (1 + tanh(z / 2)) / 2, so halving the f, i, o rows of the
# pre-activation (exact in binary floating point) lets one tanh call cover
# all four gates.
def _gate_scale(H, dtype):
    scale = np.full((4 * H, 1), 0.5, dtype=dtype)
    scale[2 * H:3 * H] = 1.0
    return scale


def _lstm_forward(W_aug, hx, act, cells):
    H = cells.shape[1]
    T = act.shape[0]
    W_s = W_aug * _gate_scale(H, W_aug.dtype)
    for t in range(T):
        a = act[t]
        np.matmul(W_s, hx[t], out=a)
        np.tanh(a, out=a)
        for lo, hi in ((0, 2 * H), (3 * H, 4 * H)):
            a[lo:hi] *= 0.5
            a[lo:hi] += 0.5
        c = cells[t + 1]
        np.multiply(a[:H], cells[t], out=c)
        c += a[H:2 * H] * a[2 * H:3 * H]
        h = hx[t + 1, :H]
        np.tanh(c, out=h)
        h *= a[3 * H:]


def _lstm_backward(W_hT, act, cells, dH, dz_all):
    """Fill ``dz_all`` (T, 4H, B) with gradients w.r.t. the gate pre-activations."""
    H = cells.shape[1]
    T, B = act.shape[0], act.shape[2]
    f, i, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
    tc = np.tanh(cells[1:])
    # step-independent factors of dz, computed for all t at once
    dc_from_dh = o * (1.0 - tc * tc)
    coef = np.concatenate([cells[:-1] * f * (1.0 - f), g * i * (1.0 - i), i * (1.0 - g * g)], axis=1)
    coef = coef.reshape(T, 3, H, B)
    coef_o = tc * o * (1.0 - o)
    dh_next = np.zeros((H, B), dtype=act.dtype)
    dc_next = np.zeros((H, B), dtype=act.dtype)
    for t in range(T - 1, -1, -1):
        dz = dz_all[t]
        dh = dH[t] + dh_next
        dc = dh * dc_from_dh[t]
        dc += dc_next
        np.multiply(dc, coef[t], out=dz[:3 * H].reshape(3, H, B))
        np.multiply(dh, coef_o[t], out=dz[3 * H:])
        dh_next = W_hT @ dz
        dc_next = dc * f[t]


def forward_batch(X, params, config: NetworkConfig) -> ForwardTrace:
    dtype = params["W_f"].dtype
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 1:
        X = X[None, :]
    B, T = X.shape
    if T != config.seq_len:
        raise ValueError(f"sample length {T} != seq_len {config.seq_len}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input sample")
    Hd = config.hidden_dim
    W_aug = stacked_lstm_weights(params)
    hx = np.zeros((T + 1, Hd + 2, B), dtype=dtype)
    hx[:T, Hd] = X.T
    hx[:, Hd + 1] = 1.0
    act = np.empty((T, 4 * Hd, B), dtype=dtype)
    cells = np.zeros((T + 1, Hd, B), dtype=dtype)
    _lstm_forward(W_aug, hx, act, cells)

    Hs = np.ascontiguousarray(hx[1:, :Hd].transpose(2, 0, 1))
    if config.attention:
        Q = Hs @ params["W_Q"]
        K = Hs @ params["W_K"]
        V = Hs @ params["W_V"]
        P = softmax_rows(Q @ np.swapaxes(K, 1, 2) * dtype.type(1.0 / np.sqrt(config.attn_dim)))
        ctx = P @ V
    else:
        Q = K = V = P = None
        ctx = Hs
    pooled = ctx.mean(axis=1)
    emb = pooled @ params["W_dense"].T + params["b_dense"]
    logit = emb @ params["w_out"] + params["b_out"][0]
    return ForwardTrace(X, act, cells, hx, Hs, P, Q, K, V, ctx, pooled, emb, logit, W_aug)


def forward(sample, params, config: NetworkConfig) -> ForwardTrace:
    """Forward pass for one sample; the trace keeps a batch axis of length 1."""
    return forward_batch(np.asarray(sample, dtype=np.float64)[None, :], params, config)


def bce_with_logits(logit, target):
    """Per-sample binary cross-entropy, computed stably from logits."""
    return softplus(logit) - target * logit


def loss_and_gradients(X, y, params, config: NetworkConfig):
    """Mean BCE over the batch and its exact gradient for every parameter.

    ``y`` uses the dataset encoding; the head predicts P(PD).
    """
    dtype = params["W_f"].dtype
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    target = (np.asarray(y) == PD).astype(dtype)
    tr = forward_batch(X, params, config)
    per_sample = bce_with_logits(tr.logit, target)
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise TrainingDivergence(f"non-finite loss for sample {int(bad[0])}", sample=int(bad[0]))
    B, T = X.shape
    Hd = config.hidden_dim
    loss = float(per_sample.astype(np.float64).mean())
    grads = {}

    dlogit = (sigmoid(tr.logit) - target) / B
    grads["w_out"] = tr.embedding.T @ dlogit
    grads["b_out"] = np.array([dlogit.sum()], dtype=dtype)
    demb = dlogit[:, None] * params["w_out"][None, :]
    grads["W_dense"] = demb.T @ tr.pooled
    grads["b_dense"] = demb.sum(axis=0)
    dpooled = demb @ params["W_dense"]
    dctx = np.repeat(dpooled[:, None, :] / T, T, axis=1)

    Hs = tr.states
    if config.attention:
        P, Q, K, V = tr.attn, tr.Q, tr.K, tr.V
        dP = dctx @ np.swapaxes(V, 1, 2)
        dV = np.swapaxes(P, 1, 2) @ dctx
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * dtype.type(1.0 / np.sqrt(config.attn_dim))
        dQ = dS @ K
        dK = np.swapaxes(dS, 1, 2) @ Q
        Hflat = Hs.reshape(B * T, Hd)
        grads["W_Q"] = Hflat.T @ dQ.reshape(B * T, -1)
        grads["W_K"] = Hflat.T @ dK.reshape(B * T, -1)
        grads["W_V"] = Hflat.T @ dV.reshape(B * T, -1)
        dH = dQ @ params["W_Q"].T + dK @ params["W_K"].T + dV @ params["W_V"].T
    else:
        dH = dctx

    W_hT = np.ascontiguousarray(tr.lstm_weights[:, :Hd].T)
    dz_all = np.empty((T, 4 * Hd, B), dtype=dtype)
    _lstm_backward(W_hT, tr.act, tr.cells, np.ascontiguousarray(dH.transpose(1, 2, 0)), dz_all)
    # one GEMM over all (t, b) pairs; the last column is the bias gradient
    dz_flat = dz_all.transpose(1, 0, 2).reshape(4 * Hd, T * B)
    hx_flat = tr.hx[:T].transpose(1, 0, 2).reshape(Hd + 2, T * B)
    dW_aug = dz_flat @ hx_flat.T
    for k, g in enumerate(GATES):
        rows = dW_aug[k * Hd:(k + 1) * Hd]
        grads[f"W_{g}"] = np.ascontiguousarray(rows[:, :Hd + 1])
        grads[f"b_{g}"] = rows[:, Hd + 1].copy()
    return loss, grads


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def _adam_update(params, grads, state: AdamState, config: NetworkConfig) -> None:
    """Bias-corrected Adam applied in place to ``params`` and ``state``."""
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    state.t += 1
    step = lr / (1.0 - b1 ** state.t)
    v_corr = 1.0 / (1.0 - b2 ** state.t)
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m, v = state.m[k], state.v[k]
        tmp = g * (1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.multiply(v, v_corr, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp


def adam_step(params, grads, state: AdamState, config: NetworkConfig):
    """Bias-corrected Adam. Returns new ``(params, state)``; inputs are not mutated."""
    new_params = {k: p.copy() for k, p in params.items()}
    new_state = AdamState({k: a.copy() for k, a in state.m.items()},
                          {k: a.copy() for k, a in state.v.items()}, state.t)
    _adam_update(new_params, grads, new_state, config)
    return new_params, new_state


@dataclass
class TrainResult:
    params: dict
    loss_history: list = field(default_factory=list)
    state: AdamState | None = None


def train_extractor(X, y, config: NetworkConfig, seed: int) -> TrainResult:
    """Mini-batch Adam on mean BCE; batches reshuffled each epoch from ``seed``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = X.shape[0]
    if n < 2 or np.unique(y).size < 2:
        raise ValueError("training needs at least two samples covering both classes")
    if X.shape[1] != config.seq_len:
        raise ValueError(f"feature width {X.shape[1]} != seq_len {config.seq_len}")
    init_seed, shuffle_seed = np.random.SeedSequence(seed).generate_state(2)
    params = init_params(config, int(init_seed))
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(int(shuffle_seed))
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, grads = loss_and_gradients(X[idx], y[idx], params, config)
            except TrainingDivergence as exc:
                raise TrainingDivergence(f"training diverged at epoch {epoch}: {exc}", epoch=epoch) from None
            _adam_update(params, grads, state, config)
            total += loss * idx.size
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise TrainingDivergence(f"training diverged at epoch {epoch}", epoch=epoch)
        history.append(mean_loss)
    return TrainResult(params, history, state)


def embed(X, params, config: NetworkConfig, batch_size: int = 64):
    """Dense-layer embeddings and head P(PD) for every row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != config.seq_len:
        raise ValueError(f"expected rows of width {config.seq_len}, got shape {X.shape}")
    embs, logits = [], []
    for start in range(0, X.shape[0], batch_size):
        tr = forward_batch(X[start:start + batch_size], params, config)
        embs.append(tr.embedding)
        logits.append(tr.logit)
    if not embs:
        return np.zeros((0, config.embed_dim)), np.zeros(0), np.zeros(0)
    logit = np.concatenate(logits).astype(np.float64)
    return np.concatenate(embs).astype(np.float64), sigmoid(logit), logit


def save_params(params: dict, config: NetworkConfig, path) -> None:
    """npz archive holding every array plus a JSON manifest of names, shapes and config."""
    manifest = {
        "config": asdict(config),
        "arrays": {k: list(v.shape) for k, v in params.items()},
    }
    payload = {k: np.asarray(v) for k, v in params.items()}
    payload["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path):
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        params = {k: data[k].copy() for k in manifest["arrays"]}
    for k, shape in manifest["arrays"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"array {k} has shape {params[k].shape}, manifest says {shape}")
    return params, NetworkConfig(**manifest["config"])
