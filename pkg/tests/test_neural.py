import math

import numpy as np
import pytest

from bdpm.dataset import HEALTHY, PD, SyntheticSpec, generate_synthetic
from bdpm.neural import (
    AdamState, NetworkConfig, TrainingDivergence, adam_step, bce_with_logits, embed, forward,
    forward_batch, init_params, load_params, loss_and_gradients, lstm_cell, save_params,
    self_attention, sigmoid, train_extractor, zero_params,
)
from bdpm.svm import SvmConfig, KernelSpec, decision_values, labels_to_signs, smo_train

TOY = dict(seq_len=5, hidden_dim=8, attn_dim=4, embed_dim=3, dtype="float64")


def scalar_sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_lstm(x, h, c, params):
    H = len(h)
    hx = list(h) + list(x)
    pre = {}
    for g in "fico":
        W, b = params[f"W_{g}"], params[f"b_{g}"]
        pre[g] = [sum(W[r, k] * hx[k] for k in range(len(hx))) + b[r] for r in range(H)]
    f = [scalar_sigmoid(z) for z in pre["f"]]
    i = [scalar_sigmoid(z) for z in pre["i"]]
    g = [math.tanh(z) for z in pre["c"]]
    o = [scalar_sigmoid(z) for z in pre["o"]]
    c_new = [f[r] * c[r] + i[r] * g[r] for r in range(H)]
    h_new = [o[r] * math.tanh(c_new[r]) for r in range(H)]
    return h_new, c_new


def random_lstm_params(rng, H, D=1):
    p = {f"W_{g}": rng.normal(size=(H, H + D)) for g in "fico"}
    p.update({f"b_{g}": rng.normal(size=H) for g in "fico"})
    return p


def test_lstm_cell_zero_weights():
    params = {k: np.zeros(v.shape) for k, v in random_lstm_params(np.random.default_rng(0), 4).items()}
    h, c, cache = lstm_cell([0.7], np.full(4, 0.3), np.zeros(4), params)
    assert np.all(cache["g"] == 0) and np.all(c == 0) and np.all(h == 0)


def test_lstm_forget_saturation(rng):
    params = {k: np.zeros(v.shape) for k, v in random_lstm_params(rng, 3).items()}
    params["b_f"][:] = 50.0
    c_prev = rng.normal(size=3)
    _, c, _ = lstm_cell([1.0], rng.normal(size=3), c_prev, params)
    assert np.max(np.abs(c - c_prev)) < 1e-9


def test_lstm_cell_matches_scalar_oracle(rng):
    for _ in range(5):
        params = random_lstm_params(rng, 3)
        x, h, c = rng.normal(size=1), rng.normal(size=3), rng.normal(size=3)
        h_new, c_new, _ = lstm_cell(x, h, c, params)
        h_ref, c_ref = scalar_lstm(x, h, c, params)
        assert np.max(np.abs(h_new - h_ref)) < 1e-12
        assert np.max(np.abs(c_new - c_ref)) < 1e-12


def test_lstm_cell_errors(rng):
    params = random_lstm_params(rng, 3)
    with pytest.raises(ValueError):
        lstm_cell([1.0], np.zeros(2), np.zeros(2), params)
    with pytest.raises(ValueError):
        lstm_cell([np.nan], np.zeros(3), np.zeros(3), params)


def test_attention_single_step(rng):
    params = {k: rng.normal(size=(3, 2)) for k in ("W_Q", "W_K", "W_V")}
    H = rng.normal(size=(1, 3))
    out, P = self_attention(H, params)
    assert P.tolist() == [[1.0]]
    assert np.allclose(out, H @ params["W_V"], rtol=0, atol=1e-15)


def test_attention_zero_query_is_uniform(rng):
    params = {"W_Q": np.zeros((3, 2)), "W_K": rng.normal(size=(3, 2)), "W_V": rng.normal(size=(3, 2))}
    H = rng.normal(size=(5, 3))
    out, P = self_attention(H, params)
    assert np.allclose(P, 0.2, rtol=0, atol=1e-15)
    assert np.allclose(out, (H @ params["W_V"]).mean(axis=0), rtol=0, atol=1e-12)


def test_attention_matches_brute_force(rng):
    H = rng.normal(size=(4, 3))
    params = {k: rng.normal(size=(3, 3)) for k in ("W_Q", "W_K", "W_V")}
    out, P = self_attention(H, params)
    Q, K, V = (H @ params[k] for k in ("W_Q", "W_K", "W_V"))
    for r in range(4):
        s = [sum(Q[r, a] * K[j, a] for a in range(3)) / math.sqrt(3) for j in range(4)]
        e = [math.exp(v) for v in s]
        w = [v / sum(e) for v in e]
        for col in range(3):
            assert abs(out[r, col] - sum(w[j] * V[j, col] for j in range(4))) < 1e-12
        assert abs(sum(P[r]) - 1) < 1e-12


def test_zero_params_give_half_probability():
    cfg = NetworkConfig(**TOY)
    tr = forward(np.linspace(0, 1, 5), zero_params(cfg), cfg)
    assert tr.logit[0] == 0.0
    assert tr.probability[0] == 0.5
    emb, prob, _ = embed(np.random.default_rng(0).random((3, 5)), zero_params(cfg), cfg)
    assert np.all(emb == 0) and np.all(prob == 0.5)


def scalar_forward_logit(x, params, cfg):
    H = cfg.hidden_dim
    h, c = [0.0] * H, [0.0] * H
    states = []
    for v in x:
        h, c = scalar_lstm([v], h, c, params)
        states.append(h)
    Hs = np.array(states)
    if cfg.attention:
        ctx, _ = self_attention(Hs, params)
    else:
        ctx = Hs
    pooled = ctx.mean(axis=0)
    emb = params["W_dense"] @ pooled + params["b_dense"]
    return float(emb @ params["w_out"] + params["b_out"][0])


@pytest.mark.parametrize("attention", [True, False])
def test_forward_matches_scalar_pipeline(rng, attention):
    cfg = NetworkConfig(**TOY, attention=attention)
    params = init_params(cfg, 3)
    x = rng.random(5)
    assert abs(forward(x, params, cfg).logit[0] - scalar_forward_logit(x, params, cfg)) < 1e-12


def test_trace_invariants(rng):
    cfg = NetworkConfig(seq_len=12, hidden_dim=6, attn_dim=4, embed_dim=3)
    params = init_params(cfg, 0)
    for k in params:
        params[k] = params[k] * 4
    tr = forward_batch(rng.normal(size=(7, 12)) * 3, params, cfg)
    for g in ("f", "i", "o"):
        assert np.all((tr.gates[g] > 0) & (tr.gates[g] < 1))
    assert np.all(np.abs(tr.gates["g"]) <= 1)
    assert tr.states.shape == (7, 12, 6) and tr.cell_states.shape == (7, 12, 6)
    assert np.all(tr.attn >= 0)
    assert np.max(np.abs(tr.attn.astype(np.float64).sum(axis=-1) - 1)) < 1e-6   # float32 storage
    p = tr.probability
    assert np.all((p > 0) & (p < 1))


def test_trace_rows_sum_to_one_in_float64(rng):
    cfg = NetworkConfig(**TOY)
    tr = forward_batch(rng.random((4, 5)), init_params(cfg, 1), cfg)
    assert np.max(np.abs(tr.attn.sum(axis=-1) - 1)) < 1e-9


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def gradient_check(cfg, seed, h=1e-5):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for k in params:
        params[k] = params[k] + rng.normal(0.0, 0.3, params[k].shape)
    X = rng.random((4, cfg.seq_len))
    y = np.array([HEALTHY, PD, PD, HEALTHY])
    _, grads = loss_and_gradients(X, y, params, cfg)
    worst = 0.0
    for k, p in params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up, _ = loss_and_gradients(X, y, params, cfg)
            p[idx] = old - h
            down, _ = loss_and_gradients(X, y, params, cfg)
            p[idx] = old
            worst = max(worst, relative_error(grads[k][idx], (up - down) / (2 * h)))
    return worst


@pytest.mark.parametrize("attention", [True, False])
def test_gradients_match_finite_differences(attention):
    assert gradient_check(NetworkConfig(**TOY, attention=attention), 11) < 1e-4


def test_duplicate_sample_same_loss(rng):
    cfg = NetworkConfig(**TOY)
    params = init_params(cfg, 0)
    x = rng.random((1, 5))
    one, _ = loss_and_gradients(x, [PD], params, cfg)
    two, _ = loss_and_gradients(np.vstack([x, x]), [PD, PD], params, cfg)
    assert one == two


def test_bce_limits():
    assert bce_with_logits(40.0, 1.0) < 1e-6
    assert bce_with_logits(-40.0, 0.0) < 1e-6
    assert abs(bce_with_logits(0.0, 1.0) - math.log(2)) < 1e-9
    assert abs(bce_with_logits(0.0, 0.0) - math.log(2)) < 1e-9
    z = np.linspace(-800, 800, 101)
    assert np.all(bce_with_logits(z, 1.0) >= 0) and np.all(bce_with_logits(z, 0.0) >= 0)
    assert np.all(np.isfinite(sigmoid(z)))


def test_zero_network_loss_is_ln2():
    cfg = NetworkConfig(**TOY)
    loss, _ = loss_and_gradients(np.ones((2, 5)), [PD, HEALTHY], zero_params(cfg), cfg)
    assert abs(loss - math.log(2)) < 1e-9


def test_loss_errors():
    cfg = NetworkConfig(**TOY)
    with pytest.raises(ValueError):
        loss_and_gradients(np.zeros((0, 5)), [], zero_params(cfg), cfg)
    with pytest.raises(ValueError):
        loss_and_gradients(np.zeros((1, 4)), [PD], zero_params(cfg), cfg)


def test_adam_first_step_closed_form(rng):
    cfg = NetworkConfig(**TOY, learning_rate=0.01)
    params = init_params(cfg, 0)
    grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
    new, state = adam_step(params, grads, AdamState.zeros_like(params), cfg)
    assert state.t == 1
    for k in params:
        update = new[k] - params[k]
        g = grads[k]
        assert np.max(np.abs(update + cfg.learning_rate * g / (np.abs(g) + cfg.adam_epsilon))) < 1e-12


def test_adam_zero_gradient_keeps_params():
    cfg = NetworkConfig(**TOY)
    params = init_params(cfg, 0)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    new, _ = adam_step(params, zeros, AdamState.zeros_like(params), cfg)
    assert all(np.array_equal(new[k], params[k]) for k in params)


def test_adam_deterministic_and_pure(rng):
    cfg = NetworkConfig(**TOY)
    start = init_params(cfg, 0)
    stream = [{k: rng.normal(size=v.shape) for k, v in start.items()} for _ in range(5)]

    def run():
        p, s = start, AdamState.zeros_like(start)
        for g in stream:
            p, s = adam_step(p, g, s, cfg)
        return p

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.array_equal(start[k], init_params(cfg, 0)[k]) for k in start)


def toy_training_set(seed=0, n=24):
    rng = np.random.default_rng(seed)
    y = np.array([HEALTHY, PD] * (n // 2))
    X = rng.random((n, 5)) * 0.5 + 0.4 * y[:, None]
    return X, y


def test_training_is_deterministic_and_finite():
    cfg = NetworkConfig(**TOY, epochs=5, batch_size=5)
    X, y = toy_training_set()
    a = train_extractor(X, y, cfg, 3)
    b = train_extractor(X, y, cfg, 3)
    assert a.loss_history == b.loss_history
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert len(a.loss_history) == 5 and np.all(np.isfinite(a.loss_history))
    assert train_extractor(X, y, cfg, 4).loss_history != a.loss_history


def test_training_preconditions():
    cfg = NetworkConfig(**TOY, epochs=1)
    with pytest.raises(ValueError):
        train_extractor(np.zeros((3, 5)), [PD, PD, PD], cfg, 0)
    with pytest.raises(ValueError):
        train_extractor(np.zeros((2, 4)), [PD, HEALTHY], cfg, 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    cfg = NetworkConfig(**TOY, epochs=2, learning_rate=1e300)
    X, y = toy_training_set()
    with pytest.raises((TrainingDivergence, ValueError)):
        train_extractor(X * 1e300, y, cfg, 0)


@pytest.fixture(scope="module")
def easy_training():
    # planted cohort with effect 3, features as log-abundance of the planted taxa
    table = generate_synthetic(SyntheticSpec(n_per_class=30, n_taxa=40, n_informative=12,
                                             effect_size=3.0, sparsity=0.0), 5)
    idx = [table.taxon_names.index(n) for n in table.meta["informative"]]
    X = np.log1p(table.counts[:, idx].astype(float))
    X = (X - X.min(0)) / (X.max(0) - X.min(0))
    cfg = NetworkConfig(seq_len=12, hidden_dim=16, attn_dim=8, embed_dim=4, epochs=300)
    return X, table.labels, cfg, train_extractor(X, table.labels, cfg, 0)


@pytest.mark.slow
def test_easy_planted_training_loss(easy_training):
    *_, result = easy_training
    assert result.loss_history[-1] < 0.1
    assert result.loss_history[-1] < result.loss_history[0]


@pytest.mark.slow
def test_trained_embeddings_linearly_separable(easy_training):
    X, y, cfg, result = easy_training
    emb, prob, _ = embed(X, result.params, cfg)
    assert emb.shape == (len(y), cfg.embed_dim)
    model = smo_train(emb, labels_to_signs(y), SvmConfig(C=100.0, kernel=KernelSpec("linear")), seed=0)
    margins = labels_to_signs(y) * decision_values(model, emb)
    assert model.converged and margins.min() > 0


def test_save_load_round_trip(tmp_path):
    cfg = NetworkConfig(**TOY)
    params = init_params(cfg, 9)
    path = tmp_path / "net.npz"
    save_params(params, cfg, path)
    loaded, cfg2 = load_params(path)
    assert cfg2 == cfg
    assert all(np.array_equal(loaded[k], params[k]) and loaded[k].dtype == params[k].dtype for k in params)


@pytest.mark.parametrize("kwargs", [dict(hidden_dim=0), dict(input_dim=2), dict(learning_rate=0.0),
                                    dict(adam_beta1=1.0), dict(dtype="float16")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        NetworkConfig(**kwargs)
