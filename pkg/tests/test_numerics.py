import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from manas.numerics import (AdamConfig, DimensionError, ParameterSet, adam_update, cosine_similarity,
                            finite_difference_check, init_lstm, init_mlp, load_checkpoint, lstm_step,
                            mlp_forward, save_checkpoint)


def naive_mlp(weights, biases, x):
    # loop-based reference, deliberately free of matrix ops
    out = list(x)
    for layer, (W, b) in enumerate(zip(weights, biases)):
        nxt = []
        for r in range(len(W)):
            acc = b[r]
            for c in range(len(out)):
                acc += W[r][c] * out[c]
            nxt.append(max(acc, 0.0) if layer < len(weights) - 1 else acc)
        out = nxt
    return np.array(out)


def naive_lstm(w_ih, w_hh, b, x, h, c):
    H = len(h)
    z = w_ih @ x + w_hh @ h + b
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, g, o = sig(z[:H]), sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), sig(z[3 * H:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_mlp_zero_weights_returns_bias(rng):
    ps = ParameterSet()
    init_mlp(ps, "m", [6, 5, 4], rng)
    for k in ps.names():
        ps[k].zero_()
    ps["m.b1"].copy_(torch.tensor([1.0, -2.0, 0.5, 3.0]))
    out = mlp_forward(ps, torch.randn(3, 6, dtype=torch.float64), "m")
    assert torch.equal(out, ps["m.b1"].expand(3, 4))


def test_mlp_identity_single_layer():
    ps = ParameterSet({"m.w0": torch.eye(5), "m.b0": torch.zeros(5)})
    x = torch.randn(5, dtype=torch.float64)
    assert torch.equal(mlp_forward(ps, x, "m"), x)


def test_mlp_matches_naive_reference(rng):
    ps = ParameterSet()
    init_mlp(ps, "m", [8, 6, 4], rng)
    for k in ("m.b0", "m.b1"):
        ps[k].copy_(torch.from_numpy(rng.normal(size=ps[k].shape)))
    x = rng.normal(size=8)
    ref = naive_mlp([ps["m.w0"].numpy(), ps["m.w1"].numpy()], [ps["m.b0"].numpy(), ps["m.b1"].numpy()], x)
    np.testing.assert_allclose(mlp_forward(ps, torch.from_numpy(x), "m").numpy(), ref, rtol=1e-12, atol=1e-12)


def test_mlp_shape_error(rng):
    ps = ParameterSet()
    init_mlp(ps, "m", [4, 3], rng)
    with pytest.raises(DimensionError):
        mlp_forward(ps, torch.zeros(5, dtype=torch.float64), "m")


def test_lstm_zero_params_zero_state(rng):
    ps = ParameterSet()
    init_lstm(ps, "lstm", 4, 3, rng)
    for k in ps.names():
        ps[k].zero_()
    h, c = lstm_step(ps, torch.zeros(4, dtype=torch.float64), torch.zeros(3, dtype=torch.float64),
                     torch.zeros(3, dtype=torch.float64))
    assert torch.equal(h, torch.zeros(3, dtype=torch.float64))
    assert torch.equal(c, torch.zeros(3, dtype=torch.float64))


def test_lstm_forget_one_input_zero_keeps_cell(rng):
    H = 3
    ps = ParameterSet()
    init_lstm(ps, "lstm", 4, H, rng)
    ps["lstm.w_ih"].zero_()
    ps["lstm.w_hh"].zero_()
    b = torch.zeros(4 * H, dtype=torch.float64)
    b[:H] = -1e3       # input gate -> 0
    b[H:2 * H] = 1e3   # forget gate -> 1
    ps["lstm.b"].copy_(b)
    c_prev = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    _, c = lstm_step(ps, torch.randn(4, dtype=torch.float64), torch.randn(H, dtype=torch.float64), c_prev)
    assert torch.equal(c, c_prev)


def test_lstm_matches_naive_cell(rng):
    ps = ParameterSet()
    init_lstm(ps, "lstm", 5, 4, rng)
    x, h, c = rng.normal(size=5), rng.normal(size=4), rng.normal(size=4)
    h1, c1 = lstm_step(ps, *(torch.from_numpy(v) for v in (x, h, c)))
    h_ref, c_ref = naive_lstm(ps["lstm.w_ih"].numpy(), ps["lstm.w_hh"].numpy(), ps["lstm.b"].numpy(), x, h, c)
    np.testing.assert_allclose(h1.numpy(), h_ref, atol=1e-13)
    np.testing.assert_allclose(c1.numpy(), c_ref, atol=1e-13)


def test_lstm_dimension_error(rng):
    ps = ParameterSet()
    init_lstm(ps, "lstm", 5, 4, rng)
    with pytest.raises(DimensionError):
        lstm_step(ps, torch.zeros(5, dtype=torch.float64), torch.zeros(3, dtype=torch.float64),
                  torch.zeros(4, dtype=torch.float64))


def test_cosine_cases():
    v = torch.tensor([0.3, -2.0, 1.0], dtype=torch.float64)
    assert float(cosine_similarity(v, v)) == pytest.approx(1.0)
    assert float(cosine_similarity(v, -v)) == pytest.approx(-1.0)
    e1, e2 = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])
    assert float(cosine_similarity(e1, e2)) == 0.0
    assert float(cosine_similarity(torch.zeros(2), e1)) == 0.0


vec = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False)).filter(lambda a: np.linalg.norm(a) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, b, k):
    ta, tb = torch.from_numpy(a), torch.from_numpy(b)
    s = float(cosine_similarity(ta, tb))
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(float(cosine_similarity(tb, ta)), abs=1e-12)
    assert s == pytest.approx(float(cosine_similarity(k * ta, tb)), abs=1e-12)


def test_adam_zero_gradient_is_noop():
    ps = ParameterSet({"p": torch.tensor([1.5, -2.0])})
    adam_update(ps, {"p": torch.zeros(2, dtype=torch.float64)}, AdamConfig(0.1))
    assert torch.equal(ps["p"], torch.tensor([1.5, -2.0], dtype=torch.float64))
    assert ps.step == 1


def test_adam_first_step_moves_by_lr():
    # t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    ps = ParameterSet({"p": torch.tensor(2.0)})
    adam_update(ps, {"p": torch.tensor(1.0, dtype=torch.float64)}, AdamConfig(0.1))
    assert float(ps["p"]) == pytest.approx(2.0 - 0.1 * 1.0 / (1.0 + 1e-8), abs=1e-15)


def test_adam_constant_gradient_descends():
    ps = ParameterSet({"p": torch.tensor(0.0)})
    for _ in range(50):
        adam_update(ps, {"p": torch.tensor(-3.0, dtype=torch.float64)}, AdamConfig(0.01))
    assert float(ps["p"]) > 0.4


def test_adam_missing_gradient_errors():
    ps = ParameterSet({"a": torch.zeros(2), "b": torch.zeros(2)})
    with pytest.raises(KeyError):
        adam_update(ps, {"a": torch.zeros(2, dtype=torch.float64)}, AdamConfig())
    with pytest.raises(KeyError):
        adam_update(ps, {"c": torch.zeros(2, dtype=torch.float64)}, AdamConfig(), names=["a"])


def test_adam_bit_reproducible():
    def run():
        g = np.random.default_rng(3)
        ps = ParameterSet({"w": g.normal(size=(4, 3))})
        for _ in range(20):
            adam_update(ps, {"w": torch.from_numpy(g.normal(size=(4, 3)))}, AdamConfig(0.05))
        return ps["w"].numpy().tobytes()

    assert run() == run()


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(lr=0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)


def test_finite_difference_polynomial():
    ps = ParameterSet({"p": torch.tensor([0.7, -1.3, 2.5])})
    err = finite_difference_check(lambda q: (q["p"] ** 2).sum(), ps, 1e-5)
    assert err < 1e-8


def test_finite_difference_rejects_nonfinite():
    ps = ParameterSet({"p": torch.tensor([1.0])})
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda q: torch.log(q["p"] - 5.0).sum(), ps)


def test_subnetwork_gradients_match_finite_differences(rng):
    ps = ParameterSet()
    init_mlp(ps, "m", [6, 5, 4], rng)
    init_lstm(ps, "lstm", 4, 4, rng)
    x = torch.from_numpy(rng.normal(size=(3, 6)))
    h0 = torch.from_numpy(rng.normal(size=(3, 4)))
    c0 = torch.from_numpy(rng.normal(size=(3, 4)))

    def f(q):
        y = mlp_forward(q, x, "m")
        h, c = lstm_step(q, y, h0, c0)
        return (h * torch.arange(1.0, 5.0, dtype=torch.float64)).sum() + c.pow(2).sum()

    assert finite_difference_check(f, ps, 1e-5) < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    ps = ParameterSet()
    init_mlp(ps, "m", [3, 2], rng)
    ps.add("anchor", np.ones(2), frozen=True)
    adam_update(ps, {k: torch.ones_like(ps[k]) for k in ps.trainable()}, AdamConfig())
    save_checkpoint(tmp_path / "ck", {"g": ps}, {"note": 1})
    groups, extra = load_checkpoint(tmp_path / "ck")
    q = groups["g"]
    assert extra == {"note": 1}
    assert q.fingerprint() == ps.fingerprint()
    assert q.frozen == {"anchor"} and q.step == 1
    assert torch.equal(q.m["m.w0"], ps.m["m.w0"])
