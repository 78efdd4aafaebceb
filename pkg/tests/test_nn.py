import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marlreplay import nn


def small_mlp(rng, d=4, hidden=(5, 6), u=3):
    return nn.init_mlp(d, hidden, u, rng)


def small_gru(rng, d=3, h=4, u=3):
    return nn.init_gru(d, h, u, rng)


def test_zero_mlp_gives_zero_output():
    p = small_mlp(np.random.default_rng(0)).zeros_like()
    assert np.all(nn.mlp_forward(p, np.arange(4.0)) == 0.0)


def test_identity_linear_layer():
    p = nn.ParamSet("mlp", {"W0": np.eye(3), "b0": np.zeros(3)})
    x = np.array([0.0, 1.5, 2.0])
    np.testing.assert_array_equal(nn.mlp_forward(p, x), x)


def test_pinned_mlp_fixture():
    # hand-evaluated: h = relu([2-1, 1+2-1]) = [1, 2]; q = 1 - 4 + 0.5
    p = nn.ParamSet("mlp", {
        "W0": [[1.0, -1.0], [0.5, 2.0]], "b0": [0.0, -1.0],
        "W1": [[1.0, -2.0]], "b1": [0.5],
    })
    assert nn.mlp_forward(p, np.array([2.0, 1.0]))[0] == pytest.approx(-2.5, abs=1e-15)


def test_gru_zero_weights_halve_hidden():
    p = small_gru(np.random.default_rng(1), h=5).zeros_like()
    h = np.random.default_rng(2).uniform(-1, 1, size=5)
    _, h2 = nn.gru_step(p, h, np.ones(3))
    np.testing.assert_array_equal(h2, h / 2)


def test_gru_zero_state_is_fixed_point():
    p = small_gru(np.random.default_rng(3))
    for b in ("bz", "br", "bh"):
        p[b] = np.zeros_like(p[b])
    _, h2 = nn.gru_step(p, np.zeros(4), np.zeros(3))
    np.testing.assert_array_equal(h2, np.zeros(4))


def test_pinned_gru_fixture():
    z = np.zeros((2, 2))
    p = nn.ParamSet("gru", {
        "Wz": [[1.0], [0.0]], "Uz": z, "bz": [0.0, 0.0],
        "Wr": [[0.0], [1.0]], "Ur": z, "br": [0.0, 0.0],
        "Wh": [[1.0], [-1.0]], "Uh": np.eye(2), "bh": [0.0, 0.0],
        "Wq": [[1.0, 1.0]], "bq": [0.0],
    })
    q, h = nn.gru_step(p, np.array([0.5, -0.5]), np.array([1.0]))
    np.testing.assert_allclose(h, [0.7546157427874238, -0.6888346534008736], rtol=1e-13)
    assert q[0] == pytest.approx(0.06578108938655025, rel=1e-12)


def test_gru_hidden_bounded_after_step():
    rng = np.random.default_rng(4)
    p = small_gru(rng)
    _, hs, _ = nn.gru_unroll(p, rng.normal(size=(6, 2, 3)))
    assert np.all(np.abs(hs) < 1)
    for name in p.names():
        p[name] = p[name] * 20
    # tanh saturates to exactly 1.0 in floating point
    _, hs, _ = nn.gru_unroll(p, rng.normal(size=(6, 2, 3)) * 10)
    assert np.all(np.abs(hs) <= 1)


def test_unroll_matches_repeated_steps():
    rng = np.random.default_rng(5)
    p = small_gru(rng)
    xs = rng.normal(size=(5, 2, 3))
    q, hs, _ = nn.gru_unroll(p, xs)
    h = np.zeros((2, 4))
    for t in range(5):
        qt, h = nn.gru_step(p, h, xs[t])
        np.testing.assert_allclose(qt, q[t], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(h, hs[t], rtol=1e-12, atol=1e-14)


def test_forward_is_pure():
    rng = np.random.default_rng(6)
    p = small_mlp(rng)
    x = rng.normal(size=(7, 4))
    a = nn.mlp_forward(p, x)
    b = nn.mlp_forward(p, x)
    assert a.tobytes() == b.tobytes()


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(7)
    p = small_gru(rng)
    q, _, tape = nn.gru_unroll(p, rng.normal(size=(3, 2, 3)))
    g = nn.backward(p, tape, np.zeros_like(q))
    assert all(np.all(v == 0) for v in g.arrays.values())


def test_linear_model_squared_loss_gradient():
    w = np.array([[0.3, -0.2, 0.5]])
    x = np.array([1.0, 2.0, -1.0])
    y = 0.7
    p = nn.ParamSet("mlp", {"W0": w, "b0": [0.0]})
    q, tape = nn.mlp_forward_tape(p, x)
    g = nn.backward(p, tape, np.array([2 * (q[0] - y)]))
    np.testing.assert_allclose(g["W0"][0], 2 * (w[0] @ x - y) * x, rtol=1e-14)


def test_tape_mismatch_is_rejected():
    rng = np.random.default_rng(8)
    p = small_mlp(rng)
    other = small_mlp(rng, hidden=(3, 3))
    _, tape = nn.mlp_forward_tape(p, np.ones(4))
    with pytest.raises(nn.ConfigError):
        nn.backward(other, tape, np.ones(3))


def test_input_width_mismatch_raises():
    p = small_mlp(np.random.default_rng(9))
    with pytest.raises(nn.ConfigError):
        nn.mlp_forward(p, np.ones(5))


def test_inconsistent_dims_rejected_at_construction():
    with pytest.raises(nn.ConfigError):
        nn.ParamSet("mlp", {"W0": np.ones((3, 2)), "b0": np.ones(3), "W1": np.ones((1, 4)), "b1": np.ones(1)})
    p = small_mlp(np.random.default_rng(10))
    with pytest.raises(nn.ConfigError):
        p["W0"] = np.ones((2, 2))


def _td_loss_mlp(p, x, u, y):
    return float((y - nn.mlp_forward(p, x)[np.arange(len(u)), u]) @ (y - nn.mlp_forward(p, x)[np.arange(len(u)), u]))


def _td_grads_mlp(p, x, u, y):
    q, tape = nn.mlp_forward_tape(p, x)
    up = np.zeros_like(q)
    up[np.arange(len(u)), u] = -2 * (y - q[np.arange(len(u)), u])
    return nn.backward(p, tape, up)


def test_grad_check_exact_for_affine_objective():
    rng = np.random.default_rng(11)
    p = nn.ParamSet("mlp", {"W0": rng.normal(size=(2, 3)), "b0": rng.normal(size=2)})
    c = rng.normal(size=(2, 3))

    def f(pp):
        return float(np.sum(c * pp["W0"]) + 3 * pp["b0"].sum())

    analytic = nn.ParamSet("mlp", {"W0": c, "b0": np.full(2, 3.0)})
    assert nn.grad_check(f, p, analytic) < 1e-8


def test_grad_check_detects_perturbed_gradient():
    rng = np.random.default_rng(12)
    p = small_mlp(rng)
    x, u, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5), rng.normal(size=5)
    g = _td_grads_mlp(p, x, u, y)
    bad = g.scaled(1.01)
    assert nn.grad_check(lambda pp: _td_loss_mlp(pp, x, u, y), p, bad) >= 1e-3


def test_grad_check_aborts_on_nonfinite():
    p = nn.ParamSet("mlp", {"W0": np.ones((1, 1)), "b0": np.zeros(1)})
    with pytest.raises(FloatingPointError):
        nn.grad_check(lambda pp: float("nan"), p, p.zeros_like())


@pytest.mark.parametrize("seed", range(20))
def test_mlp_td_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = small_mlp(rng)
    x, u, y = rng.normal(size=(4, 4)), rng.integers(0, 3, 4), rng.normal(size=4)
    g = _td_grads_mlp(p, x, u, y)
    assert nn.grad_check(lambda pp: _td_loss_mlp(pp, x, u, y), p, g) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_gru_bptt_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    p = small_gru(rng)
    xs = rng.normal(size=(3, 2, 3))
    u = rng.integers(0, 3, size=(3, 2))
    y = rng.normal(size=(3, 2))
    idx = np.arange(3)[:, None], np.arange(2)[None, :], u

    def f(pp):
        q, _, _ = nn.gru_unroll(pp, xs, keep_tape=False)
        return float(np.sum((y - q[idx]) ** 2))

    q, _, tape = nn.gru_unroll(p, xs)
    up = np.zeros_like(q)
    up[idx] = -2 * (y - q[idx])
    assert nn.grad_check(f, p, nn.backward(p, tape, up)) < 1e-4


def test_sgd_definition():
    p = nn.ParamSet("mlp", {"W0": [[1.0]], "b0": [0.0]})
    g = nn.ParamSet("mlp", {"W0": [[0.5]], "b0": [0.0]})
    nn.optimizer_step(p, g, nn.SGD(lr=0.1), lr=0.1)
    assert p["W0"][0, 0] == pytest.approx(0.95, abs=1e-15)


def test_rmsprop_zero_grads_only_decay_accumulators():
    rng = np.random.default_rng(13)
    p = small_mlp(rng)
    before = p.copy()
    opt = nn.RMSProp(lr=0.1)
    opt.step(p, p.scaled(0.1))
    after_first = p.copy()
    sq = {k: v.copy() for k, v in opt.sq.items()}
    opt.step(p, p.zeros_like())
    for k in p.names():
        np.testing.assert_array_equal(p[k], after_first[k])
        np.testing.assert_allclose(opt.sq[k], 0.99 * sq[k], rtol=1e-15)
    assert not np.array_equal(before["W0"], after_first["W0"])


def test_rmsprop_pinned_two_step_fixture():
    p = nn.ParamSet("mlp", {"W0": [[1.0]], "b0": [0.0]})
    opt = nn.RMSProp(lr=0.1, decay=0.99, damping=1e-6, clip_norm=None)
    opt.step(p, nn.ParamSet("mlp", {"W0": [[0.5]], "b0": [0.0]}))
    assert p["W0"][0, 0] == pytest.approx(0.00019994001999290578, rel=1e-10)
    opt.step(p, nn.ParamSet("mlp", {"W0": [[-0.2]], "b0": [0.0]}))
    assert p["W0"][0, 0] == pytest.approx(0.3731370103340937, rel=1e-12)
    assert opt.sq["W0"][0, 0] == pytest.approx(0.002875, rel=1e-12)


def test_nonfinite_gradients_rejected():
    p = nn.ParamSet("mlp", {"W0": [[1.0]], "b0": [0.0]})
    opt = nn.RMSProp()
    ok = opt.step(p, nn.ParamSet("mlp", {"W0": [[np.nan]], "b0": [0.0]}))
    assert not ok and opt.rejected == 1 and p["W0"][0, 0] == 1.0


def test_global_norm_clip():
    p = nn.ParamSet("mlp", {"W0": [[0.0, 0.0]], "b0": [0.0]})
    opt = nn.SGD(lr=1.0, clip_norm=10.0)
    opt.step(p, nn.ParamSet("mlp", {"W0": [[30.0, 40.0]], "b0": [0.0]}))
    np.testing.assert_allclose(p["W0"], [[-6.0, -8.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-5, 1.0))
def test_params_stay_finite_after_steps(seed, scale):
    rng = np.random.default_rng(seed)
    p = small_gru(rng)
    opt = nn.RMSProp(lr=1e-2)
    for _ in range(3):
        xs = rng.normal(size=(4, 2, 3)) / scale
        q, _, tape = nn.gru_unroll(p, xs)
        opt.step(p, nn.backward(p, tape, q / scale))
        assert p.is_finite()


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(14)
    sets = [small_mlp(rng), small_gru(rng), nn.init_mlp(3, (), 2, rng)]
    path = tmp_path / "ck.bin"
    nn.save_checkpoint(path, sets)
    loaded = nn.load_checkpoint(path)
    assert [p.kind for p in loaded] == ["mlp", "gru", "mlp"]
    for a, b in zip(sets, loaded):
        assert a.names() == b.names()
        for k in a.names():
            assert a[k].tobytes() == b[k].tobytes()
    nn.save_checkpoint(tmp_path / "again.bin", loaded)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    p = nn.ParamSet("mlp", {"W0": [[1.5, -2.0]], "b0": [0.25]})
    nn.save_checkpoint(tmp_path / "c.bin", [p])
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"IQLP"
    assert np.frombuffer(raw[-24:], "<f8").tolist() == [1.5, -2.0, 0.25]
