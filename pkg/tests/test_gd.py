import numpy as np
import pytest

from ekfrnn.data import Dataset
from ekfrnn.gd import (
    AdamState,
    adam_step,
    batch_index,
    batch_lengths,
    condensed_value_grad,
    partial_value_grad,
    relaxed_value,
    sgd_relaxed_step,
    train_gd,
)
from ekfrnn.models import RnnSpec, init_params, simulate
from ekfrnn.numerics import finite_diff_gradient
from ekfrnn.objectives import L2Reg, MSELoss, eval_objective


def _scalar_spec(a, b, c, d=0.0, causal=True):
    spec = RnnSpec(n_u=1, n_y=1, n_x=1, strictly_causal=causal)
    W_y = np.array([[c]]) if causal else np.array([[c, d]])
    theta = spec.flatten([(np.array([[a, b]]), np.zeros(1))], [(W_y, np.zeros(1))])
    return spec, theta


def _random_problem(seed, N=20, n_x=3):
    rng = np.random.default_rng(seed)
    spec = RnnSpec(n_u=2, n_y=2, n_x=n_x, hidden_x=(4,), hidden_y=(3,), act_x="tanh")
    theta = init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_theta)
    ds = Dataset.from_arrays(rng.standard_normal((N, 2)), rng.standard_normal((N, 2)))
    return rng, spec, theta, ds


def test_batch_lengths_default_split():
    assert batch_lengths(10, 3) == [4, 4, 2]
    assert batch_lengths(10, 1) == [10]
    assert batch_lengths(7, 7) == [1] * 7
    assert sum(batch_lengths(1000, 50)) == 1000
    with pytest.raises(ValueError):
        batch_lengths(10, 11)


def test_batch_index(oracle):
    assert batch_index([3, 3, 4], 1, 2) == oracle["k_ij_L334_j1_h2"]


def test_condensed_hand_chain_rule(oracle):
    o = oracle["condensed_N1"]
    spec, theta = _scalar_spec(0.0, 0.0, *o["theta_y"], causal=False)
    ds = Dataset.from_arrays(np.array([o["u"]]), np.array([o["y"]]))
    regs = (L2Reg(rho_theta=o["rho_theta"], rho_x=o["rho_x"]),)
    V, gx, gth = condensed_value_grad(spec, MSELoss(), regs, ds, np.array([o["x0"]]), theta)
    assert V == pytest.approx(o["V"], abs=1e-14)
    assert gx[0] == pytest.approx(o["dV_dx0"], abs=1e-14)
    np.testing.assert_allclose(gth[spec.n_theta_x:spec.n_theta_x + 2], o["dV_dtheta_y"], atol=1e-14)


def test_condensed_perfect_fit_only_regs():
    spec, theta = _scalar_spec(0.5, 1.0, 2.0)
    U = np.array([[1.0], [-0.5], [0.2], [0.0]])
    _, Y = simulate(spec, theta, np.array([0.3]), U)
    regs = (L2Reg(rho_theta=0.1),)
    V, gx, gth = condensed_value_grad(spec, MSELoss(), regs, Dataset.from_arrays(U, Y),
                                      np.array([0.3]), theta)
    assert V == pytest.approx(0.05 * theta @ theta, abs=1e-15)
    np.testing.assert_allclose(gx, 0.0, atol=1e-15)
    np.testing.assert_allclose(gth, 0.1 * theta, atol=1e-15)


def test_condensed_gradient_fd():
    for seed in range(5):
        rng, spec, theta, ds = _random_problem(seed)
        regs = (L2Reg(1e-2, 1e-2),)
        x0 = rng.standard_normal(spec.n_x)
        _, gx, gth = condensed_value_grad(spec, MSELoss(), regs, ds, x0, theta)
        fx = finite_diff_gradient(lambda v: condensed_value_grad(spec, MSELoss(), regs, ds, v, theta)[0], x0)
        ft = finite_diff_gradient(lambda v: condensed_value_grad(spec, MSELoss(), regs, ds, x0, v)[0], theta)
        np.testing.assert_allclose(gx, fx, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(gth, ft, rtol=1e-5, atol=1e-7)


def test_relaxed_hand_value(oracle):
    o = oracle["relaxed_N2"]
    spec, theta = _scalar_spec(o["a"], o["b"], o["c"])
    ds = Dataset.from_arrays(np.array(o["U"], dtype=float), np.array(o["Y"]))
    regs = (L2Reg(rho_theta=o["rho_theta"], rho_x=o["rho_x"]),)
    V = relaxed_value(spec, MSELoss(), regs, ds, np.array(o["X"])[:, None], theta, o["gamma"])
    assert V == pytest.approx(o["V"], abs=1e-14)


def test_relaxed_feasible_equals_condensed():
    rng, spec, theta, ds = _random_problem(1)
    x0 = rng.standard_normal(spec.n_x)
    X, _ = simulate(spec, theta, x0, ds.U)
    regs = (L2Reg(1e-2, 1e-3),)
    Vr = relaxed_value(spec, MSELoss(), regs, ds, X, theta, 3.0)
    Vc = eval_objective(MSELoss(), regs, ds, spec, theta, x0)
    assert Vr == pytest.approx(Vc, abs=1e-12)


def test_relaxed_linear_in_gamma():
    rng, spec, theta, ds = _random_problem(2)
    X = rng.standard_normal((ds.n_samples, spec.n_x))
    V0 = relaxed_value(spec, MSELoss(), (), ds, X, theta, 0.0)
    V1 = relaxed_value(spec, MSELoss(), (), ds, X, theta, 1.0)
    V2 = relaxed_value(spec, MSELoss(), (), ds, X, theta, 2.0)
    assert V2 - V1 == pytest.approx(V1 - V0, rel=1e-12)
    assert V1 > V0


def test_sgd_relaxed_hand_step(oracle):
    o, s = oracle["relaxed_N2"], oracle["sgd_relaxed_k0"]
    spec, theta = _scalar_spec(o["a"], o["b"], o["c"])
    regs = (L2Reg(rho_theta=o["rho_theta"], rho_x=o["rho_x"]),)
    xk, xn, th = sgd_relaxed_step(spec, MSELoss(), regs, 0, np.array([o["U"][0]]), np.array([o["Y"][0]]),
                                  np.array([o["X"][0]]), np.array([o["X"][1]]), theta, o["gamma"],
                                  s["alpha"], 2)
    assert xk[0] == pytest.approx(s["x_k"], abs=1e-14)
    assert xn[0] == pytest.approx(s["x_next"], abs=1e-14)
    # flat layout: a, b, bias_x, c, bias_y
    np.testing.assert_allclose(th[[0, 1, 3]], s["theta"], atol=1e-14)


def test_sgd_state_reg_only_at_first_sample():
    spec, theta = _scalar_spec(0.0, 0.0, 0.0)
    regs = (L2Reg(rho_x=1.0),)
    args = (np.zeros(1), np.zeros(1), np.array([2.0]), None, theta, 0.0, 0.5, 4)
    xk0, _, _ = sgd_relaxed_step(spec, MSELoss(), regs, 0, *args)
    xk1, _, _ = sgd_relaxed_step(spec, MSELoss(), regs, 1, *args)
    assert xk0[0] == pytest.approx(2.0 - 0.5 * 2.0 / 4)
    assert xk1[0] == 2.0


def test_sgd_stationary_point_is_fixed():
    spec, theta = _scalar_spec(0.5, 1.0, 2.0)
    x = np.array([0.4])
    u = np.array([0.3])
    y = spec.fy(x, u, spec.split(theta)[1])
    x_next = spec.fx(x, u, spec.split(theta)[0])
    xk, xn, th = sgd_relaxed_step(spec, MSELoss(), (), 3, u, y, x, x_next, theta, 5.0, 0.1, 10)
    np.testing.assert_array_equal(xk, x)
    np.testing.assert_array_equal(xn, x_next)
    np.testing.assert_array_equal(th, theta)


def test_partial_on_trajectory_equals_condensed():
    rng, spec, theta, ds = _random_problem(3, N=23)
    x0 = rng.standard_normal(spec.n_x)
    X, _ = simulate(spec, theta, x0, ds.U)
    Ls = batch_lengths(23, 5)
    anchors = X[np.cumsum([0] + Ls[:-1])]
    regs = (L2Reg(1e-2, 1e-2),)
    Vp, _, _ = partial_value_grad(spec, MSELoss(), regs, ds, anchors, theta, 7.0, M=5)
    Vc, _, _ = condensed_value_grad(spec, MSELoss(), regs, ds, x0, theta)
    assert Vp == pytest.approx(Vc, abs=1e-12)


def test_partial_gradient_fd():
    rng, spec, theta, ds = _random_problem(4, N=20)
    anchors = rng.standard_normal((4, spec.n_x))
    regs = (L2Reg(1e-2, 1e-2),)

    def V(a, th):
        return partial_value_grad(spec, MSELoss(), regs, ds, a, th, 2.0, M=4)[0]

    _, ga, gth = partial_value_grad(spec, MSELoss(), regs, ds, anchors, theta, 2.0, M=4)
    fa = finite_diff_gradient(lambda v: V(v.reshape(anchors.shape), theta), anchors.ravel())
    ft = finite_diff_gradient(lambda v: V(anchors, v), theta)
    np.testing.assert_allclose(ga.ravel(), fa, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(gth, ft, rtol=1e-5, atol=1e-7)


def test_partial_reductions():
    rng, spec, theta, ds = _random_problem(5, N=15)
    regs = (L2Reg(1e-2, 1e-2),)
    x0 = rng.standard_normal(spec.n_x)
    V1 = partial_value_grad(spec, MSELoss(), regs, ds, x0[None, :], theta, 3.0, M=1)[0]
    assert V1 == pytest.approx(condensed_value_grad(spec, MSELoss(), regs, ds, x0, theta)[0], abs=1e-10)
    X = rng.standard_normal((15, spec.n_x))
    VN = partial_value_grad(spec, MSELoss(), regs, ds, X, theta, 3.0, M=15)[0]
    assert VN == pytest.approx(relaxed_value(spec, MSELoss(), regs, ds, X, theta, 3.0), abs=1e-10)


def test_adam_zero_gradient():
    state = AdamState(lr=0.1)
    p = np.array([1.0, -2.0])
    np.testing.assert_array_equal(adam_step(state, p, np.zeros(2)), p)


def test_adam_first_step(oracle):
    o = oracle["adam_step1"]
    state = AdamState(lr=o["lr"])
    new = adam_step(state, np.zeros(1), np.array([o["grad"]]))
    assert new[0] == pytest.approx(o["displacement"], rel=1e-12)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step(AdamState(lr=0.1), np.zeros(2), np.zeros(3))


def test_condensed_converges_to_least_squares():
    rng = np.random.default_rng(11)
    spec = RnnSpec(n_u=2, n_y=1, n_x=0)
    U = rng.standard_normal((30, 2))
    Y = U @ np.array([0.7, -1.2]) + 0.3 + 0.05 * rng.standard_normal(30)
    res = train_gd(Dataset.from_arrays(U, Y), spec, epochs=500, lr=0.02, rng=rng)
    Phi = np.hstack([U, np.ones((30, 1))])
    ls = np.linalg.lstsq(Phi, Y, rcond=None)[0]
    np.testing.assert_allclose(res.theta, ls, atol=1e-3)


def test_partial_m1_matches_condensed_log():
    _, spec, theta, ds = _random_problem(6, N=25)
    a = train_gd(ds, spec, "condensed", epochs=8, lr=0.01, theta0=theta)
    b = train_gd(ds, spec, "partial", M=1, epochs=8, lr=0.01, theta0=theta)
    np.testing.assert_allclose([r["objective"] for r in a.log], [r["objective"] for r in b.log],
                               rtol=1e-12)
    assert len(a.log) == 8


def test_determinism_and_modes():
    _, spec, theta, ds = _random_problem(7, N=25)
    for mode, opt in (("condensed", "adam"), ("partial", "adam"), ("relaxed", "adam"),
                      ("relaxed", "sgd")):
        r1 = train_gd(ds, spec, mode, opt, epochs=3, lr=1e-3, M=5, theta0=theta)
        r2 = train_gd(ds, spec, mode, opt, epochs=3, lr=1e-3, M=5, theta0=theta)
        np.testing.assert_array_equal(r1.theta, r2.theta)
        assert len(r1.log) == 3
    with pytest.raises(ValueError):
        train_gd(ds, spec, "newton", epochs=1)
