import numpy as np
import pytest
import torch

from shwmpc.baseline import (BaselineProblem, DenseNnModel, baseline_fit, baseline_mpc_solve, baseline_sweep,
                             dense_param_count, first_input_grid_search, fold_map, one_step_pairs,
                             width_for_params)
from shwmpc.errors import NonConvergenceError
from shwmpc.ident import TimeSeriesDataset
from shwmpc.ocp import make_instance, solve
from shwmpc.shw import ShwArch, ShwModel

R_FOLD = 1.2


def test_param_count_formula():
    m = DenseNnModel(3, 3, 2, 1, hidden=7)
    assert m.n_params() == dense_param_count(3, 3, 2, 1, 7) == 7 * 9 + 4 * 8
    assert width_for_params(3, 3, 2, 1, dense_param_count(3, 3, 2, 1, 40)) == 40


def test_one_step_pairs_stride():
    t = 0.05 * np.arange(6)
    ds = TimeSeriesDataset(t, np.arange(6.0), np.zeros(6), 10 + np.arange(6.0), 20 + np.arange(6.0))
    X, Y = one_step_pairs(ds, 0.1)
    assert np.array_equal(X[:, 0], [10, 11, 12, 13]) and np.array_equal(Y[:, 0], [12, 13, 14, 15])
    assert np.array_equal(Y[:, 1], [20, 21, 22, 23])
    with pytest.raises(ValueError):
        one_step_pairs(ds, 0.125)


def test_zero_epoch_fit_returns_initial_model():
    rng = np.random.default_rng(0)
    n = 50
    ds = TimeSeriesDataset(0.1 * np.arange(n), rng.normal(size=n), rng.normal(size=n), rng.normal(size=n),
                           rng.normal(size=n))
    m, rep = baseline_fit(ds, hidden=5, epochs=0)
    ref = DenseNnModel(1, 1, 1, 1, 5)
    assert all(torch.equal(a, b) for a, b in zip(m.parameters(), ref.parameters()))
    assert np.isfinite(rep["train_loss"]) and rep["history"] == []


def test_linear_data_fit():
    rng = np.random.default_rng(1)
    n = 1500
    u, d = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
    y = np.zeros(n)
    for k in range(n - 1):
        y[k + 1] = 0.5 * y[k] + 0.3 * u[k] + 0.1 * d[k]
    ds = TimeSeriesDataset(0.1 * np.arange(n), u, d, y, 0.2 * y - 0.1 * u)
    _, rep = baseline_fit(ds, hidden=8, epochs=40, polish_iters=200)
    assert min(rep["val_r2"]) > 0.999


def test_unknown_activation():
    with pytest.raises(ValueError):
        DenseNnModel(1, 1, 1, 1, activation="relu")


def test_rollout_matches_repeated_forward():
    m = DenseNnModel(2, 2, 1, 1, hidden=4)
    U = np.array([[0.1, -0.2], [0.3, 0.4], [-0.5, 0.0]])
    Y, Z = m.rollout(np.array([0.2, 0.1]), torch.tensor(U), np.array([0.5]))
    y = torch.tensor([0.2, 0.1], dtype=torch.float64)
    for k in range(3):
        y_next, z = m(y, U[k], [0.5])
        assert torch.allclose(Z[k], z) and torch.allclose(Y[k], y_next)
        y = y_next


def linear_pair(delta=0.1):
    """A structured model with identity maps and its exact dense linear counterpart."""
    A = np.array([[-1.0, 0.3], [0.0, -0.6]])
    B = np.array([[1.0, 0.2], [0.1, 0.8]])
    c = np.array([0.05, -0.1])
    shw = ShwModel(ShwArch(n_u=2, n_z=1, n_d=1, delta=delta), seed=0)
    shw.psi.set_identity()
    shw.phi.set_identity()
    shw.dyn.set_constant(A, B, c)
    shw.xi.zero_()
    dm = shw.discretize([0.0])
    dense = DenseNnModel(2, 2, 1, 1, hidden=5, activation="linear", delta=delta)
    with torch.no_grad():
        dense.W1.copy_(torch.eye(5, dtype=torch.float64))
        dense.b1.zero_()
        W2 = np.zeros((3, 5))
        W2[:2, :2], W2[:2, 2:4] = dm.A_d, dm.B_d
        dense.W2.copy_(torch.tensor(W2))
        dense.b2.copy_(torch.tensor([*dm.c_d, 0.0]))
    return shw, dense


@pytest.mark.parametrize("box", [5.0, 0.3])
def test_linear_inner_model_matches_convex_solver(box):
    shw, dense = linear_pair()
    y0, r = np.array([0.4, -0.3]), np.array([-0.2, 0.5])
    inst = make_instance(shw, y0, [0.0], r, 6, -box, box)
    ocp_sol = solve(inst)
    U, info = baseline_mpc_solve(BaselineProblem(dense, y0, [0.0], r, 6, -box, box), "mid", tol=1e-10)
    assert np.max(np.abs(U - ocp_sol.U)) <= 1e-6
    assert info["objective"] == pytest.approx(ocp_sol.objective, rel=1e-8, abs=1e-12)


def test_iteration_cap():
    shw, dense = linear_pair()
    prob = BaselineProblem(dense, [0.4, -0.3], [0.0], [-0.2, 0.5], 6, -5, 5)
    with pytest.raises(NonConvergenceError):
        baseline_mpc_solve(prob, "lower", tol=1e-14, max_iter=1)


def test_fold_fixture_fit(fold_model):
    _, rep = fold_model
    assert min(rep["val_r2"]) > 0.9999


def test_fold_two_kkt_points(fold_model):
    model, _ = fold_model
    prob = BaselineProblem(model, [0.0], [0.0], [R_FOLD], 1, -1.0, 1.0)
    U_mid, a = baseline_mpc_solve(prob, "mid")
    U_low, b = baseline_mpc_solve(prob, "lower")
    assert a["kkt_residual"] <= 1e-6 and b["kkt_residual"] <= 1e-6
    assert abs(U_mid[0] - U_low[0]) / 2.0 >= 0.1
    # lower point: on its bound with a nonnegative lower-bound multiplier
    assert U_low[0] == -1.0 and b["lam"][0] > 0 and b["lam"][1] == 0
    assert U_mid[0] == 1.0 and a["lam"][1] > 0
    u_best, f_best, grid, vals = first_input_grid_search(prob)
    assert abs(u_best - U_mid[0]) <= grid[1] - grid[0]
    assert a["objective"] <= f_best + 1e-9 < b["objective"]


def test_fold_map_has_turning_point():
    u = np.linspace(-1, 1, 2001)
    assert u[np.argmin(fold_map(u))] == pytest.approx(-0.075, abs=1e-3)


def test_fold_sweep_disagrees(fold_model):
    model, _ = fold_model
    t = baseline_sweep(model, [0.0], [R_FOLD], [0.0], 0, np.linspace(-1, 1, 5), ["mid", "lower"], 1, -1.0, 1.0)
    assert np.max(t.disagreement) / 2.0 > 0.05
