import numpy as np
import pytest
import torch

from shwmpc.errors import ConditioningError, DimensionError, ModelUnsuitableError
from shwmpc.nets import as_tensor, to_numpy
from shwmpc.ocp import build_stacked
from shwmpc.shw import (DiscreteModel, ShwArch, ShwModel, check_structure, simulate_continuous,
                        simulate_discrete)


def random_model(seed=0, std=0.3, **kw):
    return ShwModel(ShwArch(**kw), init_std=std, seed=seed)


def identity_model_1d():
    m = ShwModel(ShwArch(n_u=1, n_z=1, n_d=1, psi_depth=1, phi_depth=1, bnn_width=4, picnn_hidden=[4],
                         dyn_width=4), seed=0)
    m.psi.set_identity()
    m.phi.set_identity()
    m.dyn.set_constant([[0.0]], [[1.0]], [0.0])
    m.xi.zero_()
    return m


def test_identity_eval_outputs():
    m = identity_model_1d()
    with torch.no_grad():
        v, y, z = m.eval_outputs(as_tensor([0.4]), as_tensor([-0.3]), as_tensor([1.0]))
    assert float(v) == pytest.approx(-0.3, abs=1e-14)
    assert float(y) == pytest.approx(0.4, abs=1e-14)
    assert float(z) == pytest.approx(np.log(2), abs=1e-14)


def test_identity_residual_by_hand():
    m = identity_model_1d()
    u, d, y, z, ydot, ddot = [0.25], [0.3], [0.1], [1.0], [0.7], [0.2]
    with torch.no_grad():
        e = to_numpy(m.residual(u, d, y, z, ydot, ddot))
    assert np.allclose(e, [0.7 - 0.25, 1.0 - np.log(2)], atol=1e-14)


def test_residual_affine_in_ydot(rng):
    m = random_model(1)
    args = [rng.normal(size=n) for n in (3, 2, 3, 1, 3, 2)]
    with torch.no_grad():
        e0 = to_numpy(m.residual(*args))
        args[4] = args[4] + np.array([0.5, 0.0, -0.25])
        e1 = to_numpy(m.residual(*args))
    assert np.allclose(e1 - e0, [0.5, 0.0, -0.25, 0.0], atol=1e-13)


def test_residual_zero_on_model_generated_trajectory():
    """Pick smooth y(t), d(t); recover the input that produces them; the residual must vanish.

    The state derivative comes from a five-point finite-difference stencil on
    x(t) = Phi(y(t); d(t)), independent of the residual's analytic Jacobian path.
    """
    m = random_model(2, std=0.2)
    ts = np.linspace(0.1, 3.0, 25)
    y_of = lambda t: np.stack([0.5 * np.sin(t), 0.3 * np.cos(2 * t), 0.2 * t - 0.3], -1)  # noqa: E731
    d_of = lambda t: np.stack([np.sin(0.7 * t), 0.5 * np.cos(t)], -1)  # noqa: E731
    ydot = np.stack([0.5 * np.cos(ts), -0.6 * np.sin(2 * ts), np.full_like(ts, 0.2)], -1)
    ddot = np.stack([0.7 * np.cos(0.7 * ts), -0.5 * np.sin(ts)], -1)
    x_of = lambda t: m.to_x(y_of(t), d_of(t))  # noqa: E731
    h = 1e-3
    xdot = (-x_of(ts + 2 * h) + 8 * x_of(ts + h) - 8 * x_of(ts - h) + x_of(ts - 2 * h)) / (12 * h)
    A, B, c = (to_numpy(a) for a in m.dyn(as_tensor(d_of(ts))))
    x = x_of(ts)
    v = np.linalg.solve(B, (xdot - np.einsum("bij,bj->bi", A, x) - c)[..., None])[..., 0]
    u = m.to_u(v, d_of(ts))
    z = m.z_of(x, v, d_of(ts))
    with torch.no_grad():
        e = to_numpy(m.residual(u, d_of(ts), y_of(ts), z, ydot, ddot))
    assert np.max(np.abs(e)) <= 1e-8


def test_residual_singular_jacobian_names_record():
    m = random_model(3)
    with torch.no_grad():
        m.phi.layers[0].omega_net.set_constant(np.zeros(9))
    with pytest.raises(ConditioningError):
        m.residual(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((2, 3)),
                   np.zeros((2, 2)))


def test_residual_dimension_check():
    m = random_model(4)
    with pytest.raises(DimensionError):
        m.residual(np.zeros(2), np.zeros(2), np.zeros(3), np.zeros(1), np.zeros(3), np.zeros(2))


def test_output_roundtrip(rng):
    m = random_model(5)
    x, d = rng.normal(size=(50, 3)), rng.normal(size=(50, 2))
    assert np.max(np.abs(m.to_x(m.to_y(x, d), d) - x)) < 1e-9


def test_discretize_matches_exponential(rng):
    import scipy.linalg

    m = random_model(6)
    d = rng.normal(size=2)
    A, B, c = m.dynamics_matrices(d)
    dm = m.discretize(d)
    assert np.allclose(dm.A_d, scipy.linalg.expm(A * m.delta), atol=1e-12)
    assert np.array_equal(dm.d_ref, d)


def test_singular_discrete_input_matrix():
    with pytest.raises(ModelUnsuitableError, match="det"):
        DiscreteModel(np.eye(2), np.array([[1.0, 2.0], [2.0, 4.0]]), np.zeros(2), np.zeros(1))


def test_simulate_discrete_one_step_identity():
    m = ShwModel(ShwArch(n_u=2, n_z=1, n_d=1), seed=0)
    m.psi.set_identity()
    m.phi.set_identity()
    A = np.array([[-1.0, 0.2], [0.0, -0.5]])
    m.dyn.set_constant(A, np.eye(2), [0.1, -0.1])
    dm = m.discretize([0.0])
    x0, u0 = np.array([0.3, -0.2]), np.array([0.5, 0.1])
    X, Y, Z = simulate_discrete(dm, m, x0, u0[None], [0.0])
    assert np.allclose(X[1], dm.A_d @ x0 + dm.B_d @ u0 + dm.c_d, atol=1e-14)
    assert np.allclose(Y, X, atol=1e-14)
    assert Z.shape == (1, 1)


def test_simulate_discrete_zero_dynamics():
    m = ShwModel(ShwArch(n_u=2, n_z=1, n_d=1), seed=0)
    m.psi.set_identity()
    m.phi.set_identity()
    c = np.array([0.2, -0.4])
    m.dyn.set_constant(np.zeros((2, 2)), np.eye(2), c)
    dm = m.discretize([0.0])
    X, _, _ = simulate_discrete(dm, m, np.zeros(2), np.zeros((5, 2)), [0.0])
    assert np.allclose(X, np.arange(6)[:, None] * dm.c_d, atol=1e-14)


def test_simulate_discrete_matches_stacked_form(rng):
    m = random_model(7)
    d = rng.normal(size=2)
    dm = m.discretize(d)
    S = build_stacked(dm, 5)
    x0 = rng.normal(size=3)
    for _ in range(100):
        U = rng.uniform(-1, 1, (5, 3))
        X, _, _ = simulate_discrete(dm, m, x0, U, d)
        V = m.to_v(U, d).reshape(-1)
        assert np.max(np.abs(S.A_bar @ x0 + S.B_bar @ V + S.c_bar - X[1:].reshape(-1))) < 1e-10


def test_discrete_agrees_with_fine_integration(teacher, rng):
    d = np.array([0.2, -0.3])
    dm = teacher.discretize(d)
    x0 = teacher.to_x(np.array([0.1, -0.2, 0.3]), d)
    U = rng.uniform(-1, 1, (20, 3))
    Xd, _, _ = simulate_discrete(dm, teacher, x0, U, d)
    Xc = simulate_continuous(teacher, x0, U, d, substeps=100)
    assert np.max(np.abs(Xd - Xc)) <= 1e-4 * np.max(np.abs(Xc))


def test_structure_certificate_over_disturbances(rng):
    m = random_model(8, std=0.3)
    for d in rng.normal(size=(100, 2)):
        cert = check_structure(m, d, n_probe=20)
        assert cert["psi_roundtrip"] < 1e-9
        assert cert["phi_roundtrip"] < 1e-9
        assert cert["jensen_violation"] <= 1e-10


def test_v_bounds_follow_monotone_direction():
    m = ShwModel(ShwArch(), seed=0)
    m.psi.set_affine(np.array([2.0, -1.0, 0.5]))
    lo, hi = m.v_bounds(-np.ones(3), np.ones(3), np.zeros(2))
    assert np.allclose(lo, [-2.0, -1.0, -0.5]) and np.allclose(hi, [2.0, 1.0, 0.5])


def test_arch_roundtrip_dict():
    a = ShwArch(n_u=2, picnn_hidden=[8, 4], z_state_only=True)
    assert ShwArch.from_dict(a.to_dict()) == a
