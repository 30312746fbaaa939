"""LQR tracking around a steady state plus a control-barrier-function filter.

The nominal law ``v = v_bar + K (x - x_bar)`` with ``K = -B^T P`` comes
from a Riccati equation in the latent coordinates. At each sample a
small QP projects it onto the set of inputs that keep every constraint
output below its ceiling (for constraint outputs depending on x only).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InfeasibleError, NotRealizableError, PreconditionError
from .linalg import box_qp, solve_care
from .nets import as_tensor, to_numpy
from .shw import ShwArch, ShwModel


@dataclass(frozen=True)
class Equilibrium:
    x_bar: np.ndarray
    v_bar: np.ndarray
    u_bar: np.ndarray
    d_bar: np.ndarray
    r_bar: np.ndarray


def find_equilibrium(m: ShwModel, d_bar, r_bar, u_lower=-np.inf, u_upper=np.inf) -> Equilibrium:
    """Steady state with output ``r_bar``: ``x = Phi(r)``, ``v = -B^{-1}(A x + c)``."""
    d_bar = np.asarray(d_bar, dtype=float)
    r_bar = np.asarray(r_bar, dtype=float)
    A, B, c = m.dynamics_matrices(d_bar)
    x_bar = m.to_x(r_bar, d_bar)
    try:
        v_bar = -np.linalg.solve(B, A @ x_bar + c)
    except np.linalg.LinAlgError as exc:
        raise NotRealizableError("input matrix singular at the requested disturbance") from exc
    u_bar = m.to_u(v_bar, d_bar)
    lo = np.broadcast_to(u_lower, u_bar.shape)
    hi = np.broadcast_to(u_upper, u_bar.shape)
    if not np.all(np.isfinite(u_bar)) or np.any(u_bar < lo) or np.any(u_bar > hi):
        raise NotRealizableError(f"steady-state input {u_bar} lies outside the input box")
    return Equilibrium(x_bar, v_bar, u_bar, d_bar, r_bar)


@dataclass
class CbfController:
    eq: Equilibrium
    P: np.ndarray
    K: np.ndarray
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    gamma: np.ndarray
    z_ceiling: np.ndarray
    v_lower: np.ndarray
    v_upper: np.ndarray
    convention: str = "standard"

    def nominal(self, x) -> np.ndarray:
        return self.eq.v_bar + self.K @ (np.asarray(x, dtype=float) - self.eq.x_bar)


def make_controller(m: ShwModel, d_bar, r_bar, u_lower, u_upper, z_ceiling=None, gamma=None,
                    Q=None, convention: str = "standard") -> CbfController:
    """Riccati gain around the steady state for ``r_bar`` plus the barrier data.

    ``convention="standard"`` uses the quadratic term ``P B B^T P`` that makes
    ``K = -B^T P`` the optimal gain; ``"printed"`` uses ``P B^T B P``.
    """
    n_u, n_y, n_z, _ = m.dims
    u_lower = np.broadcast_to(np.asarray(u_lower, dtype=float), (n_u,)).copy()
    u_upper = np.broadcast_to(np.asarray(u_upper, dtype=float), (n_u,)).copy()
    eq = find_equilibrium(m, d_bar, r_bar, u_lower, u_upper)
    A, B, c = m.dynamics_matrices(eq.d_bar)
    Q = np.eye(n_y) if Q is None else np.asarray(Q, dtype=float)
    P = solve_care(A, B, Q, convention)
    gamma = np.ones(n_z) if gamma is None else np.broadcast_to(np.asarray(gamma, dtype=float), (n_z,)).copy()
    if np.any(gamma <= 0):
        raise ValueError("barrier gains must be positive")
    z_ceiling = np.full(n_z, np.inf) if z_ceiling is None else np.broadcast_to(
        np.asarray(z_ceiling, dtype=float), (n_z,)).copy()
    v_lo, v_hi = m.v_bounds(u_lower, u_upper, eq.d_bar)
    return CbfController(eq, P, -B.T @ P, A, B, c, gamma, z_ceiling, v_lo, v_hi, convention)


def state_only(m: ShwModel) -> ShwModel:
    """Copy of ``m`` whose constraint network ignores the input ``v``."""
    out = copy.deepcopy(m)
    n_u, n_y = m.dims[:2]
    out.arch = ShwArch.from_dict({**m.arch.to_dict(), "z_state_only": True})
    out.xi.mask_inputs([True] * n_y + [False] * n_u)
    return out


def _is_state_only(m: ShwModel) -> bool:
    n_y = m.dims[1]
    return bool(torch.all(m.xi.input_mask[n_y:] == 0))


def barrier_rows(ctrl: CbfController, m: ShwModel, x):
    """Rows ``a_i v <= b_i`` of the barrier condition ``dXi_i/dt <= gamma_i (zbar_i - Xi_i)``."""
    n_u = m.dims[0]
    x = np.asarray(x, dtype=float)
    xv = np.concatenate([x, np.zeros(n_u)])
    with torch.no_grad():
        Zt, Jt, _ = m.xi.derivatives(as_tensor(xv), as_tensor(ctrl.eq.d_bar), 1)
    Z = to_numpy(Zt)
    Jx = to_numpy(Jt)[:, : len(x)]
    on = np.isfinite(ctrl.z_ceiling)
    G = Jx[on] @ ctrl.B
    h = ctrl.gamma[on] * (ctrl.z_ceiling[on] - Z[on]) - Jx[on] @ (ctrl.A @ x + ctrl.c)
    return G, h, Z


@dataclass
class FilterResult:
    u: np.ndarray
    v: np.ndarray
    v_nominal: np.ndarray
    z: np.ndarray
    active: np.ndarray  # per barrier row


def cbf_filter_step(ctrl: CbfController, m: ShwModel, x) -> FilterResult:
    """Closest input to the LQR law that satisfies the barrier rows and the input box."""
    if not _is_state_only(m):
        raise PreconditionError("barrier filter needs a constraint network that ignores v (see state_only)")
    v_nom = ctrl.nominal(x)
    G, h, Z = barrier_rows(ctrl, m, x)
    n = len(v_nom)
    try:
        qp = box_qp(np.eye(n), -v_nom, ctrl.v_lower, ctrl.v_upper, G if len(h) else None, h if len(h) else None)
    except InfeasibleError as exc:
        raise InfeasibleError(f"admissible input set is empty at x={x}: {exc}", exc.rows) from exc
    v = qp.x
    active = qp.lam_ineq > 0 if len(h) else np.zeros(0, dtype=bool)
    return FilterResult(m.to_u(v, ctrl.eq.d_bar), v, v_nom, Z, active)


@dataclass
class CbfTrajectory:
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray  # per fine step (held value)
    v: np.ndarray
    active: np.ndarray
    max_violation: float
    info: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            nx, nu, nz = self.x.shape[1], self.u.shape[1], self.z.shape[1]
            na = self.active.shape[1] if self.active.ndim == 2 else 0
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(nx)] + [f"u_{i + 1}" for i in range(nu)]
                       + [f"v_{i + 1}" for i in range(nu)] + [f"z_{i + 1}" for i in range(nz)]
                       + [f"active_{i + 1}" for i in range(na)])
            for k in range(len(self.t)):
                w.writerow([repr(float(self.t[k]))] + [repr(float(a)) for a in self.x[k]]
                           + [repr(float(a)) for a in self.u[k]] + [repr(float(a)) for a in self.v[k]]
                           + [repr(float(a)) for a in self.z[k]]
                           + ([int(a) for a in self.active[k]] if na else []))


def cbf_closed_loop(ctrl: CbfController, m: ShwModel, x0, steps: int, substeps: int = 100,
                    filtered: bool = True) -> CbfTrajectory:
    """Simulate the latent ODE under the filtered law.

    The law is evaluated every ``m.delta`` and held; RK4 runs with step
    ``m.delta / substeps``. ``steps`` counts control samples, so the
    trajectory has ``steps * substeps`` integration steps. Constraint
    outputs are monitored on the fine grid.
    """
    x = np.asarray(x0, dtype=float).copy()
    d_t = as_tensor(ctrl.eq.d_bar)
    on = np.isfinite(ctrl.z_ceiling)

    def z_of(xs):
        n_u = m.dims[0]
        xs = np.atleast_2d(xs)
        xv = np.concatenate([xs, np.zeros((len(xs), n_u))], axis=1)
        with torch.no_grad():
            return to_numpy(m.xi(as_tensor(xv), d_t))

    z0 = z_of(x)[0]
    if np.any(z0[on] > ctrl.z_ceiling[on]):
        raise PreconditionError(f"initial constraint output {z0} already exceeds the ceiling")
    h = m.delta / substeps
    A, B, c = ctrl.A, ctrl.B, ctrl.c
    total = steps * substeps
    X = np.empty((total + 1, len(x)))
    U = np.empty((total + 1, B.shape[1]))
    Vs = np.empty_like(U)
    act = np.zeros((total + 1, int(on.sum())), dtype=bool)
    X[0] = x
    for k in range(steps):
        if filtered:
            res = cbf_filter_step(ctrl, m, x)
            v, u, a = res.v, res.u, res.active
        else:
            v = ctrl.nominal(x)
            u, a = m.to_u(v, ctrl.eq.d_bar), np.zeros(int(on.sum()), dtype=bool)
        bv = B @ v + c
        for j in range(substeps):
            i = k * substeps + j
            U[i], Vs[i], act[i] = u, v, a
            k1 = A @ x + bv
            k2 = A @ (x + 0.5 * h * k1) + bv
            k3 = A @ (x + 0.5 * h * k2) + bv
            k4 = A @ (x + h * k3) + bv
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            X[i + 1] = x
    U[-1], Vs[-1], act[-1] = U[-2], Vs[-2], act[-2]
    Z = z_of(X)
    viol = float(np.max(Z[:, on] - ctrl.z_ceiling[on])) if on.any() else -np.inf
    t = h * np.arange(total + 1)
    return CbfTrajectory(t, X, Z, U, Vs, act, viol, {"substeps": substeps, "h": h})


def lyapunov_derivative(ctrl: CbfController, x) -> float:
    """``d/dt (x - xbar)^T P (x - xbar)`` along the unconstrained LQR loop."""
    e = np.asarray(x, dtype=float) - ctrl.eq.x_bar
    Acl = ctrl.A + ctrl.B @ ctrl.K
    return float(e @ (Acl.T @ ctrl.P + ctrl.P @ Acl) @ e)


def integrator_toy(delta: float = 0.1) -> ShwModel:
    """One-dimensional model ``dx/dt = v`` with identity maps and ``z = x``."""
    arch = ShwArch(n_u=1, n_z=1, n_d=1, delta=delta, psi_depth=1, phi_depth=1, bnn_width=4,
                   picnn_hidden=[4], dyn_width=4, z_final="linear", z_state_only=True)
    m = ShwModel(arch, seed=0)
    m.psi.set_identity()
    m.phi.set_identity()
    m.dyn.set_constant([[0.0]], [[1.0]], [0.0])
    with torch.no_grad():
        m.xi.zero_()
        m.xi.w_xi[-1].copy_(torch.tensor([[1.0, 0.0]]))
        m.xi.b_xi_eta[-1].fill_(1.0)
    m.xi.mask_inputs([True, False])
    return m
