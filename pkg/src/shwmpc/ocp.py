"""Convex finite-horizon tracking problem in the transformed input ``V``.

With ``V = [v_0; ...; v_{n-1}]`` the predicted states are affine,
``X = Abar x0 + Bbar V + cbar``, so the tracking term is a strictly convex
quadratic, the soft constraint penalty is convex through the PICNN, and the
input box maps to a box on ``V`` through the diagonal input map. The solver
is a projected Newton method; a Fischer-Burmeister residual certifies the
KKT conditions of the result.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import ConditioningError, NonConvergenceError
from .linalg import box_qp, cholesky_pd
from .nets import as_tensor, to_numpy
from .shw import DiscreteModel, ShwModel


@dataclass(frozen=True)
class StackedAffine:
    A_bar: np.ndarray
    B_bar: np.ndarray
    c_bar: np.ndarray


def build_stacked(dm: DiscreteModel, n: int) -> StackedAffine:
    """Horizon-wide affine map ``X = A_bar x0 + B_bar V + c_bar`` (X excludes x0)."""
    if n < 1:
        raise ValueError("horizon must be >= 1")
    Ad, Bd, cd = dm.A_d, dm.B_d, dm.c_d
    ny, nu = Bd.shape
    powers = [np.eye(ny)]
    for _ in range(n):
        powers.append(Ad @ powers[-1])
    A_bar = np.vstack(powers[1:])
    B_bar = np.zeros((n * ny, n * nu))
    blocks = [P @ Bd for P in powers[:n]]
    for i in range(n):
        for j in range(i + 1):
            B_bar[i * ny:(i + 1) * ny, j * nu:(j + 1) * nu] = blocks[i - j]
    c_bar = np.zeros(n * ny)
    acc = np.zeros(ny)
    for k in range(n):
        acc = acc + powers[k] @ cd
        c_bar[k * ny:(k + 1) * ny] = acc
    return StackedAffine(A_bar, B_bar, c_bar)


def build_q(m: ShwModel, x0, d_bar, n: int) -> np.ndarray:
    """``I_n kron Q0`` with ``Q0 = (dPhi^{-1}/dx)^T (dPhi^{-1}/dx)`` at ``x0``."""
    y0 = m.to_y(x0, d_bar)
    with torch.no_grad():
        J = to_numpy(m.phi.jacobian(as_tensor(y0), as_tensor(d_bar)))
    if abs(np.linalg.det(J)) <= 1e-12:
        raise ConditioningError("output-map Jacobian singular at the initial state")
    Jinv = np.linalg.inv(J)
    Q0 = Jinv.T @ Jinv
    Q0 = 0.5 * (Q0 + Q0.T)
    cholesky_pd(Q0)
    return np.kron(np.eye(n), Q0)


def fb(a, b):
    """Fischer-Burmeister function ``a + b - sqrt(a^2 + b^2)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a + b - np.hypot(a, b)


@dataclass
class OcpInstance:
    model: ShwModel
    dm: DiscreteModel
    x0: np.ndarray
    d_bar: np.ndarray
    r_bar: np.ndarray
    horizon: int
    Q: np.ndarray
    v_lower: np.ndarray
    v_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    z_ceiling: np.ndarray
    z_weight: np.ndarray
    input_cost: Callable | None = None
    stacked: StackedAffine = field(init=False)
    x_ref: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        cholesky_pd(self.Q)
        if np.any(self.v_lower >= self.v_upper):
            raise ValueError("v bounds must satisfy lower < upper")
        self.stacked = build_stacked(self.dm, self.horizon)
        self.x_ref = self.model.to_x(self.r_bar, self.d_bar)
        n, nu, ny = self.horizon, self.n_u, self.n_y
        S = self.stacked
        # Maps V to the stage states x_0..x_{n-1} and inputs v_0..v_{n-1}.
        Bx = np.zeros((n * ny, n * nu))
        Bx[ny:] = S.B_bar[:-ny]
        self._stage_x_lin = Bx.reshape(n, ny, n * nu)
        const = np.concatenate([self.x0, (S.A_bar @ self.x0 + S.c_bar)[:-ny]])
        self._stage_x_const = const.reshape(n, ny)
        self._stage_v_lin = np.eye(n * nu).reshape(n, nu, n * nu)
        self._L = np.concatenate([self._stage_x_lin, self._stage_v_lin], axis=1)
        self._track_H = 2.0 * S.B_bar.T @ self.Q @ S.B_bar
        self._track_off = S.A_bar @ self.x0 + S.c_bar - np.tile(self.x_ref, n)
        self._lo = np.tile(self.v_lower, n)
        self._hi = np.tile(self.v_upper, n)
        self._d_t = as_tensor(self.d_bar)

    @property
    def n_u(self) -> int:
        return self.dm.B_d.shape[1]

    @property
    def n_y(self) -> int:
        return self.dm.B_d.shape[0]

    @property
    def n_vars(self) -> int:
        return self.horizon * self.n_u

    @property
    def bounds(self):
        return self._lo, self._hi

    @property
    def soft_z(self) -> bool:
        return bool(np.any(self.z_weight > 0))

    def stage_inputs(self, V):
        """Stage states and inputs fed to the constraint network, shape ``(n, n_y + n_u)``."""
        xs = self._stage_x_const + self._stage_x_lin @ V
        vs = V.reshape(self.horizon, self.n_u)
        return np.concatenate([xs, vs], axis=1)

    def v_from_u(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float).reshape(self.horizon, self.n_u)
        return self.model.to_v(U, np.broadcast_to(self.d_bar, (self.horizon, len(self.d_bar)))).reshape(-1)

    def u_from_v(self, V) -> np.ndarray:
        V = np.asarray(V, dtype=float).reshape(self.horizon, self.n_u)
        return self.model.to_u(V, np.broadcast_to(self.d_bar, (self.horizon, len(self.d_bar)))).reshape(-1)


def make_instance(m: ShwModel, x0, d_bar, r_bar, horizon: int, u_lower, u_upper,
                  z_ceiling=None, z_weight=None, Q=None, input_cost=None) -> OcpInstance:
    d_bar = np.asarray(d_bar, dtype=float)
    n_u, n_y, n_z, n_d = m.dims
    dm = m.discretize(d_bar)
    x0 = np.asarray(x0, dtype=float)
    if Q is None:
        Q = build_q(m, x0, d_bar, horizon)
    u_lower = np.broadcast_to(np.asarray(u_lower, dtype=float), (n_u,)).copy()
    u_upper = np.broadcast_to(np.asarray(u_upper, dtype=float), (n_u,)).copy()
    if np.any(u_lower >= u_upper):
        raise ValueError("input bounds must satisfy lower < upper")
    v_lo, v_hi = m.v_bounds(u_lower, u_upper, d_bar)
    z_ceiling = np.full(n_z, np.inf) if z_ceiling is None else np.broadcast_to(z_ceiling, (n_z,)).astype(float)
    z_weight = np.zeros(n_z) if z_weight is None else np.broadcast_to(z_weight, (n_z,)).astype(float)
    return OcpInstance(m, dm, x0, d_bar, np.asarray(r_bar, dtype=float), horizon, np.asarray(Q, dtype=float),
                       v_lo, v_hi, u_lower, u_upper, z_ceiling, z_weight, input_cost)


def z_penalty(Z, z_ceiling, z_weight):
    """Cubic hinge ``sum max(0, w (z - zbar)^3)`` with first and second derivatives in z."""
    s = Z - z_ceiling
    on = (s > 0) & (z_weight > 0)
    s = np.where(on, s, 0.0)
    w = np.where(on, z_weight, 0.0)
    return float(np.sum(w * s**3)), 3.0 * w * s**2, 6.0 * w * s


def objective(inst: OcpInstance, V, order: int = 1):
    """Cost ``E'QE + f_u(V) + f_z(Z)`` and its derivatives in V.

    ``order=0`` returns ``(f,)``, 1 returns ``(f, grad)``, 2 adds the Hessian.
    The constraint network is called once, on all horizon stages as one
    batch; stage states come from the stacked affine map, never from
    feeding one network output into the next stage.
    """
    V = np.asarray(V, dtype=float)
    E = inst._track_off + inst.stacked.B_bar @ V
    QE = inst.Q @ E
    f = float(E @ QE)
    grad = 2.0 * inst.stacked.B_bar.T @ QE if order >= 1 else None
    hess = inst._track_H.copy() if order >= 2 else None
    if inst.soft_z:
        stage = inst.stage_inputs(V)
        with torch.no_grad():
            Zt, Jt, Ht = inst.model.xi.derivatives(as_tensor(stage), inst._d_t, min(order, 2))
        pen, d1, d2 = z_penalty(to_numpy(Zt), inst.z_ceiling, inst.z_weight)
        f += pen
        if order >= 1 and pen > 0:
            Jz = to_numpy(Jt)
            g_stage = np.einsum("kj,kjp->kp", d1, Jz)
            grad += np.einsum("kp,kpa->a", g_stage, inst._L)
            if order >= 2:
                Hz = to_numpy(Ht)
                Jw = Jz * np.sqrt(d2)[..., None]
                W = np.matmul(Jw.transpose(0, 2, 1), Jw) + np.einsum("kj,kjpq->kpq", d1, Hz)
                L = inst._L
                LW = np.matmul(W, L)
                hess += L.reshape(-1, L.shape[-1]).T @ LW.reshape(-1, L.shape[-1])
    if inst.input_cost is not None:
        fu = inst.input_cost(V)
        f += fu[0]
        if order >= 1:
            grad = grad + fu[1]
        if order >= 2:
            hess = hess + fu[2]
    out = (f,)
    if order >= 1:
        out += (grad,)
    if order >= 2:
        out += (hess,)
    return out


def box_constraints(inst: OcpInstance, V) -> np.ndarray:
    """``g(V) <= 0`` encoding the input box: ``[v_lower - V; V - v_upper]``."""
    lo, hi = inst.bounds
    return np.concatenate([lo - V, V - hi])


def multipliers_from_gradient(inst: OcpInstance, grad) -> np.ndarray:
    """Box multipliers ``[lambda_lower; lambda_upper]`` consistent with ``dL/dV = 0``."""
    return np.concatenate([np.maximum(grad, 0.0), np.maximum(-grad, 0.0)])


def kkt_residual(inst: OcpInstance, V, lam) -> np.ndarray:
    """``F(V, lambda) = [dL/dV; phi(lambda, -g)]``; zero iff V is the optimum."""
    V = np.asarray(V, dtype=float)
    lam = np.asarray(lam, dtype=float)
    nv = inst.n_vars
    _, grad = objective(inst, V, 1)
    dL = grad - lam[:nv] + lam[nv:]
    return np.concatenate([dL, fb(lam, -box_constraints(inst, V))])


@dataclass
class OcpSolution:
    V: np.ndarray
    U: np.ndarray
    lam: np.ndarray
    objective: float
    kkt_residual_inf: float
    iterations: int
    seconds: float = 0.0

    def first_input(self, n_u: int) -> np.ndarray:
        return self.U[:n_u]


def solve(inst: OcpInstance, V_init=None, tol: float = 1e-8, max_iter: int = 500,
          target: float = 1e-11) -> OcpSolution:
    """Projected Newton with Armijo search along the projection arc.

    Runs until the Fischer-Burmeister KKT residual falls below ``target``
    (or stops improving once below ``tol``). Raises ``NonConvergenceError``
    if ``tol`` is not reached within ``max_iter`` iterations.
    """
    t0 = time.perf_counter()
    lo, hi = inst.bounds
    nv = inst.n_vars
    V = np.clip(np.zeros(nv) if V_init is None else np.asarray(V_init, dtype=float).reshape(nv), lo, hi)
    sigma, beta = 1e-4, 0.5
    res = np.inf
    it = 0
    best = (np.inf, V)
    for it in range(1, max_iter + 1):
        f, g, H = objective(inst, V, 2)
        lam = multipliers_from_gradient(inst, g)
        res = float(np.max(np.abs(fb(lam, -box_constraints(inst, V)))))
        if res < best[0]:
            best = (res, V.copy())
        if res <= target:
            break
        if res <= tol and it > 1 and res > 0.5 * prev_res:
            break
        prev_res = res
        w = np.linalg.norm(V - np.clip(V - g, lo, hi))
        eps = min(1e-3, w)
        binding = ((V <= lo + eps) & (g > 0)) | ((V >= hi - eps) & (g < 0))
        free = ~binding
        d = np.zeros(nv)
        if np.any(free):
            Hff = H[np.ix_(free, free)]
            try:
                L = np.linalg.cholesky(Hff)
                d[free] = -np.linalg.solve(L.T, np.linalg.solve(L, g[free]))
            except np.linalg.LinAlgError:
                d[free] = -g[free] / np.maximum(np.diag(Hff), 1e-12)
        if np.any(binding):
            d[binding] = -g[binding] / np.maximum(np.diag(H)[binding], 1e-12)
        alpha = 1.0
        while True:
            V_new = np.clip(V + alpha * d, lo, hi)
            f_new = objective(inst, V_new, 0)[0]
            decrease = -alpha * g[free] @ d[free] + g[binding] @ (V[binding] - V_new[binding])
            if f - f_new >= sigma * decrease or alpha < 1e-12:
                break
            if decrease <= 1e-13 * (1.0 + abs(f)):
                # objective differences are pure roundoff here; the Newton step is trusted
                break
            alpha *= beta
        if alpha < 1e-12 and f_new > f + 1e-13 * (1.0 + abs(f)):
            break
        V = V_new
    else:
        f, g = objective(inst, V, 1)
        lam = multipliers_from_gradient(inst, g)
        res = float(np.max(np.abs(fb(lam, -box_constraints(inst, V)))))
    if res > best[0]:
        V = best[1]
        f, g = objective(inst, V, 1)
        lam = multipliers_from_gradient(inst, g)
        res = best[0]
    if not res <= tol:
        raise NonConvergenceError(f"OCP did not converge: KKT residual {res:.3e} after {it} iterations",
                                  residual=res, iterations=it)
    return OcpSolution(V=V, U=inst.u_from_v(V), lam=lam, objective=float(f), kkt_residual_inf=res,
                       iterations=it, seconds=time.perf_counter() - t0)


def solve_hard_z(inst: OcpInstance, V_init=None, tol: float = 1e-7, max_iter: int = 100) -> OcpSolution:
    """Hard ceiling ``z <= z_ceiling`` handled by accumulating linear cuts.

    The constraint network is convex in V, so each linearization is a valid
    outer approximation; the QP over box plus cuts is re-solved until the
    true constraint violation is below ``tol``. The soft penalty weights are
    ignored in this mode.
    """
    t0 = time.perf_counter()
    lo, hi = inst.bounds
    H = inst._track_H
    g0 = 2.0 * inst.stacked.B_bar.T @ inst.Q @ inst._track_off
    rows, rhs = [], []
    V = np.clip(np.zeros(inst.n_vars) if V_init is None else np.asarray(V_init, dtype=float), lo, hi)
    finite = np.isfinite(inst.z_ceiling)
    for it in range(1, max_iter + 1):
        G = np.array(rows) if rows else None
        h = np.array(rhs) if rhs else None
        qp = box_qp(H, g0, lo, hi, G, h)
        V = qp.x
        stage = inst.stage_inputs(V)
        with torch.no_grad():
            Zt, Jt, _ = inst.model.xi.derivatives(as_tensor(stage), inst._d_t, 1)
        Z, Jz = to_numpy(Zt), to_numpy(Jt)
        viol = np.where(finite, Z - inst.z_ceiling, -np.inf)
        if np.max(viol) <= tol:
            f = objective(inst, V, 0)[0] if not inst.soft_z else float(
                (inst._track_off + inst.stacked.B_bar @ V) @ inst.Q @ (inst._track_off + inst.stacked.B_bar @ V))
            lam = np.concatenate([qp.lam_lower, qp.lam_upper])
            return OcpSolution(V=V, U=inst.u_from_v(V), lam=lam, objective=f,
                               kkt_residual_inf=float(max(np.max(viol), 0.0)), iterations=it,
                               seconds=time.perf_counter() - t0)
        for k, j in zip(*np.nonzero(viol > tol)):
            a = Jz[k, j] @ inst._L[k]
            rows.append(a)
            rhs.append(inst.z_ceiling[j] - Z[k, j] + a @ V)
    raise NonConvergenceError("hard-constraint cutting planes did not converge", iterations=max_iter)


def named_init(inst: OcpInstance, kind) -> np.ndarray:
    """Initial V for ``"mid"``, ``"lower"`` or ``"upper"`` input guesses, or an explicit array."""
    if not isinstance(kind, str):
        return np.asarray(kind, dtype=float)
    if kind == "mid":
        U = np.tile(0.5 * (inst.u_lower + inst.u_upper), inst.horizon)
    elif kind == "lower":
        U = np.tile(inst.u_lower, inst.horizon)
    elif kind == "upper":
        U = np.tile(inst.u_upper, inst.horizon)
    else:
        raise ValueError(f"unknown init {kind!r}")
    return inst.v_from_u(U)


# --- control-law sweep ---------------------------------------------------------

SWEEP_COLUMNS = ["grid", "init", "u", "objective", "kkt_residual", "iterations"]


@dataclass
class SweepTable:
    grid: np.ndarray
    inits: list
    u: np.ndarray  # (n_grid, n_inits, n_u), NaN where the solve failed
    objective: np.ndarray
    kkt: np.ndarray
    iterations: np.ndarray
    errors: dict = field(default_factory=dict)

    @property
    def disagreement(self) -> np.ndarray:
        """Max over init pairs of ``||u_a - u_b||_inf`` per grid point."""
        u = self.u
        diff = np.abs(u[:, :, None, :] - u[:, None, :, :]).max(axis=(1, 2, 3))
        return diff

    def quotients(self, init: int = 0) -> np.ndarray:
        du = np.abs(np.diff(self.u[:, init, :], axis=0)).max(-1)
        return du / np.abs(np.diff(self.grid))

    def normalized_u(self, lower, upper) -> np.ndarray:
        return (self.u - lower) / (upper - lower)

    def to_csv(self, path) -> None:
        n_u = self.u.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid", "init"] + [f"u_{i + 1}" for i in range(n_u)]
                       + ["objective", "kkt_residual", "iterations"])
            for i, gval in enumerate(self.grid):
                for j, name in enumerate(self.inits):
                    w.writerow([repr(float(gval)), name] + [repr(float(x)) for x in self.u[i, j]]
                               + [repr(float(self.objective[i, j])), repr(float(self.kkt[i, j])),
                                  int(self.iterations[i, j])])


def control_law_sweep(solve_fn, grid, inits) -> SweepTable:
    """Evaluate a control law on a grid with several initial guesses.

    ``solve_fn(value, init)`` returns ``(u_first, objective, kkt, iterations)``;
    solver exceptions are recorded per point and the entry left as NaN.
    """
    grid = np.asarray(grid, dtype=float)
    inits = list(inits)
    n_g, n_i = len(grid), len(inits)
    u = None
    obj = np.full((n_g, n_i), np.nan)
    kkt = np.full((n_g, n_i), np.nan)
    its = np.zeros((n_g, n_i), dtype=int)
    errors = {}
    for i, val in enumerate(grid):
        for j, init in enumerate(inits):
            try:
                u1, f, r, k = solve_fn(val, init)
            except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                errors[(i, j)] = str(exc)
                continue
            if u is None:
                u = np.full((n_g, n_i, len(u1)), np.nan)
            u[i, j], obj[i, j], kkt[i, j], its[i, j] = u1, f, r, k
    if u is None:
        u = np.full((n_g, n_i, 1), np.nan)
    return SweepTable(grid, [str(s) if isinstance(s, str) else f"init{j}" for j, s in enumerate(inits)],
                      u, obj, kkt, its, errors)


def ocp_sweep(m: ShwModel, d_bar, r_bar, y0_base, channel: int, values, inits, horizon: int,
              u_lower, u_upper, z_ceiling=None, z_weight=None) -> SweepTable:
    """Sweep the convex control law over ``y0[channel] = value`` (Q rebuilt at each x0)."""
    n_u = m.dims[0]

    def run(val, init):
        y0 = np.array(y0_base, dtype=float)
        y0[channel] = val
        x0 = m.to_x(y0, d_bar)
        inst = make_instance(m, x0, d_bar, r_bar, horizon, u_lower, u_upper, z_ceiling, z_weight)
        sol = solve(inst, named_init(inst, init))
        return sol.U[:n_u], sol.objective, sol.kkt_residual_inf, sol.iterations

    return control_law_sweep(run, values, inits)


class MpcController:
    """Receding-horizon law ``(t, y, d, r) -> u`` solving the convex problem at each sample.

    The previous solution, shifted by one stage, warm-starts the next solve.
    """

    def __init__(self, m: ShwModel, horizon: int, u_lower, u_upper, z_ceiling=None, z_weight=None,
                 hard_z: bool = False, tol: float = 1e-8):
        self.m = m
        self.horizon = horizon
        self.u_lower, self.u_upper = u_lower, u_upper
        self.z_ceiling, self.z_weight = z_ceiling, z_weight
        self.hard_z = hard_z
        self.tol = tol
        self._prev = None
        self.stats = {"solves": 0, "iterations": [], "kkt": [], "seconds": []}

    def __call__(self, t, y, d, r) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        x0 = self.m.to_x(y, d)
        inst = make_instance(self.m, x0, d, r, self.horizon, self.u_lower, self.u_upper,
                             self.z_ceiling, None if self.hard_z else self.z_weight)
        if self._prev is None:
            V0 = named_init(inst, "mid")
        else:
            nu = inst.n_u
            V0 = np.concatenate([self._prev[nu:], self._prev[-nu:]])
        sol = solve_hard_z(inst, V0) if self.hard_z else solve(inst, V0, tol=self.tol)
        self._prev = sol.V
        self.stats["solves"] += 1
        self.stats["iterations"].append(sol.iterations)
        self.stats["kkt"].append(sol.kkt_residual_inf)
        self.stats["seconds"].append(sol.seconds)
        return np.clip(sol.U[: inst.n_u], inst.u_lower, inst.u_upper)
