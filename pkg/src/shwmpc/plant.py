"""Synthetic 3-input / 3-output / 1-constraint plant with two disturbances.

Two modes:

``realizable``
    The plant *is* a structured H-W model drawn from a fixed seed, so an
    identified model can in principle match it exactly.
``misspecified``
    ``ydot = -y - 0.3 y^3 + G tanh(u) + H d`` with a convex quadratic
    constraint output; not representable exactly by the model class.

Signals live on normalized boxes: ``u`` in [-1, 1], ``d`` in about [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ExcitationRejected, ShwError
from .ident import TimeSeriesDataset
from .nets import as_tensor, to_numpy
from .shw import ShwArch, ShwModel

STATE_LIMIT = 1e3


class ClosedLoopAborted(ShwError):
    def __init__(self, message: str, log: dict):
        super().__init__(message)
        self.log = log


def make_teacher(seed: int = 7, delta: float = 0.1, arch: ShwArch | None = None) -> ShwModel:
    """Random structured H-W model with moderate nonlinearity and stable A(d)."""
    arch = arch or ShwArch(n_u=3, n_z=1, n_d=2, delta=delta, bnn_width=8, picnn_hidden=[8], dyn_width=8)
    for k in range(100):
        m = ShwModel(arch, init_std=0.25, seed=seed + 1000 * k)
        with torch.no_grad():
            # keep the output map well conditioned and c(d) small
            m.dyn.c_net.W2.mul_(0.5)
            m.dyn.c_net.b2.mul_(0.5)
            last = m.xi.b_eta_eta[-1]
            last.add_(-0.5)
        d = np.random.default_rng(seed).uniform(-1, 1, (200, arch.n_d))
        A, B, _ = m.dynamics_matrices(d)
        if np.max(np.linalg.eigvals(A).real) < -0.2 and np.min(np.abs(np.linalg.det(B))) > 0.2:
            return m
    raise RuntimeError("could not draw a stable teacher model")


@dataclass
class Excitation:
    """Random input steps plus a small multisine; smooth sinusoidal disturbances."""

    hold_min: float = 0.5
    hold_max: float = 3.0
    multisine_amp: float = 0.15
    d_amp: float = 0.8
    d_freqs: tuple = (0.05, 0.13, 0.31)
    seed: int = 0
    zero: bool = False


@dataclass
class SyntheticPlant:
    mode: str = "realizable"
    seed: int = 7
    delta: float = 0.1
    u_lower: np.ndarray = field(default_factory=lambda: -np.ones(3))
    u_upper: np.ndarray = field(default_factory=lambda: np.ones(3))
    z_ceiling: float = 0.8

    def __post_init__(self):
        if self.mode not in ("realizable", "misspecified"):
            raise ValueError(f"unknown plant mode {self.mode!r}")
        self.n_u = self.n_y = 3
        self.n_d, self.n_z = 2, 1
        self.u_lower = np.asarray(self.u_lower, dtype=float)
        self.u_upper = np.asarray(self.u_upper, dtype=float)
        rng = np.random.default_rng(self.seed)
        if self.mode == "realizable":
            self.model = make_teacher(self.seed, self.delta)
            self._normalize_outputs()
        else:
            self.model = None
            self.G = np.eye(3) + 0.3 * rng.normal(size=(3, 3))
            self.H = 0.3 * rng.normal(size=(3, 2))

    def _normalize_outputs(self):
        # The state trajectory does not depend on Phi, so simulate once, then set
        # the first output-map layer to the exact affine map y -> S y + o that
        # sends the observed range onto about [-1, 1].
        phi = self.model.phi
        phi.layers[0].omega_net.set_constant(np.eye(self.n_y).reshape(-1))
        phi.layers[0].beta_net.set_constant(np.zeros(self.n_y))
        phi.layers[0].alpha_net.set_constant(np.zeros(self.n_y))
        ds = generate_dataset(self, Excitation(seed=12345), duration=200.0)
        X = self.model.to_x(ds.y, ds.d)
        with torch.no_grad():
            W = as_tensor(X)
            for layer in reversed(list(phi.layers)[1:]):
                W = layer.inverse(W, as_tensor(ds.d))
        W = to_numpy(W)
        lo, hi = W.min(0), W.max(0)
        scale, offset = (hi - lo) / 2.0, (hi + lo) / 2.0
        phi.layers[0].omega_net.set_constant(np.diag(scale).reshape(-1))
        phi.layers[0].beta_net.set_constant(offset)

    # Affine-plus-cubic form: xdot = A x - kappa x^3 + b with A, b from exogenous signals.
    def _coefficients(self, U, D):
        U, D = np.atleast_2d(U), np.atleast_2d(D)
        if self.mode == "realizable":
            A, B, c = self.model.dynamics_matrices(D)
            v = self.model.to_v(U, D)
            return A, np.einsum("...ij,...j->...i", B, v) + c, 0.0
        A = np.broadcast_to(-np.eye(3), (U.shape[0], 3, 3))
        b = np.tanh(U) @ self.G.T + D @ self.H.T
        return A, b, 0.3

    def state_from_output(self, y, d):
        return self.model.to_x(y, d) if self.mode == "realizable" else np.asarray(y, dtype=float)

    def outputs(self, X, U, D):
        """``(y, z)`` for state, input and disturbance samples."""
        if self.mode == "realizable":
            Y = self.model.to_y(X, D)
            Z = self.model.z_of(X, self.model.to_v(U, D), D)
            return Y, Z
        X = np.atleast_2d(X)
        Z = 0.5 * np.mean(X**2, axis=-1, keepdims=True) + 0.1 * np.sum(np.atleast_2d(U), -1, keepdims=True) + 0.2
        return X.copy(), Z

    def output_derivative(self, X, Xdot, D, Ddot):
        if self.mode == "misspecified":
            return np.array(Xdot, dtype=float)
        m = self.model
        with torch.no_grad():
            Y = m.phi.inverse(as_tensor(X), as_tensor(D))
            _, J, phi_d = m.phi.value_jacobian_jvp(Y, as_tensor(D), as_tensor(Ddot))
            rhs = as_tensor(Xdot) - phi_d
            return to_numpy(torch.linalg.solve(J, rhs.unsqueeze(-1)).squeeze(-1))

    def integrate(self, x0, U_stage, D_stage, h):
        """RK4 over fine steps. ``U_stage``/``D_stage`` hold the exogenous values at
        the (0, h/2, h) stage times of every step, shape ``(M, 3, dim)``."""
        M = U_stage.shape[0]
        A, b, kappa = self._coefficients(U_stage.reshape(M * 3, -1), D_stage.reshape(M * 3, -1))
        A = np.asarray(A).reshape(M, 3, self.n_y, self.n_y)
        b = np.asarray(b).reshape(M, 3, self.n_y)
        X = np.empty((M + 1, self.n_y))
        X[0] = x0
        x = np.asarray(x0, dtype=float)
        for m in range(M):
            Am, bm = A[m], b[m]
            k1 = Am[0] @ x - kappa * x**3 + bm[0]
            x2 = x + 0.5 * h * k1
            k2 = Am[1] @ x2 - kappa * x2**3 + bm[1]
            x3 = x + 0.5 * h * k2
            k3 = Am[1] @ x3 - kappa * x3**3 + bm[1]
            x4 = x + h * k3
            k4 = Am[2] @ x4 - kappa * x4**3 + bm[2]
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > STATE_LIMIT:
                raise ExcitationRejected(f"state blew up at fine step {m}")
            X[m + 1] = x
        return X

    def xdot(self, X, U, D):
        A, b, kappa = self._coefficients(U, D)
        X = np.atleast_2d(X)
        return np.einsum("...ij,...j->...i", A, X) - kappa * X**3 + b

    def equilibrium_state(self, u, d):
        """State reached under constant (u, d), by long integration."""
        h = self.delta / 10
        M = int(round(60.0 / h))
        U = np.broadcast_to(u, (M, 3, self.n_u)).copy()
        D = np.broadcast_to(d, (M, 3, self.n_d)).copy()
        x0 = np.zeros(self.n_y)
        return self.integrate(x0, U, D, h)[-1]


# --- excitation signals -----------------------------------------------------

class _Signals:
    def __init__(self, plant: SyntheticPlant, exc: Excitation, duration: float, dt: float):
        rng = np.random.default_rng(exc.seed)
        n_samples = int(round(duration / dt)) + 1
        self.dt = dt
        levels = np.zeros((n_samples, plant.n_u))
        lo, hi = plant.u_lower, plant.u_upper
        k = 0
        while k < n_samples:
            hold = max(1, int(round(rng.uniform(exc.hold_min, exc.hold_max) / dt)))
            levels[k:k + hold] = rng.uniform(lo, hi)
            k += hold
        self.levels = levels
        self.lo, self.hi = lo, hi
        self.ms_amp = 0.0 if exc.zero else exc.multisine_amp
        self.ms_w = rng.uniform(0.2, 2.0, (3, plant.n_u))
        self.ms_ph = rng.uniform(0, 2 * np.pi, (3, plant.n_u))
        self.d_amp = 0.0 if exc.zero else exc.d_amp
        nf = len(exc.d_freqs)
        self.d_w = 2 * np.pi * np.asarray(exc.d_freqs)[:, None] * rng.uniform(0.7, 1.3, (nf, plant.n_d))
        self.d_ph = rng.uniform(0, 2 * np.pi, (nf, plant.n_d))
        self.d_n = nf
        self.zero = exc.zero

    def u(self, t, k):
        """Input on sample interval k evaluated at time t, with its derivative."""
        if self.zero:
            shape = np.broadcast(np.asarray(t), np.asarray(k)).shape + self.levels.shape[1:]
            return np.zeros(shape), np.zeros(shape)
        arg = self.ms_w * np.asarray(t)[..., None, None] + self.ms_ph
        raw = self.levels[k] + self.ms_amp / 3 * np.sin(arg).sum(-2)
        draw = self.ms_amp / 3 * (self.ms_w * np.cos(arg)).sum(-2)
        inside = (raw > self.lo) & (raw < self.hi)
        return np.clip(raw, self.lo, self.hi), np.where(inside, draw, 0.0)

    def d(self, t):
        arg = self.d_w * np.asarray(t)[..., None, None] + self.d_ph
        val = self.d_amp / self.d_n * np.sin(arg).sum(-2)
        der = self.d_amp / self.d_n * (self.d_w * np.cos(arg)).sum(-2)
        return val, der


def generate_dataset(plant: SyntheticPlant, excitation: Excitation | None = None, duration: float = 200.0,
                     dt_sample: float | None = None, substeps: int = 10, noise: float = 0.0,
                     noise_seed: int = 1, x0=None) -> TimeSeriesDataset:
    """Simulate the plant under excitation and record samples with exact derivatives.

    ``noise`` adds Gaussian noise with standard deviation ``noise`` times each
    channel's standard deviation to y, z and ydot.
    """
    exc = excitation or Excitation()
    dt = dt_sample or plant.delta
    sig = _Signals(plant, exc, duration, dt)
    n = sig.levels.shape[0]
    h = dt / substeps
    offs = np.array([0.0, 0.5, 1.0]) * h
    t_fine = (np.arange(n - 1)[:, None] * dt + np.arange(substeps)[None, :] * h).reshape(-1)
    k_fine = np.repeat(np.arange(n - 1), substeps)
    ts = t_fine[:, None] + offs[None, :]
    U_stage = sig.u(ts, k_fine[:, None])[0]
    D_stage = sig.d(ts)[0]
    t = np.arange(n) * dt
    if x0 is None:
        x0 = np.zeros(plant.n_y)
    X = plant.integrate(x0, U_stage, D_stage, h)[::substeps]
    U, Udot = sig.u(t, np.arange(n))
    D, Ddot = sig.d(t)
    Y, Z = plant.outputs(X, U, D)
    Xdot = plant.xdot(X, U, D)
    Ydot = plant.output_derivative(X, Xdot, D, Ddot)
    if noise > 0:
        rng = np.random.default_rng(noise_seed)
        Y = Y + noise * Y.std(0) * rng.normal(size=Y.shape)
        Z = Z + noise * Z.std(0) * rng.normal(size=Z.shape)
        Ydot = Ydot + noise * Ydot.std(0) * rng.normal(size=Ydot.shape)
    return TimeSeriesDataset(t=t, u=U, d=D, y=Y, z=Z, ydot=Ydot, ddot=Ddot, udot=Udot)


# --- closed loop --------------------------------------------------------------

@dataclass
class Scenario:
    """Piecewise-constant reference and disturbance schedules: lists of ``(t_start, value)``."""

    r_steps: list
    d_steps: list

    @staticmethod
    def _at(steps, t):
        val = steps[0][1]
        for t0, v in steps:
            if t >= t0 - 1e-12:
                val = v
        return np.asarray(val, dtype=float)

    def r(self, t):
        return self._at(self.r_steps, t)

    def d(self, t):
        return self._at(self.d_steps, t)


def closed_loop(plant: SyntheticPlant, controller, scenario: Scenario, duration: float,
                y0=None, substeps: int = 20) -> dict:
    """Run ``controller(t, y, d, r) -> u`` against the plant with zero-order hold.

    The controller is sampled every ``plant.delta``; integration is RK4 at
    ``delta / substeps``. Returns a log of arrays ``t, u, d, r, y, z``.
    """
    delta = plant.delta
    steps = int(round(duration / delta))
    d0 = scenario.d(0.0)
    x = plant.state_from_output(np.zeros(plant.n_y) if y0 is None else y0, d0)
    log = {k: [] for k in ("t", "u", "d", "r", "y", "z")}
    h = delta / substeps
    for k in range(steps + 1):
        t = k * delta
        d, r = scenario.d(t), scenario.r(t)
        y = plant.outputs(x[None], np.zeros((1, plant.n_u)), d[None])[0][0]
        try:
            u = np.asarray(controller(t, y, d, r), dtype=float)
        except Exception as exc:  # noqa: BLE001 - abort with partial log
            raise ClosedLoopAborted(f"controller failed at t={t:.3f}: {exc}",
                                    {kk: np.array(vv) for kk, vv in log.items()}) from exc
        if np.any(u < plant.u_lower - 1e-9) or np.any(u > plant.u_upper + 1e-9):
            raise ClosedLoopAborted(f"controller returned u outside bounds at t={t:.3f}",
                                    {kk: np.array(vv) for kk, vv in log.items()})
        z = plant.outputs(x[None], u[None], d[None])[1][0]
        for key, val in zip(log, (t, u, d, r, y, z)):
            log[key].append(np.copy(val))
        if k == steps:
            break
        U_stage = np.broadcast_to(u, (substeps, 3, plant.n_u)).copy()
        D_stage = np.broadcast_to(d, (substeps, 3, plant.n_d)).copy()
        x = plant.integrate(x, U_stage, D_stage, h)[-1]
    return {k: np.array(v) for k, v in log.items()}
