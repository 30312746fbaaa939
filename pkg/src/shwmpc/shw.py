"""Structured Hammerstein-Wiener model.

    v = Psi(u; d)                      diagonal BNN (input map)
    xdot = A(d) x + B(d) v + c(d)      disturbance-scheduled linear dynamics
    y = Phi^{-1}(x; d)                 BNN (output map, evaluated inversely)
    z = Xi(x, v; d)                    PICNN, convex in (x, v)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .bnn import Bnn
from .errors import ConditioningError, DimensionError, ModelUnsuitableError
from .linalg import discretize_pair
from .nets import DTYPE, Mlp, as_tensor, to_numpy
from .picnn import Picnn

JAC_DET_FLOOR = 1e-12


@dataclass
class ShwArch:
    n_u: int = 3
    n_z: int = 1
    n_d: int = 2
    delta: float = 0.1
    psi_depth: int = 2
    phi_depth: int = 2
    bnn_width: int = 16
    picnn_hidden: list = field(default_factory=lambda: [16])
    dyn_width: int = 16
    z_final: str = "softplus"
    z_state_only: bool = False

    @property
    def n_y(self) -> int:
        return self.n_u

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ShwArch":
        return cls(**d)


class LinearDyn(nn.Module):
    """``d -> (A(d), B(d), c(d))`` via three tanh networks."""

    def __init__(self, n_y: int, n_u: int, n_d: int, width: int = 16, init_std: float = 0.05,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.n_y, self.n_u, self.n_d = n_y, n_u, n_d
        self.a_net = Mlp(n_d, n_y * n_y, width, init_std, -np.eye(n_y).reshape(-1), generator)
        self.b_net = Mlp(n_d, n_y * n_u, width, init_std, np.eye(n_y, n_u).reshape(-1), generator)
        self.c_net = Mlp(n_d, n_y, width, init_std, None, generator)

    def forward(self, d):
        d = as_tensor(d)
        A = self.a_net(d).reshape(*d.shape[:-1], self.n_y, self.n_y)
        B = self.b_net(d).reshape(*d.shape[:-1], self.n_y, self.n_u)
        return A, B, self.c_net(d)

    def set_constant(self, A, B, c) -> None:
        self.a_net.set_constant(np.asarray(A, dtype=float).reshape(-1))
        self.b_net.set_constant(np.asarray(B, dtype=float).reshape(-1))
        self.c_net.set_constant(np.asarray(c, dtype=float).reshape(-1))


@dataclass(frozen=True)
class DiscreteModel:
    A_d: np.ndarray
    B_d: np.ndarray
    c_d: np.ndarray
    d_ref: np.ndarray

    def __post_init__(self):
        n_u = self.B_d.shape[1]
        scale = max(np.linalg.norm(self.B_d, 2), 1e-300)
        det = np.linalg.det(self.B_d) if self.B_d.shape[0] == n_u else 0.0
        if abs(det) <= 1e-10 * scale**n_u:
            raise ModelUnsuitableError(f"discrete input matrix is singular (det = {det:.3e})")

    def step(self, x, v):
        return self.A_d @ x + self.B_d @ v + self.c_d


class ShwModel(nn.Module):
    def __init__(self, arch: ShwArch | None = None, init_std: float = 0.05, seed: int | None = 0):
        super().__init__()
        arch = arch or ShwArch()
        self.arch = arch
        g = torch.Generator().manual_seed(seed) if seed is not None else None
        n_u, n_y, n_z, n_d = arch.n_u, arch.n_y, arch.n_z, arch.n_d
        self.psi = Bnn(n_u, n_d, arch.psi_depth, "diagonal", arch.bnn_width, init_std, g)
        self.phi = Bnn(n_y, n_d, arch.phi_depth, "general", arch.bnn_width, init_std, g)
        self.xi = Picnn(n_y + n_u, n_d, n_z, arch.picnn_hidden, init_std=init_std,
                        final_activation=arch.z_final, generator=g)
        self.dyn = LinearDyn(n_y, n_u, n_d, arch.dyn_width, init_std, g)
        if arch.z_state_only:
            self.xi.mask_inputs([True] * n_y + [False] * n_u)

    @property
    def delta(self) -> float:
        return self.arch.delta

    @property
    def dims(self):
        a = self.arch
        return a.n_u, a.n_y, a.n_z, a.n_d

    def components(self) -> dict:
        """Parameter groups in the order psi, phi, xi, A, B, c."""
        return {"psi": self.psi, "phi": self.phi, "xi": self.xi,
                "A": self.dyn.a_net, "B": self.dyn.b_net, "c": self.dyn.c_net}

    # --- continuous-time evaluation -------------------------------------
    def xdot(self, x, v, d):
        A, B, c = self.dyn(d)
        x, v = as_tensor(x), as_tensor(v)
        return (A @ x.unsqueeze(-1)).squeeze(-1) + (B @ v.unsqueeze(-1)).squeeze(-1) + c

    def constraint_output(self, x, v, d):
        x, v = as_tensor(x), as_tensor(v)
        shape = torch.broadcast_shapes(x.shape[:-1], v.shape[:-1])
        xv = torch.cat([x.expand(*shape, x.shape[-1]), v.expand(*shape, v.shape[-1])], -1)
        return self.xi(xv, d)

    def eval_outputs(self, x, u, d):
        """``(v, y, z)`` for state x, input u and disturbance d."""
        v = self.psi(u, d)
        y = self.phi.inverse(x, d)
        z = self.constraint_output(x, v, d)
        return v, y, z

    def residual(self, u, d, y, z, ydot, ddot):
        """Prediction error ``[ydot - J^{-1}(A Phi + B Psi + c - Phi_d ddot); z - Xi]``.

        Batched over leading dimensions. Raises ``ConditioningError`` naming the
        first record whose output-map Jacobian is singular.
        """
        u, d, y, z, ydot, ddot = map(as_tensor, (u, d, y, z, ydot, ddot))
        n_u, n_y, n_z, n_d = self.dims
        for name, arr, n in (("u", u, n_u), ("d", d, n_d), ("y", y, n_y), ("z", z, n_z),
                             ("ydot", ydot, n_y), ("ddot", ddot, n_d)):
            if arr.shape[-1] != n:
                raise DimensionError(f"{name} has dimension {arr.shape[-1]}, expected {n}")
        x, J, phi_d = self.phi.value_jacobian_jvp(y, d, ddot)
        v = self.psi(u, d)
        A, B, c = self.dyn(d)
        rhs = (A @ x.unsqueeze(-1)).squeeze(-1) + (B @ v.unsqueeze(-1)).squeeze(-1) + c - phi_d
        det = torch.linalg.det(J.detach()).reshape(-1)
        bad = torch.nonzero(det.abs() <= JAC_DET_FLOOR)
        if bad.numel():
            idx = int(bad[0])
            raise ConditioningError(f"output-map Jacobian singular at record {idx} (det = {float(det[idx]):.3e})")
        ypred = torch.linalg.solve(J, rhs.unsqueeze(-1)).squeeze(-1)
        zpred = self.constraint_output(x, v, d)
        return torch.cat([ydot - ypred, z - zpred], -1)

    # --- discrete time -----------------------------------------------------
    def dynamics_matrices(self, d):
        with torch.no_grad():
            A, B, c = self.dyn(as_tensor(d))
        return to_numpy(A), to_numpy(B), to_numpy(c)

    def discretize(self, d_bar) -> DiscreteModel:
        if not self.delta > 0:
            raise ValueError("sampling period must be positive")
        A, B, c = self.dynamics_matrices(d_bar)
        Ad, Bd, cd = discretize_pair(A, B, c, self.delta)
        return DiscreteModel(Ad, Bd, cd, np.asarray(d_bar, dtype=float).copy())

    def v_bounds(self, u_lower, u_upper, d_bar):
        """Box on v equivalent to ``u_lower <= u <= u_upper`` (needs diagonal psi)."""
        with torch.no_grad():
            a = to_numpy(self.psi(as_tensor(u_lower), as_tensor(d_bar)))
            b = to_numpy(self.psi(as_tensor(u_upper), as_tensor(d_bar)))
        return np.minimum(a, b), np.maximum(a, b)

    def to_u(self, v, d_bar) -> np.ndarray:
        with torch.no_grad():
            return to_numpy(self.psi.inverse(as_tensor(v), as_tensor(d_bar)))

    def to_v(self, u, d_bar) -> np.ndarray:
        with torch.no_grad():
            return to_numpy(self.psi(as_tensor(u), as_tensor(d_bar)))

    def to_x(self, y, d) -> np.ndarray:
        with torch.no_grad():
            return to_numpy(self.phi(as_tensor(y), as_tensor(d)))

    def to_y(self, x, d) -> np.ndarray:
        with torch.no_grad():
            return to_numpy(self.phi.inverse(as_tensor(x), as_tensor(d)))

    def z_of(self, x, v, d) -> np.ndarray:
        with torch.no_grad():
            return to_numpy(self.constraint_output(as_tensor(x), as_tensor(v), as_tensor(d)))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def simulate_discrete(dm: DiscreteModel, m: ShwModel, x0, U, d_bar):
    """Roll the discrete model forward under inputs ``U`` (shape ``(n, n_u)``).

    Returns ``X`` (n+1 states incl. x0), ``Y`` (n+1 outputs) and ``Z``
    (n constraint outputs, ``z_k = Xi(x_k, v_k)``).
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[0] < 1:
        raise ValueError("horizon must be at least 1")
    V = m.to_v(U, d_bar)
    X = [np.asarray(x0, dtype=float)]
    for v in V:
        X.append(dm.step(X[-1], v))
    X = np.array(X)
    return X, m.to_y(X, d_bar), m.z_of(X[:-1], V, d_bar)


def rk4_step(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_continuous(m: ShwModel, x0, U, d_bar, substeps: int = 100):
    """RK4 integration of the state equation under zero-order-hold inputs."""
    A, B, c = m.dynamics_matrices(d_bar)
    V = m.to_v(np.atleast_2d(U), d_bar)
    h = m.delta / substeps
    X = [np.asarray(x0, dtype=float)]
    for v in V:
        x = X[-1]
        f = lambda s, v=v: A @ s + B @ v + c  # noqa: E731
        for _ in range(substeps):
            x = rk4_step(f, x, h)
        X.append(x)
    return np.array(X)


def check_structure(m: ShwModel, d, n_probe: int = 50, seed: int = 0) -> dict:
    """Empirical structure certificate at disturbance ``d``: bijectivity roundtrip
    errors of Psi and Phi and worst Jensen gap of Xi."""
    rng = np.random.default_rng(seed)
    n_u, n_y, n_z, n_d = m.dims
    with torch.no_grad():
        d_t = as_tensor(np.broadcast_to(d, (n_probe, n_d)))
        u = as_tensor(rng.uniform(-2, 2, (n_probe, n_u)))
        y = as_tensor(rng.uniform(-2, 2, (n_probe, n_y)))
        psi_err = float((m.psi.inverse(m.psi(u, d_t), d_t) - u).abs().max())
        phi_err = float((m.phi.inverse(m.phi(y, d_t), d_t) - y).abs().max())
        a = as_tensor(rng.uniform(-2, 2, (n_probe, n_y + n_u)))
        b = as_tensor(rng.uniform(-2, 2, (n_probe, n_y + n_u)))
        t = as_tensor(rng.uniform(0, 1, (n_probe, 1)))
        gap = m.xi(t * a + (1 - t) * b, d_t) - (t * m.xi(a, d_t) + (1 - t) * m.xi(b, d_t))
    return {"psi_roundtrip": psi_err, "phi_roundtrip": phi_err, "jensen_violation": float(gap.max())}


__all__ = ["ShwArch", "ShwModel", "LinearDyn", "DiscreteModel", "simulate_discrete",
           "simulate_continuous", "rk4_step", "check_structure", "DTYPE"]
