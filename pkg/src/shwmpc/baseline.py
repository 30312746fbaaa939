"""Unstructured comparison model and its non-convex receding-horizon problem.

``[y_{k+1}; z_k] = W2 tanh(W1 [y_k; u_k; d_k] + b1) + b2`` is fitted by
one-step regression. The horizon cost is evaluated by rolling the network
forward, so it is generally non-convex in U; an SQP method (Gauss-Newton
Hessian, box-QP subproblems) finds a KKT point that depends on the start.
"""

from __future__ import annotations

import time

import numpy as np
import torch
from torch import nn

from .errors import NonConvergenceError, TrainingFailure
from .ident import TimeSeriesDataset
from .linalg import box_qp
from .nets import DTYPE, as_tensor, to_numpy
from .ocp import SweepTable, control_law_sweep, fb, z_penalty


class DenseNnModel(nn.Module):
    def __init__(self, n_y: int, n_u: int, n_d: int, n_z: int, hidden: int = 64,
                 activation: str = "tanh", delta: float = 0.1, seed: int | None = 0):
        super().__init__()
        if activation not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.n_y, self.n_u, self.n_d, self.n_z = n_y, n_u, n_d, n_z
        self.hidden, self.activation, self.delta = hidden, activation, delta
        g = torch.Generator().manual_seed(seed) if seed is not None else None
        n_in, n_out = n_y + n_u + n_d, n_y + n_z
        self.W1 = nn.Parameter(torch.randn(hidden, n_in, generator=g, dtype=DTYPE) / np.sqrt(n_in))
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.W2 = nn.Parameter(torch.randn(n_out, hidden, generator=g, dtype=DTYPE) * 0.1 / np.sqrt(hidden))
        self.b2 = nn.Parameter(torch.zeros(n_out, dtype=DTYPE))

    def arch_dict(self) -> dict:
        return {"n_y": self.n_y, "n_u": self.n_u, "n_d": self.n_d, "n_z": self.n_z, "hidden": self.hidden,
                "activation": self.activation, "delta": self.delta, "seed": None}

    @property
    def dims(self):
        return self.n_u, self.n_y, self.n_z, self.n_d

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, y, u, d):
        """Returns ``(y_next, z)``; inputs broadcast over leading dimensions."""
        y, u, d = as_tensor(y), as_tensor(u), as_tensor(d)
        shape = torch.broadcast_shapes(y.shape[:-1], u.shape[:-1], d.shape[:-1])
        inp = torch.cat([y.expand(*shape, self.n_y), u.expand(*shape, self.n_u),
                         d.expand(*shape, self.n_d)], -1)
        h = inp @ self.W1.T + self.b1
        if self.activation == "tanh":
            h = torch.tanh(h)
        out = h @ self.W2.T + self.b2
        return out[..., : self.n_y], out[..., self.n_y:]

    def rollout(self, y0, U, d_bar):
        """Predicted ``Y = (y_1..y_n)`` and ``Z = (z_0..z_{n-1})`` for ``U`` of shape ``(n, n_u)``."""
        y = as_tensor(y0)
        d = as_tensor(d_bar)
        Ys, Zs = [], []
        for k in range(U.shape[0]):
            y, z = self(y, U[k], d)
            Ys.append(y)
            Zs.append(z)
        return torch.stack(Ys), torch.stack(Zs)


def dense_param_count(n_y, n_u, n_d, n_z, hidden) -> int:
    return hidden * (n_y + n_u + n_d + 1) + (n_y + n_z) * (hidden + 1)


def width_for_params(n_y, n_u, n_d, n_z, target: int) -> int:
    """Hidden width whose parameter count is closest to ``target``."""
    per = n_y + n_u + n_d + 1 + n_y + n_z
    return max(1, int(round((target - (n_y + n_z)) / per)))


def one_step_pairs(ds: TimeSeriesDataset, delta: float):
    """Regression pairs ``(y_k, u_k, d_k) -> (y_{k+1}, z_k)`` at spacing ``delta``."""
    dt = float(np.median(np.diff(ds.t)))
    stride = max(1, int(round(delta / dt)))
    if abs(stride * dt - delta) > 1e-6 * delta:
        raise ValueError(f"sample spacing {dt} does not divide the model step {delta}")
    X = np.concatenate([ds.y[:-stride], ds.u[:-stride], ds.d[:-stride]], axis=1)
    Y = np.concatenate([ds.y[stride:], ds.z[:-stride]], axis=1)
    return X, Y


def _r2(pred, target):
    ss = np.sum((target - target.mean(0)) ** 2, axis=0)
    return 1.0 - np.sum((target - pred) ** 2, axis=0) / np.maximum(ss, 1e-300)


def baseline_fit(ds: TimeSeriesDataset, hidden: int | None = None, target_params: int | None = None,
                 delta: float = 0.1, epochs: int = 300, lr: float = 3e-3, batch_size: int = 128,
                 polish_iters: int = 300, val_frac: float = 0.2, seed: int = 0, activation: str = "tanh"):
    """Fit the dense one-step model; returns ``(model, report)``.

    ``target_params`` picks the hidden width so the parameter count matches
    a reference model. Adam with cosine decay, then full-batch L-BFGS.
    """
    d = ds.dims
    if hidden is None:
        hidden = width_for_params(d["n_y"], d["n_u"], d["n_d"], d["n_z"], target_params or 2000)
    model = DenseNnModel(d["n_y"], d["n_u"], d["n_d"], d["n_z"], hidden, activation, delta, seed)
    X, Y = one_step_pairs(ds, delta)
    n_val = int(round(val_frac * len(X)))
    Xt, Yt = as_tensor(X[: len(X) - n_val]), as_tensor(Y[: len(X) - n_val])
    Xv, Yv = as_tensor(X[len(X) - n_val:]), as_tensor(Y[len(X) - n_val:])
    ny, nu = d["n_y"], d["n_u"]

    def predict(Xa):
        yn, z = model(Xa[:, :ny], Xa[:, ny:ny + nu], Xa[:, ny + nu:])
        return torch.cat([yn, z], -1)

    def mse(Xa, Ya):
        return torch.mean((predict(Xa) - Ya) ** 2)

    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    history = []
    if epochs > 0:
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs, eta_min=lr * 1e-2)
        for ep in range(epochs):
            perm = torch.randperm(len(Xt), generator=gen)
            for i in range(0, len(Xt), batch_size):
                idx = perm[i:i + batch_size]
                opt.zero_grad()
                loss = mse(Xt[idx], Yt[idx])
                loss.backward()
                opt.step()
            sched.step()
            with torch.no_grad():
                tr = mse(Xt, Yt).item()
            if not np.isfinite(tr):
                raise TrainingFailure("baseline training diverged", epoch=ep)
            history.append(tr)
    if polish_iters > 0 and epochs > 0:
        opt = torch.optim.LBFGS(model.parameters(), max_iter=polish_iters, tolerance_grad=1e-12,
                                tolerance_change=1e-15, history_size=50, line_search_fn="strong_wolfe")

        def closure():
            opt.zero_grad()
            loss = mse(Xt, Yt)
            loss.backward()
            return loss

        opt.step(closure)
    with torch.no_grad():
        tr, va = mse(Xt, Yt).item(), (mse(Xv, Yv).item() if n_val else float("nan"))
        r2 = _r2(to_numpy(predict(Xv)), to_numpy(Yv)) if n_val else np.full(Y.shape[1], np.nan)
    if not np.isfinite(tr):
        raise TrainingFailure("baseline training produced a non-finite loss", epoch=epochs)
    report = {"hidden": hidden, "n_params": model.n_params(), "train_loss": tr, "val_loss": va,
              "val_r2": [float(a) for a in r2], "seconds": time.perf_counter() - t0, "history": history}
    return model, report


# --- SQP for the non-convex horizon problem --------------------------------------

class BaselineProblem:
    """Horizon cost ``sum ||y_k - r||^2 + f_z(z)`` over U for a dense model."""

    def __init__(self, model: DenseNnModel, y0, d_bar, r_bar, horizon: int, u_lower, u_upper,
                 z_ceiling=None, z_weight=None):
        self.model = model
        self.n = horizon
        n_u = model.n_u
        self.y0 = as_tensor(y0)
        self.d = as_tensor(d_bar)
        self.r = as_tensor(r_bar)
        self.u_lower = np.broadcast_to(np.asarray(u_lower, dtype=float), (n_u,)).copy()
        self.u_upper = np.broadcast_to(np.asarray(u_upper, dtype=float), (n_u,)).copy()
        self.lo = np.tile(self.u_lower, horizon)
        self.hi = np.tile(self.u_upper, horizon)
        self.z_ceiling = np.full(model.n_z, np.inf) if z_ceiling is None else np.broadcast_to(
            np.asarray(z_ceiling, dtype=float), (model.n_z,))
        self.z_weight = np.zeros(model.n_z) if z_weight is None else np.broadcast_to(
            np.asarray(z_weight, dtype=float), (model.n_z,))

    def _outputs(self, Uflat):
        U = Uflat.reshape(self.n, self.model.n_u)
        Y, Z = self.model.rollout(self.y0, U, self.d)
        return torch.cat([(Y - self.r).reshape(-1), Z.reshape(-1)])

    def evaluate(self, U, order: int = 1):
        """Cost, gradient and Gauss-Newton Hessian (order 2)."""
        Ut = as_tensor(U)
        with torch.no_grad():
            out = to_numpy(self._outputs(Ut))
        m = self.n * self.model.n_y
        e, Z = out[:m], out[m:].reshape(self.n, self.model.n_z)
        pen, d1, d2 = z_penalty(Z, self.z_ceiling, self.z_weight)
        f = float(e @ e) + pen
        if order == 0:
            return (f,)
        J = to_numpy(torch.autograd.functional.jacobian(self._outputs, Ut, vectorize=True))
        Je, Jz = J[:m], J[m:]
        grad = 2.0 * Je.T @ e + Jz.T @ d1.reshape(-1)
        if order == 1:
            return f, grad
        H = 2.0 * Je.T @ Je + Jz.T @ (d2.reshape(-1)[:, None] * Jz)
        return f, grad, H

    def stationarity(self, U, grad) -> float:
        lam = np.concatenate([np.maximum(grad, 0.0), np.maximum(-grad, 0.0)])
        g = np.concatenate([self.lo - U, U - self.hi])
        return float(np.max(np.abs(fb(lam, -g))))

    def init(self, kind) -> np.ndarray:
        if not isinstance(kind, str):
            return np.asarray(kind, dtype=float)
        if kind == "mid":
            return 0.5 * (self.lo + self.hi)
        if kind == "lower":
            return self.lo.copy()
        if kind == "upper":
            return self.hi.copy()
        raise ValueError(f"unknown init {kind!r}")


def baseline_mpc_solve(prob: BaselineProblem, U_init, tol: float = 1e-6, max_iter: int = 200,
                       damping: float = 1e-8):
    """SQP from ``U_init``; returns ``(U, info)`` with ``info`` holding the KKT residual."""
    U = np.clip(prob.init(U_init), prob.lo, prob.hi)
    res = np.inf
    for it in range(1, max_iter + 1):
        f, g, H = prob.evaluate(U, 2)
        res = prob.stationarity(U, g)
        if res <= tol:
            break
        H = H + damping * max(1.0, np.trace(H) / len(U)) * np.eye(len(U))
        d = box_qp(H, g, prob.lo - U, prob.hi - U).x
        slope = g @ d
        alpha = 1.0
        while alpha > 1e-10:
            f_new = prob.evaluate(U + alpha * d, 0)[0]
            if f_new <= f + 1e-4 * alpha * slope or abs(f_new - f) <= 1e-15 * (1 + abs(f)):
                break
            alpha *= 0.5
        U = np.clip(U + alpha * d, prob.lo, prob.hi)
    else:
        f, g = prob.evaluate(U, 1)
        res = prob.stationarity(U, g)
        if res > tol:
            raise NonConvergenceError(f"SQP did not converge: residual {res:.3e}", residual=res,
                                      iterations=max_iter)
    lam = np.concatenate([np.maximum(g, 0.0), np.maximum(-g, 0.0)])
    return U, {"objective": float(f), "kkt_residual": res, "iterations": it, "lam": lam}


def baseline_sweep(model: DenseNnModel, d_bar, r_bar, y0_base, channel: int, values, inits, horizon: int,
                   u_lower, u_upper, z_ceiling=None, z_weight=None) -> SweepTable:
    """Same sweep layout as the convex law, using the SQP solution of the dense model."""
    n_u = model.n_u

    def run(val, init):
        y0 = np.array(y0_base, dtype=float)
        y0[channel] = val
        prob = BaselineProblem(model, y0, d_bar, r_bar, horizon, u_lower, u_upper, z_ceiling, z_weight)
        U, info = baseline_mpc_solve(prob, init)
        return U[:n_u], info["objective"], info["kkt_residual"], info["iterations"]

    return control_law_sweep(run, values, inits)


def first_input_grid_search(prob: BaselineProblem, points: int = 2001, inner=None):
    """Global minimum over the first input on a dense grid (single-input, horizon-1 problems,
    or with ``inner(u0) -> remaining inputs`` supplied)."""
    if prob.model.n_u != 1:
        raise ValueError("grid search is implemented for one input channel")
    grid = np.linspace(prob.u_lower[0], prob.u_upper[0], points)
    vals = []
    for u0 in grid:
        rest = np.zeros(prob.n - 1) if inner is None else np.asarray(inner(u0), dtype=float)
        vals.append(prob.evaluate(np.concatenate([[u0], rest]), 0)[0])
    vals = np.asarray(vals)
    k = int(np.argmin(vals))
    return grid[k], vals[k], grid, vals


def fold_dataset(samples: int = 3000, seed: int = 0, delta: float = 0.1) -> TimeSeriesDataset:
    """Scalar plant with a fold in the input map: ``y+ = 0.5 y + u^2 + 0.15 u + 0.1 d``.

    The steady-state gain changes sign at ``u = -0.075``, so any target
    above the reachable range has one KKT point at each input bound.
    """
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, samples)
    d = rng.uniform(-1.0, 1.0, samples)
    y = np.empty(samples)
    y[0] = 0.0
    for k in range(samples - 1):
        y[k + 1] = 0.5 * y[k] + fold_map(u[k]) + 0.1 * d[k]
    z = 0.5 * y**2
    return TimeSeriesDataset(delta * np.arange(samples), u, d, y, z)


def fold_map(u):
    return u**2 + 0.15 * u
