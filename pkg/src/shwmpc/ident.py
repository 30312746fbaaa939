"""One-shot identification of structured H-W models.

All parameters are fitted jointly by minimizing the weighted mean squared
prediction error of ``(ydot, z)``; the state is eliminated through the
analytic output map ``x = Phi(y; d)``, so no simulation is needed in the
loss.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import ConditioningError, DimensionError, TrainingFailure
from .nets import DTYPE, as_tensor

log = logging.getLogger(__name__)


@dataclass
class TimeSeriesDataset:
    t: np.ndarray
    u: np.ndarray
    d: np.ndarray
    y: np.ndarray
    z: np.ndarray
    ydot: np.ndarray | None = None
    ddot: np.ndarray | None = None
    udot: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        n = self.t.shape[0]
        for name in ("u", "d", "y", "z", "ydot", "ddot", "udot"):
            val = getattr(self, name)
            if val is None:
                continue
            val = np.asarray(val, dtype=float)
            if val.ndim == 1:
                val = val[:, None]
            if val.shape[0] != n:
                raise DimensionError(f"{name} has {val.shape[0]} records, t has {n}")
            setattr(self, name, val)
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("time stamps must be strictly increasing")
        if (self.ydot is None) != (self.ddot is None):
            raise ValueError("ydot and ddot must be both present or both absent")
        if self.ydot is not None and self.ydot.shape[1] != self.y.shape[1]:
            raise DimensionError("ydot and y dimensions differ")

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def dims(self) -> dict:
        return {"n_u": self.u.shape[1], "n_y": self.y.shape[1], "n_z": self.z.shape[1], "n_d": self.d.shape[1]}

    def subset(self, idx) -> "TimeSeriesDataset":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return TimeSeriesDataset(self.t[idx], self.u[idx], self.d[idx], self.y[idx], self.z[idx],
                                 pick(self.ydot), pick(self.ddot), pick(self.udot))

    def with_derivatives(self) -> "TimeSeriesDataset":
        """Fill missing ydot/ddot with central differences (one-sided at the ends)."""
        if self.ydot is not None:
            return self
        ydot = np.gradient(self.y, self.t, axis=0, edge_order=1)
        ddot = np.gradient(self.d, self.t, axis=0, edge_order=1)
        return replace(self, ydot=ydot, ddot=ddot)

    def split(self, val_frac: float = 0.2):
        """Head for training, tail for validation (no shuffling)."""
        n = len(self)
        n_val = int(round(n * val_frac))
        cut = n - n_val
        return self.subset(slice(0, cut)), self.subset(slice(cut, n))

    def columns(self) -> list[tuple[str, np.ndarray]]:
        cols = [("t", self.t[:, None])]
        for prefix, arr in (("u", self.u), ("d", self.d), ("y", self.y), ("z", self.z),
                            ("du", self.udot), ("dd", self.ddot), ("dy", self.ydot)):
            if arr is not None:
                cols.append((prefix, arr))
        return cols

    def to_csv(self, path) -> None:
        header, blocks = [], []
        for prefix, arr in self.columns():
            if prefix == "t":
                header.append("t")
            else:
                header += [f"{prefix}_{i + 1}" for i in range(arr.shape[1])]
            blocks.append(arr)
        data = np.hstack(blocks)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in data:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "TimeSeriesDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        groups: dict[str, list[int]] = {}
        for j, name in enumerate(header):
            key = name.rsplit("_", 1)[0] if "_" in name else name
            groups.setdefault(key, []).append(j)
        get = lambda k: body[:, groups[k]] if k in groups else None  # noqa: E731
        return cls(t=body[:, groups["t"][0]], u=get("u"), d=get("d"), y=get("y"), z=get("z"),
                   ydot=get("dy"), ddot=get("dd"), udot=get("du"))

    def tensors(self):
        ds = self.with_derivatives()
        return tuple(as_tensor(a) for a in (ds.u, ds.d, ds.y, ds.z, ds.ydot, ds.ddot))


@dataclass
class IdentConfig:
    K_e: list | None = None
    batch_size: int = 128
    lr: float = 3e-3
    lr_final: float = 1e-5
    epochs: int = 400
    seed: int = 0
    val_frac: float = 0.2
    polish_iters: int = 1000
    grad_clip: float = 10.0

    def weight(self, n_e: int) -> torch.Tensor:
        K = torch.eye(n_e, dtype=DTYPE) if self.K_e is None else as_tensor(self.K_e)
        if K.shape != (n_e, n_e):
            raise DimensionError(f"K_e must be {n_e}x{n_e}")
        if not torch.allclose(K, K.T):
            raise ValueError("K_e must be symmetric")
        try:
            torch.linalg.cholesky(K)
        except RuntimeError as exc:
            raise ValueError("K_e must be positive definite") from exc
        return K


@dataclass
class ThetaBundle:
    """Flat parameter (or gradient) vector with per-component slices."""

    flat: np.ndarray
    slices: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.flat[self.slices[name]]


def _component_params(model):
    return [(name, list(mod.parameters())) for name, mod in model.components().items()]


def theta_of(model) -> ThetaBundle:
    chunks, slices, k = [], {}, 0
    for name, params in _component_params(model):
        vec = torch.cat([p.detach().reshape(-1) for p in params])
        slices[name] = slice(k, k + vec.numel())
        k += vec.numel()
        chunks.append(vec.numpy())
    return ThetaBundle(np.concatenate(chunks), slices)


@torch.no_grad()
def set_theta(model, flat) -> None:
    flat = as_tensor(flat)
    groups = _component_params(model)
    need = sum(p.numel() for _, params in groups for p in params)
    if need != flat.numel():
        raise DimensionError(f"parameter vector has {flat.numel()} entries, model needs {need}")
    k = 0
    for _, params in groups:
        for p in params:
            p.copy_(flat[k:k + p.numel()].reshape(p.shape))
            k += p.numel()


def loss_tensor(model, batch, K_e) -> torch.Tensor:
    u, d, y, z, ydot, ddot = batch
    try:
        e = model.residual(u, d, y, z, ydot, ddot)
    except torch.linalg.LinAlgError as exc:
        raise ConditioningError(f"singular output-map Jacobian: {exc}") from exc
    if u.shape[0] == 0:
        raise ValueError("empty batch")
    K = as_tensor(K_e)
    return torch.einsum("ni,ij,nj->n", e, K, e).mean()


def loss(model, dataset: TimeSeriesDataset, K_e=None) -> float:
    """Mean of ``e' K_e e`` over the records of ``dataset``."""
    batch = dataset.tensors()
    n_e = batch[2].shape[1] + batch[3].shape[1]
    K = torch.eye(n_e, dtype=DTYPE) if K_e is None else as_tensor(K_e)
    with torch.no_grad():
        return float(loss_tensor(model, batch, K))


def grad_loss(model, dataset: TimeSeriesDataset, K_e=None) -> ThetaBundle:
    batch = dataset.tensors()
    n_e = batch[2].shape[1] + batch[3].shape[1]
    K = torch.eye(n_e, dtype=DTYPE) if K_e is None else as_tensor(K_e)
    model.zero_grad(set_to_none=True)
    loss_tensor(model, batch, K).backward()
    chunks, slices, k = [], {}, 0
    for name, params in _component_params(model):
        vec = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params])
        slices[name] = slice(k, k + vec.numel())
        k += vec.numel()
        chunks.append(vec.numpy().copy())
    model.zero_grad(set_to_none=True)
    return ThetaBundle(np.concatenate(chunks), slices)


def jacobian_stats(model, dataset: TimeSeriesDataset) -> dict:
    """Determinant statistics of the output-map Jacobian and its layer weights."""
    ds = dataset
    with torch.no_grad():
        J = model.phi.jacobian(as_tensor(ds.y), as_tensor(ds.d))
        det = torch.linalg.det(J).abs()
    return {"min_abs_det_jacobian": float(det.min()), "median_abs_det_jacobian": float(det.median()),
            "min_abs_det_layer": model.phi.min_abs_det(as_tensor(ds.d))}


def fit(dataset: TimeSeriesDataset, arch=None, config: IdentConfig | None = None, model=None,
        progress=None):
    """Train a structured H-W model on ``dataset``.

    Adam with cosine learning-rate decay over shuffled minibatches of the
    training head, optionally followed by full-batch L-BFGS polishing.
    Returns ``(model, report)``; the report carries per-epoch losses and
    Jacobian determinant statistics.
    """
    from .shw import ShwArch, ShwModel

    cfg = config or IdentConfig()
    dims = dataset.dims
    if model is None:
        arch = arch or ShwArch(n_u=dims["n_u"], n_z=dims["n_z"], n_d=dims["n_d"])
        if (arch.n_u, arch.n_z, arch.n_d) != (dims["n_u"], dims["n_z"], dims["n_d"]) or dims["n_y"] != dims["n_u"]:
            raise DimensionError(f"dataset dims {dims} do not match architecture")
        model = ShwModel(arch, seed=cfg.seed)
    train, val = dataset.split(cfg.val_frac)
    tb = train.tensors()
    vb = val.tensors() if len(val) else None
    n_e = dims["n_y"] + dims["n_z"]
    K = cfg.weight(n_e)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = tb[0].shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    report = {"train_loss": [], "val_loss": [], "epochs": cfg.epochs, "n_params": model.n_params()}
    t0 = time.perf_counter()
    step = 0

    def evaluate():
        with torch.no_grad():
            tr = float(loss_tensor(model, tb, K))
            va = float(loss_tensor(model, vb, K)) if vb is not None else float("nan")
        return tr, va

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = torch.as_tensor(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            batch = tuple(a[idx] for a in tb)
            lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * step / total))
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            value = loss_tensor(model, batch, K)
            if not torch.isfinite(value):
                raise TrainingFailure(f"loss became non-finite in epoch {epoch}", epoch)
            value.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
        tr, va = evaluate()
        if not math.isfinite(tr):
            raise TrainingFailure(f"loss became non-finite in epoch {epoch}", epoch)
        report["train_loss"].append(tr)
        report["val_loss"].append(va)
        if progress:
            progress(epoch, tr, va)

    if cfg.polish_iters > 0:
        lbfgs = torch.optim.LBFGS(model.parameters(), lr=1.0, max_iter=cfg.polish_iters,
                                  history_size=50, line_search_fn="strong_wolfe",
                                  tolerance_grad=1e-12, tolerance_change=1e-16)

        def closure():
            lbfgs.zero_grad(set_to_none=True)
            val = loss_tensor(model, tb, K)
            val.backward()
            return val

        lbfgs.step(closure)
        tr, va = evaluate()
        if not math.isfinite(tr):
            raise TrainingFailure("loss became non-finite during polishing", cfg.epochs)
        report["polish_train_loss"] = tr
        report["polish_val_loss"] = va

    tr, va = evaluate()
    report["final_train_loss"] = tr
    report["final_val_loss"] = va
    report["seconds"] = time.perf_counter() - t0
    report.update(jacobian_stats(model, dataset))
    return model, report


def one_step_r2(model, dataset: TimeSeriesDataset) -> np.ndarray:
    """R^2 per output channel of the one-step discrete prediction of ``y`` and ``z``.

    ``y_{k+1}`` is predicted from ``(y_k, u_k, d_k)`` through the model's exact
    discretization at ``d_k``; ``z_k`` from ``(y_k, u_k, d_k)``.
    """
    from .linalg import discretize_pair

    ds = dataset
    with torch.no_grad():
        A, B, c = model.dyn(as_tensor(ds.d))
    A, B, c = A.numpy(), B.numpy(), c.numpy()
    x = model.to_x(ds.y, ds.d)
    v = model.to_v(ds.u, ds.d)
    x_next = np.empty_like(x[:-1])
    for k in range(len(ds) - 1):
        Ad, Bd, cd = discretize_pair(A[k], B[k], c[k], ds.t[k + 1] - ds.t[k])
        x_next[k] = Ad @ x[k] + Bd @ v[k] + cd
    y_pred = model.to_y(x_next, ds.d[:-1])
    z_pred = model.z_of(x, v, ds.d)

    def r2(true, pred):
        ss_res = np.sum((true - pred) ** 2, axis=0)
        ss_tot = np.sum((true - true.mean(0)) ** 2, axis=0)
        return 1.0 - ss_res / ss_tot

    return np.concatenate([r2(ds.y[1:], y_pred), r2(ds.z, z_pred)])


def save_report(report: dict, path) -> None:
    import json

    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))
