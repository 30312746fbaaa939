"""Command-line pipeline: generate, train, solve, sweep, mpc, cbf, baseline.

Every command reads one JSON configuration (defaults for anything not
given), writes its artifacts under ``--out`` and a ``report_<cmd>.json``
with seeds, timings and metrics. Exit codes: 0 success, 2 configuration
error, 3 numerical failure, 4 failed ``--check`` threshold.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ShwError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


# --- configuration ---------------------------------------------------------------

@dataclass
class PlantConfig:
    mode: str = "realizable"
    seed: int = 7
    delta: float = 0.1
    u_lower: float = -1.0
    u_upper: float = 1.0
    z_ceiling: float = 0.8


@dataclass
class DataConfig:
    duration: float = 200.0
    noise: float = 0.0
    substeps: int = 10
    hold_min: float = 0.5
    hold_max: float = 3.0
    multisine_amp: float = 0.15
    d_amp: float = 0.8


@dataclass
class ArchConfig:
    psi_depth: int = 2
    phi_depth: int = 2
    bnn_width: int = 16
    picnn_hidden: list = field(default_factory=lambda: [16])
    dyn_width: int = 16
    z_final: str = "softplus"


@dataclass
class TrainConfig:
    K_e: list | None = None
    batch_size: int = 128
    lr: float = 3e-3
    lr_final: float = 1e-5
    epochs: int = 400
    val_frac: float = 0.2
    polish_iters: int = 1000
    grad_clip: float = 10.0


@dataclass
class OcpConfig:
    horizon: int = 20
    z_weight: float = 100.0
    hard_z: bool = False
    tol: float = 1e-8


@dataclass
class SolveConfig:
    y0: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    d: list = field(default_factory=lambda: [0.0, 0.0])
    r: list = field(default_factory=lambda: [-0.3, 0.4, 0.2])
    init: str = "mid"


@dataclass
class SweepConfig:
    channel: int = 0
    lower: float = -0.8
    upper: float = 0.2
    points: int = 200
    y0: list = field(default_factory=lambda: [0.0, 0.4, 0.2])
    d: list = field(default_factory=lambda: [0.0, 0.0])
    r: list = field(default_factory=lambda: [-0.3, 0.4, 0.2])
    inits: list = field(default_factory=lambda: ["mid", "lower"])


@dataclass
class MpcConfig:
    duration: float = 60.0
    r_steps: list = field(default_factory=lambda: [[0.0, [-0.3, 0.4, 0.2]], [20.0, [0.1, -0.3, 0.4]],
                                                   [40.0, [-0.39, -0.11, 0.02]]])
    d_steps: list = field(default_factory=lambda: [[0.0, [0.0, 0.0]], [20.0, [0.3, -0.2]]])
    y0: list | None = None
    transient: float = 10.0
    substeps: int = 20


@dataclass
class CbfConfig:
    scenario: str = "toy"
    gamma: float = 1.0
    q_scale: float = 10.0
    steps: int = 100
    substeps: int = 100
    toy_target: float = 2.0
    toy_ceiling: float = 1.0
    toy_box: float = 100.0
    r: list = field(default_factory=lambda: [-0.55, 0.3, 0.05])
    d: list = field(default_factory=lambda: [0.2, -0.1])
    y0: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    z_ceiling: float = 0.65


@dataclass
class BaselineConfig:
    fixture: str = "fold"
    hidden: int | None = None
    epochs: int = 200
    polish_iters: int = 300
    samples: int = 3000
    horizon: int = 1
    y0: list = field(default_factory=lambda: [0.0])
    d: list = field(default_factory=lambda: [0.0])
    r: list = field(default_factory=lambda: [1.2])
    sweep_lower: float = -1.0
    sweep_upper: float = 1.0
    points: int = 41
    inits: list = field(default_factory=lambda: ["mid", "lower"])


@dataclass
class ChecksConfig:
    val_loss: float = 1e-4
    r2: float = 0.99
    kkt: float = 1e-8
    disagreement: float = 1e-6
    jump_factor: float = 10.0
    tracking: float = 0.01
    cbf_slack: float = 1e-3
    baseline_gap: float = 0.1


@dataclass
class PathsConfig:
    data: str = "data.csv"
    model: str = "model.json"
    baseline_model: str = "baseline_model.json"


@dataclass
class RunConfig:
    seed: int = 0
    plant: PlantConfig = field(default_factory=PlantConfig)
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ocp: OcpConfig = field(default_factory=OcpConfig)
    solve: SolveConfig = field(default_factory=SolveConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    cbf: CbfConfig = field(default_factory=CbfConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    checks: ChecksConfig = field(default_factory=ChecksConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_type(path: str, default, value):
    if default is None or value is None and default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key '{path}' expects {type(default).__name__}, got {value!r}")
    return value


def _build(cls, doc, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section '{prefix or '<root>'}' must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            where = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"unknown config key '{where}'")
    obj = cls()
    for key, value in doc.items():
        where = f"{prefix}.{key}" if prefix else key
        default = getattr(obj, key)
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, where)
        else:
            value = _check_type(where, default, value)
        setattr(obj, key, value)
    return obj


def _apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override key '{key}' descends into a non-section")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        _apply_override(doc, item)
    cfg = _build(RunConfig, doc, "")
    if seed is not None:
        cfg.seed = int(seed)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.plant.mode not in ("realizable", "misspecified"):
        raise ConfigError("config key 'plant.mode' must be 'realizable' or 'misspecified'")
    if not cfg.plant.u_lower < cfg.plant.u_upper:
        raise ConfigError("config keys 'plant.u_lower'/'plant.u_upper' must satisfy lower < upper")
    if cfg.ocp.horizon < 1:
        raise ConfigError("config key 'ocp.horizon' must be >= 1")
    if cfg.cbf.scenario not in ("toy", "model"):
        raise ConfigError("config key 'cbf.scenario' must be 'toy' or 'model'")
    if cfg.baseline.fixture not in ("fold", "plant"):
        raise ConfigError("config key 'baseline.fixture' must be 'fold' or 'plant'")
    if cfg.sweep.points < 2 or cfg.baseline.points < 2:
        raise ConfigError("sweeps need at least two grid points")


# --- run context -------------------------------------------------------------------

class CheckFailed(Exception):
    pass


class Run:
    """Output directory, report assembly and threshold checks for one command."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, check: bool):
        self.command, self.cfg, self.out, self.check = command, cfg, out, check
        self.t0 = time.perf_counter()
        self.metrics: dict = {}
        self.checks: dict = {}
        self.artifacts: list = []
        self.timings: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.cfg.hash(), "seed": self.cfg.seed, "command": self.command}

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ConfigError(f"required input {p} does not exist (run the producing command first)")
        return p

    def artifact(self, path: Path, sidecar: bool = True) -> None:
        self.artifacts.append(path.name)
        if sidecar:
            side = path.with_name(path.name + ".meta.json")
            side.write_text(json.dumps(self.stamp, indent=1, sort_keys=True))

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        self.artifact(p)
        return p

    def metric(self, name: str, value) -> None:
        self.metrics[name] = _jsonable(value)

    def threshold(self, name: str, value, limit, op: str = "<=") -> None:
        value = float(value)
        passed = bool(value <= limit) if op == "<=" else bool(value >= limit)
        self.checks[name] = {"value": value, "threshold": float(limit), "op": op, "passed": passed}

    def finish(self) -> int:
        report = {**self.stamp, "config": self.cfg.to_dict(), "versions": _versions(),
                  "seconds": time.perf_counter() - self.t0, "timings": self.timings,
                  "metrics": self.metrics, "checks": self.checks, "artifacts": self.artifacts}
        self.path(f"report_{self.command}.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        failed = [k for k, v in self.checks.items() if not v["passed"]]
        for k, v in self.checks.items():
            status = "PASS" if v["passed"] else "FAIL"
            print(f"[{status}] {self.command}: {k} = {v['value']:.3e} (need {v['op']} {v['threshold']:.3e})")
        if self.check and failed:
            print(f"check failed: {', '.join(failed)}", file=sys.stderr)
            return EXIT_CHECK
        return EXIT_OK


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _versions() -> dict:
    from importlib import metadata

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__,
            "shwmpc": pkg}


def _fmt(x) -> str:
    return repr(float(x))


def _plant(cfg: RunConfig):
    from .plant import SyntheticPlant

    p = cfg.plant
    return SyntheticPlant(mode=p.mode, seed=p.seed, delta=p.delta, u_lower=np.full(3, p.u_lower),
                          u_upper=np.full(3, p.u_upper), z_ceiling=p.z_ceiling)


def _load_shw(run: Run):
    from .modelio import load_model
    from .shw import ShwModel

    m = load_model(run.require(run.cfg.paths.model))
    if not isinstance(m, ShwModel):
        raise ConfigError(f"{run.cfg.paths.model} does not hold a structured model")
    return m


# --- commands ------------------------------------------------------------------------

def cmd_generate(run: Run) -> None:
    from .plant import Excitation, generate_dataset

    cfg = run.cfg
    plant = _plant(cfg)
    exc = Excitation(hold_min=cfg.data.hold_min, hold_max=cfg.data.hold_max,
                     multisine_amp=cfg.data.multisine_amp, d_amp=cfg.data.d_amp, seed=cfg.seed)
    t = time.perf_counter()
    ds = generate_dataset(plant, exc, duration=cfg.data.duration, substeps=cfg.data.substeps,
                          noise=cfg.data.noise, noise_seed=cfg.seed + 1)
    run.timings["generate"] = time.perf_counter() - t
    p = run.path(cfg.paths.data)
    ds.to_csv(p)
    run.artifact(p)
    span = (ds.u.max(0) - ds.u.min(0)) / (cfg.plant.u_upper - cfg.plant.u_lower)
    run.metric("records", len(ds))
    run.metric("u_coverage", span)
    run.metric("y_range", [ds.y.min(0), ds.y.max(0)])
    run.threshold("u_coverage_min", span.min(), 0.8, ">=")


def cmd_train(run: Run) -> None:
    from .ident import IdentConfig, TimeSeriesDataset, fit, one_step_r2
    from .modelio import save_model
    from .shw import ShwArch

    cfg = run.cfg
    ds = TimeSeriesDataset.from_csv(run.require(cfg.paths.data))
    dims = ds.dims
    arch = ShwArch(n_u=dims["n_u"], n_z=dims["n_z"], n_d=dims["n_d"], delta=cfg.plant.delta,
                   **asdict(cfg.arch))
    icfg = IdentConfig(seed=cfg.seed, **asdict(cfg.train))
    model, report = fit(ds, arch, icfg)
    r2 = one_step_r2(model, ds.split(icfg.val_frac)[1])
    run.timings["train"] = report["seconds"]
    p = run.path(cfg.paths.model)
    save_model(model, p, {**run.stamp, "final_val_loss": report["final_val_loss"]})
    run.artifact(p, sidecar=False)
    run.metric("final_train_loss", report["final_train_loss"])
    run.metric("final_val_loss", report["final_val_loss"])
    run.metric("one_step_r2", r2)
    run.metric("n_params", model.n_params())
    run.metric("min_abs_det_jacobian", report.get("min_abs_det_jacobian"))
    if cfg.data.noise == 0:
        run.threshold("val_loss", report["final_val_loss"], cfg.checks.val_loss)
    run.threshold("one_step_r2_min", r2.min(), cfg.checks.r2, ">=")


def cmd_solve(run: Run) -> None:
    from .ocp import make_instance, named_init, solve, solve_hard_z

    cfg = run.cfg
    m = _load_shw(run)
    s = cfg.solve
    x0 = m.to_x(s.y0, s.d)
    inst = make_instance(m, x0, s.d, s.r, cfg.ocp.horizon, cfg.plant.u_lower, cfg.plant.u_upper,
                         cfg.plant.z_ceiling, None if cfg.ocp.hard_z else cfg.ocp.z_weight)
    V0 = named_init(inst, s.init)
    sol = solve_hard_z(inst, V0) if cfg.ocp.hard_z else solve(inst, V0, tol=cfg.ocp.tol)
    n_u = inst.n_u
    U = sol.U.reshape(-1, n_u)
    V = sol.V.reshape(-1, n_u)
    Z = m.z_of(inst.stage_inputs(sol.V)[:, : inst.n_y], V, s.d)
    rows = [[k] + [_fmt(a) for a in U[k]] + [_fmt(a) for a in V[k]] + [_fmt(a) for a in Z[k]]
            for k in range(len(U))]
    run.write_csv("solution.csv", ["k"] + [f"u_{i + 1}" for i in range(n_u)] + [f"v_{i + 1}" for i in range(n_u)]
                  + [f"z_{i + 1}" for i in range(Z.shape[1])], rows)
    run.metric("objective", sol.objective)
    run.metric("kkt_residual", sol.kkt_residual_inf)
    run.metric("iterations", sol.iterations)
    run.metric("u_first", U[0])
    if not cfg.ocp.hard_z:
        run.threshold("kkt_residual", sol.kkt_residual_inf, cfg.checks.kkt)


def _sweep_rows(tab):
    rows = []
    for i, g in enumerate(tab.grid):
        for j, name in enumerate(tab.inits):
            rows.append([_fmt(g), name] + [_fmt(a) for a in tab.u[i, j]]
                        + [_fmt(tab.objective[i, j]), _fmt(tab.kkt[i, j]), int(tab.iterations[i, j])])
    return rows


def _sweep_header(n_u):
    return ["grid", "init"] + [f"u_{i + 1}" for i in range(n_u)] + ["objective", "kkt_residual", "iterations"]


def cmd_sweep(run: Run) -> None:
    from .ocp import ocp_sweep

    cfg = run.cfg
    m = _load_shw(run)
    s = cfg.sweep
    grid = np.linspace(s.lower, s.upper, s.points)
    t = time.perf_counter()
    tab = ocp_sweep(m, s.d, s.r, s.y0, s.channel, grid, s.inits, cfg.ocp.horizon, cfg.plant.u_lower,
                    cfg.plant.u_upper, cfg.plant.z_ceiling, cfg.ocp.z_weight)
    run.timings["sweep"] = time.perf_counter() - t
    if tab.errors:
        first = next(iter(tab.errors.values()))
        run.metric("failed_points", len(tab.errors))
        run.metric("first_error", first)
    run.write_csv("sweep.csv", _sweep_header(tab.u.shape[-1]), _sweep_rows(tab))
    q = tab.quotients()
    med = float(np.median(q))
    dis = tab.disagreement
    run.metric("max_disagreement", np.nanmax(dis))
    run.metric("max_kkt", np.nanmax(tab.kkt))
    run.metric("median_quotient", med)
    run.metric("max_quotient", float(np.max(q)))
    run.threshold("max_disagreement", np.nanmax(dis) if not tab.errors else np.inf, cfg.checks.disagreement)
    run.threshold("max_kkt", np.nanmax(tab.kkt) if not tab.errors else np.inf, cfg.checks.kkt)
    ratio = float(np.max(q) / med) if med > 0 else np.inf
    run.threshold("quotient_jump_ratio", ratio, cfg.checks.jump_factor)


def tracking_errors(log: dict, r_steps, d_steps, transient: float) -> np.ndarray:
    """Max ``|y - r| / span(r)`` per channel over each settled window.

    Windows start ``transient`` seconds after every reference or
    disturbance change and end at the next change.
    """
    t = log["t"]
    changes = sorted({float(s[0]) for s in r_steps} | {float(s[0]) for s in d_steps} | {0.0})
    ends = changes[1:] + [t[-1] + 1e-9]
    span = log["r"].max(0) - log["r"].min(0)
    span = np.where(span > 0, span, max(span.max(), 1.0))
    worst = np.zeros(log["y"].shape[1])
    for a, b in zip(changes, ends):
        sel = (t >= a + transient) & (t < b - 1e-9)
        if sel.any():
            err = np.abs(log["y"][sel] - log["r"][sel]).max(0) / span
            worst = np.maximum(worst, err)
    return worst


def cmd_mpc(run: Run) -> None:
    from .ocp import MpcController
    from .plant import Scenario, closed_loop

    cfg = run.cfg
    m = _load_shw(run)
    plant = _plant(cfg)
    mc = cfg.mpc
    ctl = MpcController(m, cfg.ocp.horizon, cfg.plant.u_lower, cfg.plant.u_upper, cfg.plant.z_ceiling,
                        cfg.ocp.z_weight, hard_z=cfg.ocp.hard_z, tol=cfg.ocp.tol)
    scen = Scenario(mc.r_steps, mc.d_steps)
    t = time.perf_counter()
    log = closed_loop(plant, ctl, scen, mc.duration, y0=mc.y0, substeps=mc.substeps)
    run.timings["closed_loop"] = time.perf_counter() - t
    n = log["t"].shape[0]
    header = (["t"] + [f"u_{i + 1}" for i in range(log["u"].shape[1])] + [f"d_{i + 1}" for i in range(log["d"].shape[1])]
              + [f"r_{i + 1}" for i in range(log["r"].shape[1])] + [f"y_{i + 1}" for i in range(log["y"].shape[1])]
              + [f"z_{i + 1}" for i in range(log["z"].shape[1])])
    rows = [[_fmt(log["t"][k])] + [_fmt(a) for key in ("u", "d", "r", "y", "z") for a in log[key][k]]
            for k in range(n)]
    run.write_csv("trajectory.csv", header, rows)
    err = tracking_errors(log, mc.r_steps, mc.d_steps, mc.transient)
    z_excess = float(np.max(log["z"] - cfg.plant.z_ceiling))
    secs = np.asarray(ctl.stats["seconds"])
    its = np.asarray(ctl.stats["iterations"])
    run.metric("tracking_error_rel", err)
    run.metric("z_max_excess", z_excess)
    run.metric("solve_seconds_mean", secs.mean())
    run.metric("seconds_per_iteration", float(secs.sum() / max(its.sum(), 1)))
    run.metric("iterations_mean", its.mean())
    run.metric("max_kkt", max(ctl.stats["kkt"]))
    run.threshold("tracking_error_rel", err.max(), cfg.checks.tracking)
    if not cfg.ocp.hard_z:
        run.threshold("max_kkt", max(ctl.stats["kkt"]), cfg.checks.kkt)


def cmd_cbf(run: Run) -> None:
    from .cbf import cbf_closed_loop, integrator_toy, make_controller, state_only

    cfg = run.cfg
    c = cfg.cbf
    if c.scenario == "toy":
        m = integrator_toy(cfg.plant.delta)
        ctrl = make_controller(m, [0.0], [c.toy_target], -c.toy_box, c.toy_box, z_ceiling=c.toy_ceiling,
                               gamma=c.gamma, Q=[[c.q_scale]])
        x0 = np.zeros(1)
    else:
        m = state_only(_load_shw(run))
        n_y = m.dims[1]
        ctrl = make_controller(m, c.d, c.r, cfg.plant.u_lower, cfg.plant.u_upper, z_ceiling=c.z_ceiling,
                               gamma=c.gamma, Q=c.q_scale * np.eye(n_y))
        x0 = m.to_x(c.y0, c.d)
    t = time.perf_counter()
    tr = cbf_closed_loop(ctrl, m, x0, c.steps, c.substeps)
    run.timings["closed_loop"] = time.perf_counter() - t
    p = run.path("cbf_trajectory.csv")
    tr.to_csv(p)
    run.artifact(p)
    run.metric("max_violation", tr.max_violation)
    run.metric("active_fraction", float(tr.active.mean()) if tr.active.size else 0.0)
    run.metric("riccati_P", ctrl.P)
    run.threshold("max_violation", tr.max_violation, cfg.checks.cbf_slack)


def cmd_baseline(run: Run) -> None:
    from .baseline import (BaselineProblem, baseline_fit, baseline_mpc_solve, baseline_sweep,
                           first_input_grid_search, fold_dataset)
    from .ident import TimeSeriesDataset
    from .modelio import save_model

    cfg = run.cfg
    b = cfg.baseline
    if b.fixture == "fold":
        ds = fold_dataset(b.samples, cfg.seed, cfg.plant.delta)
        target = None
        hidden = b.hidden or 16
    else:
        ds = TimeSeriesDataset.from_csv(run.require(cfg.paths.data))
        target = _load_shw(run).n_params()
        hidden = b.hidden
    model, rep = baseline_fit(ds, hidden=hidden, target_params=target, delta=cfg.plant.delta, epochs=b.epochs,
                              polish_iters=b.polish_iters, seed=cfg.seed)
    p = run.path(cfg.paths.baseline_model)
    save_model(model, p, {**run.stamp, "val_r2": rep["val_r2"]})
    run.artifact(p, sidecar=False)
    run.metric("n_params", rep["n_params"])
    run.metric("reference_params", target)
    run.metric("val_r2", rep["val_r2"])
    run.timings["fit"] = rep["seconds"]
    lo, hi = cfg.plant.u_lower, cfg.plant.u_upper
    grid = np.linspace(b.sweep_lower, b.sweep_upper, b.points)
    tab = baseline_sweep(model, b.d, b.r, b.y0, 0, grid, b.inits, b.horizon, lo, hi)
    run.write_csv("baseline_sweep.csv", _sweep_header(tab.u.shape[-1]), _sweep_rows(tab))
    gap = float(np.nanmax(tab.disagreement)) / (hi - lo)
    run.metric("max_disagreement_normalized", gap)
    run.metric("max_kkt", np.nanmax(tab.kkt))
    run.threshold("max_disagreement_normalized", gap, cfg.checks.baseline_gap, ">=")
    if b.fixture == "fold":
        prob = BaselineProblem(model, b.y0, b.d, b.r, b.horizon, lo, hi)
        sols = {name: baseline_mpc_solve(prob, name) for name in b.inits}
        u_best, f_best, _, _ = first_input_grid_search(prob)
        run.metric("solutions", {k: {"u": v[0], **{kk: vv for kk, vv in v[1].items() if kk != "lam"}}
                                 for k, v in sols.items()})
        run.metric("grid_optimum", {"u": u_best, "objective": f_best})


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "solve": cmd_solve, "sweep": cmd_sweep,
            "mpc": cmd_mpc, "cbf": cmd_cbf, "baseline": cmd_baseline}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shwmpc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", default="run", help="output directory (default: ./run)")
        sp.add_argument("--check", action="store_true", help="exit 4 if any acceptance threshold fails")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set ocp.horizon=10")
    return ap


def _threads_from_env() -> None:
    raw = os.environ.get("SHWMPC_THREADS")
    if raw:
        try:
            n = int(raw)
            if n < 1:
                raise ValueError
        except ValueError as exc:
            raise ConfigError(f"SHWMPC_THREADS must be a positive integer, got {raw!r}") from exc
        torch.set_num_threads(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _threads_from_env()
        cfg = load_config(args.config, args.set, args.seed)
        torch.manual_seed(cfg.seed)
        run = Run(args.command, cfg, Path(args.out), args.check)
        COMMANDS[args.command](run)
        return run.finish()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShwError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
