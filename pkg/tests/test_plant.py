import numpy as np
import pytest

from shwmpc.errors import ExcitationRejected
from shwmpc.plant import ClosedLoopAborted, Excitation, Scenario, SyntheticPlant, closed_loop, generate_dataset


@pytest.fixture(scope="module")
def wild():
    return SyntheticPlant(mode="misspecified")


@pytest.fixture(scope="module")
def default_data(plant):
    return generate_dataset(plant, Excitation(), duration=200.0)


def test_same_seed_bitwise_identical(plant):
    a = generate_dataset(plant, Excitation(seed=9), duration=20.0, noise=0.01)
    b = generate_dataset(plant, Excitation(seed=9), duration=20.0, noise=0.01)
    for name in ("t", "u", "d", "y", "z", "ydot", "ddot"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert SyntheticPlant().model.to_x(a.y[:3], a.d[:3]).tobytes() == plant.model.to_x(a.y[:3], a.d[:3]).tobytes()


def test_inputs_cover_box(plant, default_data):
    span = default_data.u.max(0) - default_data.u.min(0)
    assert np.all(span >= 0.8 * (plant.u_upper - plant.u_lower))


def test_outputs_roughly_normalized(default_data):
    assert np.all(np.abs(default_data.y) < 1.5)
    assert np.all(np.abs(default_data.d) <= 0.8 + 1e-12)


@pytest.mark.parametrize("mode", ["realizable", "misspecified"])
def test_zero_excitation_settles(mode):
    p = SyntheticPlant(mode=mode)
    x0 = 0.5 * np.ones(3)
    ds = generate_dataset(p, Excitation(zero=True), duration=60.0, x0=x0)
    assert np.all(ds.u == 0) and np.all(ds.d == 0)
    assert np.max(np.abs(ds.ydot[-1])) < 1e-6
    assert np.max(np.abs(ds.y[-1] - ds.y[-2])) < 1e-7


@pytest.mark.parametrize("mode", ["realizable", "misspecified"])
def test_derivatives_match_differences_second_order(mode):
    # one input level for the whole run keeps the signals smooth
    p = SyntheticPlant(mode=mode)
    exc = Excitation(hold_min=1e3, hold_max=1e3, seed=2)
    errs = []
    for dt in (0.1, 0.05):
        ds = generate_dataset(p, exc, duration=10.0, dt_sample=dt, substeps=20)
        fd = (ds.y[2:] - ds.y[:-2]) / (2 * dt)
        errs.append(np.max(np.abs(fd - ds.ydot[1:-1])))
    assert errs[0] < 5e-3
    assert 3.0 < errs[0] / errs[1] < 5.0


@pytest.mark.parametrize("mode", ["realizable", "misspecified"])
def test_rk4_fourth_order(mode):
    p = SyntheticPlant(mode=mode)
    rng = np.random.default_rng(0)
    u, d = rng.uniform(-1, 1, 3), rng.uniform(-0.8, 0.8, 2)
    x0 = np.array([0.8, -0.6, 0.4])
    T = 4.0

    def run(h):
        M = int(round(T / h))
        return p.integrate(x0, np.broadcast_to(u, (M, 3, 3)).copy(), np.broadcast_to(d, (M, 3, 2)).copy(), h)[-1]

    ref = run(0.4 / 64)
    e1, e2 = np.max(np.abs(run(0.4) - ref)), np.max(np.abs(run(0.2) - ref))
    assert 12.0 < e1 / e2 < 20.0


def test_misspecified_drift_dissipative(wild):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(2000, 3))
    X = 5.0 * X / np.linalg.norm(X, axis=1, keepdims=True)
    U, D = rng.uniform(-1, 1, (2000, 3)), rng.uniform(-1, 1, (2000, 2))
    assert np.all(np.sum(X * wild.xdot(X, U, D), axis=1) < 0)


def test_blowup_rejected(wild):
    with pytest.raises(ExcitationRejected):
        generate_dataset(wild, Excitation(), duration=5.0, x0=np.full(3, 200.0))


def test_unknown_mode():
    with pytest.raises(ValueError):
        SyntheticPlant(mode="engine")


@pytest.mark.parametrize("mode", ["realizable", "misspecified"])
def test_constant_input_loop_matches_dataset_integrator(mode):
    p = SyntheticPlant(mode=mode)
    zeros = np.zeros(3)
    ds = generate_dataset(p, Excitation(zero=True), duration=5.0, substeps=20,
                          x0=p.state_from_output(zeros, np.zeros(2)))
    log = closed_loop(p, lambda t, y, d, r: zeros, Scenario([(0.0, zeros)], [(0.0, np.zeros(2))]), 5.0)
    assert np.max(np.abs(log["y"] - ds.y)) < 1e-12
    assert np.max(np.abs(log["z"] - ds.z)) < 1e-12


def test_controller_exception_aborts_with_partial_log(plant):
    def ctrl(t, y, d, r):
        if t > 0.95:
            raise RuntimeError("boom")
        return np.zeros(3)

    with pytest.raises(ClosedLoopAborted, match="boom") as info:
        closed_loop(plant, ctrl, Scenario([(0.0, np.zeros(3))], [(0.0, np.zeros(2))]), 3.0)
    assert len(info.value.log["t"]) == 10


def test_out_of_box_input_aborts(plant):
    with pytest.raises(ClosedLoopAborted, match="outside"):
        closed_loop(plant, lambda *a: np.full(3, 2.0), Scenario([(0.0, np.zeros(3))], [(0.0, np.zeros(2))]), 1.0)


def test_scenario_schedule():
    s = Scenario([(0.0, [1.0]), (2.0, [3.0])], [(0.0, [0.0])])
    assert s.r(1.999)[0] == 1.0 and s.r(2.0)[0] == 3.0
