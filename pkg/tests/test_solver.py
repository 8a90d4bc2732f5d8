import io
import math

import numpy as np
import pytest

from fepa import parse_model, vector_field
from fepa.solver import (
    IntegrationError,
    SolverConfig,
    Trajectory,
    integrate,
    norm,
    residual_norm,
    trajectory_distance,
)

from helpers import sys_model


def test_exponential_decay_rk45():
    traj = integrate(lambda x: -x, [1.0], SolverConfig(t_end=1.0, grid=0.5))
    assert abs(traj.states[-1, 0] - math.exp(-1.0)) <= 1e-8
    assert traj.names == ("x0",)
    assert traj.states[0, 0] == 1.0


def test_linear_system_rk45_against_closed_form():
    # harmonic oscillator x'' = -x
    traj = integrate(lambda v: np.array([v[1], -v[0]]), [1.0, 0.0], SolverConfig(t_end=10.0, grid=0.1))
    assert np.allclose(traj.states[:, 0], np.cos(traj.times), atol=1e-7)


def test_rk4_fourth_order_convergence():
    def err(h):
        cfg = SolverConfig(method="rk4", h=h, t_end=2.0, grid=1.0)
        traj = integrate(lambda v: np.array([v[1], -v[0]]), [1.0, 0.0], cfg)
        return abs(traj.states[-1, 0] - math.cos(2.0))

    ratio = err(0.1) / err(0.05)
    assert 14.0 < ratio < 18.0


def test_rk4_is_bitwise_deterministic():
    f = vector_field(sys_model(3, rho="min"))
    cfg = SolverConfig(method="rk4", h=0.01, t_end=5.0, grid=0.5)
    a = integrate(f, f.initial_state(), cfg)
    b = integrate(f, f.initial_state(), cfg)
    assert a.states.tobytes() == b.states.tobytes()


def test_compiled_and_python_paths_agree():
    f = vector_field(sys_model(2, rho="product"))
    cfg = SolverConfig(t_end=2.0, grid=0.2)
    fast = integrate(f, f.initial_state(), cfg)
    slow = integrate(lambda v: f(v), f.initial_state(), cfg, names=f.names)
    assert trajectory_distance(fast, slow) <= 1e-9


@pytest.mark.parametrize("rho", ["min", "product"])
def test_conservation_along_trajectories(rho):
    f = vector_field(sys_model(4, rates=[1.0, 1.2, 0.8, 1.5], rho=rho))
    traj = integrate(f, f.initial_state())
    for atom, idx in f.atom_states.items():
        totals = traj.states[:, idx].sum(axis=1)
        assert np.abs(totals - totals[0]).max() <= 1e-8 * max(1.0, totals[0])


@pytest.mark.parametrize("rho", ["min", "product"])
def test_equilibrium_by_t100(rho):
    f = vector_field(sys_model(3, rho=rho))
    traj = integrate(f, f.initial_state())
    R, _ = f.component_rates(traj.states[-1])
    assert residual_norm(f, traj) <= 1e-7 * max(1.0, R.max())


def test_min_kink_does_not_stall():
    # u*V_Q starts below r*V_P and crosses it, switching the min branch
    f = vector_field(sys_model(1, rho="min", q0=50, u=2.0))
    traj = integrate(f, f.initial_state(), SolverConfig(t_end=20.0, grid=0.1))
    assert traj.states.min() >= -1e-8


def test_grid_and_first_row():
    f = vector_field(sys_model(1))
    traj = integrate(f, f.initial_state(), SolverConfig(t_end=1.0, grid=0.25))
    assert np.allclose(traj.times, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert np.array_equal(traj.states[0], f.initial_state())


@pytest.mark.parametrize(
    "kwargs",
    [dict(method="euler"), dict(rtol=0.0), dict(h=-1.0), dict(t_end=1.0, grid=0.3), dict(grid=0.0)],
)
def test_bad_config(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_blow_up_is_reported():
    with pytest.raises(IntegrationError):
        integrate(lambda x: x * x, [1.0], SolverConfig(t_end=2.0, grid=0.5))


def test_nonfinite_start_is_rejected():
    with pytest.raises(IntegrationError):
        integrate(lambda x: -x, [math.nan], SolverConfig(t_end=1.0, grid=0.5))


def test_dimension_mismatch():
    f = vector_field(sys_model(1))
    with pytest.raises(ValueError):
        integrate(f, [1.0, 2.0], SolverConfig(t_end=1.0, grid=0.5))


# --------------------------------------------------------------------------
# trajectories


def make(states, names=("a", "b")):
    states = np.asarray(states, dtype=float)
    return Trajectory(np.arange(len(states)) * 0.5, states, names)


def test_distance_to_self_is_zero():
    a = make([[1, 2], [3, 4]])
    assert trajectory_distance(a, a) == 0.0


def test_single_point_offset():
    a = make([[1, 2], [3, 4], [5, 6]])
    b = make([[1, 2], [3, 4.75], [5, 6]])
    assert trajectory_distance(a, b, "inf") == 0.75
    assert trajectory_distance(a, b, "1") == 0.75
    assert trajectory_distance(a, b, "2") == 0.75


def test_distance_with_mapping_and_mismatch():
    a = make([[1, 2], [3, 4]])
    b = make([[2, 1], [4, 3]], names=("y", "x"))
    assert trajectory_distance(a, b, mapping={"a": "x", "b": "y"}) == 0.0
    with pytest.raises(ValueError):
        trajectory_distance(a, b)
    with pytest.raises(ValueError):
        trajectory_distance(a, make([[1, 2]]))


def test_norm_kinds():
    assert norm([3.0, -4.0], "inf") == 4.0
    assert norm([3.0, -4.0], "1") == 7.0
    assert norm([3.0, -4.0], "2") == 5.0
    with pytest.raises(ValueError):
        norm([1.0], "max")


def test_csv_round_trip_is_exact(tmp_path):
    f = vector_field(sys_model(2))
    traj = integrate(f, f.initial_state(), SolverConfig(t_end=2.0, grid=0.5))
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    back = Trajectory.from_csv(path)
    assert back.names == traj.names
    assert np.array_equal(back.states, traj.states)
    assert np.array_equal(back.times, traj.times)
    buf = io.StringIO()
    traj.to_csv(buf)
    assert buf.getvalue().splitlines()[0] == "t,P1,P1',P2,P2',Q,Q'"


def test_clamped_only_touches_negative_entries():
    a = make([[-1e-12, 2.0]])
    assert a.clamped().states.tolist() == [[0.0, 2.0]]
    assert a.states[0, 0] < 0


def test_column_sum():
    a = make([[1, 2], [3, 4]])
    assert a.column_sum(["a", "b"]).tolist() == [3.0, 7.0]


def test_model_with_single_atom_integrates():
    m = parse_model("A = (a, 2.0).B; B = (b, 1.0).A; init A = 3; system = A;")
    f = vector_field(m)
    traj = integrate(f, f.initial_state(), SolverConfig(t_end=5.0, grid=0.5))
    # two-state chain: A(t) = 1 + 2 exp(-3t)
    assert np.allclose(traj["A"], 1 + 2 * np.exp(-3 * traj.times), atol=1e-7)
