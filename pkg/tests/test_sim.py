import csv
import io
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from sbmtp.errors import ConfigurationError, NumericalAbort
from sbmtp.kinematics import Pose, forward_kinematics
from sbmtp.sim import (
    ScenarioConfig,
    TraceRecord,
    WaypointPath,
    compute_metrics,
    load_scenario,
    run_scenario,
    sample_path,
    scenario_from_dict,
    trace_to_csv,
)
from sbmtp.solver import SolverConfig
from sbmtp.tasks import EndEffectorPosition, JointValue, Mode, TaskHierarchy, TaskKind, TaskSpec, ThresholdSet

from conftest import scenario_run

IDENTITY = [1.0, 0.0, 0.0, 0.0]


def line(length=1.0, speed=0.1, **kw):
    return WaypointPath((Pose([0, 0, 0], IDENTITY), Pose([length, 0, 0], IDENTITY)), speed, **kw)


# --- paths ------------------------------------------------------------------------------


def test_path_start():
    pose, twist = sample_path(line(), 0.0)
    np.testing.assert_allclose(pose.position, [0, 0, 0])
    np.testing.assert_allclose(twist, [0.1, 0, 0, 0, 0, 0])


def test_path_midpoint():
    pose, _ = sample_path(line(), 5.0)
    np.testing.assert_allclose(pose.position, [0.5, 0, 0], atol=1e-15)


def test_path_terminal_hold():
    path = line()
    pose, twist = sample_path(path, 100.0)
    np.testing.assert_allclose(pose.position, [1, 0, 0])
    np.testing.assert_array_equal(twist, np.zeros(6))
    assert path.total_time == pytest.approx(10.0)


def test_loop_back_returns():
    path = line(loop_back=True)
    assert path.total_time == pytest.approx(20.0)
    pose, twist = sample_path(path, 15.0)
    np.testing.assert_allclose(pose.position, [0.5, 0, 0], atol=1e-12)
    np.testing.assert_allclose(twist[:3], [-0.1, 0, 0])
    np.testing.assert_allclose(sample_path(path, 30.0)[0].position, [0, 0, 0])


def test_dwell_holds_intermediate_waypoints():
    path = WaypointPath(
        (Pose([0, 0, 0], IDENTITY), Pose([1, 0, 0], IDENTITY), Pose([1, 1, 0], IDENTITY)), 0.5, dwell=2.0
    )
    assert path.total_time == pytest.approx(6.0)
    pose, twist = sample_path(path, 3.0)
    np.testing.assert_allclose(pose.position, [1, 0, 0])
    np.testing.assert_array_equal(twist, np.zeros(6))


def test_velocity_is_derivative_of_position():
    path = WaypointPath((Pose([0, 0, 0], IDENTITY), Pose([0.3, 0.2, 0], IDENTITY), Pose([0.3, 0.2, 0.5], IDENTITY)), 0.07)
    h = 1e-6
    for t in np.linspace(0.1, path.total_time - 0.1, 25):
        p0 = sample_path(path, t - h)[0].position
        p1 = sample_path(path, t + h)[0].position
        twist = sample_path(path, t)[1]
        if np.allclose((p1 - p0) / (2 * h), twist[:3], atol=1e-6):
            continue
        # only a waypoint instant may disagree
        assert any(abs(t - s) < 2 * h for s in (0.3605551275463989 / 0.07,))


def test_slerp_orientation_and_angular_velocity():
    half = [math.cos(0.25), 0, 0, math.sin(0.25)]  # 0.5 rad about z
    path = WaypointPath((Pose([0, 0, 0], IDENTITY), Pose([1, 0, 0], half)), 0.5, hold_orientation=False)
    pose, twist = sample_path(path, 1.0)
    np.testing.assert_allclose(pose.orientation, [math.cos(0.125), 0, 0, math.sin(0.125)], atol=1e-12)
    np.testing.assert_allclose(twist[3:], [0, 0, 0.25], atol=1e-12)


def test_bad_paths_rejected():
    with pytest.raises(ConfigurationError):
        WaypointPath((Pose([0, 0, 0], IDENTITY),), 0.1)
    with pytest.raises(ConfigurationError):
        line(speed=0.0)
    with pytest.raises(ConfigurationError):
        sample_path(line(), -1.0)


# --- metrics --------------------------------------------------------------------------------


def fake_trace(modes, error=0.01, values=None):
    spec = TaskSpec("lim", TaskKind.SET_BASED, JointValue(1), 1.0, 1, ThresholdSet(-1.0, 1.0, -1.5, 1.5, 0.1))
    recs = []
    for k, mode in enumerate(modes):
        v = 0.0 if values is None else values[k]
        recs.append(
            TraceRecord(
                t=0.1 * k,
                q=np.zeros(2),
                ee_pose=Pose([0, 0, 0], IDENTITY),
                desired_pose=Pose([error, 0, 0], IDENTITY),
                values={"lim": v},
                modes={"lim": mode},
                desired={"lim": math.nan},
                qdot=np.zeros(2),
                saturated=False,
            )
        )
    return recs, [spec]


def test_metrics_without_mode_changes():
    trace, tasks = fake_trace([Mode.INACTIVE] * 5)
    m = compute_metrics(trace, tasks)
    assert m.activation_count == {"lim": 0}
    assert m.joints_reaching_limits == 0
    assert m.tracking_rmse == pytest.approx(0.01)
    assert m.max_tracking_error == pytest.approx(0.01)


def test_metrics_count_activation_edges():
    I, L = Mode.INACTIVE, Mode.ACTIVE_LOWER
    trace, tasks = fake_trace([I, L, L, I, L, I])
    m = compute_metrics(trace, tasks)
    assert m.activation_count == {"lim": 2}
    assert m.active_time_fraction["lim"] == pytest.approx(0.5)
    assert m.joints_reaching_limits == 1


def test_metrics_count_initially_active_record():
    trace, tasks = fake_trace([Mode.ACTIVE_UPPER, Mode.ACTIVE_UPPER, Mode.INACTIVE])
    assert compute_metrics(trace, tasks).activation_count == {"lim": 1}


def test_metrics_physical_violations():
    trace, tasks = fake_trace([Mode.INACTIVE] * 3, values=[0.0, 1.6, -1.7])
    assert compute_metrics(trace, tasks).physical_violation_count == 2


def test_metrics_of_empty_trace_rejected():
    with pytest.raises(ConfigurationError):
        compute_metrics([], [])


def test_csv_layout():
    trace, _ = fake_trace([Mode.INACTIVE, Mode.ACTIVE_LOWER])
    rows = list(csv.reader(io.StringIO(trace_to_csv(trace))))
    assert rows[0] == [
        "t", "q_1", "q_2", "ee_x", "ee_y", "ee_z", "ee_qw", "ee_qx", "ee_qy", "ee_qz",
        "des_x", "des_y", "des_z", "err_norm", "lim_value", "lim_mode", "lim_desired",
    ]
    assert rows[2][15] == "1"
    assert len(rows) == 3


# --- scenario runs ---------------------------------------------------------------------------


def equality_scenario(arm, q0, path, **kw):
    ee = TaskSpec("ee", TaskKind.EQUALITY, EndEffectorPosition(), 1.5)
    return ScenarioConfig(arm, TaskHierarchy((ee,)), path, q0, **kw)


def test_equilibrium_run(arm):
    q0 = np.array([0.3, 0.5, 0.2, -1.5, 0.3, 0.8, 0.0])
    p = forward_kinematics(arm, q0)
    path = WaypointPath((p, p), 0.1)
    trace, metrics = run_scenario(equality_scenario(arm, q0, path, duration=0.5))
    assert len(trace) == 101
    assert metrics.tracking_rmse < 1e-6
    assert max(np.abs(r.qdot).max() for r in trace) < 1e-9
    assert metrics.min_manipulability is None


def test_records_are_evenly_spaced(arm):
    q0 = np.array([0.3, 0.5, 0.2, -1.5, 0.3, 0.8, 0.0])
    p = forward_kinematics(arm, q0)
    path = WaypointPath((p, Pose(p.position + [0, 0.02, 0], p.orientation)), 0.05)
    trace, _ = run_scenario(equality_scenario(arm, q0, path, duration=0.2, dt=0.01))
    np.testing.assert_allclose([r.t for r in trace], 0.01 * np.arange(21))


def test_halving_dt_gives_first_order_change(arm):
    q0 = np.array([0.3, 0.5, 0.2, -1.5, 0.3, 0.8, 0.0])
    p = forward_kinematics(arm, q0)
    path = WaypointPath((p, Pose(p.position + [0, -0.1, 0.05], p.orientation)), 0.05)

    def final(dt):
        trace, _ = run_scenario(equality_scenario(arm, q0, path, duration=2.4, dt=dt))
        return trace[-1].q

    a, b, c = final(0.02), final(0.01), final(0.005)
    d1, d2 = np.linalg.norm(a - b), np.linalg.norm(b - c)
    assert d2 < d1
    assert 1.5 < d1 / d2 < 3.0


def test_scenario_config_validation(arm):
    q0 = np.zeros(7)
    p = forward_kinematics(arm, q0)
    path = WaypointPath((p, p), 0.1)
    with pytest.raises(ConfigurationError):
        equality_scenario(arm, q0, path, dt=0.0)
    with pytest.raises(ConfigurationError):
        equality_scenario(arm, q0, path, dt=0.01, duration=0.005)
    with pytest.raises(ConfigurationError):
        equality_scenario(arm, np.full(7, 3.0), path)
    with pytest.raises(ConfigurationError):
        equality_scenario(arm, np.zeros(6), path)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_run_aborts(arm):
    q0 = np.array([0.3, 0.5, 0.2, -1.5, 0.3, 0.8, 0.0])
    goal = TaskSpec("wild", TaskKind.EQUALITY, JointValue(1), 1e9, desired=[1.0])
    p = forward_kinematics(arm, q0)
    cfg = ScenarioConfig(arm, TaskHierarchy((goal,)), WaypointPath((p, p), 0.1), q0, duration=1.0,
                         solver=SolverConfig(velocity_limit=None))
    with pytest.raises(NumericalAbort) as info:
        run_scenario(cfg)
    assert info.value.index > 0


def test_scenario_file_round_trip(tmp_path):
    data = json.loads((load_scenario.__globals__["DATA_DIR"] / "case_study_1.json").read_text())
    data["chain"] = str(load_scenario.__globals__["DATA_DIR"] / data["chain"])
    data["hierarchy"] = str(load_scenario.__globals__["DATA_DIR"] / data["hierarchy"])
    cfg = scenario_from_dict(data, tmp_path)
    assert cfg.name == "case_study_1"
    assert cfg.solver.deactivation_tol == 1e-3
    with pytest.raises(ConfigurationError, match="unknown"):
        scenario_from_dict({**data, "solver": {"dampng": 0.1}}, tmp_path)
    with pytest.raises(ConfigurationError, match="q0"):
        scenario_from_dict({k: v for k, v in data.items() if k != "q0"}, tmp_path)


def test_missing_scenario_reported():
    with pytest.raises(ConfigurationError):
        load_scenario("no_such_scenario")


def test_shipped_scenarios_state_their_rows():
    cfg = load_scenario("case_study_2")
    manip = [t for t in cfg.hierarchy.tasks if t.is_set_based][0]
    assert manip.objective.rows == (0, 1, 2, 3, 4, 5)


# --- shipped case studies (shared runs) ---------------------------------------------------------


@pytest.mark.parametrize("name", ["case_study_1", "case_study_2"])
def test_optimization_never_hurts(name):
    _, _, without = scenario_run(name, False)
    _, _, with_ = scenario_run(name, True)
    assert with_.tracking_rmse <= without.tracking_rmse
    assert sum(with_.active_time_fraction.values()) <= sum(without.active_time_fraction.values())


@pytest.mark.parametrize("name", ["case_study_1", "case_study_2"])
@pytest.mark.parametrize("flag", [False, True])
def test_case_studies_stay_inside_physical_bounds(name, flag):
    _, _, metrics = scenario_run(name, flag)
    assert metrics.physical_violation_count == 0


def test_case_study_1_counterparts_exist():
    cfg, trace, _ = scenario_run("case_study_1", True)
    assert {t.id for t in cfg.tasks if t.kind is TaskKind.OPTIMIZATION} == {f"joint{i}_opt" for i in range(1, 7)}
    assert "joint1_opt" in trace[0].values
