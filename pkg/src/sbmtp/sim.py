"""Scenario replay: waypoint references, Euler integration, traces and metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, NumericalAbort
from .kinematics import KinematicChain, Pose, forward_kinematics, load_chain, quat_to_matrix
from .solver import SolverConfig, resolve_cycle
from .tasks import (
    DeactivationRule,
    JointValue,
    Manipulability,
    Mode,
    Reference,
    SetBasedState,
    TaskHierarchy,
    TaskKind,
    TaskSpec,
    evaluate_task,
    initial_state,
    load_hierarchy,
)

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"


# --- paths ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WaypointPath:
    """Straight segments between waypoints travelled at constant speed.

    With ``loop_back`` the waypoints are followed forwards and then backwards
    to the start.  ``dwell`` holds each intermediate waypoint for that many
    seconds.
    """

    waypoints: tuple[Pose, ...]
    segment_speed: float
    hold_orientation: bool = True
    loop_back: bool = False
    dwell: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if len(self.waypoints) < 2:
            raise ConfigurationError("a path needs at least two waypoints")
        if not self.segment_speed > 0.0:
            raise ConfigurationError(f"segment_speed must be positive, got {self.segment_speed}")
        if not self.dwell >= 0.0:
            raise ConfigurationError("dwell must be non-negative")
        points = list(self.waypoints)
        if self.loop_back:
            points += points[-2::-1]
        segments = []
        t = 0.0
        for k, (a, b) in enumerate(zip(points[:-1], points[1:])):
            if k > 0 and self.dwell > 0.0:
                segments.append((t, self.dwell, a, a))
                t += self.dwell
            length = float(np.linalg.norm(b.position - a.position))
            segments.append((t, length / self.segment_speed, a, b))
            t += length / self.segment_speed
        object.__setattr__(self, "_segments", tuple(segments))
        object.__setattr__(self, "_points", tuple(points))

    @property
    def total_time(self) -> float:
        start, span, _, _ = self._segments[-1]
        return start + span


def sample_path(path: WaypointPath, t: float) -> tuple[Pose, np.ndarray]:
    """Desired pose and twist ``[v; omega]`` at time ``t``."""
    if t < 0.0:
        raise ConfigurationError("path time must be non-negative")
    hold_quat = path.waypoints[0].orientation
    for start, span, a, b in path._segments:
        if span > 0.0 and start <= t < start + span:
            s = (t - start) / span
            position = a.position + s * (b.position - a.position)
            velocity = (b.position - a.position) / span
            if path.hold_orientation:
                return Pose(position, hold_quat), np.concatenate([velocity, np.zeros(3)])
            rot_a = Rotation.from_matrix(quat_to_matrix(a.orientation))
            rot_b = Rotation.from_matrix(quat_to_matrix(b.orientation))
            rotvec = (rot_b * rot_a.inv()).as_rotvec()
            rot = Rotation.from_rotvec(s * rotvec) * rot_a
            x, y, z, w = rot.as_quat()
            return Pose(position, [w, x, y, z]), np.concatenate([velocity, rotvec / span])
    last = path._points[-1]
    quat = hold_quat if path.hold_orientation else last.orientation
    return Pose(last.position, quat), np.zeros(6)


# --- scenarios ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    chain: KinematicChain
    hierarchy: TaskHierarchy
    path: WaypointPath
    q0: np.ndarray
    dt: float = 0.005
    duration: float = 10.0
    with_optimization: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    name: str = "scenario"
    chain_ref: Optional[str] = None
    hierarchy_ref: Optional[str] = None

    def __post_init__(self):
        q0 = np.asarray(self.q0, dtype=float)
        object.__setattr__(self, "q0", q0)
        if q0.shape != (self.chain.dof,):
            raise ConfigurationError(f"q0 must have {self.chain.dof} entries, got {q0.shape}")
        if not self.dt > 0.0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if not self.duration > self.dt:
            raise ConfigurationError(f"duration ({self.duration}) must exceed dt ({self.dt})")
        lo, hi = self.chain.lower_bounds, self.chain.upper_bounds
        outside = np.flatnonzero((q0 < lo) | (q0 > hi))
        if outside.size:
            raise ConfigurationError(
                f"q0 outside the physical joint bounds at joint(s) {[int(i) + 1 for i in outside]}"
            )
        for spec in self.hierarchy.tasks:
            if isinstance(spec.objective, JointValue) and spec.objective.index > self.chain.dof:
                raise ConfigurationError(
                    f"task '{spec.id}': joint index {spec.objective.index} outside 1..{self.chain.dof}"
                )

    @property
    def tasks(self) -> list[TaskSpec]:
        return self.hierarchy.expanded(self.with_optimization)


def _solver_from_dict(data: Mapping) -> SolverConfig:
    known = set(SolverConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"solver: unknown field(s) {sorted(unknown)}")
    kwargs = dict(data)
    if "deactivation_rule" in kwargs:
        kwargs["deactivation_rule"] = DeactivationRule(kwargs["deactivation_rule"])
    return SolverConfig(**kwargs)


def _resolve_ref(ref: str, base: Path) -> Path:
    path = Path(ref)
    if not path.is_absolute():
        path = base / path
    return path


def scenario_from_dict(data: Mapping, base_dir=".") -> ScenarioConfig:
    base = Path(base_dir)
    for key in ("chain", "hierarchy", "path", "q0"):
        if key not in data:
            raise ConfigurationError(f"scenario: missing field '{key}'")
    chain = load_chain(_resolve_ref(data["chain"], base))
    hierarchy = load_hierarchy(_resolve_ref(data["hierarchy"], base), chain)
    q0 = np.asarray(data["q0"], dtype=float)
    if q0.shape != (chain.dof,):
        raise ConfigurationError(f"scenario: q0 must have {chain.dof} entries")
    p = data["path"]
    try:
        default_quat = forward_kinematics(chain, q0).orientation
        waypoints = tuple(
            Pose(w["position"], w.get("orientation", default_quat)) for w in p["waypoints"]
        )
        path = WaypointPath(
            waypoints=waypoints,
            segment_speed=float(p["segment_speed"]),
            hold_orientation=bool(p.get("hold_orientation", True)),
            loop_back=bool(p.get("loop_back", False)),
            dwell=float(p.get("dwell", 0.0)),
        )
    except KeyError as exc:
        raise ConfigurationError(f"scenario: path is missing field {exc}") from exc
    try:
        solver = _solver_from_dict(data.get("solver", {}))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"scenario: solver: {exc}") from exc
    return ScenarioConfig(
        chain=chain,
        hierarchy=hierarchy,
        path=path,
        q0=q0,
        dt=float(data.get("dt", 0.005)),
        duration=float(data.get("duration", path.total_time)),
        with_optimization=bool(data.get("with_optimization", False)),
        solver=solver,
        name=str(data.get("name", "scenario")),
        chain_ref=str(data["chain"]),
        hierarchy_ref=str(data["hierarchy"]),
    )


def find_scenario(ref) -> Path:
    """Path of a scenario file; bare names resolve to the shipped scenarios."""
    path = Path(ref)
    if path.exists():
        return path
    shipped = DATA_DIR / (path.name if path.suffix else f"{path.name}.json")
    if shipped.exists():
        return shipped
    raise ConfigurationError(f"scenario file not found: {ref}")


def load_scenario(ref) -> ScenarioConfig:
    path = find_scenario(ref)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return scenario_from_dict(data, path.parent)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


# --- traces ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TraceRecord:
    t: float
    q: np.ndarray
    ee_pose: Pose
    desired_pose: Pose
    values: Mapping[str, float]
    modes: Mapping[str, Mode]
    desired: Mapping[str, float]
    qdot: np.ndarray
    saturated: bool

    @property
    def position_error(self) -> float:
        return float(np.linalg.norm(self.desired_pose.position - self.ee_pose.position))


@dataclass
class ScenarioMetrics:
    tracking_rmse: float
    max_tracking_error: float
    activation_count: dict[str, int]
    active_time_fraction: dict[str, float]
    min_manipulability: Optional[float]
    physical_violation_count: int
    joints_reaching_limits: int

    def to_dict(self) -> dict:
        return asdict(self)


def run_scenario(cfg: ScenarioConfig) -> tuple[list[TraceRecord], ScenarioMetrics]:
    """Integrate the scenario with explicit Euler steps of ``cfg.dt``."""
    tasks = cfg.tasks
    scalar_ids = [spec.id for spec in tasks if spec.dim == 1]
    q = cfg.q0.copy()
    states: dict[str, SetBasedState] = {}
    for spec in tasks:
        if spec.is_set_based:
            value = evaluate_task(spec, cfg.chain, q)[0][0]
            states[spec.id] = initial_state(spec, value)

    steps = int(round(cfg.duration / cfg.dt))
    trace: list[TraceRecord] = []
    for k in range(steps + 1):
        t = k * cfg.dt
        if not np.all(np.isfinite(q)):
            raise NumericalAbort(k, t)
        desired_pose, twist = sample_path(cfg.path, t)
        solution, new_states = resolve_cycle(
            tasks, states, cfg.chain, q, t, cfg.solver, Reference(desired_pose, twist)
        )
        if not np.all(np.isfinite(solution.qdot)):
            raise NumericalAbort(k, t, "non-finite joint velocity")
        for sid, st in new_states.items():
            if st.physical_violation and not states[sid].physical_violation:
                log.warning("task '%s' left its physical bounds at t=%.4f", sid, t)
        states = new_states
        modes = {sid: st.mode for sid, st in states.items()}
        desired = {}
        for sid in scalar_ids:
            d = solution.desired.get(sid)
            desired[sid] = math.nan if d is None else float(d[0])
        trace.append(
            TraceRecord(
                t=t,
                q=q.copy(),
                ee_pose=solution.ee_pose,
                desired_pose=desired_pose,
                values={sid: float(solution.values[sid][0]) for sid in scalar_ids},
                modes=modes,
                desired=desired,
                qdot=solution.qdot.copy(),
                saturated=solution.saturated,
            )
        )
        q = q + solution.qdot * cfg.dt
    return trace, compute_metrics(trace, tasks)


def compute_metrics(trace: Sequence[TraceRecord], tasks: Sequence[TaskSpec]) -> ScenarioMetrics:
    if not trace:
        raise ConfigurationError("cannot compute metrics of an empty trace")
    errors = np.array([rec.position_error for rec in trace])
    set_based = [spec for spec in tasks if spec.is_set_based]
    activations, fractions = {}, {}
    joints_at_limits = 0
    violations = 0
    manip = []
    for spec in set_based:
        active = [rec.modes.get(spec.id, Mode.INACTIVE) is not Mode.INACTIVE for rec in trace]
        count = int(active[0]) + sum(1 for a, b in zip(active[:-1], active[1:]) if b and not a)
        activations[spec.id] = count
        fractions[spec.id] = sum(active) / len(active)
        if isinstance(spec.objective, JointValue) and count > 0:
            joints_at_limits += 1
        th = spec.thresholds
        for rec in trace:
            v = rec.values.get(spec.id)
            if v is not None and not th.physical_min <= v <= th.physical_max:
                violations += 1
    for spec in tasks:
        if isinstance(spec.objective, Manipulability) and spec.kind is not TaskKind.OPTIMIZATION:
            manip.extend(rec.values[spec.id] for rec in trace if spec.id in rec.values)
    return ScenarioMetrics(
        tracking_rmse=float(np.sqrt(np.mean(errors**2))),
        max_tracking_error=float(errors.max()),
        activation_count=activations,
        active_time_fraction=fractions,
        min_manipulability=float(min(manip)) if manip else None,
        physical_violation_count=violations,
        joints_reaching_limits=joints_at_limits,
    )


# --- output ------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def trace_header(trace: Sequence[TraceRecord]) -> list[str]:
    n = trace[0].q.size
    header = ["t"] + [f"q_{i}" for i in range(1, n + 1)]
    header += ["ee_x", "ee_y", "ee_z", "ee_qw", "ee_qx", "ee_qy", "ee_qz"]
    header += ["des_x", "des_y", "des_z", "err_norm"]
    for sid in trace[0].values:
        header += [f"{sid}_value", f"{sid}_mode", f"{sid}_desired"]
    return header


def trace_to_csv(trace: Sequence[TraceRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(trace_header(trace))
    for rec in trace:
        row = [_fmt(rec.t)] + [_fmt(v) for v in rec.q]
        row += [_fmt(v) for v in rec.ee_pose.position] + [_fmt(v) for v in rec.ee_pose.orientation]
        row += [_fmt(v) for v in rec.desired_pose.position] + [_fmt(rec.position_error)]
        for sid, value in rec.values.items():
            row += [_fmt(value), str(int(rec.modes.get(sid, Mode.INACTIVE))), _fmt(rec.desired[sid])]
        writer.writerow(row)
    return buf.getvalue()


def write_trace(trace: Sequence[TraceRecord], path) -> None:
    Path(path).write_text(trace_to_csv(trace))


def write_metrics(metrics: ScenarioMetrics, path, **extra) -> None:
    payload = {**extra, **metrics.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
