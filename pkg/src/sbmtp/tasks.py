"""Task definitions and the set-based activation state machine.

A task maps the joint configuration to a value ``sigma(q)`` with Jacobian
``d sigma / dq``.  Three kinds are supported:

* equality tasks, regulated to a desired value (from the path or a constant);
* set-based tasks, scalar tasks that only need to stay inside an interval and
  join the hierarchy as equality tasks while they are active;
* optimization tasks, low-priority equality tasks with a constant target.
"""

from __future__ import annotations

import enum
import math
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, TaskLogicError
from .kinematics import (
    KinematicChain,
    KinematicState,
    Pose,
    kinematic_state,
    manipulability_from_jacobian,
    manipulability_jacobian_numeric,
    resolve_rows,
)

LOWEST_PRIORITY = 2**31 - 1


class TaskKind(enum.Enum):
    EQUALITY = "equality"
    SET_BASED = "set_based"
    OPTIMIZATION = "optimization"


class Mode(enum.IntEnum):
    INACTIVE = 0
    ACTIVE_LOWER = 1
    ACTIVE_UPPER = 2


class DeactivationRule(enum.Enum):
    # sigma beyond the activation threshold and the other tasks push inward
    LITERAL = "literal"
    # the other tasks push inward and sigma sits on the valid side of the safety threshold
    RELAXED = "relaxed"


# --- objectives ----------------------------------------------------------------


@dataclass(frozen=True)
class EndEffectorPosition:
    dim = 3


@dataclass(frozen=True)
class EndEffectorPose:
    """Position plus orientation; values are 7-vectors, errors and Jacobians 6-dimensional."""

    dim = 6


@dataclass(frozen=True)
class JointValue:
    index: int  # 1-based

    dim = 1


@dataclass(frozen=True)
class Manipulability:
    rows: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    delta_q: float = 1e-6

    dim = 1

    def __post_init__(self):
        object.__setattr__(self, "rows", resolve_rows(self.rows))


Objective = Union[EndEffectorPosition, EndEffectorPose, JointValue, Manipulability]


class Reference(NamedTuple):
    """Path reference at one instant: desired pose and twist ``[v; omega]``."""

    pose: Pose
    twist: np.ndarray


# --- thresholds ------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdSet:
    """Nested bounds of a set-based task.

    Ordering from the outside in: physical, safety, activation.  Either side
    may be absent (``None``) for one-sided tasks.  The activation thresholds
    sit ``epsilon`` inside the safety thresholds.
    """

    safety_lower: Optional[float] = None
    safety_upper: Optional[float] = None
    physical_min: float = -math.inf
    physical_max: float = math.inf
    epsilon: float = 0.05

    def __post_init__(self):
        lo, hi = self.safety_lower, self.safety_upper
        if lo is None and hi is None:
            raise ConfigurationError("a threshold set needs at least one safety threshold")
        if not self.epsilon > 0.0:
            raise ConfigurationError(f"activation margin epsilon must be positive, got {self.epsilon}")
        if lo is not None and hi is not None:
            if not lo < hi:
                raise ConfigurationError(
                    f"safety_lower ({lo}) must be below safety_upper ({hi})"
                )
            if not self.epsilon < (hi - lo) / 2:
                raise ConfigurationError(
                    f"epsilon ({self.epsilon}) must be below half the safety interval ({(hi - lo) / 2})"
                )
        if lo is not None and not self.physical_min < lo:
            raise ConfigurationError(
                f"safety_lower ({lo}) must be above physical_min ({self.physical_min})"
            )
        if hi is not None and not hi < self.physical_max:
            raise ConfigurationError(
                f"safety_upper ({hi}) must be below physical_max ({self.physical_max})"
            )

    @property
    def has_lower(self) -> bool:
        return self.safety_lower is not None

    @property
    def has_upper(self) -> bool:
        return self.safety_upper is not None

    @property
    def activation_lower(self) -> Optional[float]:
        return None if self.safety_lower is None else self.safety_lower + self.epsilon

    @property
    def activation_upper(self) -> Optional[float]:
        return None if self.safety_upper is None else self.safety_upper - self.epsilon


# --- task spec -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """One control objective in the hierarchy.

    ``desired`` is ``None`` when the reference comes from the path, otherwise a
    constant value.  ``gain`` is the diagonal of ``K``.
    """

    id: str
    kind: TaskKind
    objective: Objective
    gain: np.ndarray
    priority: int = 1
    thresholds: Optional[ThresholdSet] = None
    desired: Optional[np.ndarray] = None

    def __post_init__(self):
        gain = np.atleast_1d(np.asarray(self.gain, dtype=float))
        if gain.shape == (1,) and self.dim > 1:
            gain = np.full(self.dim, gain[0])
        if gain.shape != (self.dim,):
            raise ConfigurationError(f"task '{self.id}': gain must have {self.dim} entries")
        if not np.all(gain > 0.0) or not np.all(np.isfinite(gain)):
            raise ConfigurationError(f"task '{self.id}': gain must be positive and finite")
        object.__setattr__(self, "gain", gain)
        if self.kind is TaskKind.SET_BASED:
            if self.dim != 1:
                raise ConfigurationError(f"task '{self.id}': set-based tasks must be scalar")
            if self.thresholds is None:
                raise ConfigurationError(f"task '{self.id}': set-based tasks need thresholds")
        elif self.thresholds is not None:
            raise ConfigurationError(f"task '{self.id}': only set-based tasks take thresholds")
        if self.desired is not None:
            desired = np.atleast_1d(np.asarray(self.desired, dtype=float))
            object.__setattr__(self, "desired", desired)
        if self.kind is TaskKind.OPTIMIZATION and self.desired is None:
            raise ConfigurationError(f"task '{self.id}': optimization tasks need a constant desired value")

    @property
    def dim(self) -> int:
        return self.objective.dim

    @property
    def is_set_based(self) -> bool:
        return self.kind is TaskKind.SET_BASED


@dataclass(frozen=True)
class SetBasedState:
    mode: Mode = Mode.INACTIVE
    last_transition_time: float = 0.0
    transition_count: int = 0
    physical_violation: bool = False

    @property
    def active(self) -> bool:
        return self.mode is not Mode.INACTIVE


# --- evaluation -----------------------------------------------------------------


def evaluate_task(
    spec: TaskSpec,
    chain: KinematicChain,
    q,
    kin: Optional[KinematicState] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Task value and Jacobian at ``q``.

    ``kin`` may carry a pose/Jacobian pair already computed at ``q`` so several
    tasks can share one forward-kinematics pass.
    """
    q = np.asarray(q, dtype=float)
    obj = spec.objective
    if isinstance(obj, JointValue):
        if not 1 <= obj.index <= chain.dof:
            raise ConfigurationError(
                f"task '{spec.id}': joint index {obj.index} outside 1..{chain.dof}"
            )
        if q.shape != (chain.dof,):
            raise ConfigurationError(f"joint vector has shape {q.shape}, expected ({chain.dof},)")
        J = np.zeros((1, chain.dof))
        J[0, obj.index - 1] = 1.0
        return np.array([q[obj.index - 1]]), J
    if kin is None:
        kin = kinematic_state(chain, q)
    if isinstance(obj, EndEffectorPosition):
        return kin.pose.position.copy(), kin.jacobian[:3].copy()
    if isinstance(obj, EndEffectorPose):
        return kin.pose.as_vector(), kin.jacobian.copy()
    if isinstance(obj, Manipulability):
        if len(obj.rows) > chain.dof:
            raise ConfigurationError(f"task '{spec.id}': more Jacobian rows than joints")
        w = manipulability_from_jacobian(kin.jacobian[list(obj.rows)])
        return np.array([w]), manipulability_jacobian_numeric(chain, q, obj.rows, obj.delta_q)
    raise ConfigurationError(f"task '{spec.id}': unsupported objective {obj!r}")


def orientation_error(desired_quat, quat) -> np.ndarray:
    """Vector part of ``q_d * q^-1`` on the short-rotation hemisphere."""
    wd, xd, yd, zd = desired_quat
    w, x, y, z = quat
    r = Rotation.from_quat([xd, yd, zd, wd]) * Rotation.from_quat([x, y, z, w]).inv()
    ex, ey, ez, ew = r.as_quat()
    vec = np.array([ex, ey, ez])
    return -vec if ew < 0.0 else vec


def task_error(spec: TaskSpec, value, desired) -> np.ndarray:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    desired = np.atleast_1d(np.asarray(desired, dtype=float))
    if value.shape != desired.shape:
        raise ConfigurationError(
            f"task '{spec.id}': value shape {value.shape} does not match desired {desired.shape}"
        )
    if isinstance(spec.objective, EndEffectorPose):
        return np.concatenate(
            [desired[:3] - value[:3], orientation_error(desired[3:], value[3:])]
        )
    return desired - value


# --- set-based state machine ---------------------------------------------------


def update_activation(
    spec: TaskSpec,
    state: SetBasedState,
    value: float,
    directional: float,
    *,
    t: float = 0.0,
    tol: float = 1e-9,
    rule: DeactivationRule = DeactivationRule.LITERAL,
) -> SetBasedState:
    """Next activation state of a set-based task.

    ``directional`` is ``J_A qdot`` for the joint velocity the hierarchy would
    produce without this task.  Directional velocities within ``tol`` of zero
    never release a task.
    """
    if not spec.is_set_based:
        raise TaskLogicError(f"task '{spec.id}' is not set-based")
    th = spec.thresholds
    value = float(value)
    violation = not (th.physical_min <= value <= th.physical_max)

    mode = state.mode
    if mode is Mode.INACTIVE:
        if th.has_upper and value >= th.activation_upper:
            mode = Mode.ACTIVE_UPPER
        elif th.has_lower and value <= th.activation_lower:
            mode = Mode.ACTIVE_LOWER
    elif mode is Mode.ACTIVE_UPPER:
        if rule is DeactivationRule.LITERAL:
            beyond = value >= th.activation_upper
        else:
            beyond = value <= th.safety_upper
        if beyond and directional < -tol:
            mode = Mode.INACTIVE
    elif mode is Mode.ACTIVE_LOWER:
        if rule is DeactivationRule.LITERAL:
            beyond = value <= th.activation_lower
        else:
            beyond = value >= th.safety_lower
        if beyond and directional > tol:
            mode = Mode.INACTIVE

    if mode is state.mode:
        if violation != state.physical_violation:
            return replace(state, physical_violation=violation)
        return state
    return SetBasedState(mode, float(t), state.transition_count + 1, violation)


def active_desired(spec: TaskSpec, state: SetBasedState) -> float:
    if not spec.is_set_based:
        raise TaskLogicError(f"task '{spec.id}' is not set-based")
    if state.mode is Mode.ACTIVE_UPPER:
        return spec.thresholds.safety_upper
    if state.mode is Mode.ACTIVE_LOWER:
        return spec.thresholds.safety_lower
    raise TaskLogicError(f"task '{spec.id}' is inactive and has no desired value")


def initial_state(spec: TaskSpec, value: float, t: float = 0.0) -> SetBasedState:
    """Inactive, unless the starting value already lies beyond an activation threshold."""
    th = spec.thresholds
    if th.has_upper and value >= th.activation_upper:
        return SetBasedState(Mode.ACTIVE_UPPER, t)
    if th.has_lower and value <= th.activation_lower:
        return SetBasedState(Mode.ACTIVE_LOWER, t)
    return SetBasedState(Mode.INACTIVE, t)


def make_optimization_counterpart(
    spec: TaskSpec,
    *,
    target: Optional[float] = None,
    gain: Optional[float] = None,
    priority: int = LOWEST_PRIORITY,
    gain_fraction: float = 0.1,
) -> TaskSpec:
    """Low-priority optimization task that keeps a set-based task away from its limits.

    Two-sided tasks are pulled to the middle of the safety interval.  One-sided
    tasks need a ``target`` the task value can never reach: above the largest
    achievable value for a lower bound, below the smallest for an upper bound.
    """
    if not spec.is_set_based:
        raise TaskLogicError(f"task '{spec.id}' is not set-based")
    th = spec.thresholds
    if th.has_lower and th.has_upper:
        desired = 0.5 * (th.safety_upper + th.safety_lower)
    elif target is None:
        side = "lower" if th.has_lower else "upper"
        raise ConfigurationError(
            f"task '{spec.id}': one-sided ({side}) task needs an explicit optimization target"
        )
    elif th.has_lower and not target > th.safety_lower:
        raise ConfigurationError(
            f"task '{spec.id}': optimization target {target} must lie above safety_lower"
        )
    elif th.has_upper and not target < th.safety_upper:
        raise ConfigurationError(
            f"task '{spec.id}': optimization target {target} must lie below safety_upper"
        )
    else:
        desired = float(target)
    k = spec.gain * gain_fraction if gain is None else gain
    return TaskSpec(
        id=f"{spec.id}_opt",
        kind=TaskKind.OPTIMIZATION,
        objective=spec.objective,
        gain=k,
        priority=priority,
        desired=np.array([desired]),
    )


# --- hierarchy files -------------------------------------------------------------


@dataclass(frozen=True)
class CounterpartOptions:
    enabled: bool = True
    gain: Optional[float] = None
    target: Optional[float] = None
    priority: Optional[int] = None


@dataclass(frozen=True, eq=False)
class TaskHierarchy:
    """Tasks in priority order plus per-task optimization-counterpart settings."""

    tasks: tuple[TaskSpec, ...]
    counterparts: Mapping[str, CounterpartOptions] = field(default_factory=dict)
    name: str = "hierarchy"

    def expanded(self, with_optimization: bool) -> list[TaskSpec]:
        """Task list for a run.

        Counterparts default to one shared rank below every other task, which
        stacks them into a single lowest level.
        """
        tasks = list(self.tasks)
        if not with_optimization:
            return tasks
        lowest = (max(t.priority for t in tasks) if tasks else 0) + 1
        for spec in self.tasks:
            if not spec.is_set_based:
                continue
            opts = self.counterparts.get(spec.id, CounterpartOptions())
            if not opts.enabled:
                continue
            rank = lowest if opts.priority is None else opts.priority
            tasks.append(
                make_optimization_counterpart(spec, target=opts.target, gain=opts.gain, priority=rank)
            )
        return tasks


_KINDS = {k.value: k for k in TaskKind}


def _objective_from_dict(data: Mapping, task_id: str) -> Objective:
    kind = data.get("type")
    if kind == "ee_position":
        return EndEffectorPosition()
    if kind == "ee_pose":
        return EndEffectorPose()
    if kind == "joint":
        if "index" not in data:
            raise ConfigurationError(f"task '{task_id}': joint objective needs an 'index'")
        return JointValue(int(data["index"]))
    if kind == "manipulability":
        return Manipulability(rows=data.get("rows", "full"), delta_q=float(data.get("delta_q", 1e-6)))
    raise ConfigurationError(f"task '{task_id}': unknown objective type {kind!r}")


def _opt_float(data: Mapping, key: str, default=None):
    value = data.get(key, default)
    return None if value is None else float(value)


def task_from_dict(data: Mapping, priority: int, chain: Optional[KinematicChain] = None) -> TaskSpec:
    task_id = str(data.get("id", f"task{priority}"))
    try:
        kind = _KINDS[data.get("kind", "equality")]
    except KeyError:
        raise ConfigurationError(f"task '{task_id}': unknown kind {data.get('kind')!r}") from None
    objective = _objective_from_dict(data.get("objective", {}), task_id)
    if chain is not None and isinstance(objective, JointValue) and not 1 <= objective.index <= chain.dof:
        raise ConfigurationError(
            f"task '{task_id}': joint index {objective.index} outside 1..{chain.dof}"
        )
    thresholds = None
    if "thresholds" in data:
        th = data["thresholds"]
        phys_min, phys_max = -math.inf, math.inf
        if isinstance(objective, JointValue) and chain is not None:
            joint = chain.joints[objective.index - 1]
            phys_min, phys_max = joint.q_min, joint.q_max
        elif isinstance(objective, Manipulability):
            phys_min = 0.0
        try:
            thresholds = ThresholdSet(
                safety_lower=_opt_float(th, "safety_lower"),
                safety_upper=_opt_float(th, "safety_upper"),
                physical_min=_opt_float(th, "physical_min", phys_min),
                physical_max=_opt_float(th, "physical_max", phys_max),
                epsilon=float(th.get("epsilon", 0.05)),
            )
        except ConfigurationError as exc:
            raise ConfigurationError(f"task '{task_id}': {exc}") from None
    desired = data.get("desired")
    if isinstance(desired, str):
        if desired != "trajectory":
            raise ConfigurationError(f"task '{task_id}': desired must be 'trajectory' or a value")
        desired = None
    return TaskSpec(
        id=task_id,
        kind=kind,
        objective=objective,
        gain=data.get("gain", 1.0),
        priority=int(data.get("priority", priority)),
        thresholds=thresholds,
        desired=desired,
    )


def hierarchy_from_dict(data: Mapping, chain: Optional[KinematicChain] = None) -> TaskHierarchy:
    if not isinstance(data, Mapping) or not isinstance(data.get("tasks"), list):
        raise ConfigurationError("hierarchy description needs a 'tasks' list")
    tasks, counterparts = [], {}
    for k, item in enumerate(data["tasks"], start=1):
        try:
            spec = task_from_dict(item, k, chain)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"task #{k}: {exc}") from exc
        tasks.append(spec)
        opt = item.get("optimization")
        if opt is not None:
            if spec.kind is not TaskKind.SET_BASED:
                raise ConfigurationError(f"task '{spec.id}': only set-based tasks take an optimization counterpart")
            if isinstance(opt, bool):
                opt = {"enabled": opt}
            counterparts[spec.id] = CounterpartOptions(
                enabled=bool(opt.get("enabled", True)),
                gain=_opt_float(opt, "gain"),
                target=_opt_float(opt, "target"),
                priority=None if opt.get("priority") is None else int(opt["priority"]),
            )
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"task ids must be unique, got {ids}")
    hierarchy = TaskHierarchy(tuple(tasks), counterparts, str(data.get("name", "hierarchy")))
    # surfaces missing targets of one-sided tasks at load time
    hierarchy.expanded(True)
    return hierarchy


def load_hierarchy(path, chain: Optional[KinematicChain] = None) -> TaskHierarchy:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    try:
        return hierarchy_from_dict(data, chain)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
