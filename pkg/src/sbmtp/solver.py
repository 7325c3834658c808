"""Prioritized velocity resolution.

Each level contributes the CLIK velocity ``J_i^+ (sigma_dot_d + K e_i)``.  Levels
are composed null-space-based style::

    qdot = qdot_1 + N_1 qdot_2 + ... + N_{h-1} qdot_h

where ``N_i = I - (J_i^A)^+ J_i^A`` projects onto the null space of the
augmented Jacobian stacking levels ``1..i``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, TaskLogicError
from .kinematics import KinematicChain, Pose, kinematic_state
from .tasks import (
    DeactivationRule,
    EndEffectorPose,
    EndEffectorPosition,
    Mode,
    Reference,
    SetBasedState,
    TaskKind,
    TaskSpec,
    active_desired,
    evaluate_task,
    task_error,
    update_activation,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings of the per-cycle solver.

    ``damping`` is the largest damping factor, reached when the smallest
    singular value goes to zero; damping starts once it falls below ``s_min``.
    Singular values below ``rank_rtol`` times the largest are treated as exact
    zeros (structural rank loss, e.g. repeated rows in an augmented stack).
    ``velocity_limit=None`` disables the joint-velocity clamp.
    """

    damping: float = 0.05
    s_min: float = 1e-4
    velocity_limit: Optional[float] = 0.6
    deactivation_tol: float = 1e-9
    max_active_set_iterations: Optional[int] = None
    rank_rtol: float = 1e-10
    deactivation_rule: DeactivationRule = DeactivationRule.LITERAL

    def __post_init__(self):
        if not self.damping >= 0.0:
            raise ConfigurationError(f"damping must be non-negative, got {self.damping}")
        if not self.s_min > 0.0:
            raise ConfigurationError(f"s_min must be positive, got {self.s_min}")
        if self.velocity_limit is not None and not self.velocity_limit > 0.0:
            raise ConfigurationError(f"velocity_limit must be positive, got {self.velocity_limit}")
        if not self.deactivation_tol >= 0.0:
            raise ConfigurationError("deactivation_tol must be non-negative")
        if self.max_active_set_iterations is not None and self.max_active_set_iterations < 1:
            raise ConfigurationError("max_active_set_iterations must be at least 1")


DEFAULT_CONFIG = SolverConfig()


def _damped_inverse(J: np.ndarray, cfg: SolverConfig) -> tuple[np.ndarray, int]:
    m, n = J.shape
    if m == 0 or n == 0:
        return np.zeros((n, m)), 0
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros((n, m)), 0
    keep = s > cfg.rank_rtol * s[0]
    rank = int(keep.sum())
    s_low = s[rank - 1]
    if s_low < cfg.s_min:
        lam2 = (1.0 - (s_low / cfg.s_min) ** 2) * cfg.damping**2
    else:
        lam2 = 0.0
    inv = np.divide(s, s * s + lam2, out=np.zeros_like(s), where=keep)
    return (Vt.T * inv) @ U.T, rank


def damped_pseudoinverse(J, cfg: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Variable-damping SVD pseudoinverse, n x m.

    Equal to the Moore-Penrose pseudoinverse while every singular value is at
    least ``cfg.s_min``.
    """
    return _damped_inverse(np.atleast_2d(np.asarray(J, dtype=float)), cfg)[0]


def null_space_projector(J_aug, cfg: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    J_aug = np.atleast_2d(np.asarray(J_aug, dtype=float))
    return np.eye(J_aug.shape[1]) - damped_pseudoinverse(J_aug, cfg) @ J_aug


@dataclass(frozen=True, eq=False)
class HierarchyLevel:
    """One priority level: task Jacobian, error and feedforward, plus diagnostics.

    ``qdot`` and ``projector_rank`` are filled in by the solver; the rank is
    the dimension of the null space left after stacking this level.
    """

    task_id: str
    jacobian: np.ndarray
    error: np.ndarray
    gain: np.ndarray
    feedforward: Optional[np.ndarray] = None
    value: Optional[np.ndarray] = None
    desired: Optional[np.ndarray] = None
    qdot: Optional[np.ndarray] = None
    projector_rank: Optional[int] = None

    def __post_init__(self):
        J = np.atleast_2d(np.asarray(self.jacobian, dtype=float))
        object.__setattr__(self, "jacobian", J)
        m = J.shape[0]
        err = np.atleast_1d(np.asarray(self.error, dtype=float))
        gain = np.broadcast_to(np.asarray(self.gain, dtype=float), (m,))
        ff = np.zeros(m) if self.feedforward is None else np.atleast_1d(np.asarray(self.feedforward, dtype=float))
        if err.shape != (m,) or ff.shape != (m,):
            raise ConfigurationError(
                f"level '{self.task_id}': error/feedforward must have {m} entries"
            )
        object.__setattr__(self, "error", err)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "feedforward", ff)


@dataclass(frozen=True, eq=False)
class HierarchySolution:
    qdot: np.ndarray
    levels: tuple[HierarchyLevel, ...]
    active_set: tuple[tuple[str, Mode], ...] = ()
    saturated: bool = False
    values: Mapping[str, np.ndarray] = field(default_factory=dict)
    desired: Mapping[str, Optional[np.ndarray]] = field(default_factory=dict)
    iterations: int = 0
    ee_pose: Optional[Pose] = None


def clik_velocity(level: HierarchyLevel, cfg: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    return damped_pseudoinverse(level.jacobian, cfg) @ (level.feedforward + level.gain * level.error)


def _projector(stack: np.ndarray, cfg: SolverConfig) -> tuple[np.ndarray, int]:
    pinv, rank = _damped_inverse(stack, cfg)
    return np.eye(stack.shape[1]) - pinv @ stack, rank


def _compose(levels: Sequence[HierarchyLevel], cfg: SolverConfig) -> tuple[np.ndarray, list[HierarchyLevel]]:
    n = levels[0].jacobian.shape[1]
    qdot = np.zeros(n)
    N = np.eye(n)
    stack = np.empty((0, n))
    out = []
    for k, level in enumerate(levels):
        qi = level.qdot if level.qdot is not None else clik_velocity(level, cfg)
        qdot = qdot + (qi if k == 0 else N @ qi)
        stack = np.vstack([stack, level.jacobian])
        N, rank = _projector(stack, cfg)
        out.append(replace(level, qdot=qi, projector_rank=n - rank))
    return qdot, out


def _compose_qdot(levels: Sequence[HierarchyLevel], cfg: SolverConfig, cache: dict) -> np.ndarray:
    """Joint velocity only; projectors are memoized by the ids of the stacked levels."""
    qdot = levels[0].qdot.copy()
    key: tuple[str, ...] = ()
    for prev, level in zip(levels[:-1], levels[1:]):
        key = key + (prev.task_id,)
        N = cache.get(key)
        if N is None:
            stack = np.vstack([lvl.jacobian for lvl in levels[: len(key)]])
            N = cache[key] = _projector(stack, cfg)[0]
        qdot += N @ level.qdot
    return qdot


def clamp_velocity(qdot: np.ndarray, limit: Optional[float]) -> tuple[np.ndarray, bool]:
    """Uniformly rescale ``qdot`` so its infinity norm stays within ``limit``."""
    if limit is None:
        return qdot, False
    peak = float(np.max(np.abs(qdot))) if qdot.size else 0.0
    if peak > limit:
        return qdot * (limit / peak), True
    return qdot, False


def nsb_compose(levels: Sequence[HierarchyLevel], cfg: SolverConfig = DEFAULT_CONFIG) -> HierarchySolution:
    """Compose prioritized levels (highest first) into one joint velocity."""
    if not levels:
        raise TaskLogicError("cannot compose an empty hierarchy")
    qdot, out = _compose(levels, cfg)
    qdot, saturated = clamp_velocity(qdot, cfg.velocity_limit)
    return HierarchySolution(qdot=qdot, levels=tuple(out), saturated=saturated)


# --- per-cycle active-set resolution ------------------------------------------------


def _reference_for(spec: TaskSpec, reference: Optional[Reference]) -> tuple[np.ndarray, np.ndarray]:
    if spec.desired is not None:
        return spec.desired, np.zeros(spec.dim)
    if reference is None:
        raise ConfigurationError(f"task '{spec.id}' follows the path but no reference was given")
    if isinstance(spec.objective, EndEffectorPosition):
        return reference.pose.position, np.asarray(reference.twist[:3], dtype=float)
    if isinstance(spec.objective, EndEffectorPose):
        return reference.pose.as_vector(), np.asarray(reference.twist, dtype=float)
    raise ConfigurationError(f"task '{spec.id}' has no constant desired value")


def _ordered(tasks: Sequence[TaskSpec], kind: TaskKind) -> list[TaskSpec]:
    return sorted((t for t in tasks if t.kind is kind), key=lambda t: t.priority)


def _past_safety(spec: TaskSpec, mode: Mode, value: float) -> bool:
    th = spec.thresholds
    if mode is Mode.ACTIVE_UPPER:
        return value > th.safety_upper
    return value < th.safety_lower


def resolve_cycle(
    tasks: Sequence[TaskSpec],
    states: Mapping[str, SetBasedState],
    chain: KinematicChain,
    q,
    t: float = 0.0,
    cfg: SolverConfig = DEFAULT_CONFIG,
    reference: Optional[Reference] = None,
) -> tuple[HierarchySolution, dict[str, SetBasedState]]:
    """Solve one control cycle and update the set-based activation states.

    Inactive set-based tasks beyond an activation threshold are tentatively
    activated.  Active tasks are then checked highest priority first against
    the hierarchy without them; the first one released restarts the check.
    A task released during a cycle is not re-activated in the same cycle.
    A task that was inactive and still lies between its activation and safety
    thresholds stays inactive unless the other tasks would push it outward
    by more than ``cfg.deactivation_tol``.
    """
    q = np.asarray(q, dtype=float)
    ids = [t_.id for t_ in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("task ids must be unique")
    set_based = _ordered(tasks, TaskKind.SET_BASED)
    equality = _ordered(tasks, TaskKind.EQUALITY)
    optimization = _ordered(tasks, TaskKind.OPTIMIZATION)

    kin = kinematic_state(chain, q)
    evaluated = {spec.id: evaluate_task(spec, chain, q, kin) for spec in tasks}

    rows: dict[tuple[str, Optional[Mode]], tuple] = {}

    def task_rows(spec: TaskSpec, mode: Optional[Mode]) -> tuple:
        key = (spec.id, mode)
        if key not in rows:
            if mode is None:
                desired, ff = _reference_for(spec, reference)
            else:
                desired, ff = np.array([active_desired(spec, SetBasedState(mode))]), np.zeros(1)
            value, J = evaluated[spec.id]
            rows[key] = (J, task_error(spec, value, desired), ff, spec.gain, value, np.atleast_1d(desired))
        return rows[key]

    level_cache: dict[tuple, HierarchyLevel] = {}

    def build_level(members: tuple[tuple[TaskSpec, Optional[Mode]], ...]) -> HierarchyLevel:
        key = tuple((spec.id, mode) for spec, mode in members)
        if key not in level_cache:
            parts = [task_rows(spec, mode) for spec, mode in members]
            level = HierarchyLevel(
                task_id="+".join(spec.id for spec, _ in members),
                jacobian=np.vstack([p[0] for p in parts]),
                error=np.concatenate([p[1] for p in parts]),
                feedforward=np.concatenate([p[2] for p in parts]),
                gain=np.concatenate([p[3] for p in parts]),
                value=np.concatenate([p[4] for p in parts]),
                desired=np.concatenate([p[5] for p in parts]),
            )
            level_cache[key] = replace(level, qdot=clik_velocity(level, cfg))
        return level_cache[key]

    def grouped(entries: list[tuple[TaskSpec, Optional[Mode]]]) -> list[HierarchyLevel]:
        # tasks of equal rank share one level
        return [
            build_level(tuple(members))
            for _, members in itertools.groupby(entries, key=lambda e: e[0].priority)
        ]

    tail = grouped([(spec, None) for spec in equality]) + grouped([(spec, None) for spec in optimization])

    def hierarchy(modes: Mapping[str, Mode], skip: Optional[str] = None) -> list[HierarchyLevel]:
        head = grouped(
            [
                (spec, modes[spec.id])
                for spec in set_based
                if modes[spec.id] is not Mode.INACTIVE and spec.id != skip
            ]
        )
        return head + tail

    projectors: dict[tuple[str, ...], np.ndarray] = {}

    def candidate_qdot(modes: Mapping[str, Mode], skip: str) -> np.ndarray:
        levels = hierarchy(modes, skip)
        if not levels:
            return np.zeros(chain.dof)
        return _compose_qdot(levels, cfg, projectors)

    prev = {spec.id: states.get(spec.id, SetBasedState()) for spec in set_based}
    modes = {sid: st.mode for sid, st in prev.items()}
    released: set[str] = set()
    was_active = {sid for sid, m in modes.items() if m is not Mode.INACTIVE}
    touched = {sid: m for sid, m in modes.items() if m is not Mode.INACTIVE}
    cap = cfg.max_active_set_iterations or len(set_based) + 1
    iterations = 0
    while True:
        iterations += 1
        for spec in set_based:
            if modes[spec.id] is Mode.INACTIVE and spec.id not in released:
                value = evaluated[spec.id][0][0]
                nxt = update_activation(spec, SetBasedState(Mode.INACTIVE), value, 0.0, t=t)
                if nxt.mode is not Mode.INACTIVE:
                    modes[spec.id] = nxt.mode
                    touched[spec.id] = nxt.mode
        changed = False
        for spec in set_based:
            if modes[spec.id] is Mode.INACTIVE:
                continue
            value, J = evaluated[spec.id]
            directional = float(J[0] @ candidate_qdot(modes, spec.id))
            tol = cfg.deactivation_tol
            if spec.id not in was_active and not _past_safety(spec, modes[spec.id], value[0]):
                # hysteresis: a task that was inactive and is still inside the
                # safety band only comes back if the others push it outward
                tol = -tol
            nxt = update_activation(
                spec,
                SetBasedState(modes[spec.id]),
                value[0],
                directional,
                t=t,
                tol=tol,
                rule=cfg.deactivation_rule,
            )
            if nxt.mode is Mode.INACTIVE:
                modes[spec.id] = Mode.INACTIVE
                released.add(spec.id)
                changed = True
                break
        if not changed:
            break
        if iterations >= cap:
            log.warning(
                "active set did not settle after %d iterations at t=%.4f; keeping all candidates active",
                iterations, t,
            )
            modes.update(touched)
            break

    levels = hierarchy(modes)
    if levels:
        qdot, out = _compose(levels, cfg)
    else:
        qdot, out = np.zeros(chain.dof), []
    qdot, saturated = clamp_velocity(qdot, cfg.velocity_limit)

    new_states: dict[str, SetBasedState] = {}
    for spec in set_based:
        st = prev[spec.id]
        value = evaluated[spec.id][0][0]
        th = spec.thresholds
        violation = not (th.physical_min <= value <= th.physical_max)
        if modes[spec.id] is not st.mode:
            new_states[spec.id] = SetBasedState(modes[spec.id], float(t), st.transition_count + 1, violation)
        elif violation != st.physical_violation:
            new_states[spec.id] = replace(st, physical_violation=violation)
        else:
            new_states[spec.id] = st

    desired: dict[str, Optional[np.ndarray]] = {
        spec.id: task_rows(spec, None)[5] for spec in equality + optimization
    }
    for spec in set_based:
        mode = modes[spec.id]
        desired[spec.id] = None if mode is Mode.INACTIVE else np.array([active_desired(spec, SetBasedState(mode))])
    solution = HierarchySolution(
        qdot=qdot,
        levels=tuple(out),
        active_set=tuple((spec.id, modes[spec.id]) for spec in set_based if modes[spec.id] is not Mode.INACTIVE),
        saturated=saturated,
        values={sid: ev[0] for sid, ev in evaluated.items()},
        desired=desired,
        iterations=iterations,
        ee_pose=kin.pose,
    )
    return solution, new_states

