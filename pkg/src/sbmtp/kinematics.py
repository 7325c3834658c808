"""Serial-chain kinematics: forward kinematics, geometric Jacobian and manipulability.

Chains are described with standard (distal) Denavit-Hartenberg parameters.  Each
joint transform is ``Rz(theta) Tz(d) Tx(a) Rx(alpha)`` with ``theta = q + theta_offset``.
All joints are revolute.

Quaternions are stored scalar-first, ``(w, x, y, z)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError

RowSelector = Union[str, Sequence[int]]

_ROW_ALIASES = {
    "position": (0, 1, 2),
    "orientation": (3, 4, 5),
    "full": (0, 1, 2, 3, 4, 5),
}


def quat_to_matrix(quat) -> np.ndarray:
    w, x, y, z = quat
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix, scalar part kept non-negative."""
    # Shepperd's method; scipy's Rotation is too slow for once-per-cycle use
    m = rot
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(1.0 + tr)
        quat = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        quat = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        quat = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        quat = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    quat /= np.linalg.norm(quat)
    # canonical hemisphere keeps traces continuous
    if quat[0] < 0.0:
        quat = -quat
    return quat


def transform_from_pose(position, orientation) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = quat_to_matrix(orientation)
    T[:3, 3] = position
    return T


@dataclass(frozen=True, eq=False)
class Pose:
    """Position (m) and unit quaternion ``(w, x, y, z)``."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        o = np.asarray(self.orientation, dtype=float).reshape(4)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(o))):
            raise ConfigurationError("pose entries must be finite")
        norm = np.linalg.norm(o)
        if norm == 0.0:
            raise ConfigurationError("pose orientation quaternion has zero norm")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", o / norm)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls(T[:3, 3].copy(), matrix_to_quat(T[:3, :3]))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def as_matrix(self) -> np.ndarray:
        return transform_from_pose(self.position, self.orientation)

    def as_vector(self) -> np.ndarray:
        """Seven-vector ``[x, y, z, qw, qx, qy, qz]``."""
        return np.concatenate([self.position, self.orientation])


@dataclass(frozen=True)
class JointDef:
    """One revolute joint in DH form; bounds are the physical joint range (rad)."""

    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0
    q_min: float = -np.pi
    q_max: float = np.pi

    def __post_init__(self):
        values = (self.a, self.alpha, self.d, self.theta_offset, self.q_min, self.q_max)
        if not all(np.isfinite(v) for v in values):
            raise ConfigurationError(f"joint parameters must be finite, got {values}")
        if not self.q_min < self.q_max:
            raise ConfigurationError(
                f"joint bounds must satisfy q_min < q_max, got [{self.q_min}, {self.q_max}]"
            )

    def transform(self, q: float) -> np.ndarray:
        return dh_transform(self.a, self.alpha, self.d, q + self.theta_offset)


def dh_transform(a: float, alpha: float, d: float, theta: float) -> np.ndarray:
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


@dataclass(frozen=True, eq=False)
class KinematicChain:
    joints: tuple[JointDef, ...]
    base_pose: Pose = field(default_factory=Pose.identity)
    tool_offset: Pose = field(default_factory=Pose.identity)
    name: str = "chain"

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if len(self.joints) < 1:
            raise ConfigurationError("a chain needs at least one joint")
        object.__setattr__(self, "_base_T", self.base_pose.as_matrix())
        object.__setattr__(self, "_tool_T", self.tool_offset.as_matrix())

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def lower_bounds(self) -> np.ndarray:
        return np.array([j.q_min for j in self.joints])

    @property
    def upper_bounds(self) -> np.ndarray:
        return np.array([j.q_max for j in self.joints])

    def rebased(self, T: np.ndarray) -> "KinematicChain":
        """Copy of the chain with its base pre-multiplied by the rigid transform ``T``."""
        base = Pose.from_matrix(T @ self.base_pose.as_matrix())
        return KinematicChain(self.joints, base, self.tool_offset, self.name)


def _check_q(chain: KinematicChain, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.dof,):
        raise ConfigurationError(
            f"joint vector has shape {q.shape}, chain '{chain.name}' expects ({chain.dof},)"
        )
    if not np.all(np.isfinite(q)):
        raise ConfigurationError("joint vector contains non-finite entries")
    return q


def joint_frames(chain: KinematicChain, q) -> list[np.ndarray]:
    """Frames ``T_0 .. T_n`` in the world frame followed by the tool frame.

    ``T_0`` is the base; ``T_i`` is the frame after joint ``i``.  The returned
    list has ``n + 2`` entries.
    """
    q = _check_q(chain, q)
    T = chain._base_T
    frames = [T]
    for joint, qi in zip(chain.joints, q):
        T = T @ joint.transform(qi)
        frames.append(T)
    frames.append(T @ chain._tool_T)
    return frames


def forward_kinematics(chain: KinematicChain, q) -> Pose:
    return Pose.from_matrix(joint_frames(chain, q)[-1])


def _jacobian_from_frames(frames: list[np.ndarray]) -> np.ndarray:
    n = len(frames) - 2
    p_e = frames[-1][:3, 3]
    Z = np.array([T[:3, 2] for T in frames[:n]])
    R = p_e - np.array([T[:3, 3] for T in frames[:n]])
    J = np.empty((6, n))
    J[0] = Z[:, 1] * R[:, 2] - Z[:, 2] * R[:, 1]
    J[1] = Z[:, 2] * R[:, 0] - Z[:, 0] * R[:, 2]
    J[2] = Z[:, 0] * R[:, 1] - Z[:, 1] * R[:, 0]
    J[3:] = Z.T
    return J


def geometric_jacobian(chain: KinematicChain, q) -> np.ndarray:
    """6 x n world-frame Jacobian; rows 0-2 linear velocity, rows 3-5 angular."""
    return _jacobian_from_frames(joint_frames(chain, q))


class KinematicState(NamedTuple):
    """Tool pose and geometric Jacobian evaluated together at one configuration."""

    pose: Pose
    jacobian: np.ndarray


def kinematic_state(chain: KinematicChain, q) -> KinematicState:
    frames = joint_frames(chain, q)
    return KinematicState(Pose.from_matrix(frames[-1]), _jacobian_from_frames(frames))


def resolve_rows(rows: RowSelector) -> tuple[int, ...]:
    if isinstance(rows, str):
        try:
            return _ROW_ALIASES[rows]
        except KeyError:
            raise ConfigurationError(
                f"unknown row selector '{rows}', expected one of {sorted(_ROW_ALIASES)}"
            ) from None
    out = tuple(int(r) for r in rows)
    if not out or any(r < 0 or r > 5 for r in out) or len(set(out)) != len(out):
        raise ConfigurationError(f"row selector must be distinct indices in 0..5, got {rows}")
    return out


def manipulability_from_jacobian(J: np.ndarray) -> float:
    m, n = J.shape
    if m > n:
        raise ConfigurationError(f"manipulability needs m <= n rows, got {m}x{n}")
    # product of singular values == sqrt(det(J J^T)) without forming J J^T
    return float(np.prod(np.linalg.svd(J, compute_uv=False)))


def manipulability(chain: KinematicChain, q, rows: RowSelector = "full") -> float:
    """Yoshikawa measure ``sqrt(det(J J^T))`` of the selected Jacobian rows."""
    J = geometric_jacobian(chain, q)[list(resolve_rows(rows))]
    return manipulability_from_jacobian(J)


def manipulability_jacobian_numeric(
    chain: KinematicChain, q, rows: RowSelector = "full", delta_q: float = 1e-6
) -> np.ndarray:
    """Forward-difference gradient of the manipulability measure, shape (1, n).

    Each joint is perturbed by ``delta_q`` on its own while the others keep
    their current value.  The unperturbed value is computed once.
    """
    if not delta_q > 0.0:
        raise ConfigurationError(f"delta_q must be positive, got {delta_q}")
    q = _check_q(chain, q)
    sel = list(resolve_rows(rows))
    w = manipulability_from_jacobian(geometric_jacobian(chain, q)[sel])
    J = np.empty((1, chain.dof))
    for i in range(chain.dof):
        q_inc = q.copy()
        q_inc[i] = q[i] + delta_q
        w_inc = manipulability_from_jacobian(geometric_jacobian(chain, q_inc)[sel])
        J[0, i] = (w_inc - w) / delta_q
    return J


# --- chain description files -------------------------------------------------


def _pose_from_json(data, what: str) -> Pose:
    if data is None:
        return Pose.identity()
    try:
        return Pose(data.get("position", [0.0, 0.0, 0.0]), data.get("orientation", [1.0, 0.0, 0.0, 0.0]))
    except (AttributeError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{what}: {exc}") from exc


def chain_from_dict(data: dict) -> KinematicChain:
    if not isinstance(data, dict) or "joints" not in data:
        raise ConfigurationError("chain description needs a 'joints' list")
    joints = []
    for k, jd in enumerate(data["joints"], start=1):
        try:
            joints.append(
                JointDef(
                    a=float(jd["a"]),
                    alpha=float(jd["alpha"]),
                    d=float(jd["d"]),
                    theta_offset=float(jd.get("theta_offset", 0.0)),
                    q_min=float(jd.get("q_min", -np.pi)),
                    q_max=float(jd.get("q_max", np.pi)),
                )
            )
        except KeyError as exc:
            raise ConfigurationError(f"joint {k}: missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"joint {k}: {exc}") from exc
    return KinematicChain(
        joints=tuple(joints),
        base_pose=_pose_from_json(data.get("base_pose"), "base_pose"),
        tool_offset=_pose_from_json(data.get("tool_offset"), "tool_offset"),
        name=str(data.get("name", "chain")),
    )


def chain_to_dict(chain: KinematicChain) -> dict:
    def pose(p: Pose):
        return {"position": p.position.tolist(), "orientation": p.orientation.tolist()}

    return {
        "name": chain.name,
        "joints": [
            {
                "a": j.a,
                "alpha": j.alpha,
                "d": j.d,
                "theta_offset": j.theta_offset,
                "q_min": j.q_min,
                "q_max": j.q_max,
            }
            for j in chain.joints
        ],
        "base_pose": pose(chain.base_pose),
        "tool_offset": pose(chain.tool_offset),
    }


def load_chain(path) -> KinematicChain:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    try:
        return chain_from_dict(data)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def planar_chain(lengths: Sequence[float], name: str = "planar") -> KinematicChain:
    """Planar chain of revolute joints about z with the given link lengths."""
    return KinematicChain(
        tuple(JointDef(a=float(l), alpha=0.0, d=0.0) for l in lengths), name=name
    )
