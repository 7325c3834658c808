"""Set-based multi-task priority inverse kinematics with optimization counterparts."""

from .errors import ConfigurationError, NumericalAbort, TaskLogicError
from .kinematics import (
    JointDef,
    KinematicChain,
    Pose,
    forward_kinematics,
    geometric_jacobian,
    load_chain,
    manipulability,
    manipulability_jacobian_numeric,
)
from .solver import SolverConfig, damped_pseudoinverse, nsb_compose, null_space_projector, resolve_cycle
from .tasks import (
    DeactivationRule,
    Mode,
    TaskHierarchy,
    TaskKind,
    TaskSpec,
    ThresholdSet,
    evaluate_task,
    make_optimization_counterpart,
    update_activation,
)
from .sim import ScenarioConfig, WaypointPath, load_scenario, run_scenario

__version__ = "0.1.0"
