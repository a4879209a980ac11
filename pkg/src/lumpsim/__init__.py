"""Planar musculoskeletal dynamics with energy-equivalent lumped actuators.

Two interchangeable backends simulate the same robot description: an
analytical minimal-coordinate model (`oracle`) and an extended-coordinate
constrained engine in which each elastic actuator is replaced by its 3-2-1
lumped-mass assembly (`engine`).  The `harness` module runs the equivalence,
sensitivity and baseline suites; `identification` fits actuator parameters
from data; `mjcf` exports MuJoCo-compatible XML.
"""

from ._speedups import BACKEND as KERNEL_BACKEND
from .engine import BaselineMode, EngineConfig, EngineModel, compile_engine
from .equivalence import EquivalentAssembly, MassFractionProblem, equivalize, solve_mass_fractions
from .model import (
    Attachment,
    ElasticActuatorSpec,
    Joint,
    JointState,
    Link,
    Phase,
    PressureSchedule,
    RobotDescription,
    Trajectory,
    default_leg,
    parse_description,
    serialize_description,
    validate_state,
)
from .oracle import IntegratorConfig, OracleModel, balancing_force, build_oracle, integrate

__version__ = "0.1.0"

__all__ = [
    "Attachment",
    "BACKEND",
    "BaselineMode",
    "ElasticActuatorSpec",
    "EngineConfig",
    "EngineModel",
    "EquivalentAssembly",
    "IntegratorConfig",
    "Joint",
    "JointState",
    "KERNEL_BACKEND",
    "Link",
    "MassFractionProblem",
    "OracleModel",
    "Phase",
    "PressureSchedule",
    "RobotDescription",
    "Trajectory",
    "balancing_force",
    "build_oracle",
    "compile_engine",
    "default_leg",
    "equivalize",
    "integrate",
    "parse_description",
    "serialize_description",
    "solve_mass_fractions",
    "validate_state",
]
