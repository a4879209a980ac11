"""Domain types, the robot description file format, and the bundled leg.

A robot description is a planar skeleton (rigid links joined by revolute
joints into a tree) plus linear elastic actuators strung between links.
Kinematic loops enter only through actuators.  Link frames carry all local
geometry; a child link's frame angle is the parent's angle plus the joint
coordinate, and its `child_point` coincides with the parent's `parent_point`.

Units are strict SI: kg, m, s, N, Pa, rad.  Gravity acts along world -y.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import DimensionError, GridMismatch, SchemaError, ValidationError

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

GRAVITY_DEFAULT = 9.81


class Phase(Enum):
    SWING = "swing"
    STANCE = "stance"


@dataclass(frozen=True)
class Attachment:
    """A point fixed to a link, in that link's frame."""

    link: str
    point: tuple[float, float]


@dataclass(frozen=True)
class Link:
    id: str
    mass: float
    com: tuple[float, float]
    rod_length: float
    inertia_zz: float


@dataclass(frozen=True)
class Joint:
    id: str
    parent: str
    child: str
    parent_point: tuple[float, float]
    child_point: tuple[float, float]
    limits: tuple[float, float]
    damping: float = 0.0


@dataclass(frozen=True)
class ElasticActuatorSpec:
    """Continuous actuator parameters and endpoint attachments.

    `area` maps pressure to axial drive force, F = area * P.  The linear
    density m/l is never stored; the current length l varies with pose.
    """

    id: str
    m: float
    k: float
    c: float
    l0: float
    area: float
    attach_a: Attachment
    attach_b: Attachment


@dataclass(frozen=True)
class RobotDescription:
    links: tuple[Link, ...]
    joints: tuple[Joint, ...]
    actuators: tuple[ElasticActuatorSpec, ...]
    gravity: float = GRAVITY_DEFAULT
    phase: Phase = Phase.SWING
    stance_foot: Attachment | None = None

    @property
    def dof(self) -> int:
        return len(self.joints)

    def link_index(self, link_id: str) -> int:
        for i, link in enumerate(self.links):
            if link.id == link_id:
                return i
        raise ValidationError(f"unknown link id {link_id!r}")

    def with_phase(self, phase: Phase) -> "RobotDescription":
        desc = replace(self, phase=phase)
        _validate(desc)
        return desc


@dataclass(frozen=True)
class JointState:
    """Joint angles and rates at time t."""

    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=float))
        if self.q.shape != self.qdot.shape or self.q.ndim != 1:
            raise DimensionError(
                f"q shape {self.q.shape} does not match qdot shape {self.qdot.shape}"
            )


@dataclass(frozen=True)
class PressureSchedule:
    """Piecewise-constant pressure inputs, one column per actuator.

    values[i] holds between times[i] (inclusive) and times[i+1]; the last
    row holds to the end of the run.  Pressures are in Pa.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if t.ndim != 1 or v.shape[0] != t.size:
            raise DimensionError("schedule times and values rows must match")
        if t.size and np.any(np.diff(t) <= 0):
            raise ValidationError("schedule times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @staticmethod
    def constant(pressures, t0: float = 0.0) -> "PressureSchedule":
        p = np.asarray(pressures, dtype=float)
        return PressureSchedule(np.array([t0]), p.reshape(1, -1))

    def validate_nonnegative(self):
        if np.any(self.values < 0):
            raise ValidationError("pressures must be nonnegative")

    def forces(self, areas) -> "PressureSchedule":
        """Scale pressures by actuator areas; the result carries forces in N."""
        return PressureSchedule(self.times.copy(), self.values * np.asarray(areas))


@dataclass
class Trajectory:
    """Sampled states on a fixed grid, with per-actuator lengths and energies.

    Columns: time, joint angles, joint rates, actuator lengths, actuator
    rates, kinetic / gravitational / elastic energies.
    """

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    l: np.ndarray
    ld: np.ndarray
    T: np.ndarray
    Vg: np.ndarray
    Ve: np.ndarray

    def __post_init__(self):
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ValidationError("trajectory times must be strictly increasing")
        for name in ("T", "Vg", "Ve"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite energy column {name}")

    @property
    def ndof(self) -> int:
        return self.q.shape[1]

    @property
    def nact(self) -> int:
        return self.l.shape[1]

    def header(self) -> list[str]:
        n, m = self.ndof, self.nact
        cols = ["t"]
        cols += [f"q{i + 1}" for i in range(n)]
        cols += [f"qd{i + 1}" for i in range(n)]
        cols += [f"l{i + 1}" for i in range(m)]
        cols += [f"ld{i + 1}" for i in range(m)]
        cols += ["T", "Vg", "Ve"]
        return cols

    def to_csv(self, path) -> None:
        data = np.column_stack(
            [self.t, self.q, self.qd, self.l, self.ld, self.T, self.Vg, self.Ve]
        )
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(self.header()) + "\n")
            for row in data:
                fh.write(",".join(f"{x:.17g}" for x in row) + "\n")

    @staticmethod
    def from_csv(path) -> "Trajectory":
        with open(path, "r") as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        n = sum(1 for c in header if c.startswith("q") and not c.startswith("qd"))
        m = sum(1 for c in header if c.startswith("l") and not c.startswith("ld"))
        i = 1
        q = data[:, i : i + n]; i += n
        qd = data[:, i : i + n]; i += n
        l = data[:, i : i + m]; i += m
        ld = data[:, i : i + m]; i += m
        return Trajectory(data[:, 0], q, qd, l, ld, data[:, i], data[:, i + 1], data[:, i + 2])

    def resample(self, t_new: np.ndarray) -> "Trajectory":
        """Linear interpolation onto a new grid (must lie inside this one)."""
        t_new = np.asarray(t_new, dtype=float)
        eps = 1e-12
        if t_new[0] < self.t[0] - eps or t_new[-1] > self.t[-1] + eps:
            raise GridMismatch(
                f"requested range [{t_new[0]}, {t_new[-1]}] outside "
                f"[{self.t[0]}, {self.t[-1]}]"
            )

        def interp_cols(a):
            return np.column_stack(
                [np.interp(t_new, self.t, a[:, j]) for j in range(a.shape[1])]
            )

        return Trajectory(
            t_new,
            interp_cols(self.q),
            interp_cols(self.qd),
            interp_cols(self.l),
            interp_cols(self.ld),
            np.interp(t_new, self.t, self.T),
            np.interp(t_new, self.t, self.Vg),
            np.interp(t_new, self.t, self.Ve),
        )


# --------------------------------------------------------------------------
# description document schema
# --------------------------------------------------------------------------

_LINK_KEYS = {"id", "mass_kg", "com", "rod_length_m", "inertia_zz_kgm2"}
_JOINT_KEYS = {
    "id",
    "parent",
    "child",
    "parent_point",
    "child_point",
    "limits",
    "damping_nms_per_rad",
}
_ACT_KEYS = {
    "id",
    "mass_kg",
    "stiffness_n_per_m",
    "damping_ns_per_m",
    "rest_length_m",
    "area_m2",
    "attach_a",
    "attach_b",
}
_TOP_KEYS = {"links", "joints", "actuators", "gravity", "phase", "stance_foot"}
_ATTACH_KEYS = {"link", "point"}


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise SchemaError(f"missing key {key!r} in {where}")
    return table[key]


def _reject_unknown(table: dict, allowed: set, where: str):
    unknown = set(table) - allowed
    if unknown:
        raise SchemaError(f"unknown key(s) {sorted(unknown)} in {where}")


def _point(value, where: str) -> tuple[float, float]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(x, (int, float)) for x in value)
    ):
        raise SchemaError(f"{where} must be a pair of numbers")
    return (float(value[0]), float(value[1]))


def _attachment(table, where: str) -> Attachment:
    if not isinstance(table, dict):
        raise SchemaError(f"{where} must be a table")
    _reject_unknown(table, _ATTACH_KEYS, where)
    link = _require(table, "link", where)
    point = _point(_require(table, "point", where), f"{where}.point")
    return Attachment(str(link), point)


def parse_description(text: str) -> RobotDescription:
    """Parse and validate a robot description document (TOML, strict)."""
    try:
        doc = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise SchemaError(f"not well-formed TOML: {exc}") from exc
    _reject_unknown(doc, _TOP_KEYS, "document root")

    links = []
    for i, entry in enumerate(doc.get("links", [])):
        where = f"links[{i}]"
        _reject_unknown(entry, _LINK_KEYS, where)
        links.append(
            Link(
                id=str(_require(entry, "id", where)),
                mass=float(_require(entry, "mass_kg", where)),
                com=_point(_require(entry, "com", where), f"{where}.com"),
                rod_length=float(_require(entry, "rod_length_m", where)),
                inertia_zz=float(_require(entry, "inertia_zz_kgm2", where)),
            )
        )

    joints = []
    for i, entry in enumerate(doc.get("joints", [])):
        where = f"joints[{i}]"
        _reject_unknown(entry, _JOINT_KEYS, where)
        limits = _require(entry, "limits", where)
        if not isinstance(limits, (list, tuple)) or len(limits) != 2:
            raise SchemaError(f"{where}.limits must be [lo, hi]")
        joints.append(
            Joint(
                id=str(_require(entry, "id", where)),
                parent=str(_require(entry, "parent", where)),
                child=str(_require(entry, "child", where)),
                parent_point=_point(
                    _require(entry, "parent_point", where), f"{where}.parent_point"
                ),
                child_point=_point(
                    _require(entry, "child_point", where), f"{where}.child_point"
                ),
                limits=(float(limits[0]), float(limits[1])),
                damping=float(entry.get("damping_nms_per_rad", 0.0)),
            )
        )

    actuators = []
    for i, entry in enumerate(doc.get("actuators", [])):
        where = f"actuators[{i}]"
        _reject_unknown(entry, _ACT_KEYS, where)
        actuators.append(
            ElasticActuatorSpec(
                id=str(_require(entry, "id", where)),
                m=float(_require(entry, "mass_kg", where)),
                k=float(_require(entry, "stiffness_n_per_m", where)),
                c=float(_require(entry, "damping_ns_per_m", where)),
                l0=float(_require(entry, "rest_length_m", where)),
                area=float(_require(entry, "area_m2", where)),
                attach_a=_attachment(_require(entry, "attach_a", where), f"{where}.attach_a"),
                attach_b=_attachment(_require(entry, "attach_b", where), f"{where}.attach_b"),
            )
        )

    phase_raw = doc.get("phase", "swing")
    try:
        phase = Phase(str(phase_raw).lower())
    except ValueError:
        raise SchemaError(f"phase must be 'swing' or 'stance', got {phase_raw!r}")

    stance_foot = None
    if "stance_foot" in doc:
        stance_foot = _attachment(doc["stance_foot"], "stance_foot")

    desc = RobotDescription(
        links=tuple(links),
        joints=tuple(joints),
        actuators=tuple(actuators),
        gravity=float(doc.get("gravity", GRAVITY_DEFAULT)),
        phase=phase,
        stance_foot=stance_foot,
    )
    _validate(desc)
    return desc


def _validate(desc: RobotDescription) -> None:
    link_ids = [l.id for l in desc.links]
    if len(set(link_ids)) != len(link_ids):
        raise ValidationError("duplicate link ids")
    if not desc.links:
        raise ValidationError("description has no links")
    known = set(link_ids)

    for link in desc.links:
        if link.mass <= 0:
            raise ValidationError(f"link {link.id!r} has nonpositive mass")
        if link.inertia_zz < 0 or link.rod_length < 0:
            raise ValidationError(f"link {link.id!r} has negative inertia or length")

    child_count: dict[str, int] = {lid: 0 for lid in link_ids}
    joint_ids = set()
    for joint in desc.joints:
        if joint.id in joint_ids:
            raise ValidationError(f"duplicate joint id {joint.id!r}")
        joint_ids.add(joint.id)
        for ref in (joint.parent, joint.child):
            if ref not in known:
                raise ValidationError(f"joint {joint.id!r} references unknown link {ref!r}")
        if joint.parent == joint.child:
            raise ValidationError(f"joint {joint.id!r} connects a link to itself")
        if not joint.limits[0] < joint.limits[1]:
            raise ValidationError(f"joint {joint.id!r} limits must satisfy lo < hi")
        if joint.damping < 0:
            raise ValidationError(f"joint {joint.id!r} has negative damping")
        child_count[joint.child] += 1

    roots = [lid for lid in link_ids if child_count[lid] == 0]
    if any(count > 1 for count in child_count.values()) or len(roots) != 1:
        raise ValidationError("skeleton joints must form a tree with a single root")
    # reachability from the root (also catches cycles among non-root links)
    children = {lid: [] for lid in link_ids}
    for joint in desc.joints:
        children[joint.parent].append(joint.child)
    seen = set()
    stack = [roots[0]]
    while stack:
        lid = stack.pop()
        if lid in seen:
            raise ValidationError("cycle in skeleton joint graph")
        seen.add(lid)
        stack.extend(children[lid])
    if seen != known:
        raise ValidationError("skeleton joint graph is disconnected")

    act_ids = set()
    for act in desc.actuators:
        if act.id in act_ids:
            raise ValidationError(f"duplicate actuator id {act.id!r}")
        act_ids.add(act.id)
        if act.m <= 0 or act.k <= 0 or act.l0 <= 0 or act.area <= 0:
            raise ValidationError(f"actuator {act.id!r} needs m, k, l0, area > 0")
        if act.c < 0:
            raise ValidationError(f"actuator {act.id!r} has negative damping")
        for att in (act.attach_a, act.attach_b):
            if att.link not in known:
                raise ValidationError(
                    f"actuator {act.id!r} attaches to unknown link {att.link!r}"
                )
        if act.attach_a.link == act.attach_b.link:
            raise ValidationError(f"actuator {act.id!r} must attach two distinct links")

    if desc.gravity < 0:
        raise ValidationError("gravity must be nonnegative")
    if desc.phase is Phase.STANCE:
        if desc.stance_foot is None:
            raise ValidationError("stance phase requires stance_foot")
    if desc.stance_foot is not None and desc.stance_foot.link not in known:
        raise ValidationError(f"stance_foot references unknown link {desc.stance_foot.link!r}")


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _fmt_point(p) -> str:
    return f"[{_fmt(p[0])}, {_fmt(p[1])}]"


def serialize_description(desc: RobotDescription) -> str:
    """Emit the description as TOML; parse_description round-trips it."""
    out = []
    out.append(f"gravity = {_fmt(desc.gravity)}")
    out.append(f'phase = "{desc.phase.value}"')
    out.append("")
    for link in desc.links:
        out.append("[[links]]")
        out.append(f'id = "{link.id}"')
        out.append(f"mass_kg = {_fmt(link.mass)}")
        out.append(f"com = {_fmt_point(link.com)}")
        out.append(f"rod_length_m = {_fmt(link.rod_length)}")
        out.append(f"inertia_zz_kgm2 = {_fmt(link.inertia_zz)}")
        out.append("")
    for joint in desc.joints:
        out.append("[[joints]]")
        out.append(f'id = "{joint.id}"')
        out.append(f'parent = "{joint.parent}"')
        out.append(f'child = "{joint.child}"')
        out.append(f"parent_point = {_fmt_point(joint.parent_point)}")
        out.append(f"child_point = {_fmt_point(joint.child_point)}")
        out.append(f"limits = [{_fmt(joint.limits[0])}, {_fmt(joint.limits[1])}]")
        out.append(f"damping_nms_per_rad = {_fmt(joint.damping)}")
        out.append("")
    for act in desc.actuators:
        out.append("[[actuators]]")
        out.append(f'id = "{act.id}"')
        out.append(f"mass_kg = {_fmt(act.m)}")
        out.append(f"stiffness_n_per_m = {_fmt(act.k)}")
        out.append(f"damping_ns_per_m = {_fmt(act.c)}")
        out.append(f"rest_length_m = {_fmt(act.l0)}")
        out.append(f"area_m2 = {_fmt(act.area)}")
        out.append(
            f'attach_a = {{link = "{act.attach_a.link}", point = {_fmt_point(act.attach_a.point)}}}'
        )
        out.append(
            f'attach_b = {{link = "{act.attach_b.link}", point = {_fmt_point(act.attach_b.point)}}}'
        )
        out.append("")
    if desc.stance_foot is not None:
        out.append("[stance_foot]")
        out.append(f'link = "{desc.stance_foot.link}"')
        out.append(f"point = {_fmt_point(desc.stance_foot.point)}")
        out.append("")
    return "\n".join(out)


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------


def parse_schedule(text: str) -> PressureSchedule:
    """Parse a pressure schedule JSON document.

    Format: a list of steps, each {"t_s": float, "P_pa": [..]} or
    {"t_s": float, "P_kpa": [..]}.  The unit suffix is explicit so that kPa
    values from data sheets cannot be mistaken for Pa.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not well-formed JSON: {exc}") from exc
    if isinstance(doc, dict) and "steps" in doc:
        doc = doc["steps"]
    if not isinstance(doc, list) or not doc:
        raise SchemaError("schedule must be a nonempty list of steps")
    times, values = [], []
    for i, step in enumerate(doc):
        if not isinstance(step, dict):
            raise SchemaError(f"step {i} must be an object")
        unknown = set(step) - {"t_s", "P_pa", "P_kpa"}
        if unknown:
            raise SchemaError(f"unknown key(s) {sorted(unknown)} in step {i}")
        if "t_s" not in step:
            raise SchemaError(f"step {i} missing 't_s'")
        if ("P_pa" in step) == ("P_kpa" in step):
            raise SchemaError(f"step {i} needs exactly one of 'P_pa' or 'P_kpa'")
        scale = 1.0 if "P_pa" in step else 1000.0
        p = step.get("P_pa", step.get("P_kpa"))
        times.append(float(step["t_s"]))
        values.append([scale * float(x) for x in p])
    sched = PressureSchedule(np.array(times), np.array(values))
    sched.validate_nonnegative()
    return sched


# --------------------------------------------------------------------------
# bundled default leg
# --------------------------------------------------------------------------

# Table values for the two pneumatic actuators: mono-articular (MAA, spans
# the hip) and bi-articular (BAA, spans hip and knee).
MAA_PARAMS = dict(m=0.1865, k=367.8, c=10.8, l0=0.1744, area=6.54e-4)
BAA_PARAMS = dict(m=0.2727, k=291.8, c=11.3, l0=0.2536, area=6.37e-4)

HIP_LIMITS = (math.pi / 6.0, 2.0 * math.pi / 3.0)
KNEE_LIMITS = (0.0, math.pi / 2.0)
NOMINAL_POSE = (math.pi / 2.0, 0.0)

# Synthetic geometry (the real leg's attachment coordinates are not public).
# Chosen so both actuators are exactly at rest length at the nominal pose
# (pi/2, 0) -- thigh and calf pointing straight down -- with workable moment
# arms over the whole joint-limit box and a gravity-stable standing pose.
_L_THIGH = 0.15
_L_CALF = 0.16
_M_THIGH = 0.08
_M_CALF = 0.06
_MAA_BASE_X = 0.10
_MAA_THIGH_DEPTH = math.sqrt(MAA_PARAMS["l0"] ** 2 - _MAA_BASE_X**2)
_BAA_BASE_X = 0.05
_BAA_CALF_LATERAL = -0.08
_BAA_CALF_DEPTH = (
    math.sqrt(BAA_PARAMS["l0"] ** 2 - (_BAA_BASE_X + _BAA_CALF_LATERAL) ** 2) - _L_THIGH
)


def default_leg() -> RobotDescription:
    """The bundled two-joint leg: base, thigh, calf, MAA and BAA actuators."""
    links = (
        Link("base", mass=0.08, com=(0.0, 0.01), rod_length=0.08, inertia_zz=1.0e-4),
        Link(
            "thigh",
            mass=_M_THIGH,
            com=(-_L_THIGH / 2.0, 0.0),
            rod_length=_L_THIGH,
            inertia_zz=_M_THIGH * _L_THIGH**2 / 12.0,
        ),
        Link(
            "calf",
            mass=_M_CALF,
            com=(-_L_CALF / 2.0, 0.0),
            rod_length=_L_CALF,
            inertia_zz=_M_CALF * _L_CALF**2 / 12.0,
        ),
    )
    joints = (
        Joint("hip", "base", "thigh", (0.0, 0.0), (0.0, 0.0), HIP_LIMITS, damping=0.5),
        Joint("knee", "thigh", "calf", (-_L_THIGH, 0.0), (0.0, 0.0), KNEE_LIMITS, damping=0.06),
    )
    actuators = (
        ElasticActuatorSpec(
            id="MAA",
            attach_a=Attachment("base", (_MAA_BASE_X, 0.0)),
            attach_b=Attachment("thigh", (-_MAA_THIGH_DEPTH, 0.0)),
            **MAA_PARAMS,
        ),
        ElasticActuatorSpec(
            id="BAA",
            attach_a=Attachment("base", (_BAA_BASE_X, 0.0)),
            attach_b=Attachment("calf", (-_BAA_CALF_DEPTH, _BAA_CALF_LATERAL)),
            **BAA_PARAMS,
        ),
    )
    desc = RobotDescription(
        links=links,
        joints=joints,
        actuators=actuators,
        gravity=GRAVITY_DEFAULT,
        phase=Phase.SWING,
        stance_foot=Attachment("calf", (-_L_CALF, 0.0)),
    )
    _validate(desc)
    return desc


def validate_state(desc: RobotDescription, s: JointState) -> bool:
    """True iff the state's angles lie within the (closed) joint limits."""
    if s.q.size != desc.dof:
        raise DimensionError(f"state has {s.q.size} joints, model has {desc.dof}")
    for value, joint in zip(s.q, desc.joints):
        if not (joint.limits[0] <= value <= joint.limits[1]):
            return False
    return True
