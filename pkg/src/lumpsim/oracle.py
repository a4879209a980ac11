"""Analytical ground-truth dynamics in minimal joint coordinates.

The robot's kinetic energy sums rigid-link terms and the continuous actuator
term (m/6)(vA.vB + |vA|^2 + |vB|^2); the potential sums link and actuator
gravity plus elastic energy 0.5*k*(l-l0)^2; actuator drive and damping enter
through virtual work as (F - c*ldot) * dl/dq.  Velocity-product (Coriolis)
terms come from centrally finite-differenced mass-matrix derivatives through
Christoffel symbols, which keeps the model generic over morphologies.

In stance phase the chain is re-rooted at the foot: all positions, velocities
and Jacobians are taken relative to the foot point, so the foot maps to the
origin for every pose and the base mass swings with the chain.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _speedups
from ._speedups.packs import REV, OraclePack
from .errors import (
    CompileError,
    DimensionError,
    NonFinite,
    SingularActuation,
    SingularMass,
    StepFailure,
    ValidationError,
)
from .model import (
    JointState,
    Phase,
    PressureSchedule,
    RobotDescription,
    Trajectory,
)
from .model import _validate as _validate_description

DT_OUT_DEFAULT = 0.005
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class IntegratorConfig:
    """Adaptive embedded Runge-Kutta (Dormand-Prince 5(4)) settings."""

    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = math.inf

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.max_step <= 0:
            raise ValidationError("integrator tolerances must be positive")


@dataclass(frozen=True)
class OracleModel:
    desc: RobotDescription
    pack: OraclePack
    areas: np.ndarray
    point_names: tuple[str, ...]
    limits_lo: np.ndarray
    limits_hi: np.ndarray

    @property
    def dof(self) -> int:
        return self.pack.nq

    @property
    def nact(self) -> int:
        return self.pack.nact


def build_oracle(desc: RobotDescription) -> OracleModel:
    """Compile a description into the minimal-coordinate analytical model."""
    try:
        _validate_description(desc)
    except ValidationError as exc:
        raise CompileError(str(exc)) from exc

    nq = desc.dof
    link_ids = [l.id for l in desc.links]
    child_of = {j.child: j for j in desc.joints}
    root = next(lid for lid in link_ids if lid not in child_of)

    # topological body order (parents before children); the root stays world
    order: list[str] = []
    pending = [l.id for l in desc.links if l.id != root]
    placed = {root}
    while pending:
        progressed = False
        for lid in list(pending):
            if child_of[lid].parent in placed:
                order.append(lid)
                placed.add(lid)
                pending.remove(lid)
                progressed = True
        if not progressed:
            raise CompileError("actuator or joint attached to unreachable link")

    body_of = {root: -1}
    shift = {root: np.zeros(2)}
    joint_index = {j.id: i for i, j in enumerate(desc.joints)}
    nb = len(order)
    body_parent = np.full(nb, -1, dtype=np.int32)
    body_coord = np.zeros(nb, dtype=np.int32)
    body_anchor = np.zeros((nb, 2))
    body_inertia = np.zeros(nb)
    jw = np.zeros((nb, nq))
    for b, lid in enumerate(order):
        joint = child_of[lid]
        body_of[lid] = b
        shift[lid] = np.asarray(joint.child_point, float)
        p = body_of[joint.parent]
        body_parent[b] = p
        body_coord[b] = joint_index[joint.id]
        body_anchor[b] = np.asarray(joint.parent_point, float) - shift[joint.parent]
        link = desc.links[desc.link_index(lid)]
        body_inertia[b] = link.inertia_zz
        jw[b] = (jw[p] if p >= 0 else 0.0) * 1.0
        jw[b, joint_index[joint.id]] = 1.0

    def local(link_id: str, point) -> np.ndarray:
        return np.asarray(point, float) - shift[link_id]

    marker_body: list[int] = []
    marker_local: list[np.ndarray] = []
    marker_mass: list[float] = []
    names: list[str] = []

    def add_marker(link_id: str, point, mass: float, name: str) -> int:
        marker_body.append(body_of[link_id])
        marker_local.append(local(link_id, point))
        marker_mass.append(mass)
        names.append(name)
        return len(marker_body) - 1

    stance = desc.phase is Phase.STANCE
    for link in desc.links:
        if link.id == root:
            # the root's mass only moves (and matters) in the re-rooted frame
            if stance:
                add_marker(root, link.com, link.mass, f"{root}.com")
            continue
        add_marker(link.id, link.com, link.mass, f"{link.id}.com")

    act_idx = np.zeros((len(desc.actuators), 2), dtype=np.int32)
    act_par = np.zeros((len(desc.actuators), 4))
    areas = np.zeros(len(desc.actuators))
    for i, act in enumerate(desc.actuators):
        ia = add_marker(act.attach_a.link, act.attach_a.point, 0.0, f"{act.id}.a")
        ib = add_marker(act.attach_b.link, act.attach_b.point, 0.0, f"{act.id}.b")
        act_idx[i] = (ia, ib)
        act_par[i] = (act.m, act.k, act.c, act.l0)
        areas[i] = act.area

    foot_marker = -1
    if desc.stance_foot is not None:
        foot_marker = add_marker(
            desc.stance_foot.link, desc.stance_foot.point, 0.0, "foot"
        )
    if stance and foot_marker < 0:
        raise CompileError("stance phase requires stance_foot")

    pack = OraclePack(
        nq=nq,
        body_type=np.full(nb, REV, dtype=np.int32),
        body_parent=body_parent,
        body_coord=body_coord,
        body_anchor=body_anchor,
        body_axis=np.zeros((nb, 2)),
        body_inertia=body_inertia,
        jw=jw,
        marker_body=np.asarray(marker_body, dtype=np.int32),
        marker_local=np.asarray(marker_local, float).reshape(-1, 2),
        marker_mass=np.asarray(marker_mass, float),
        act_idx=act_idx,
        act_par=act_par,
        joint_damp=np.array([j.damping for j in desc.joints], float),
        gravity=desc.gravity,
        stance=int(stance),
        foot_marker=foot_marker,
    )
    return OracleModel(
        desc=desc,
        pack=pack,
        areas=areas,
        point_names=tuple(names),
        limits_lo=np.array([j.limits[0] for j in desc.joints]),
        limits_hi=np.array([j.limits[1] for j in desc.joints]),
    )


def _check_q(model: OracleModel, q) -> np.ndarray:
    q = np.asarray(q, float)
    if q.shape != (model.dof,):
        raise DimensionError(f"expected {model.dof} joint angles, got shape {q.shape}")
    return q


def forward_kinematics(model: OracleModel, q):
    """Named point positions, actuator lengths and length Jacobians at q.

    Evaluation outside the joint-limit box is allowed but warns.
    """
    q = _check_q(model, q)
    if np.any(q < model.limits_lo) or np.any(q > model.limits_hi):
        warnings.warn("pose outside joint limits", stacklevel=2)
    r, jac, l, dl = _speedups.kernel.oracle_fk(model.pack, q)
    points = {name: r[i].copy() for i, name in enumerate(model.point_names)}
    jacobians = {name: jac[i].copy() for i, name in enumerate(model.point_names)}
    return {"points": points, "lengths": l, "dl_dq": dl, "point_jacobians": jacobians}


def mass_matrix(model: OracleModel, q) -> np.ndarray:
    return _speedups.kernel.oracle_mass(model.pack, _check_q(model, q))


def _forces_at(model: OracleModel, pressures, t: float) -> np.ndarray:
    if isinstance(pressures, PressureSchedule):
        idx = int(np.searchsorted(pressures.times, t + 1e-12, side="right") - 1)
        idx = max(idx, 0)
        p = pressures.values[idx]
    else:
        p = np.asarray(pressures, float)
    if p.shape != (model.nact,):
        raise DimensionError(f"expected {model.nact} pressures, got shape {p.shape}")
    return p * model.areas


def eom_rhs(model: OracleModel, s: JointState, pressures) -> np.ndarray:
    """Joint accelerations at a state under actuator pressures."""
    q = _check_q(model, s.q)
    f = _forces_at(model, pressures, s.t)
    m = mass_matrix(model, q)
    if np.linalg.cond(m) > _COND_LIMIT:
        raise SingularMass(f"mass matrix condition number exceeds {_COND_LIMIT:g}")
    qdd, status = _speedups.kernel.oracle_rhs(model.pack, q, s.qdot, f)
    if status != 0:
        raise SingularMass("mass matrix solve failed")
    return qdd


def total_energy(model: OracleModel, s: JointState):
    """(T, Vg, Ve) component energies at a state."""
    T, Vg, Ve, _, _ = _speedups.kernel.oracle_energies(model.pack, s.q, s.qdot)
    return T, Vg, Ve


def balancing_force(model: OracleModel, q):
    """Actuator forces (and pressures) that hold pose q in static equilibrium.

    Solves Q_EA(q, 0, F) = dV/dq, which is linear in F; requires as many
    actuators as joints.
    """
    q = _check_q(model, q)
    if model.nact != model.dof:
        raise DimensionError(
            f"balancing needs a square problem: {model.nact} actuators, {model.dof} joints"
        )
    grad, dl = _speedups.kernel.oracle_statics(model.pack, q)
    a = dl.T
    if np.linalg.cond(a) > _COND_LIMIT:
        raise SingularActuation(f"actuator Jacobian rank-deficient at q={q}")
    f = np.linalg.solve(a, grad)
    return f, f / model.areas


_STATUS_ERRORS = {
    1: (StepFailure, "minimum step size underflow"),
    2: (NonFinite, "state became non-finite"),
    3: (SingularMass, "mass matrix solve failed"),
}


def _raise_for_status(status: int):
    if status in _STATUS_ERRORS:
        err, msg = _STATUS_ERRORS[status]
        raise err(msg)


def integrate_forces(
    model: OracleModel,
    q0,
    qd0,
    force_times,
    force_values,
    t_end: float,
    cfg: IntegratorConfig = IntegratorConfig(),
    dt_out: float = DT_OUT_DEFAULT,
    settle_tol: float = 0.0,
    record: bool = True,
):
    """Low-level drive with a piecewise-constant axial-force schedule.

    Returns (Trajectory | None, final JointState, settled flag).
    """
    q0 = _check_q(model, q0)
    qd0 = np.asarray(qd0, float)
    force_times = np.atleast_1d(np.asarray(force_times, float))
    force_values = np.atleast_2d(np.asarray(force_values, float))
    n_out = max(1, int(round(t_end / dt_out)))
    t_end = n_out * dt_out
    out = _speedups.kernel.oracle_integrate(
        model.pack,
        q0,
        qd0,
        force_times,
        force_values,
        t_end,
        dt_out,
        cfg.rel_tol,
        cfg.abs_tol,
        cfg.max_step,
        settle_tol,
        record,
    )
    (status, t, qs, qds, ls, lds, es, qf, qdf, tf, n_rows, settled) = out
    _raise_for_status(status)
    traj = None
    if record:
        traj = Trajectory(
            t[:n_rows],
            qs[:n_rows],
            qds[:n_rows],
            ls[:n_rows],
            lds[:n_rows],
            es[:n_rows, 0],
            es[:n_rows, 1],
            es[:n_rows, 2],
        )
    return traj, JointState(qf, qdf, tf), settled


def integrate(
    model: OracleModel,
    s0: JointState,
    pressures: PressureSchedule,
    t_end: float,
    cfg: IntegratorConfig = IntegratorConfig(),
    dt_out: float = DT_OUT_DEFAULT,
) -> Trajectory:
    """Simulate under a pressure schedule; rows sampled every dt_out."""
    forces = pressures.forces(model.areas)
    traj, _, _ = integrate_forces(
        model, s0.q, s0.qdot, forces.times, forces.values, t_end, cfg, dt_out
    )
    return traj


def settle(
    model: OracleModel,
    q0,
    forces,
    t_cap: float = 30.0,
    tol: float = 1e-5,
    cfg: IntegratorConfig = IntegratorConfig(),
):
    """Run from rest at q0 under constant forces until joint rates die out.

    Returns (final JointState, settled flag).
    """
    _, state, settled = integrate_forces(
        model,
        q0,
        np.zeros(model.dof),
        [0.0],
        [np.asarray(forces, float)],
        t_cap,
        cfg,
        dt_out=t_cap,
        settle_tol=tol,
        record=False,
    )
    return state, settled
