"""Extended-coordinate constrained engine with lumped actuator assemblies.

In LUMPED mode every actuator is replaced by its 3-2-1 assembly: a hinge
mount at attach_a carrying m/6, a slide link carrying 2m/3, and a second
slide link carrying m/6 whose origin is tied to attach_b by a connect
constraint; a joint-equality constraint keeps both slide elongations equal.
Each slide joint carries stiffness 2k, damping 2c, rest length l0/2 and the
shared drive force F.  NAIVE mode instead applies a single massless
spring-damper-force element between the attachment points.

Coordinates are x = [skeleton joints; (base x, y in stance); per-actuator
(mount angle, slide 1, slide 2)].  Each actuator adds three coordinates and
three constraints, so the net DOF always equals the skeleton's.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _speedups
from ._speedups import _core_py
from ._speedups.packs import REV, SLIDE, XY, EnginePack
from .equivalence import equivalize
from .errors import (
    CompileError,
    DimensionError,
    DriftExceeded,
    GeometryError,
    NonFinite,
    SolverSingular,
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

_MIN_LENGTH = 1e-9


class BaselineMode(Enum):
    LUMPED = "lumped"    # 3-2-1 energy-equivalent assembly
    NAIVE = "naive"      # single massless spring-damper element


@dataclass(frozen=True)
class EngineConfig:
    dt: float = 0.005
    omega: float = 100.0        # Baumgarte natural frequency, rad/s
    zeta: float = 1.0           # Baumgarte damping ratio
    drift_tol: float = 1e-6     # constraint position residual bound, m

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.omega < 0 or self.zeta < 0 or self.drift_tol <= 0:
            raise ValidationError("gains must be nonnegative, drift_tol positive")

    @property
    def alpha(self) -> float:
        return 2.0 * self.zeta * self.omega

    @property
    def beta(self) -> float:
        return self.omega**2


@dataclass(frozen=True)
class EngineModel:
    desc: RobotDescription
    mode: BaselineMode
    cfg: EngineConfig
    pack: EnginePack
    areas: np.ndarray
    act_coords: np.ndarray     # int32[na, 3]: (mount, slide1, slide2); empty in NAIVE
    act_parent_body: np.ndarray  # int32[na]: body carrying attach_a (-1 world)
    nj: int                    # skeleton joint count

    @property
    def nx(self) -> int:
        return self.pack.nq

    @property
    def ncon(self) -> int:
        return self.pack.ncon

    @property
    def nact(self) -> int:
        return len(self.desc.actuators)


def compile_engine(
    desc: RobotDescription,
    mode: BaselineMode = BaselineMode.LUMPED,
    cfg: EngineConfig = EngineConfig(),
) -> EngineModel:
    try:
        _validate_description(desc)
    except ValidationError as exc:
        raise CompileError(str(exc)) from exc

    nj = desc.dof
    na = len(desc.actuators)
    stance = desc.phase is Phase.STANCE
    lumped = mode is BaselineMode.LUMPED
    nx = nj + (2 if stance else 0) + (3 * na if lumped else 0)

    link_ids = [l.id for l in desc.links]
    child_of = {j.child: j for j in desc.joints}
    root = next(lid for lid in link_ids if lid not in child_of)
    joint_index = {j.id: i for i, j in enumerate(desc.joints)}

    body_type: list[int] = []
    body_parent: list[int] = []
    body_coord: list[int] = []
    body_anchor: list[np.ndarray] = []
    body_axis: list[np.ndarray] = []
    body_inertia: list[float] = []
    jw_rows: list[np.ndarray] = []

    def add_body(btype, parent, coord, anchor, axis=(0.0, 0.0), inertia=0.0) -> int:
        body_type.append(btype)
        body_parent.append(parent)
        body_coord.append(coord)
        body_anchor.append(np.asarray(anchor, float))
        body_axis.append(np.asarray(axis, float))
        body_inertia.append(inertia)
        row = jw_rows[parent].copy() if parent >= 0 else np.zeros(nx)
        if btype == REV:
            row[coord] = 1.0
        jw_rows.append(row)
        return len(body_type) - 1

    body_of = {root: -1}
    shift = {root: np.zeros(2)}
    if stance:
        body_of[root] = add_body(XY, -1, nj, (0.0, 0.0))

    pending = [l.id for l in desc.links if l.id != root]
    placed = {root}
    while pending:
        progressed = False
        for lid in list(pending):
            joint = child_of[lid]
            if joint.parent in placed:
                shift[lid] = np.asarray(joint.child_point, float)
                anchor = np.asarray(joint.parent_point, float) - shift[joint.parent]
                link = desc.links[desc.link_index(lid)]
                body_of[lid] = add_body(
                    REV, body_of[joint.parent], joint_index[joint.id], anchor,
                    inertia=link.inertia_zz,
                )
                placed.add(lid)
                pending.remove(lid)
                progressed = True
        if not progressed:
            raise CompileError("joint attached to unreachable link")

    def local(link_id, point):
        return np.asarray(point, float) - shift[link_id]

    marker_body: list[int] = []
    marker_local: list[np.ndarray] = []
    marker_mass: list[float] = []

    def add_marker(body, point, mass) -> int:
        marker_body.append(body)
        marker_local.append(np.asarray(point, float))
        marker_mass.append(mass)
        return len(marker_body) - 1

    for link in desc.links:
        if link.id == root and not stance:
            continue  # fixed base mass contributes only a constant
        add_marker(body_of[link.id], local(link.id, link.com), link.mass)

    act_coords = np.zeros((na, 3), dtype=np.int32)
    act_parent_body = np.zeros(na, dtype=np.int32)
    rep_idx = np.zeros((na, 2), dtype=np.int32)
    areas = np.zeros(na)
    spring_coord, spring_k, spring_c, spring_ref, spring_act = [], [], [], [], []
    line_idx, line_par, line_act = [], [], []
    conn_pairs, eq_pairs = [], []

    coord_next = nj + (2 if stance else 0)
    for i, act in enumerate(desc.actuators):
        areas[i] = act.area
        pa = body_of[act.attach_a.link]
        pb = body_of[act.attach_b.link]
        act_parent_body[i] = pa
        ma = add_marker(pa, local(act.attach_a.link, act.attach_a.point), 0.0)
        mb = add_marker(pb, local(act.attach_b.link, act.attach_b.point), 0.0)
        rep_idx[i] = (ma, mb)
        if lumped:
            asm = equivalize(act)
            c0 = coord_next
            coord_next += 3
            act_coords[i] = (c0, c0 + 1, c0 + 2)
            b_u = add_body(REV, pa, c0, local(act.attach_a.link, act.attach_a.point))
            b_m = add_body(SLIDE, b_u, c0 + 1, (0.0, 0.0), axis=(1.0, 0.0))
            b_l = add_body(SLIDE, b_m, c0 + 2, (0.0, 0.0), axis=(1.0, 0.0))
            add_marker(b_u, (0.0, 0.0), asm.masses[0])
            add_marker(b_m, (0.0, 0.0), asm.masses[1])
            tip = add_marker(b_l, (0.0, 0.0), asm.masses[2])
            conn_pairs.append((tip, mb))
            eq_pairs.append((c0 + 1, c0 + 2))
            for cidx in (c0 + 1, c0 + 2):
                spring_coord.append(cidx)
                spring_k.append(asm.k_seg)
                spring_c.append(asm.c_seg)
                spring_ref.append(asm.l_seg0)
                spring_act.append(i)
        else:
            line_idx.append((ma, mb))
            line_par.append((act.k, act.c, act.l0))
            line_act.append(i)

    pin_marker = -1
    if stance:
        foot = desc.stance_foot
        pin_marker = add_marker(body_of[foot.link], local(foot.link, foot.point), 0.0)

    joint_damp = np.zeros(nx)
    for j, joint in enumerate(desc.joints):
        joint_damp[j] = joint.damping

    pack = EnginePack(
        nq=nx,
        body_type=np.asarray(body_type, dtype=np.int32),
        body_parent=np.asarray(body_parent, dtype=np.int32),
        body_coord=np.asarray(body_coord, dtype=np.int32),
        body_anchor=np.asarray(body_anchor, float).reshape(-1, 2),
        body_axis=np.asarray(body_axis, float).reshape(-1, 2),
        body_inertia=np.asarray(body_inertia, float),
        jw=np.asarray(jw_rows, float).reshape(-1, nx),
        marker_body=np.asarray(marker_body, dtype=np.int32),
        marker_local=np.asarray(marker_local, float).reshape(-1, 2),
        marker_mass=np.asarray(marker_mass, float),
        spring_coord=np.asarray(spring_coord, dtype=np.int32),
        spring_k=np.asarray(spring_k, float),
        spring_c=np.asarray(spring_c, float),
        spring_ref=np.asarray(spring_ref, float),
        spring_act=np.asarray(spring_act, dtype=np.int32),
        line_idx=np.asarray(line_idx, dtype=np.int32).reshape(-1, 2),
        line_par=np.asarray(line_par, float).reshape(-1, 3),
        line_act=np.asarray(line_act, dtype=np.int32),
        conn_pairs=np.asarray(conn_pairs, dtype=np.int32).reshape(-1, 2),
        eq_pairs=np.asarray(eq_pairs, dtype=np.int32).reshape(-1, 2),
        rep_idx=rep_idx,
        joint_damp=joint_damp,
        gravity=desc.gravity,
        nq_skel=nj,
        pin_marker=pin_marker,
    )
    model = EngineModel(
        desc=desc,
        mode=mode,
        cfg=cfg,
        pack=pack,
        areas=areas,
        act_coords=act_coords if lumped else np.zeros((0, 3), dtype=np.int32),
        act_parent_body=act_parent_body,
        nj=nj,
    )
    if pack.nq - pack.ncon != nj:
        raise CompileError(
            f"DOF accounting failed: {pack.nq} coordinates, {pack.ncon} constraints, "
            f"skeleton DOF {nj}"
        )
    _check_constraint_rank(model)
    return model


def _check_constraint_rank(model: EngineModel) -> None:
    if model.ncon == 0:
        return
    q_mid = 0.5 * (
        np.array([j.limits[0] for j in model.desc.joints])
        + np.array([j.limits[1] for j in model.desc.joints])
    )
    x, v, pin = assemble_state(model, JointState(q_mid, np.zeros(model.nj)))
    fr = _core_py._fk(model.pack, x, v)
    _, jc, _ = _core_py._engine_constraints(model.pack, fr, x, pin)
    rank = np.linalg.matrix_rank(jc, tol=1e-9)
    if rank < model.ncon:
        raise CompileError(
            f"constraints rank-deficient at the initial pose ({rank} < {model.ncon})"
        )


def assemble_state(model: EngineModel, s: JointState):
    """Closed-form extended state consistent with all constraints at s.

    Mount angles come from the attach-vector direction, slide lengths from
    half the endpoint distance; in stance the base is shifted so the foot
    sits at the origin (the pin target).  Returns (x, v, pin_target).
    """
    q = np.asarray(s.q, float)
    if q.shape != (model.nj,):
        raise DimensionError(f"expected {model.nj} joint angles, got {q.shape}")
    pack = model.pack
    x = np.zeros(model.nx)
    v = np.zeros(model.nx)
    x[: model.nj] = q
    pin_target = np.zeros(2)

    if pack.pin_marker >= 0:
        fr = _core_py._fk(pack, x, None, want_jac=False)
        x[model.nj : model.nj + 2] = -fr.r[pack.pin_marker]

    fr = _core_py._fk(pack, x, None, want_jac=False)
    for i in range(model.nact):
        ma, mb = pack.rep_idx[i]
        d = fr.r[mb] - fr.r[ma]
        l = math.hypot(d[0], d[1])
        if l < _MIN_LENGTH:
            raise GeometryError(
                f"attachment points of actuator {i} coincide at q={q}"
            )
        if model.act_coords.shape[0]:
            c0, c1, c2 = model.act_coords[i]
            pa = model.act_parent_body[i]
            th_p = fr.th[pa] if pa >= 0 else 0.0
            x[c0] = math.atan2(d[1], d[0]) - th_p
            x[c1] = 0.5 * l
            x[c2] = 0.5 * l

    v[: model.nj] = np.asarray(s.qdot, float)
    if pack.pin_marker >= 0:
        fr = _core_py._fk(pack, x, v)
        jf = fr.J[pack.pin_marker]
        v[model.nj : model.nj + 2] = -(jf[:, : model.nj] @ v[: model.nj])

    if model.act_coords.shape[0]:
        fr = _core_py._fk(pack, x, v)
        for i in range(model.nact):
            ma, mb = pack.rep_idx[i]
            d = fr.r[mb] - fr.r[ma]
            l = math.hypot(d[0], d[1])
            u = d / l
            dv = fr.rd[mb] - fr.rd[ma]
            ld = u @ dv
            psidot = (-u[1] * dv[0] + u[0] * dv[1]) / l
            pa = model.act_parent_body[i]
            w_p = fr.w[pa] if pa >= 0 else 0.0
            c0, c1, c2 = model.act_coords[i]
            v[c0] = psidot - w_p
            v[c1] = 0.5 * ld
            v[c2] = 0.5 * ld
    return x, v, pin_target


def extract_joint_state(model: EngineModel, x, v, t: float = 0.0) -> JointState:
    return JointState(np.asarray(x)[: model.nj].copy(), np.asarray(v)[: model.nj].copy(), t)


def constraint_residual(model: EngineModel, x, pin_target=(0.0, 0.0)) -> np.ndarray:
    return _speedups.kernel.engine_residual(
        model.pack, np.asarray(x, float), np.asarray(pin_target, float)
    )


_STATUS_ERRORS = {
    2: (NonFinite, "state became non-finite"),
    4: (SolverSingular, "saddle-point solve failed"),
    5: (DriftExceeded, "constraint drift exceeded tolerance"),
}


def simulate_forces(
    model: EngineModel,
    x0,
    v0,
    force_times,
    force_values,
    n_steps: int,
    pin_target=(0.0, 0.0),
    settle_tol: float = 0.0,
    record: bool = True,
):
    """Low-level fixed-step run under a piecewise-constant force schedule.

    Returns (Trajectory | None, final x, final v, info dict, settled flag).
    """
    cfg = model.cfg
    force_times = np.atleast_1d(np.asarray(force_times, float))
    force_values = np.atleast_2d(np.asarray(force_values, float))
    t0 = time.perf_counter()
    out = _speedups.kernel.engine_simulate(
        model.pack,
        np.asarray(x0, float),
        np.asarray(v0, float),
        force_times,
        force_values,
        cfg.dt,
        n_steps,
        cfg.alpha,
        cfg.beta,
        cfg.drift_tol,
        np.asarray(pin_target, float),
        settle_tol,
        record,
    )
    wall = time.perf_counter() - t0
    (status, t, qs, qds, ls, lds, es, xf, vf, n_done, max_drift, max_eqgap, settled) = out
    if status in _STATUS_ERRORS:
        err, msg = _STATUS_ERRORS[status]
        raise err(f"{msg} (after {n_done} steps)")
    traj = None
    if record:
        n_rows = n_done + 1
        traj = Trajectory(
            t[:n_rows], qs[:n_rows], qds[:n_rows], ls[:n_rows], lds[:n_rows],
            es[:n_rows, 0], es[:n_rows, 1], es[:n_rows, 2],
        )
    info = {
        "mode": model.mode.value,
        "dt": cfg.dt,
        "gains": {"alpha": cfg.alpha, "beta": cfg.beta},
        "wall_ms_per_step": 1e3 * wall / max(1, n_done),
        "max_drift": float(max_drift),
        "max_slide_gap": float(max_eqgap),
    }
    return traj, xf, vf, info, settled


def step(model: EngineModel, x, v, pressures, pin_target=(0.0, 0.0)):
    """Advance one dt under constant pressures; returns (x', v', info)."""
    forces = np.asarray(pressures, float) * model.areas
    _, xf, vf, info, _ = simulate_forces(
        model, x, v, [0.0], [forces], 1,
        pin_target=pin_target, record=False,
    )
    return xf, vf, info


def simulate(
    model: EngineModel,
    s0: JointState,
    pressures: PressureSchedule,
    t_end: float,
) -> tuple[Trajectory, dict]:
    """Simulate under a pressure schedule from a consistent assembled state."""
    forces = pressures.forces(model.areas)
    x0, v0, pin = assemble_state(model, s0)
    n_steps = int(round(t_end / model.cfg.dt))
    traj, _, _, info, _ = simulate_forces(
        model, x0, v0, forces.times, forces.values, n_steps, pin_target=pin
    )
    return traj, info


def settle(
    model: EngineModel,
    q0,
    forces,
    t_cap: float = 30.0,
    tol: float = 1e-5,
):
    """Run from rest at q0 under constant forces until joint rates die out."""
    x0, v0, pin = assemble_state(model, JointState(np.asarray(q0, float), np.zeros(model.nj)))
    n_steps = int(round(t_cap / model.cfg.dt))
    _, xf, vf, info, settled = simulate_forces(
        model, x0, v0, [0.0], [np.asarray(forces, float)], n_steps,
        pin_target=pin, settle_tol=tol, record=False,
    )
    t_done = info.pop("_n_done", None)
    return extract_joint_state(model, xf, vf, t=info.get("t_final", 0.0)), info, settled
