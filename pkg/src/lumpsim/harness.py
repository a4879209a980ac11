"""Verification suites comparing the constrained engine to the analytical
model: static equilibria, swing and stance step responses, randomized 3-DOF
morphologies, parameter sensitivity, and the massless-baseline comparison.

Every report embeds the configuration, master seed and a code-version hash;
per-trial sub-seeds are spawned deterministically from the master seed, so
reports are byte-identical across reruns and worker counts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .engine import (
    BaselineMode,
    EngineConfig,
    EngineModel,
    assemble_state,
    compile_engine,
    simulate_forces,
)
from .engine import settle as engine_settle
from .errors import CompileError, LumpsimError, ValidationError
from .model import (
    Attachment,
    ElasticActuatorSpec,
    Joint,
    JointState,
    Link,
    Phase,
    RobotDescription,
    Trajectory,
    default_leg,
    serialize_description,
)
from .model import BAA_PARAMS, MAA_PARAMS
from .oracle import IntegratorConfig, OracleModel, balancing_force, build_oracle, integrate_forces
from .oracle import settle as oracle_settle

TRIAL_DURATION = 10.0      # s, step-response window
SETTLE_CAP = 30.0          # s
SETTLE_TOL = 1e-5          # rad/s
STANCE_IMPULSE = (10.0, 10.0)   # N
STANCE_INIT = (math.pi / 2.0, 0.0)

# the standard swing test: a fixed interior step response used by the
# sensitivity and baseline suites
STD_SWING_FROM = (1.2, 0.3)
STD_SWING_TO = (1.7, 0.7)

_CODE_VERSION = None


def code_version() -> str:
    """Short hash of the package sources, embedded in reports."""
    global _CODE_VERSION
    if _CODE_VERSION is None:
        root = Path(__file__).parent
        digest = hashlib.sha256()
        for path in sorted(root.rglob("*.py")) + sorted(root.rglob("*.pyx")):
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
        _CODE_VERSION = digest.hexdigest()[:12]
    return _CODE_VERSION


@dataclass
class EquivalenceReport:
    rmse: np.ndarray           # per joint, rad
    maxae: np.ndarray          # per joint, rad
    trials: int
    valid: int
    discarded: int
    seed: int
    config: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.valid + self.discarded != self.trials:
            raise ValidationError("trial accounting mismatch")
        if self.valid and np.any(self.maxae + 1e-15 < self.rmse):
            raise ValidationError("MaxAE must be >= RMSE")

    def to_dict(self) -> dict:
        return {
            "rmse_rad": [float(x) for x in self.rmse],
            "maxae_rad": [float(x) for x in self.maxae],
            "trials": self.trials,
            "valid": self.valid,
            "discarded": self.discarded,
            "seed": self.seed,
            "config": self.config,
            "extra": self.extra,
            "code_version": code_version(),
        }


@dataclass
class SensitivityReport:
    levels_pct: tuple
    delta_rmse: dict           # param -> {"+1": .., "-1": .., ...}
    config: dict

    def to_dict(self) -> dict:
        return {
            "levels_pct": list(self.levels_pct),
            "delta_rmse_rad": self.delta_rmse,
            "config": self.config,
            "code_version": code_version(),
        }


def write_report(report, path) -> None:
    data = report.to_dict() if hasattr(report, "to_dict") else report
    with open(path, "w", newline="\n") as fh:
        json.dump(data, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _limit_box(desc: RobotDescription):
    lo = np.array([j.limits[0] for j in desc.joints])
    hi = np.array([j.limits[1] for j in desc.joints])
    return lo, hi


def _in_box(q: np.ndarray, lo, hi) -> bool:
    return bool(np.all(q >= lo - 1e-12) and np.all(q <= hi + 1e-12))


def _spawn_rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class _ErrorAccumulator:
    """Aggregate per-joint squared errors and absolute maxima over trials."""

    def __init__(self, ndof: int):
        self.sq_sum = np.zeros(ndof)
        self.count = 0
        self.maxae = np.zeros(ndof)

    def add(self, err: np.ndarray):
        err = np.atleast_2d(err)
        self.sq_sum += np.sum(err**2, axis=0)
        self.count += err.shape[0]
        self.maxae = np.maximum(self.maxae, np.max(np.abs(err), axis=0))

    def rmse(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.sq_sum)
        return np.sqrt(self.sq_sum / self.count)


def run_static_sweep(
    n: int,
    seed: int,
    desc: RobotDescription | None = None,
) -> EquivalenceReport:
    """Settled-pose agreement under balancing forces at n workspace samples.

    Both backends start at rest from the workspace center under the constant
    balancing force of a sampled pose and run until joint rates fall below
    the settling threshold; the settled poses are compared.  Trials where
    either backend fails to settle within the cap are excluded.
    """
    if n < 1:
        raise ValidationError("need at least one trial")
    desc = desc or default_leg()
    om = build_oracle(desc)
    em = compile_engine(desc)
    lo, hi = _limit_box(desc)
    q_center = 0.5 * (lo + hi)
    acc = _ErrorAccumulator(desc.dof)
    discarded = 0
    for rng in _spawn_rngs(seed, n):
        q = rng.uniform(lo, hi)
        try:
            f, _ = balancing_force(om, q)
            state_o, ok_o = oracle_settle(om, q_center, f, SETTLE_CAP, SETTLE_TOL)
            state_e, _, ok_e = engine_settle(em, q_center, f, SETTLE_CAP, SETTLE_TOL)
        except LumpsimError:
            discarded += 1
            continue
        if not (ok_o and ok_e):
            discarded += 1
            continue
        acc.add(state_e.q - state_o.q)
    return EquivalenceReport(
        rmse=acc.rmse(),
        maxae=acc.maxae,
        trials=n,
        valid=n - discarded,
        discarded=discarded,
        seed=seed,
        config={"suite": "static", "n": n, "settle_tol": SETTLE_TOL, "cap_s": SETTLE_CAP},
    )


def _swing_trial(om: OracleModel, em: EngineModel, q, q_to, lo, hi):
    """One step response from equilibrium at q to the balancing force of q_to.

    Returns per-sample angle differences, or None when the trial is
    discarded (limit violation in either backend, or a failed run).
    """
    f_to, _ = balancing_force(om, q_to)
    try:
        otraj, _, _ = integrate_forces(
            om, q, np.zeros(om.dof), [0.0], [f_to], TRIAL_DURATION
        )
        x0, v0, pin = assemble_state(em, JointState(np.asarray(q, float), np.zeros(em.nj)))
        n_steps = int(round(TRIAL_DURATION / em.cfg.dt))
        etraj, *_ = simulate_forces(em, x0, v0, [0.0], [f_to], n_steps, pin_target=pin)
    except LumpsimError:
        return None
    for traj in (otraj, etraj):
        if np.any(traj.q < lo - 1e-12) or np.any(traj.q > hi + 1e-12):
            return None
    return etraj.q - otraj.q


def run_dynamic_swing(
    n: int,
    seed: int,
    desc: RobotDescription | None = None,
) -> EquivalenceReport:
    """Step responses between balancing forces of workspace pose pairs.

    Trials whose trajectory leaves the joint-limit box in either backend are
    discarded (mirroring the sweep filtering of the original experiments).
    """
    if n < 1:
        raise ValidationError("need at least one trial")
    desc = desc or default_leg()
    om = build_oracle(desc)
    em = compile_engine(desc)
    lo, hi = _limit_box(desc)
    acc = _ErrorAccumulator(desc.dof)
    discarded = 0
    for rng in _spawn_rngs(seed, n):
        q = rng.uniform(lo, hi)
        q_to = rng.uniform(lo, hi)
        err = _swing_trial(om, em, q, q_to, lo, hi)
        if err is None:
            discarded += 1
            continue
        acc.add(err)
    return EquivalenceReport(
        rmse=acc.rmse(),
        maxae=acc.maxae,
        trials=n,
        valid=n - discarded,
        discarded=discarded,
        seed=seed,
        config={"suite": "dynamic-swing", "n": n, "duration_s": TRIAL_DURATION},
    )


def run_stance_impulse(desc: RobotDescription | None = None) -> EquivalenceReport:
    """Stance-phase step response to the fixed force pair from standing."""
    desc = (desc or default_leg()).with_phase(Phase.STANCE)
    om = build_oracle(desc)
    em = compile_engine(desc)
    q0 = np.asarray(STANCE_INIT, float)
    f = np.asarray(STANCE_IMPULSE, float)
    otraj, _, _ = integrate_forces(om, q0, np.zeros(om.dof), [0.0], [f], TRIAL_DURATION)
    x0, v0, pin = assemble_state(em, JointState(q0, np.zeros(em.nj)))
    n_steps = int(round(TRIAL_DURATION / em.cfg.dt))
    etraj, *_, info, _ = simulate_forces(em, x0, v0, [0.0], [f], n_steps, pin_target=pin)
    err = etraj.q - otraj.q
    return EquivalenceReport(
        rmse=np.sqrt(np.mean(err**2, axis=0)),
        maxae=np.max(np.abs(err), axis=0),
        trials=1,
        valid=1,
        discarded=0,
        seed=0,
        config={
            "suite": "stance-impulse",
            "impulse_n": list(STANCE_IMPULSE),
            "init": list(STANCE_INIT),
            "duration_s": TRIAL_DURATION,
        },
        extra={"max_drift_m": info["max_drift"], "max_slide_gap_m": info["max_slide_gap"]},
    )


# ---------------------------------------------------------------------------
# randomized 3-DOF morphology
# ---------------------------------------------------------------------------

_ROUTES = [
    ((0, 1), (0, 2), (1, 3)),
    ((0, 1), (0, 3), (1, 2)),
    ((0, 1), (1, 2), (2, 3)),
    ((0, 2), (1, 2), (1, 3)),
    ((0, 1), (0, 2), (2, 3)),
]


def random_chain_3dof(rng: np.random.Generator) -> RobotDescription:
    """A random planar 3-joint chain with three randomly routed actuators.

    Link lengths 0.1-0.4 m; actuator stiffness/damping/mass/area sampled
    within 0.5-2x of the reference leg's values; rest lengths set so every
    actuator is unloaded at the hanging nominal pose (pi/2, 0, 0).
    """
    lengths = rng.uniform(0.10, 0.40, 3)
    masses = rng.uniform(0.05, 0.20, 3)
    names = ["base", "l1", "l2", "l3"]
    links = [Link("base", 0.08, (0.0, 0.01), 0.08, 1.0e-4)]
    for i in range(3):
        links.append(
            Link(
                names[i + 1],
                masses[i],
                (-lengths[i] / 2.0, 0.0),
                lengths[i],
                masses[i] * lengths[i] ** 2 / 12.0,
            )
        )
    half = rng.uniform(0.5, 0.8, 3)
    limits = [(math.pi / 2.0 - half[0], math.pi / 2.0 + half[0])]
    limits += [(-half[i], half[i]) for i in (1, 2)]
    joints = []
    for i in range(3):
        anchor = (0.0, 0.0) if i == 0 else (-lengths[i - 1], 0.0)
        joints.append(
            Joint(
                f"j{i + 1}",
                names[i],
                names[i + 1],
                anchor,
                (0.0, 0.0),
                limits[i],
                damping=float(rng.uniform(0.05, 0.4)),
            )
        )

    # nominal pose FK for rest-length computation; link i hangs along -y
    origins = {"base": np.zeros(2)}
    down = np.array([0.0, -1.0])
    for i in range(3):
        origins[names[i + 1]] = origins[names[i]] + (down * lengths[i - 1] if i else 0.0)
    # world position of a local point on a hanging link: origin + R(pi/2) @ p
    def world(link_id, p):
        if link_id == "base":
            return np.asarray(p, float)
        return origins[link_id] + np.array([-p[1], p[0]])

    route = _ROUTES[int(rng.integers(len(_ROUTES)))]
    actuators = []
    ref = [MAA_PARAMS, BAA_PARAMS]
    for i, (a, b) in enumerate(route):
        base_par = ref[int(rng.integers(2))]
        for _ in range(25):
            if a == 0:
                pa = (float(rng.uniform(0.05, 0.14)) * (1 if rng.random() < 0.7 else -1), 0.0)
            else:
                pa = (
                    -float(rng.uniform(0.1, 0.6)) * lengths[a - 1],
                    float(rng.uniform(0.04, 0.10)) * (1 if rng.random() < 0.5 else -1),
                )
            pb = (
                -float(rng.uniform(0.3, 0.9)) * lengths[b - 1],
                float(rng.uniform(0.04, 0.10)) * (1 if rng.random() < 0.5 else -1),
            )
            l0 = float(np.linalg.norm(world(names[b], pb) - world(names[a], pa)))
            if 0.09 <= l0 <= 0.50:
                break
        else:
            raise CompileError("rest length out of range")
        actuators.append(
            ElasticActuatorSpec(
                id=f"act{i + 1}",
                m=base_par["m"] * float(rng.uniform(0.5, 2.0)),
                k=base_par["k"] * float(rng.uniform(0.5, 2.0)),
                c=base_par["c"] * float(rng.uniform(0.5, 2.0)),
                l0=l0,
                area=base_par["area"] * float(rng.uniform(0.5, 2.0)),
                attach_a=Attachment(names[a], pa),
                attach_b=Attachment(names[b], pb),
            )
        )
    desc = RobotDescription(
        links=tuple(links),
        joints=tuple(joints),
        actuators=tuple(actuators),
        stance_foot=Attachment("l3", (-lengths[2], 0.0)),
    )
    _morphology_checks(desc)
    return desc


def _morphology_checks(desc: RobotDescription) -> None:
    om = build_oracle(desc)
    lo, hi = _limit_box(desc)
    rng = np.random.default_rng(0)
    from ._speedups import kernel

    for q in [0.5 * (lo + hi)] + [rng.uniform(lo, hi) for _ in range(6)]:
        _, _, l, dl = kernel.oracle_fk(om.pack, q)
        if np.min(l) < 0.03:
            raise CompileError("actuator nearly degenerate in workspace")
        if abs(np.linalg.det(dl.T)) < 5e-6 or np.linalg.cond(dl.T) > 1.5e2:
            raise CompileError("actuation Jacobian ill-conditioned")
        f, _ = balancing_force(om, q)
        if np.max(np.abs(f)) > 80.0:
            raise CompileError("balancing forces unreasonable")


def run_morphology_3dof(seed: int) -> EquivalenceReport:
    """Engine-vs-analytical comparison on a random 3-DOF chain.

    A three-pulse force sequence steps between the balancing forces of
    random interior poses.  Morphologies failing generation sanity checks
    are regenerated from spawned sub-seeds (the count is reported).
    """
    ss = np.random.SeedSequence(seed)
    regens = 0
    desc = om = em = pulses = None
    for child in ss.spawn(50):
        rng = np.random.default_rng(child)
        try:
            desc = random_chain_3dof(rng)
            om = build_oracle(desc)
            em = compile_engine(desc)
            lo, hi = _limit_box(desc)
            center = 0.5 * (lo + hi)
            span = 0.5 * (hi - lo)
            poses = [
                np.clip(center + rng.uniform(-0.25, 0.25, 3) * span, lo, hi)
                for _ in range(3)
            ]
            pulses = [balancing_force(om, p)[0] for p in poses]
            # pulses must stay in the force range the pressure valves cover
            if max(float(np.max(np.abs(f))) for f in pulses) > 60.0:
                raise CompileError("pulse forces outside actuator range")
            break
        except (CompileError, ValidationError):
            regens += 1
            desc = None
    if desc is None:
        raise CompileError("could not generate a valid morphology in 50 attempts")
    times = [0.0, 3.0, 6.0]
    values = np.asarray(pulses)

    q0 = center
    f0, _ = balancing_force(om, q0)
    state_o, _ = oracle_settle(om, q0, f0, SETTLE_CAP, SETTLE_TOL)
    q_start = state_o.q
    otraj, _, _ = integrate_forces(om, q_start, np.zeros(3), times, values, 9.0)
    x0, v0, pin = assemble_state(em, JointState(q_start, np.zeros(3)))
    etraj, *_ = simulate_forces(
        em, x0, v0, times, values, int(round(9.0 / em.cfg.dt)), pin_target=pin
    )
    err = etraj.q - otraj.q
    morph_hash = hashlib.sha256(serialize_description(desc).encode()).hexdigest()[:12]
    return EquivalenceReport(
        rmse=np.sqrt(np.mean(err**2, axis=0)),
        maxae=np.max(np.abs(err), axis=0),
        trials=1,
        valid=1,
        discarded=0,
        seed=seed,
        config={"suite": "morphology-3dof", "pulses_t_s": times, "duration_s": 9.0},
        extra={"morphology_hash": morph_hash, "regenerations": regens},
    )


# ---------------------------------------------------------------------------
# sensitivity and baseline
# ---------------------------------------------------------------------------


def standard_swing_pressures(desc: RobotDescription):
    """Pressure step of the standard swing test, from the unperturbed model."""
    om = build_oracle(desc)
    _, p_to = balancing_force(om, np.asarray(STD_SWING_TO))
    return np.asarray(STD_SWING_FROM), p_to


def _engine_swing_run(em: EngineModel, q_from, pressures) -> Trajectory:
    forces = pressures * em.areas
    x0, v0, pin = assemble_state(em, JointState(np.asarray(q_from), np.zeros(em.nj)))
    n_steps = int(round(TRIAL_DURATION / em.cfg.dt))
    traj, *_ = simulate_forces(em, x0, v0, [0.0], [forces], n_steps, pin_target=pin)
    return traj


def _perturb(desc: RobotDescription, param: str, factor: float) -> RobotDescription:
    def act(a: ElasticActuatorSpec) -> ElasticActuatorSpec:
        if param == "m":
            return replace(a, m=a.m * factor)
        if param == "k":
            return replace(a, k=a.k * factor)
        if param == "l0":
            return replace(a, l0=a.l0 * factor)
        if param == "c":
            return replace(a, c=a.c * factor)
        if param == "S":
            return replace(a, area=a.area * factor)
        raise ValidationError(f"unknown parameter {param!r}")

    return replace(desc, actuators=tuple(act(a) for a in desc.actuators))


def run_sensitivity(
    levels: tuple = (1, 5, 10),
    desc: RobotDescription | None = None,
) -> SensitivityReport:
    """Joint-angle RMSE shift when actuator parameters are perturbed.

    The unperturbed engine's standard swing response is the reference; each
    parameter in {m, k, l0, c, S} is scaled on both actuators by +/- the
    given percentages and the run repeated under identical pressure
    commands.
    """
    desc = desc or default_leg()
    q_from, p_to = standard_swing_pressures(desc)
    ref = _engine_swing_run(compile_engine(desc), q_from, p_to)
    out: dict = {}
    for param in ("m", "k", "l0", "c", "S"):
        out[param] = {}
        for level in levels:
            for sign in (+1, -1):
                factor = 1.0 + sign * level / 100.0
                em = compile_engine(_perturb(desc, param, factor))
                traj = _engine_swing_run(em, q_from, p_to)
                delta = float(np.sqrt(np.mean((traj.q - ref.q) ** 2)))
                out[param][f"{'+' if sign > 0 else '-'}{level}"] = delta
    return SensitivityReport(
        levels_pct=tuple(levels),
        delta_rmse=out,
        config={
            "suite": "sensitivity",
            "swing_from": list(STD_SWING_FROM),
            "swing_to": list(STD_SWING_TO),
            "duration_s": TRIAL_DURATION,
        },
    )


def run_baseline_compare(desc: RobotDescription | None = None) -> dict:
    """Standard swing RMSE of both engine modes against the analytical model."""
    desc = desc or default_leg()
    om = build_oracle(desc)
    q_from, p_to = standard_swing_pressures(desc)
    f_to = p_to * np.array([a.area for a in desc.actuators])
    otraj, _, _ = integrate_forces(
        om, np.asarray(q_from), np.zeros(om.dof), [0.0], [f_to], TRIAL_DURATION
    )
    out = {"config": {"suite": "baseline", "swing_from": list(STD_SWING_FROM),
                      "swing_to": list(STD_SWING_TO)},
           "code_version": code_version()}
    rmse = {}
    for mode in (BaselineMode.LUMPED, BaselineMode.NAIVE):
        em = compile_engine(desc, mode)
        traj = _engine_swing_run(em, q_from, p_to)
        rmse[mode.value] = float(np.sqrt(np.mean((traj.q - otraj.q) ** 2)))
    out["rmse_rad"] = rmse
    out["ratio_naive_over_lumped"] = rmse["naive"] / rmse["lumped"]
    return out
