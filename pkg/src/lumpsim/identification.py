"""Parameter identification from equilibrium and trajectory data.

Static identification exploits that the equilibrium equations are linear in
stiffness and pressure area (and, via k*l0, in rest length), so a least
squares fit recovers them from (pose, pressure) samples.  Dynamic
calibration fits the full vector [k_i, s_i, l0_i, c_i, joint dampings] by
differential evolution against recorded joint trajectories, scoring each
candidate with the mean squared angle error plus a weighted mean squared
error of the joint-rate signs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _speedups
from .engine import BaselineMode, EngineModel, assemble_state, compile_engine, simulate_forces
from .errors import GridMismatch, RankDeficient, TooFewSamples, ValidationError
from .model import JointState, PressureSchedule, RobotDescription, Trajectory
from .oracle import build_oracle

SIGN_DEADBAND = 1e-4     # rad/s; slower joint rates count as sign 0
DE_F = 0.8               # mutation factor (rand/1 strategy)
DE_CR = 0.9              # binomial crossover rate
DE_STALL_WINDOW = 200    # generations without improvement before stopping
DE_STALL_EPS = 1e-10
PENALTY = 1e9            # objective value for candidates whose run fails


@dataclass(frozen=True)
class StaticSample:
    """Equilibrium pose and the pressures holding it."""

    q: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, float))
        object.__setattr__(self, "P", np.asarray(self.P, float))


@dataclass(frozen=True)
class IdentConfig:
    lam: float = 100.0
    population: int = 25
    max_iter: int = 10_000
    bounds: tuple = ()          # sequence of (lo, hi) per parameter
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be nonnegative")
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValidationError("bounds must satisfy lo < hi")


@dataclass(frozen=True)
class ParamVector:
    """Calibratable parameters: per-actuator k, s, l0, c plus joint damping."""

    k: np.ndarray
    s: np.ndarray
    l0: np.ndarray
    c: np.ndarray
    joint_damping: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.k, self.s, self.l0, self.c, self.joint_damping])

    @staticmethod
    def from_array(x, nact: int, njoint: int) -> "ParamVector":
        x = np.asarray(x, float)
        if x.size != 4 * nact + njoint:
            raise ValidationError(f"expected {4 * nact + njoint} parameters, got {x.size}")
        return ParamVector(
            k=x[:nact].copy(),
            s=x[nact : 2 * nact].copy(),
            l0=x[2 * nact : 3 * nact].copy(),
            c=x[3 * nact : 4 * nact].copy(),
            joint_damping=x[4 * nact :].copy(),
        )

    @staticmethod
    def from_description(desc: RobotDescription) -> "ParamVector":
        return ParamVector(
            k=np.array([a.k for a in desc.actuators]),
            s=np.array([a.area for a in desc.actuators]),
            l0=np.array([a.l0 for a in desc.actuators]),
            c=np.array([a.c for a in desc.actuators]),
            joint_damping=np.array([j.damping for j in desc.joints]),
        )

    def apply(self, desc: RobotDescription) -> RobotDescription:
        acts = tuple(
            replace(a, k=self.k[i], area=self.s[i], l0=self.l0[i], c=self.c[i])
            for i, a in enumerate(desc.actuators)
        )
        joints = tuple(
            replace(j, damping=self.joint_damping[i]) for i, j in enumerate(desc.joints)
        )
        return replace(desc, actuators=acts, joints=joints)


def _gravity_gradient(model, q):
    """Potential gradient with the elastic contribution removed."""
    grad, dl = _speedups.kernel.oracle_statics(model.pack, q)
    _, _, l, _ = _speedups.kernel.oracle_fk(model.pack, q)
    for i in range(model.nact):
        _, k, _, l0 = model.pack.act_par[i]
        grad = grad - k * (l[i] - l0) * dl[i]
    return grad, dl, l


def static_regress(
    samples: list[StaticSample],
    desc: RobotDescription,
    fit_rest_lengths: bool = False,
):
    """Least-squares fit of stiffness and pressure area from equilibria.

    The equilibrium conditions  sum_i s_i P_i dl_i/dq = G(q) + sum_i
    k_i (l_i - l0_i) dl_i/dq  are linear in (k_i, s_i); with
    `fit_rest_lengths` the products kappa_i = k_i * l0_i join the unknowns
    and rest lengths are recovered as kappa_i / k_i.

    Returns a dict with keys k, s (and l0 when fitted) plus
    `pressure_rmse`: per-actuator RMSE of the pressures reproduced from the
    fit at the sample poses, in Pa.
    """
    model = build_oracle(desc)
    na, nj = model.nact, model.dof
    n_unknowns = (3 if fit_rest_lengths else 2) * na
    if len(samples) * nj < n_unknowns:
        raise TooFewSamples(
            f"{len(samples)} samples provide {len(samples) * nj} equations "
            f"for {n_unknowns} unknowns"
        )
    rows = []
    rhs = []
    geom = []
    for sample in samples:
        grad_g, dl, l = _gravity_gradient(model, sample.q)
        geom.append((grad_g, dl, l))
        for j in range(nj):
            row = np.zeros(n_unknowns)
            for i in range(na):
                if fit_rest_lengths:
                    row[i] = -l[i] * dl[i, j]                  # k_i
                    row[2 * na + i] = dl[i, j]                 # kappa_i
                else:
                    row[i] = -(l[i] - desc.actuators[i].l0) * dl[i, j]
                row[na + i] = sample.P[i] * dl[i, j]           # s_i
            rows.append(row)
            rhs.append(grad_g[j])
    a = np.asarray(rows)
    b = np.asarray(rhs)
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < n_unknowns:
        raise RankDeficient(f"design matrix rank {rank} < {n_unknowns}")
    k = sol[:na]
    s = sol[na : 2 * na]
    out = {"k": k, "s": s}
    l0 = np.array([act.l0 for act in desc.actuators])
    if fit_rest_lengths:
        l0 = sol[2 * na :] / k
        out["l0"] = l0

    # reproduce the sample pressures from the fit (residual in Pa)
    sq_err = np.zeros(na)
    for sample, (grad_g, dl, l) in zip(samples, geom):
        target = grad_g + (k * (l - l0)) @ dl
        f_hat = np.linalg.lstsq(dl.T, target, rcond=None)[0]
        p_hat = f_hat / s
        sq_err += (p_hat - sample.P) ** 2
    out["pressure_rmse"] = np.sqrt(sq_err / len(samples))
    return out


def _sign(x):
    s = np.sign(x)
    s[np.abs(x) < SIGN_DEADBAND] = 0.0
    return s


def traj_error(tau: Trajectory, tau_hat: Trajectory, lam: float) -> float:
    """Mean squared angle error plus lam times the joint-rate sign error.

    Trajectories on different grids are linearly interpolated onto the
    reference grid of `tau`.
    """
    if tau_hat.t[0] > tau.t[0] + 1e-12 or tau_hat.t[-1] < tau.t[-1] - 1e-12:
        raise GridMismatch(
            f"candidate range [{tau_hat.t[0]}, {tau_hat.t[-1]}] does not cover "
            f"[{tau.t[0]}, {tau.t[-1]}]"
        )
    if tau_hat.t.shape == tau.t.shape and np.allclose(tau_hat.t, tau.t, atol=1e-12):
        q_hat, qd_hat = tau_hat.q, tau_hat.qd
    else:
        resampled = tau_hat.resample(tau.t)
        q_hat, qd_hat = resampled.q, resampled.qd
    mse_q = float(np.mean((tau.q - q_hat) ** 2))
    mse_sgn = float(np.mean((_sign(tau.qd) - _sign(qd_hat)) ** 2))
    return mse_q + lam * mse_sgn


def differential_evolution(objective, bounds, cfg: IdentConfig, seed_points=None):
    """DE/rand/1/bin global minimization over a box.

    Population cfg.population, mutation factor 0.8, crossover 0.9; stops at
    cfg.max_iter generations or when the best value improves by less than
    1e-10 over 200 consecutive generations.  Deterministic for a fixed
    cfg.seed.  Returns (best x, best value, per-generation best history).
    """
    bounds = np.asarray(bounds, float)
    ndim = bounds.shape[0]
    lo, hi = bounds[:, 0], bounds[:, 1]
    rng = np.random.default_rng(cfg.seed)
    npop = cfg.population
    pop = lo + rng.random((npop, ndim)) * (hi - lo)
    if seed_points is not None:
        for i, pt in enumerate(np.atleast_2d(np.asarray(seed_points, float))[: npop]):
            pop[i] = np.clip(pt, lo, hi)

    def evaluate(members):
        if cfg.workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                return np.array(list(pool.map(objective, members)))
        return np.array([objective(m) for m in members])

    cost = evaluate(pop)
    best_idx = int(np.argmin(cost))
    history = [float(cost[best_idx])]
    stall_ref = history[0]
    stall_count = 0

    for _ in range(cfg.max_iter):
        trials = np.empty_like(pop)
        for i in range(npop):
            choices = rng.choice(npop - 1, size=3, replace=False)
            choices[choices >= i] += 1
            r1, r2, r3 = pop[choices]
            mutant = np.clip(r1 + DE_F * (r2 - r3), lo, hi)
            cross = rng.random(ndim) < DE_CR
            cross[rng.integers(ndim)] = True
            trials[i] = np.where(cross, mutant, pop[i])
        trial_cost = evaluate(trials)
        better = trial_cost <= cost
        pop[better] = trials[better]
        cost[better] = trial_cost[better]
        best_idx = int(np.argmin(cost))
        history.append(float(cost[best_idx]))
        if stall_ref - history[-1] < DE_STALL_EPS:
            stall_count += 1
            if stall_count >= DE_STALL_WINDOW:
                break
        else:
            stall_ref = history[-1]
            stall_count = 0
    return pop[best_idx].copy(), float(cost[best_idx]), history


class _FastEngineEval:
    """Re-simulate a fixed trial set under candidate parameters.

    The extended-coordinate layout and the assembled initial states depend
    only on geometry, so candidates reuse them; only spring constants,
    dampers, rest lengths, joint damping and pressure areas are swapped.
    """

    def __init__(self, desc: RobotDescription, dataset, lam: float):
        self.desc = desc
        self.lam = lam
        self.model = compile_engine(desc, BaselineMode.LUMPED)
        self.na = self.model.nact
        self.nj = self.model.nj
        self.items = []
        for schedule, traj in dataset:
            q0 = traj.q[0]
            qd0 = traj.qd[0]
            x0, v0, pin = assemble_state(self.model, JointState(q0, qd0))
            n_steps = int(round((traj.t[-1] - traj.t[0]) / self.model.cfg.dt))
            self.items.append((schedule, traj, x0, v0, pin, n_steps))

    def _patched(self, p: ParamVector) -> EngineModel:
        pack = self.model.pack
        spring_k = pack.spring_k.copy()
        spring_c = pack.spring_c.copy()
        spring_ref = pack.spring_ref.copy()
        joint_damp = pack.joint_damp.copy()
        for s in range(spring_k.shape[0]):
            a = pack.spring_act[s]
            spring_k[s] = 2.0 * p.k[a]
            spring_c[s] = 2.0 * p.c[a]
            spring_ref[s] = 0.5 * p.l0[a]
        joint_damp[: self.nj] = p.joint_damping
        pack = replace(pack, spring_k=spring_k, spring_c=spring_c,
                       spring_ref=spring_ref, joint_damp=joint_damp)
        return replace(self.model, pack=pack, areas=p.s.copy())

    def __call__(self, x: np.ndarray) -> float:
        p = ParamVector.from_array(x, self.na, self.nj)
        model = self._patched(p)
        total = 0.0
        for schedule, traj, x0, v0, pin, n_steps in self.items:
            forces = schedule.forces(model.areas)
            try:
                sim, *_ = simulate_forces(
                    model, x0, v0, forces.times, forces.values, n_steps, pin_target=pin
                )
            except Exception:
                return PENALTY
            total += traj_error(traj, sim, self.lam)
        return total

    def per_trajectory_rmse(self, x: np.ndarray):
        p = ParamVector.from_array(x, self.na, self.nj)
        model = self._patched(p)
        out = []
        for schedule, traj, x0, v0, pin, n_steps in self.items:
            forces = schedule.forces(model.areas)
            sim, *_ = simulate_forces(
                model, x0, v0, forces.times, forces.values, n_steps, pin_target=pin
            )
            resampled = sim.resample(traj.t)
            out.append(float(np.sqrt(np.mean((resampled.q - traj.q) ** 2))))
        return out


def save_dataset(dirpath, dataset, cfg: IdentConfig) -> None:
    """Write one trajectory CSV per item plus a JSON manifest."""
    import json
    from pathlib import Path

    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (schedule, traj) in enumerate(dataset):
        name = f"traj_{i:02d}.csv"
        traj.to_csv(d / name)
        steps = [
            {"t_s": float(t), "P_pa": [float(x) for x in row]}
            for t, row in zip(schedule.times, schedule.values)
        ]
        entries.append({"csv": name, "schedule": steps})
    manifest = {
        "lambda": cfg.lam,
        "bounds": [[float(lo), float(hi)] for lo, hi in cfg.bounds],
        "seed": cfg.seed,
        "trajectories": entries,
    }
    with open(d / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(dirpath):
    """Read a dataset directory; returns (dataset, IdentConfig)."""
    import json
    from pathlib import Path

    d = Path(dirpath)
    with open(d / "manifest.json") as fh:
        manifest = json.load(fh)
    dataset = []
    for entry in manifest["trajectories"]:
        traj = Trajectory.from_csv(d / entry["csv"])
        times = [step["t_s"] for step in entry["schedule"]]
        values = [step["P_pa"] for step in entry["schedule"]]
        dataset.append((PressureSchedule(np.array(times), np.array(values)), traj))
    cfg = IdentConfig(
        lam=manifest.get("lambda", 100.0),
        bounds=tuple((lo, hi) for lo, hi in manifest.get("bounds", [])),
        seed=manifest.get("seed", 0),
    )
    return dataset, cfg


def identify_dynamic(
    dataset: list[tuple[PressureSchedule, Trajectory]],
    desc: RobotDescription,
    cfg: IdentConfig,
    seed_points=None,
):
    """Fit the full parameter vector by DE against recorded trajectories.

    dataset pairs each trajectory with the pressure schedule that produced
    it.  Returns (ParamVector, report dict).
    """
    if not dataset:
        raise ValidationError("dataset is empty")
    nact = len(desc.actuators)
    njoint = len(desc.joints)
    ndim = 4 * nact + njoint
    if len(cfg.bounds) != ndim:
        raise ValidationError(f"need {ndim} bounds, got {len(cfg.bounds)}")
    evaluator = _FastEngineEval(desc, dataset, cfg.lam)
    t0 = time.perf_counter()
    best_x, best_e, history = differential_evolution(
        evaluator, cfg.bounds, cfg, seed_points=seed_points
    )
    wall = time.perf_counter() - t0
    params = ParamVector.from_array(best_x, nact, njoint)
    report = {
        "best_objective": best_e,
        "generations": len(history) - 1,
        "wall_s": wall,
        "per_trajectory_rmse_rad": evaluator.per_trajectory_rmse(best_x),
    }
    return params, report
