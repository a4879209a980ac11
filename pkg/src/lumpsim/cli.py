"""Command-line driver for simulation, verification and identification runs.

Sign convention, documented once and used everywhere: a positive actuator
force (and hence positive pressure) is extensile -- it pushes the attachment
points apart and does positive work on elongation; damping opposes the
elongation rate.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._speedups import BACKEND
from .engine import BaselineMode, compile_engine, simulate as engine_simulate
from .engine import settle as engine_settle
from .errors import (
    DriftExceeded,
    GeometryError,
    LumpsimError,
    Mismatch,
    NonFinite,
    SingularActuation,
    SingularMass,
    SolverSingular,
    StepFailure,
)
from .harness import (
    run_baseline_compare,
    run_dynamic_swing,
    run_morphology_3dof,
    run_sensitivity,
    run_static_sweep,
    run_stance_impulse,
    write_report,
)
from .identification import (
    IdentConfig,
    ParamVector,
    StaticSample,
    identify_dynamic,
    load_dataset,
    static_regress,
)
from .mjcf import emit_mjcf, golden_diff
from .model import (
    JointState,
    PressureSchedule,
    RobotDescription,
    default_leg,
    parse_description,
    parse_schedule,
)
from .oracle import build_oracle, integrate as oracle_integrate

_NUMERICAL_ERRORS = (
    StepFailure,
    NonFinite,
    SingularMass,
    SolverSingular,
    DriftExceeded,
    SingularActuation,
    GeometryError,
)

_EPILOG = (
    "sign convention: positive pressure/force is extensile (pushes the "
    "attachment points apart); damping opposes the elongation rate."
)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _load_model(args) -> RobotDescription:
    if args.model is None:
        return default_leg()
    path = Path(args.model)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return parse_description(path.read_text())


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit_report(report, args, name: str) -> Path:
    out = _out_dir(args)
    if args.format == "json":
        path = out / f"{name}.json"
        write_report(report, path)
    else:
        path = out / f"{name}.csv"
        data = report.to_dict()
        with open(path, "w", newline="\n") as fh:
            fh.write("metric,joint,value\n")
            for j, v in enumerate(data["rmse_rad"]):
                fh.write(f"rmse_rad,{j + 1},{v:.17g}\n")
            for j, v in enumerate(data["maxae_rad"]):
                fh.write(f"maxae_rad,{j + 1},{v:.17g}\n")
            for key in ("trials", "valid", "discarded", "seed"):
                fh.write(f"{key},,{data[key]}\n")
    print(f"wrote {path}")
    return path


def _cmd_simulate(args) -> int:
    desc = _load_model(args)
    if args.schedule:
        schedule = parse_schedule(Path(args.schedule).read_text())
    else:
        schedule = PressureSchedule.constant(np.zeros(len(desc.actuators)))
    out = _out_dir(args)
    if args.backend == "oracle":
        model = build_oracle(desc)
        from .oracle import settle as oracle_settle

        f0 = schedule.values[0] * model.areas
        q_mid = 0.5 * (model.limits_lo + model.limits_hi)
        state, _ = oracle_settle(model, q_mid, f0)
        traj = oracle_integrate(model, JointState(state.q, np.zeros(model.dof)),
                                schedule, args.t_end)
        traj.to_csv(out / "trajectory.csv")
        print(f"wrote {out / 'trajectory.csv'}")
    else:
        mode = BaselineMode(args.mode)
        model = compile_engine(desc, mode)
        f0 = schedule.values[0] * model.areas
        lo = np.array([j.limits[0] for j in desc.joints])
        hi = np.array([j.limits[1] for j in desc.joints])
        state, _, _ = engine_settle(model, 0.5 * (lo + hi), f0)
        traj, info = engine_simulate(
            model, JointState(state.q, np.zeros(model.nj)), schedule, args.t_end
        )
        traj.to_csv(out / "trajectory.csv")
        with open(out / "run.json", "w", newline="\n") as fh:
            json.dump(info, fh, sort_keys=True, indent=2)
            fh.write("\n")
        print(f"wrote {out / 'trajectory.csv'} and {out / 'run.json'}")
    return 0


def _cmd_equivalize(args) -> int:
    from .equivalence import equivalize

    desc = _load_model(args)
    out = {}
    for act in desc.actuators:
        asm = equivalize(act)
        out[act.id] = {
            "masses_kg": list(asm.masses),
            "segment_stiffness_n_per_m": asm.k_seg,
            "segment_damping_ns_per_m": asm.c_seg,
            "segment_rest_length_m": asm.l_seg0,
            "shared_force": asm.shared_force,
            "equal_elongation": asm.equal_elongation,
        }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _cmd_verify_static(args) -> int:
    report = run_static_sweep(args.trials, _seed(args), _load_model(args))
    _emit_report(report, args, "report_static")
    return 0


def _cmd_verify_dynamic(args) -> int:
    report = run_dynamic_swing(args.trials, _seed(args), _load_model(args))
    _emit_report(report, args, "report_dynamic_swing")
    return 0


def _cmd_verify_stance(args) -> int:
    report = run_stance_impulse(_load_model(args))
    _emit_report(report, args, "report_stance")
    return 0


def _cmd_verify_3dof(args) -> int:
    out = _out_dir(args)
    reports = []
    for i in range(args.count):
        report = run_morphology_3dof(_seed(args) + i)
        reports.append(report.to_dict())
    path = out / "report_3dof.json"
    with open(path, "w", newline="\n") as fh:
        json.dump({"runs": reports}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {path}")
    return 0


def _cmd_sensitivity(args) -> int:
    levels = tuple(int(x) for x in args.levels.split(","))
    report = run_sensitivity(levels, _load_model(args))
    out = _out_dir(args)
    write_report(report, out / "report_sensitivity.json")
    print(f"wrote {out / 'report_sensitivity.json'}")
    return 0


def _cmd_baseline(args) -> int:
    report = run_baseline_compare(_load_model(args))
    out = _out_dir(args)
    with open(out / "report_baseline.json", "w", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {out / 'report_baseline.json'}")
    return 0


def _cmd_identify_static(args) -> int:
    desc = _load_model(args)
    data = np.loadtxt(args.samples, delimiter=",", skiprows=1, ndmin=2)
    nj = len(desc.joints)
    samples = [StaticSample(row[:nj], row[nj:]) for row in data]
    fit = static_regress(samples, desc, fit_rest_lengths=args.fit_rest_lengths)
    result = {k: (list(v) if isinstance(v, np.ndarray) else v) for k, v in fit.items()}
    out = _out_dir(args)
    with open(out / "ident_static.json", "w", newline="\n") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {out / 'ident_static.json'}")
    return 0


def _default_bounds(desc: RobotDescription):
    p = ParamVector.from_description(desc).to_array()
    return tuple((0.5 * v, 2.0 * v) if v > 0 else (1e-4, 1.0) for v in p)


def _cmd_identify_dynamic(args) -> int:
    desc = _load_model(args)
    dataset, cfg = load_dataset(args.dataset)
    bounds = cfg.bounds if cfg.bounds else _default_bounds(desc)
    cfg = IdentConfig(
        lam=cfg.lam,
        bounds=bounds,
        seed=args.seed if args.seed is not None else cfg.seed,
        max_iter=args.generations,
    )
    params, info = identify_dynamic(dataset, desc, cfg)
    result = {
        "params": {
            "k_n_per_m": list(params.k),
            "area_m2": list(params.s),
            "rest_length_m": list(params.l0),
            "damping_ns_per_m": list(params.c),
            "joint_damping_nms_per_rad": list(params.joint_damping),
        },
        "per_trajectory_rmse_rad": info["per_trajectory_rmse_rad"],
        "generations": info["generations"],
        "wall_s": info["wall_s"],
        "best_objective": info["best_objective"],
    }
    out = _out_dir(args)
    with open(out / "ident_dynamic.json", "w", newline="\n") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {out / 'ident_dynamic.json'}")
    return 0


def _cmd_export_mjcf(args) -> int:
    desc = _load_model(args)
    doc = emit_mjcf(desc)
    out_path = Path(args.out_file)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(doc.text)
    print(f"wrote {out_path}")
    if args.check_golden:
        diff = golden_diff(doc, Path(args.check_golden).read_text())
        if diff is not None:
            raise Mismatch(f"golden mismatch:\n{diff}")
        print("golden check passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lumpsim",
        description="planar musculoskeletal dynamics with lumped elastic actuators",
        epilog=_EPILOG,
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__} (kernel: {BACKEND})")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, trials=None):
        p.add_argument("--model", help="robot description TOML (default: bundled leg)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="json")
        if trials:
            p.add_argument("--trials", type=int, default=trials)

    p = sub.add_parser("simulate", help="run one backend under a pressure schedule")
    common(p)
    p.add_argument("--backend", choices=("oracle", "engine"), default="engine")
    p.add_argument("--mode", choices=("lumped", "naive"), default="lumped")
    p.add_argument("--schedule", help="pressure schedule JSON")
    p.add_argument("--t-end", type=float, default=10.0)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("equivalize", help="print the 3-2-1 assembly per actuator")
    common(p)
    p.set_defaults(func=_cmd_equivalize)

    p = sub.add_parser("verify-static", help="static equivalence sweep")
    common(p, trials=10_000)
    p.set_defaults(func=_cmd_verify_static)

    p = sub.add_parser("verify-dynamic", help="swing step-response sweep")
    common(p, trials=2_500)
    p.set_defaults(func=_cmd_verify_dynamic)

    p = sub.add_parser("verify-stance", help="stance impulse comparison")
    common(p)
    p.set_defaults(func=_cmd_verify_stance)

    p = sub.add_parser("verify-3dof", help="randomized 3-DOF morphology comparison")
    common(p)
    p.add_argument("--count", type=int, default=1, help="consecutive seeds to run")
    p.set_defaults(func=_cmd_verify_3dof)

    p = sub.add_parser("sensitivity", help="actuator-parameter sensitivity sweep")
    common(p)
    p.add_argument("--levels", default="1,5,10", help="perturbation percentages")
    p.set_defaults(func=_cmd_sensitivity)

    p = sub.add_parser("baseline", help="lumped vs naive baseline comparison")
    common(p)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("identify-static", help="linear regression on equilibria")
    common(p)
    p.add_argument("--samples", required=True, help="CSV of q1..qn,P1..Pm rows")
    p.add_argument("--fit-rest-lengths", action="store_true")
    p.set_defaults(func=_cmd_identify_static)

    p = sub.add_parser("identify-dynamic", help="differential-evolution calibration")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory with manifest.json")
    p.add_argument("--generations", type=int, default=10_000)
    p.set_defaults(func=_cmd_identify_dynamic)

    p = sub.add_parser("export-mjcf", help="emit MuJoCo-compatible XML")
    common(p)
    p.add_argument("--out-file", required=True, help="output .xml path")
    p.add_argument("--check-golden", help="golden file to compare against")
    p.set_defaults(func=_cmd_export_mjcf)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (LumpsimError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
