"""Command-line front-end: gen, solve, bench, verify, report.

Exit codes: 0 success, 1 solve failure, 2 usage error (bad flags, missing or
malformed files, invalid tolerances).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .algorithms import CSV_HEADER, AlgoConfig, run_direct, run_relaxation
from .analysis import (
    AnalysisError,
    brute_force_bilevel,
    check_mfcq,
    check_weak_duality,
    map_kkt,
    validate_mfcq_direction,
)
from .model import ModelError
from .nlp import project_upper, solve_convex_lower, solve_nlp
from .reformulate import (
    DualKind,
    ReformulationError,
    ReformulationKind,
    build,
    parse_kind_spec,
)
from .serialize import dump_instance, load_instance, load_point

USAGE_ERROR = 2
SOLVE_ERROR = 1


class UsageError(Exception):
    pass


def _parse_dims(text: str) -> dict:
    parts = text.split(",")
    if len(parts) != 5:
        raise UsageError("--dims expects five integers: n,l,m,p,q")
    try:
        n, l, m, p, q = (int(s) for s in parts)
    except ValueError:
        raise UsageError(f"bad --dims value {text!r}") from None
    return dict(n=n, l=l, m=m, p=p, q=q)


def _load_instance_or_die(path: str):
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    try:
        return load_instance(path)
    except (ModelError, ValueError, KeyError) as exc:
        raise UsageError(f"malformed instance document {path}: {exc}") from None


def _config_from_args(args) -> AlgoConfig:
    kwargs = {}
    for flag, field in (
        ("t0", "t0"),
        ("sigma", "sigma"),
        ("eps_r", "eps_r"),
        ("eps_inf", "eps_inf"),
        ("eps_sqp", "eps_sqp"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            if val <= 0 and field != "sigma":
                raise UsageError(f"--{flag.replace('_', '-')} must be positive")
            kwargs[field] = val
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    try:
        return AlgoConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _cmd_gen(args) -> int:
    dims = _parse_dims(args.dims)
    try:
        spec = bench_mod.InstanceSpec(group=args.group, seed=args.seed, **dims)
        problem, info = bench_mod.generate_with_info(spec)
    except (ValueError, bench_mod.GenerationError) as exc:
        raise UsageError(str(exc)) from None
    dump_instance(problem, args.out, meta={"group": args.group, "seed": info.seed_used})
    print(f"wrote {args.out} ({spec.label}, reseeded={info.reseeded})")
    return 0


def _cmd_solve(args) -> int:
    problem, _ = _load_instance_or_die(args.infile)
    try:
        kind, t = parse_kind_spec(args.kind)
    except ReformulationError as exc:
        raise UsageError(str(exc)) from None
    config = _config_from_args(args)
    if args.algo == "direct":
        if t is not None:
            raise UsageError("the direct algorithm solves the unrelaxed kind; drop @t")
        record = run_direct(problem, kind, config, instance=Path(args.infile).stem)
    else:
        if t is not None:
            config = replace(config, t0=t)
        record = run_relaxation(problem, kind, config, instance=Path(args.infile).stem)
    lines = [CSV_HEADER, record.to_csv_row()]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0 if record.accepted else SOLVE_ERROR


def _cmd_bench(args) -> int:
    groups = [g.strip() for g in args.groups.split(",") if g.strip()]
    for g in groups:
        if g not in ("I", "II", "III"):
            raise UsageError(f"unknown group {g!r}")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    specs = []
    for g in groups:
        if args.paper_dims:
            specs.extend(bench_mod.paper_specs(g, args.count, seed=args.seed))
        else:
            specs.extend(bench_mod.desk_specs(g, args.count, seed=args.seed))
    kinds = list(ReformulationKind)
    algos = ["direct", "relaxation"]
    config = _config_from_args(args)
    workers = args.workers
    if workers is None:
        workers = int(os.environ.get("BILEVELLAB_WORKERS", "1"))

    if args.save_instances:
        inst_dir = outdir / "instances"
        inst_dir.mkdir(exist_ok=True)
        for spec in specs:
            problem, info = bench_mod.generate_with_info(spec)
            dump_instance(
                problem,
                inst_dir / f"{spec.label}.bp",
                meta={"group": spec.group, "seed": info.seed_used},
            )

    def progress(rec):
        print(rec.to_csv_row(), flush=True)

    records = bench_mod.run_suite(
        specs,
        kinds,
        algos,
        config,
        workers=workers,
        timing_repeats=args.timing_repeats,
        progress=progress if args.verbose else None,
    )
    bench_mod.records_to_csv(records, outdir / "records.csv")
    table = bench_mod.aggregate(records)
    (outdir / "dominance.csv").write_text(table.to_csv(), encoding="utf-8")
    (outdir / "pairwise.csv").write_text(table.pairwise_csv(), encoding="utf-8")
    (outdir / "tables.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text())
    print(f"wrote {outdir}/records.csv and tables")
    return 0


def _cmd_verify(args) -> int:
    problem, _ = _load_instance_or_die(args.infile)
    failures = 0

    if args.duality:
        rng = np.random.default_rng(args.seed or 0)
        for trial in range(args.samples):
            x = project_upper(problem.upper, rng.uniform(-5, 5, size=problem.n))
            for kind in DualKind:
                rep = check_weak_duality(problem, x, kind, seed=trial)
                ok = rep.status == "ok" and rep.weak_ok and rep.strong_ok
                failures += 0 if ok else 1
                print(
                    f"duality {kind.value} x#{trial}: {'PASS' if ok else 'FAIL'} "
                    f"primal={rep.primal:.6g} dual={rep.dual_best:.6g} gap={rep.gap:.2e}"
                )
    elif args.mfcq:
        doc = load_point(args.mfcq)
        kind, t = parse_kind_spec(doc.get("kind", args.kind or "TWDP"))
        nlp = build(problem, kind, t)
        try:
            rep = check_mfcq(nlp, doc["point"])
        except AnalysisError as exc:
            raise UsageError(str(exc)) from None
        verdict = "MFCQ holds" if rep.holds else "MFCQ fails"
        print(f"{verdict} for {kind.value} (s*={rep.s_star:.6g}, "
              f"eq_rank_ok={rep.eq_rank_ok}, active={rep.active_rows})")
        if rep.direction is not None:
            print("certificate d =", np.array2string(rep.direction, precision=6))
        if "direction" in doc:
            ok, eq_slope, act_slope, _ = validate_mfcq_direction(nlp, doc["point"], doc["direction"])
            print(
                f"supplied direction: {'valid' if ok else 'invalid'} "
                f"(max |eq slope|={eq_slope:.2e}, max active slope={act_slope:.6g})"
            )
            failures += 0 if ok else 1
        failures += 0 if rep.holds else 1
    elif args.kkt_map:
        src_name, tgt_name = args.kkt_map
        try:
            src = ReformulationKind[src_name]
            tgt = ReformulationKind[tgt_name]
        except KeyError as exc:
            raise UsageError(f"unknown kind {exc}") from None
        x0 = project_upper(problem.upper, np.zeros(problem.n))
        lower = solve_convex_lower(problem, x0)
        if not lower.ok:
            print("FAIL: lower level unsolvable at the projected origin")
            return SOLVE_ERROR
        nlp = build(problem, src)
        parts = [x0, lower.y] + ([lower.y] if src is not ReformulationKind.MPCC else [])
        start = np.concatenate(parts + [lower.u, lower.v])
        sol = solve_nlp(nlp, start, tol=1e-8)
        print(f"source {src.value} solve: status={sol.status} kkt={sol.kkt_residual:.2e}")
        try:
            mapping = map_kkt(problem, sol.point, src, sol.multipliers, tgt)
        except AnalysisError as exc:
            print(f"map not applicable: {exc}")
            return SOLVE_ERROR
        ok = mapping.target_residual.total <= 1e-6
        failures += 0 if ok else 1
        print(
            f"map {src.value} -> {tgt.value}: {'PASS' if ok else 'FAIL'} "
            f"target residual={mapping.target_residual.total:.2e}"
        )
    elif args.oracle:
        try:
            res = brute_force_bilevel(problem, force=args.force)
        except AnalysisError as exc:
            raise UsageError(str(exc)) from None
        print(f"oracle status: {res.status}")
        if res.status == "optimal":
            print(f"F* = {res.value!r}")
            print("x* =", np.array2string(res.x, precision=8))
            print("y* =", np.array2string(res.y, precision=8))
        return 0 if res.status == "optimal" else SOLVE_ERROR
    else:
        raise UsageError("verify needs one of --duality, --mfcq, --kkt-map, --oracle")
    return 0 if failures == 0 else SOLVE_ERROR


def _cmd_report(args) -> int:
    indir = Path(args.indir)
    if not indir.is_dir():
        raise UsageError(f"no such directory: {indir}")
    csvs = sorted(indir.glob("records*.csv"))
    if not csvs:
        raise UsageError(f"no records*.csv files under {indir}")
    records = []
    for path in csvs:
        try:
            records.extend(bench_mod.read_records_csv(path))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"malformed records file {path}: {exc}") from None
    table = bench_mod.aggregate(records)
    wanted = [t.strip() for t in args.tables.split(",") if t.strip()]
    for name in wanted:
        if name == "dominance":
            out = indir / "dominance.csv"
            out.write_text(table.to_csv(), encoding="utf-8")
            print(table.to_csv())
        elif name == "pairwise":
            out = indir / "pairwise.csv"
            out.write_text(table.pairwise_csv(), encoding="utf-8")
            print(table.pairwise_csv())
        else:
            raise UsageError(f"unknown table {name!r} (expected dominance, pairwise)")
    print(table.to_text())
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bilevellab",
        description="Bilevel-program reformulation laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a random instance")
    p_gen.add_argument("--group", required=True, choices=["I", "II", "III"])
    p_gen.add_argument("--dims", required=True, help="n,l,m,p,q")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)

    p_solve = sub.add_parser("solve", help="solve one instance with one reformulation")
    p_solve.add_argument("--in", dest="infile", required=True)
    p_solve.add_argument("--kind", required=True, help="KIND or KIND@t")
    p_solve.add_argument("--algo", required=True, choices=["direct", "relax"])
    p_solve.add_argument("--t0", type=float)
    p_solve.add_argument("--sigma", type=float)
    p_solve.add_argument("--eps-r", dest="eps_r", type=float)
    p_solve.add_argument("--eps-inf", dest="eps_inf", type=float)
    p_solve.add_argument("--eps-sqp", dest="eps_sqp", type=float)
    p_solve.add_argument("--seed", type=int)
    p_solve.add_argument("--out")

    p_bench = sub.add_parser("bench", help="run the comparison suite")
    p_bench.add_argument("--groups", required=True, help="comma list of I,II,III")
    p_bench.add_argument("--count", type=int, default=10)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--paper-dims", action="store_true",
                         help="use the published dimensions instead of desk scale")
    p_bench.add_argument("--workers", type=int, default=None)
    p_bench.add_argument("--timing-repeats", type=int, default=3)
    p_bench.add_argument("--save-instances", action="store_true")
    p_bench.add_argument("--verbose", action="store_true")
    p_bench.add_argument("--t0", type=float)
    p_bench.add_argument("--sigma", type=float)
    p_bench.add_argument("--eps-r", dest="eps_r", type=float)
    p_bench.add_argument("--eps-inf", dest="eps_inf", type=float)
    p_bench.add_argument("--eps-sqp", dest="eps_sqp", type=float)
    p_bench.add_argument("--out", required=True)

    p_verify = sub.add_parser("verify", help="run verification instruments")
    p_verify.add_argument("--in", dest="infile", required=True)
    p_verify.add_argument("--duality", action="store_true")
    p_verify.add_argument("--mfcq", metavar="POINTFILE")
    p_verify.add_argument("--kkt-map", nargs=2, metavar=("SRC", "TGT"))
    p_verify.add_argument("--oracle", action="store_true")
    p_verify.add_argument("--force", action="store_true",
                          help="let --oracle enumerate beyond the pattern budget")
    p_verify.add_argument("--kind", help="reformulation for --mfcq when the point file has none")
    p_verify.add_argument("--samples", type=int, default=3)
    p_verify.add_argument("--seed", type=int, default=0)

    p_report = sub.add_parser("report", help="aggregate suite records")
    p_report.add_argument("--in", dest="indir", required=True)
    p_report.add_argument("--tables", default="dominance,pairwise")
    return parser


_COMMANDS = {
    "gen": _cmd_gen,
    "solve": _cmd_solve,
    "bench": _cmd_bench,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except ReformulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
