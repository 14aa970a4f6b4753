"""Random instance generation and the comparison protocol.

Groups: I has an all-affine lower level, II adds a convex quadratic lower
objective, III adds one convex quadratic lower inequality.  Coefficients are
sparse-uniform on [-1, 1] (each entry present with probability ``density``);
lower-level box bounds ``-bound <= y <= bound`` are folded into the
inequality list as 2m extra rows.

Draw order per instance (fixed so regeneration is bit-identical): A1, b1,
c1, c2, d2, A2, B2, b2, A3, B3, b3, then the quadratic pieces H (groups
II/III) and G, d4, b4 (group III).
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .algorithms import CSV_HEADER, AlgoConfig, RunRecord, run_direct, run_relaxation
from .model import (
    BilevelProblem,
    ConstraintBlock,
    ModelError,
    ScalarFunc,
    UpperSet,
)
from .reformulate import ReformulationKind

__all__ = [
    "GenerationError",
    "InstanceSpec",
    "GenInfo",
    "generate",
    "generate_with_info",
    "desk_specs",
    "paper_specs",
    "run_suite",
    "ComparisonTable",
    "aggregate",
    "records_to_csv",
    "read_records_csv",
    "DESK_DIMS",
    "PAPER_DIMS",
]

KINDS_ORDER = tuple(ReformulationKind)

# Scaled-down default dimensions; the published sizes sit behind paper_specs.
DESK_DIMS = {
    "I": dict(n=8, l=10, m=20, p=22, q=4),
    "II": dict(n=8, l=10, m=10, p=8, q=4),
    "III": dict(n=8, l=10, m=10, p=8, q=4),
}

PAPER_DIMS = {
    "I": (
        dict(n=20, l=25, m=100, p=110, q=20),
        dict(n=20, l=25, m=120, p=130, q=40),
        dict(n=20, l=25, m=140, p=150, q=60),
    ),
    "II": (
        dict(n=20, l=25, m=30, p=20, q=10),
        dict(n=20, l=25, m=50, p=40, q=20),
        dict(n=20, l=25, m=70, p=60, q=30),
    ),
    "III": (
        dict(n=20, l=25, m=30, p=20, q=10),
        dict(n=20, l=25, m=50, p=40, q=20),
        dict(n=20, l=25, m=70, p=60, q=30),
    ),
}


class GenerationError(ModelError):
    """Instance generation failed after the bounded reseeding retries."""


@dataclass(frozen=True)
class InstanceSpec:
    """Seeded recipe from which an instance is regenerated deterministically."""

    group: str
    n: int
    l: int
    m: int
    p: int
    q: int
    seed: int
    density: float = 0.5
    bound: float = 10.0

    def __post_init__(self):
        if self.group not in ("I", "II", "III"):
            raise ValueError(f"group must be I, II, or III, got {self.group!r}")
        for name in ("n", "l", "m", "p", "q"):
            if getattr(self, name) <= 0:
                raise ValueError(f"dimension {name} must be positive")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must lie in (0, 1]")

    @property
    def label(self) -> str:
        return f"{self.group}-n{self.n}l{self.l}m{self.m}p{self.p}q{self.q}-s{self.seed}"


@dataclass(frozen=True)
class GenInfo:
    reseeded: bool
    attempts: int
    seed_used: int


def _sprand(rng: np.random.Generator, shape, density: float) -> np.ndarray:
    vals = rng.uniform(-1.0, 1.0, size=shape)
    mask = rng.uniform(0.0, 1.0, size=shape) < density
    return vals * mask


def _psd(rng: np.random.Generator, m: int, density: float) -> np.ndarray:
    mat = _sprand(rng, (m, m), density)
    gram = mat.T @ mat
    norm = np.linalg.norm(gram, 2)
    return gram / norm if norm > 0 else gram


def _draw_problem(spec: InstanceSpec, seed: int) -> BilevelProblem:
    rng = np.random.default_rng(seed)
    n, l, m, p, q = spec.n, spec.l, spec.m, spec.p, spec.q
    dens = spec.density

    a1 = _sprand(rng, (l, n), dens)
    b1 = _sprand(rng, l, dens)
    c1 = _sprand(rng, n, dens)
    c2 = _sprand(rng, m, dens)
    d2 = _sprand(rng, m, dens)
    a2 = _sprand(rng, (p, n), dens)
    b2_mat = _sprand(rng, (p, m), dens)
    b2 = _sprand(rng, p, dens)
    a3 = _sprand(rng, (q, n), dens)
    b3_mat = _sprand(rng, (q, m), dens)
    b3 = _sprand(rng, q, dens)

    hess = _psd(rng, m, dens) if spec.group in ("II", "III") else None
    quad_ineq = None
    if spec.group == "III":
        gmat = _psd(rng, m, dens)
        d4 = _sprand(rng, m, dens)
        b4 = float(_sprand(rng, (), dens))
        quad_ineq = ScalarFunc(n, m, qyy=gmat, cy=d4, c0=-b4)

    upper_obj = ScalarFunc(n, m, cx=c1, cy=c2)
    lower_obj = ScalarFunc(n, m, qyy=hess, cy=d2)

    ineqs = [
        ScalarFunc(n, m, cx=a2[i], cy=b2_mat[i], c0=-b2[i]) for i in range(p)
    ]
    if quad_ineq is not None:
        ineqs.append(quad_ineq)
    eye = np.eye(m)
    for j in range(m):  # y_j <= bound
        ineqs.append(ScalarFunc(n, m, cy=eye[j], c0=-spec.bound))
    for j in range(m):  # -y_j <= bound
        ineqs.append(ScalarFunc(n, m, cy=-eye[j], c0=-spec.bound))
    eqs = [ScalarFunc(n, m, cx=a3[k], cy=b3_mat[k], c0=-b3[k]) for k in range(q)]

    upper = UpperSet(a1, b1)
    return BilevelProblem(
        n=n,
        m=m,
        upper_objective=upper_obj,
        lower_objective=lower_obj,
        lower=ConstraintBlock(ineqs, eqs),
        upper=upper,
        convex_lower=True,
    )


def generate_with_info(spec: InstanceSpec, *, max_reseeds: int = 10):
    """Generate an instance; reseed (seed + offset) when X is empty or the
    lower level is infeasible at the projected origin."""
    from .nlp import project_upper, solve_convex_lower

    last_error = None
    for attempt in range(max_reseeds + 1):
        seed = spec.seed + attempt * 1_000_003
        try:
            problem = _draw_problem(spec, seed)
        except ModelError as exc:
            last_error = exc
            continue
        x0 = project_upper(problem.upper, np.zeros(problem.n))
        lower = solve_convex_lower(problem, x0)
        if not lower.ok:
            last_error = ModelError("lower level infeasible at the projected origin")
            continue
        return problem, GenInfo(reseeded=attempt > 0, attempts=attempt + 1, seed_used=seed)
    raise GenerationError(
        f"could not generate a valid instance for {spec.label}: {last_error}"
    )


def generate(spec: InstanceSpec, *, max_reseeds: int = 10) -> BilevelProblem:
    problem, _ = generate_with_info(spec, max_reseeds=max_reseeds)
    return problem


def desk_specs(group: str, count: int, seed: int = 0) -> list[InstanceSpec]:
    dims = DESK_DIMS[group]
    return [InstanceSpec(group=group, seed=seed + i, **dims) for i in range(count)]


def paper_specs(group: str, count_per_subgroup: int = 50, seed: int = 0) -> list[InstanceSpec]:
    specs = []
    for sub, dims in enumerate(PAPER_DIMS[group]):
        specs.extend(
            InstanceSpec(group=group, seed=seed + sub * count_per_subgroup + i, **dims)
            for i in range(count_per_subgroup)
        )
    return specs


# ---------------------------------------------------------------------------
# Suite execution


def _run_one(spec: InstanceSpec, kind: ReformulationKind, algo: str,
             config: AlgoConfig, timing_repeats: int) -> RunRecord:
    problem = generate(spec)
    runner = run_direct if algo == "direct" else run_relaxation
    cfg = replace(config, seed=spec.seed)
    record = None
    times = []
    for _ in range(max(1, timing_repeats)):
        t0 = time.perf_counter()
        record = runner(problem, kind, cfg, instance=spec.label)
        times.append(time.perf_counter() - t0)
    record.wall_time = float(np.mean(times))
    return record


def _run_task(args) -> RunRecord:
    spec, kind_name, algo, config, timing_repeats = args
    kind = ReformulationKind[kind_name]
    try:
        return _run_one(spec, kind, algo, config, timing_repeats)
    except Exception:  # individual failures never abort the suite
        return RunRecord(
            instance=spec.label,
            kind=kind,
            algo=algo,
            x=np.zeros(spec.n),
            y=np.zeros(spec.m),
            z=np.zeros(spec.m),
            u=np.zeros(0),
            v=np.zeros(0),
            objective=float("nan"),
            infeasibility=float("inf"),
            projected=False,
            outer_iterations=0,
            wall_time=float("nan"),
            status="failed",
        )


def run_suite(
    specs,
    kinds,
    algos,
    config: AlgoConfig = AlgoConfig(),
    *,
    workers: int = 1,
    timing_repeats: int = 3,
    progress=None,
) -> list[RunRecord]:
    """Execute every (instance, kind, algorithm) cell; failures are recorded.

    Each solve is repeated ``timing_repeats`` times from scratch and the wall
    time averaged.  With ``workers > 1`` instances run in parallel; records
    come back in deterministic (instance, kind, algo) order either way.
    """
    tasks = [
        (spec, kind.name, algo, config, timing_repeats)
        for spec in specs
        for kind in kinds
        for algo in algos
    ]
    if workers <= 1:
        records = []
        for task in tasks:
            records.append(_run_task(task))
            if progress is not None:
                progress(records[-1])
        return records
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        records = list(pool.map(_run_task, tasks, chunksize=1))
    if progress is not None:
        for rec in records:
            progress(rec)
    return records


# ---------------------------------------------------------------------------
# Aggregation


@dataclass
class ComparisonTable:
    kinds: tuple[ReformulationKind, ...]
    algos: tuple[str, ...]
    counts: dict
    avg_times: dict
    pairwise: dict
    dominant_sets: dict
    missing: list

    def total(self, algo: str) -> int:
        return sum(self.counts.get((kind, algo), 0) for kind in self.kinds)

    def counts_vector(self, algo: str) -> tuple[int, ...]:
        return tuple(self.counts.get((kind, algo), 0) for kind in self.kinds)

    def to_text(self) -> str:
        out = io.StringIO()
        width = max(len(k.value) for k in self.kinds) + 2
        for algo in self.algos:
            out.write(f"[{algo}] dominant cases / average time (s)\n")
            for kind in self.kinds:
                cnt = self.counts.get((kind, algo), 0)
                avg = self.avg_times.get((kind, algo), float("nan"))
                out.write(f"  {kind.value:<{width}} {cnt:5d}   {avg:10.4f}\n")
            out.write(f"  {'total':<{width}} {self.total(algo):5d}\n")
        for algo in self.algos:
            out.write(f"[{algo}] pairwise dominant-case quotients A/B\n")
            for (ka, kb, _), (a, b, ratio) in sorted(
                ((pair, val) for pair, val in self.pairwise.items() if pair[2] == algo),
                key=lambda item: (item[0][0].value, item[0][1].value),
            ):
                shown = f"{ratio:.2f}" if ratio is not None else "n/a"
                out.write(f"  {ka.value}/{kb.value}: {a}/{b} = {shown}\n")
        return out.getvalue()

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["kind", "algo", "dominant_cases", "avg_time_s"])
        for algo in self.algos:
            for kind in self.kinds:
                writer.writerow(
                    [
                        kind.value,
                        algo,
                        self.counts.get((kind, algo), 0),
                        self.avg_times.get((kind, algo), float("nan")),
                    ]
                )
        return out.getvalue()

    def pairwise_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["kind_a", "kind_b", "algo", "dominant_a", "dominant_b", "ratio"])
        for (ka, kb, algo), (a, b, ratio) in sorted(
            self.pairwise.items(), key=lambda kv: (kv[0][2], kv[0][0].value, kv[0][1].value)
        ):
            writer.writerow([ka.value, kb.value, algo, a, b, "" if ratio is None else ratio])
        return out.getvalue()


def aggregate(
    records, *, kinds=KINDS_ORDER, tie_tol: float = 1e-6, tie_rel: float = 1e-6
) -> ComparisonTable:
    """Dominant-case accounting over a (possibly ragged) record set.

    A record is dominant for its (instance, algo) cell when it is accepted and
    its objective is within ``max(tie_tol, tie_rel * |best|)`` of the best
    accepted objective of that cell.  Keeping the absolute and relative parts
    separate makes the dominant set invariant under a joint positive rescaling
    of all objectives and ``tie_tol``.
    """
    algos = tuple(sorted({rec.algo for rec in records})) or ("direct", "relaxation")
    cells: dict = {}
    seen_kinds: dict = {}
    for rec in records:
        cells.setdefault((rec.instance, rec.algo), []).append(rec)
        seen_kinds.setdefault((rec.instance, rec.algo), set()).add(rec.kind)

    counts = {(kind, algo): 0 for kind in kinds for algo in algos}
    dominant_sets = {}
    times: dict = {}
    for rec in records:
        times.setdefault((rec.kind, rec.algo), []).append(rec.wall_time)

    missing = []
    instances = sorted({rec.instance for rec in records})
    for instance in instances:
        for algo in algos:
            cell = cells.get((instance, algo), [])
            if len(cell) < len(kinds):
                have = {rec.kind for rec in cell}
                missing.extend(
                    (instance, kind.value, algo) for kind in kinds if kind not in have
                )
            accepted = [rec for rec in cell if rec.accepted and np.isfinite(rec.objective)]
            if not accepted:
                dominant_sets[(instance, algo)] = set()
                continue
            best = min(rec.objective for rec in accepted)
            cutoff = best + max(tie_tol, tie_rel * abs(best))
            winners = {rec.kind for rec in accepted if rec.objective <= cutoff}
            dominant_sets[(instance, algo)] = winners
            for kind in winners:
                counts[(kind, algo)] += 1

    avg_times = {
        key: float(np.nanmean(vals)) if len(vals) else float("nan")
        for key, vals in times.items()
    }
    pairwise = {}
    for algo in algos:
        for ka in kinds:
            for kb in kinds:
                if ka is kb:
                    continue
                a = counts.get((ka, algo), 0)
                b = counts.get((kb, algo), 0)
                pairwise[(ka, kb, algo)] = (a, b, a / b if b > 0 else None)
    return ComparisonTable(
        kinds=tuple(kinds),
        algos=algos,
        counts=counts,
        avg_times=avg_times,
        pairwise=pairwise,
        dominant_sets=dominant_sets,
        missing=missing,
    )


# ---------------------------------------------------------------------------
# Record CSV I/O


def records_to_csv(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for rec in records:
            fh.write(rec.to_csv_row() + "\n")


def read_records_csv(path) -> list[RunRecord]:
    """Read suite records back; point vectors are not stored in the CSV."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            empty = np.zeros(0)
            records.append(
                RunRecord(
                    instance=row["instance"],
                    kind=ReformulationKind[row["kind"]],
                    algo=row["algo"],
                    x=empty,
                    y=empty,
                    z=empty,
                    u=empty,
                    v=empty,
                    objective=float(row["objval"]),
                    infeasibility=float(row["infeas"]),
                    projected=bool(int(row["projected"])),
                    outer_iterations=0,
                    wall_time=float(row["time_s"]),
                    status=row["status"],
                    weakened=bool(int(row["weakened"])),
                )
            )
    return records
