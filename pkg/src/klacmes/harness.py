"""Experiment grid runner and report writer.

Every ``(algorithm, benchmark, run)`` cell is written to its own JSON-lines
file as soon as it finishes, so an interrupted experiment loses at most the
cells in flight.  Reports (summary, ECDFs, speedups) are derived from those
files alone.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .benchmarks import GROUPS, BenchmarkSpec, make_instance
from .bfgs import BFGS
from .cma import CMAES
from .records import RunRecord
from .schedule import KLACMES

__all__ = [
    "ALGORITHMS",
    "ExperimentConfig",
    "make_optimizer",
    "cell_seed",
    "run_cell",
    "run_experiment",
    "load_records",
    "ecdf",
    "median_trajectory",
    "median_evaluations",
    "emit_reports",
    "spec_label",
]

logger = logging.getLogger(__name__)

ALGORITHMS = ("kl-acmes", "cmaes", "fixed-n-acmes", "bfgs")
BASELINE = "cmaes"
DEFAULT_ECDF_TARGETS = tuple(10.0**k for k in range(2, -9, -1))


def make_optimizer(algorithm: str, **params):
    if algorithm == "kl-acmes":
        return KLACMES(schedule="kl", **params)
    if algorithm == "fixed-n-acmes":
        return KLACMES(schedule="fixed-n", **params)
    if algorithm == "cmaes":
        return CMAES(**params)
    if algorithm == "bfgs":
        return BFGS(**params)
    raise ValueError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")


@dataclass
class ExperimentConfig:
    """Grid of algorithms and benchmarks with the run protocol.

    ``target`` and ``targets_ecdf`` are precisions of the untransformed
    function: on a benchmark with ``power = p`` a run hits ``t`` when its
    value reaches ``t**p``.
    """

    algorithms: list = field(default_factory=lambda: ["kl-acmes", "cmaes"])
    specs: list = field(default_factory=list)
    runs: int = 15
    budget: int = 100_000
    target: float = 1e-8
    targets_ecdf: list = field(default_factory=lambda: list(DEFAULT_ECDF_TARGETS))
    seed_base: int = 0
    out_dir: str = "results"
    workers: int = 1
    algorithm_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.specs = [s if isinstance(s, BenchmarkSpec) else BenchmarkSpec(**s) for s in self.specs]
        for algo in self.algorithms:
            if algo not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {algo!r}; choose from {', '.join(ALGORITHMS)}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        self.targets_ecdf = [float(t) for t in self.targets_ecdf]
        if any(a < b for a, b in zip(self.targets_ecdf, self.targets_ecdf[1:])):
            raise ValueError("targets_ecdf must be sorted in descending order")

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["specs"] = [asdict(s) for s in self.specs]
        return out


def spec_label(spec: BenchmarkSpec) -> str:
    label = spec.function_id
    if spec.rotate:
        label += "-rot"
    if spec.power != 1:
        label += f"**{spec.power:g}"
    return label


def cell_seed(seed_base: int, spec_index: int, run: int) -> int:
    """Seed of one run; shared by all algorithms so comparisons are paired."""
    return int(np.random.SeedSequence([seed_base, spec_index, run]).generate_state(1)[0])


def _cell_path(out_dir: Path, algorithm: str, spec: BenchmarkSpec, run: int) -> Path:
    return out_dir / "records" / f"{algorithm}__{spec_label(spec)}__d{spec.dim}__run{run:03d}.jsonl"


def _spec_fields(spec: BenchmarkSpec) -> dict:
    return {"function": spec.function_id, "dim": spec.dim, "rotate": spec.rotate,
            "power": spec.power, "condition": spec.condition}


def _record_lines(record: RunRecord, spec: BenchmarkSpec) -> str:
    head = {"algorithm": record.algorithm, **_spec_fields(spec), "run": record.run,
            "seed": record.seed}
    buf = io.StringIO()
    for index, best in record.trace:
        buf.write(json.dumps({"kind": "trace", **head, "eval": index, "best_f": best}) + "\n")
    result = {
        "kind": "result", **head,
        "evaluations": record.evaluations,
        "termination": record.termination,
        "best_f": record.best_f,
        "restarts": record.restarts,
        "hit": {repr(t): i for t, i in record.hit.items()},
    }
    buf.write(json.dumps(result) + "\n")
    return buf.getvalue()


def run_cell(algorithm: str, spec: BenchmarkSpec, spec_index: int, run: int,
             cfg: ExperimentConfig) -> RunRecord:
    """One seeded run; the record's hits are precisions of the untransformed function."""
    seed = cell_seed(cfg.seed_base, spec_index, run)
    instance = make_instance(spec, seed)
    optimizer = make_optimizer(algorithm, **cfg.algorithm_params.get(algorithm, {}))
    target = cfg.target**spec.power
    record = optimizer.minimize(instance, spec.dim, cfg.budget, target, random_state=seed)
    if record.evaluations != instance.eval_count:
        raise RuntimeError(
            f"{algorithm} on {spec_label(spec)}: recorded {record.evaluations} evaluations "
            f"but the objective was called {instance.eval_count} times"
        )
    record.function = spec_label(spec)
    record.dim = spec.dim
    record.seed = seed
    record.run = run
    targets = sorted(set(cfg.targets_ecdf) | {cfg.target}, reverse=True)
    record.hit = {t: i for t in targets if (i := record.first_hit(t**spec.power)) is not None}
    return record


def _run_and_write(algorithm, spec, spec_index, run, cfg, out_dir):
    record = run_cell(algorithm, spec, spec_index, run, cfg)
    path = _cell_path(out_dir, algorithm, spec, run)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(_record_lines(record, spec))
    tmp.replace(path)
    return record


def run_experiment(cfg: ExperimentConfig) -> list[RunRecord]:
    """Run every cell of the grid, writing one record file per cell."""
    out_dir = Path(cfg.out_dir)
    try:
        (out_dir / "records").mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out_dir}: {exc}") from exc
    cells = [
        (algo, spec, i, run)
        for algo in cfg.algorithms
        for i, spec in enumerate(cfg.specs)
        for run in range(cfg.runs)
    ]
    if cfg.workers > 1:
        from joblib import Parallel, delayed

        return list(Parallel(n_jobs=cfg.workers)(
            delayed(_run_and_write)(*cell, cfg, out_dir) for cell in cells
        ))
    records = []
    for cell in cells:
        logger.info("running %s on %s, run %d", cell[0], spec_label(cell[1]), cell[3])
        records.append(_run_and_write(*cell, cfg, out_dir))
    return records


def load_records(path) -> list[RunRecord]:
    """Read records back from a results directory or a list of JSON-lines files."""
    path = Path(path)
    files = sorted((path / "records").glob("*.jsonl")) if path.is_dir() else [path]
    records = []
    for file in files:
        trace, result = [], None
        for line in file.read_text().splitlines():
            entry = json.loads(line)
            if entry["kind"] == "trace":
                trace.append((entry["eval"], entry["best_f"]))
            else:
                result = entry
        if result is None:
            raise ValueError(f"{file}: no result line")
        spec = BenchmarkSpec(result["function"], result["dim"], result["rotate"],
                             result["power"], result["condition"])
        records.append(RunRecord(
            algorithm=result["algorithm"],
            trace=trace,
            evaluations=result["evaluations"],
            termination=result["termination"],
            function=spec_label(spec),
            dim=result["dim"],
            seed=result["seed"],
            run=result["run"],
            restarts=result.get("restarts", 0),
            hit={float(t): i for t, i in result["hit"].items()},
        ))
    return records


def _hits(record: RunRecord, target: float):
    return record.hit.get(float(target))


def default_levels(records, dim: int, per_decade: int = 10) -> np.ndarray:
    top = max([r.evaluations for r in records] + [dim]) / dim
    decades = max(math.ceil(math.log10(top)), 0)
    return 10.0 ** (np.arange(decades * per_decade + 1) / per_decade)


def ecdf(records, targets, dim: int, levels=None) -> list[tuple[float, float]]:
    """Fraction of (run, target) pairs solved within ``b * dim`` evaluations, per level ``b``."""
    records = list(records)
    targets = [float(t) for t in targets]
    if levels is None:
        levels = default_levels(records, dim) if records else np.array([1.0])
    pairs = len(records) * len(targets)
    hits = np.array([
        _hits(r, t) for r in records for t in targets if _hits(r, t) is not None
    ], dtype=float)
    table = []
    for b in levels:
        solved = int(np.sum(hits <= b * dim)) if hits.size else 0
        table.append((float(b), solved / pairs if pairs else 0.0))
    return table


def _evals_to_target(record: RunRecord, target: float) -> float:
    hit = _hits(record, target)
    return math.inf if hit is None else float(hit)


def median_evaluations(records, target: float) -> float:
    """Median evaluations to ``target``; unsuccessful runs count as infinite."""
    values = [_evals_to_target(r, target) for r in records]
    return float(np.median(values)) if values else math.nan


def median_trajectory(records, target: float) -> list:
    """Trace of the median run by evaluations to ``target`` (lower median for even counts)."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    keyed = sorted(records, key=lambda r: (_evals_to_target(r, target), r.run))
    return list(keyed[(len(keyed) - 1) // 2].trace)


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    if math.isnan(x):
        return ""
    return repr(float(x)) if x != int(x) else str(int(x))


def _group_cells(records):
    cells: dict[tuple, list] = {}
    for r in records:
        cells.setdefault((r.algorithm, r.function, r.dim), []).append(r)
    return cells


def _base_function(label: str) -> str:
    return label.split("-rot")[0].split("**")[0]


def emit_reports(records, out_dir, target: float = 1e-8, targets_ecdf=DEFAULT_ECDF_TARGETS,
                 ) -> list[Path]:
    """Write ``summary.csv``, ``speedup.csv`` and ``ecdf_<group>.csv`` under ``out_dir``."""
    records = list(records)
    out_dir = Path(out_dir)
    cells = _group_cells(records)
    written = []

    def write(name: str, header: list, rows: list):
        path = out_dir / name
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(buf.getvalue())
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    summary, medians = [], {}
    for (algo, func, dim), rs in sorted(cells.items()):
        med = median_evaluations(rs, target)
        medians[(algo, func, dim)] = med
        rate = sum(_hits(r, target) is not None for r in rs) / len(rs)
        summary.append([algo, func, dim, _fmt(med), _fmt(rate)])
    write("summary.csv", ["algorithm", "function", "dim", "median_evals", "success_rate"], summary)

    speedup = []
    for (algo, func, dim), med in sorted(medians.items()):
        base = medians.get((BASELINE, func, dim))
        if algo == BASELINE or base is None:
            continue
        ratio = base / med if med not in (0, math.inf) else (math.nan if base == math.inf else 0.0)
        speedup.append([algo, func, dim, _fmt(base), _fmt(med), _fmt(ratio)])
    write("speedup.csv", ["algorithm", "function", "dim", "baseline_median", "median", "speedup"],
          speedup)

    algorithms = sorted({r.algorithm for r in records})
    for dim in sorted({r.dim for r in records}):
        for group, members in GROUPS.items():
            chosen = [r for r in records if r.dim == dim and _base_function(r.function) in members]
            if not chosen:
                continue
            levels = default_levels(chosen, dim)
            columns = [ecdf([r for r in chosen if r.algorithm == a], targets_ecdf, dim, levels)
                       for a in algorithms]
            rows = [[_fmt(b)] + [_fmt(col[i][1]) for col in columns] + [""]
                    for i, b in enumerate(levels)]
            write(f"ecdf_{group}_d{dim}.csv", ["evals_per_dim", *algorithms, "best2009"], rows)
    return written
