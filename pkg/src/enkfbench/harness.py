"""Batches of paired synthetic experiments with resumable CSV storage."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream
from .scenarios import (
    ScenarioSpec, SyntheticTruth, build_scenario, generate_truth, initial_ensemble, with_truth_noise,
)
from .variants import AssimilationProblem, VariantConfig, make_filter

__all__ = [
    "CSV_HEADER",
    "DEFAULT_TRUTH_SEEDS",
    "ExperimentPlan",
    "PlanMismatchError",
    "RmseRecord",
    "RmseTable",
    "compute_rmse",
    "run_experiment",
    "run_plan",
    "scenario_with_overrides",
]

CSV_HEADER = ("scenario", "variant", "n_e", "experiment", "rmse", "steps", "wall_s", "diverged")

#: truth seeds giving a reference field whose mismatch to the prior mean is typical
DEFAULT_TRUTH_SEEDS = {"tracer": 5, "well": 0}


class PlanMismatchError(ValueError):
    """Existing results in the output directory belong to a different plan."""


def compute_rmse(mean_field, truth_field) -> float:
    """Root mean square difference between two per-cell log10 K fields."""
    a = np.asarray(mean_field, dtype=float)
    b = np.asarray(truth_field, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"field shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class RmseRecord:
    scenario: str
    variant: str
    n_e: int
    experiment: int
    rmse: float
    steps: int
    wall_s: float
    diverged: bool

    def __post_init__(self):
        if not self.diverged and not (np.isfinite(self.rmse) and self.rmse >= 0):
            raise ValueError(f"rmse must be finite and non-negative, got {self.rmse}")

    @property
    def key(self) -> tuple:
        return (self.scenario, self.variant, self.n_e, self.experiment)

    def to_row(self) -> list[str]:
        return [self.scenario, self.variant, str(self.n_e), str(self.experiment), repr(float(self.rmse)),
                str(self.steps), f"{self.wall_s:.3f}", str(int(self.diverged))]

    @classmethod
    def from_row(cls, row: dict) -> "RmseRecord":
        return cls(row["scenario"], row["variant"], int(row["n_e"]), int(row["experiment"]),
                   float(row["rmse"]), int(row["steps"]), float(row["wall_s"]), row["diverged"] in ("1", "True", "true"))


class RmseTable:
    """Collection of :class:`RmseRecord` with CSV persistence."""

    def __init__(self, records=()):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def keys(self) -> set:
        return {r.key for r in self.records}

    def to_csv(self, path) -> None:
        """Write atomically (temporary file then rename)."""
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.records:
                w.writerow(r.to_row())
        os.replace(tmp, path)

    @classmethod
    def from_csv(cls, path) -> "RmseTable":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
            return cls(RmseRecord.from_row(row) for row in reader)

    def distributions(self, scenario: str | None = None) -> dict[tuple[str, int], np.ndarray]:
        """RMSE samples per ``(variant, n_e)``, ordered by experiment index."""
        groups: dict[tuple[str, int], list] = {}
        for r in sorted(self.records, key=lambda r: r.experiment):
            if scenario is None or r.scenario == scenario:
                groups.setdefault((r.variant, r.n_e), []).append(r.rmse)
        return {k: np.array(v) for k, v in groups.items()}

    def scenarios(self) -> list[str]:
        return sorted({r.scenario for r in self.records})


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise KeyError(k)
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base[k], dict) and k != "noise_std" else v
    return out


def scenario_with_overrides(name: str, overrides: dict | None = None) -> ScenarioSpec:
    """Default scenario with nested field overrides, e.g. ``{"grid": {"nx": 21}}``."""
    spec = build_scenario(name)
    if not overrides:
        return spec
    return ScenarioSpec.from_dict(_merge(spec.to_dict(), overrides))


@dataclass
class ExperimentPlan:
    """Cartesian product of variants, ensemble sizes, noise scales and experiment indices.

    Experiment ``i`` uses seed ``base_experiment_seed + i`` for every variant
    and size (paired design). With ``paired=False`` each variant draws its own
    seed sequence instead.
    """

    scenario: str
    variants: list[VariantConfig]
    ensemble_sizes: list[int]
    n_experiments: int
    truth_seed: int | None = None
    base_experiment_seed: int = 0
    noise_scales: list[float] = field(default_factory=lambda: [1.0])
    paired: bool = True
    scenario_overrides: dict = field(default_factory=dict)
    record_wall_time: bool = True

    def __post_init__(self):
        self.variants = [v if isinstance(v, VariantConfig) else VariantConfig(**v) for v in self.variants]
        if self.truth_seed is None:
            self.truth_seed = DEFAULT_TRUTH_SEEDS.get(self.scenario, 0)
        if self.n_experiments < 1:
            raise ValueError("n_experiments must be >= 1")
        if not self.variants:
            raise ValueError("plan needs at least one variant")
        if not self.ensemble_sizes or any(int(n) < 2 for n in self.ensemble_sizes):
            raise ValueError("ensemble sizes must be >= 2")
        if not self.noise_scales or any(not s > 0 for s in self.noise_scales):
            raise ValueError("noise scales must be positive")
        labels = [v.label for v in self.variants]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate variant configurations in plan")
        if self.truth_seed < 0 or self.base_experiment_seed < 0:
            raise ValueError("seeds must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = [v.to_dict() for v in self.variants]
        return d

    def plan_hash(self) -> str:
        d = self.to_dict()
        d.pop("record_wall_time")
        blob = json.dumps(d, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()

    def scenario_label(self, noise_scale: float) -> str:
        return self.scenario if noise_scale == 1.0 else f"{self.scenario}[noise_scale={noise_scale!r}]"

    def experiment_seed(self, index: int, variant: VariantConfig) -> int:
        if self.paired:
            return self.base_experiment_seed + index
        return int(stream(self.base_experiment_seed, "unpaired", variant.label, index).integers(2**62))

    def tasks(self) -> list[tuple[float, VariantConfig, int, int]]:
        """``(noise_scale, variant, n_e, experiment)`` in canonical order."""
        return [(s, v, int(n), i) for s in self.noise_scales for n in self.ensemble_sizes
                for i in range(self.n_experiments) for v in self.variants]

    def task_key(self, task) -> tuple:
        s, v, n, i = task
        return (self.scenario_label(s), v.label, n, i)


def run_experiment(spec: ScenarioSpec, truth: SyntheticTruth, variant: VariantConfig, n_e: int,
                   experiment_seed: int, record_wall_time: bool = True, experiment: int = 0,
                   scenario_label: str | None = None) -> RmseRecord:
    """One synthetic experiment; solver failures are flagged, never raised."""
    t0 = time.perf_counter()
    model = spec.forward_model()
    problem = AssimilationProblem(model, initial_ensemble(spec, n_e, experiment_seed), truth.batches,
                                  seed=experiment_seed)
    flt = make_filter(variant).fit(problem)
    rmse = compute_rmse(flt.predict(), truth.field.values)
    wall = time.perf_counter() - t0 if record_wall_time else 0.0
    diverged = flt.diverged_ or not np.isfinite(rmse)
    return RmseRecord(scenario_label or spec.name, variant.label, int(n_e), int(experiment), rmse,
                      int(flt.n_forward_steps_), wall, bool(diverged))


# worker-process state, set once per process by the pool initializer
_WORKER: dict = {}


def _init_worker(contexts):
    _WORKER.clear()
    _WORKER.update(contexts)


def _run_task(task, plan: ExperimentPlan) -> RmseRecord:
    scale, variant, n_e, i = task
    spec, truth = _WORKER[scale]
    return run_experiment(spec, truth, variant, n_e, plan.experiment_seed(i, variant),
                          plan.record_wall_time, i, plan.scenario_label(scale))


def _contexts(plan: ExperimentPlan) -> dict:
    base = scenario_with_overrides(plan.scenario, plan.scenario_overrides)
    truth = generate_truth(base, plan.truth_seed)
    out = {}
    for s in plan.noise_scales:
        spec = base.with_noise_scale(s) if s != 1.0 else base
        out[s] = (spec, with_truth_noise(spec, truth))
    return out


def _manifest(plan: ExperimentPlan) -> dict:
    from . import __version__
    return {
        "plan_hash": plan.plan_hash(),
        "plan": plan.to_dict(),
        "seeds": {"truth_seed": plan.truth_seed,
                  "experiment_seeds": [plan.base_experiment_seed, plan.base_experiment_seed + plan.n_experiments - 1],
                  "paired": plan.paired},
        "version": __version__,
    }


def run_plan(plan: ExperimentPlan, out_dir, workers: int = 1, resume: bool = True,
             progress=None) -> RmseTable:
    """Execute every task of ``plan``, streaming records to ``out_dir/results.csv``.

    Completed records found on disk are skipped when ``resume`` is true. On
    completion the CSV is rewritten in canonical plan order, so its content
    does not depend on ``workers``. ``progress`` is called with each new record.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    manifest_path = out_dir / "manifest.json"
    manifest = _manifest(plan)

    done: dict[tuple, RmseRecord] = {}
    if resume and csv_path.exists():
        if manifest_path.exists():
            old = json.loads(manifest_path.read_text())
            if old.get("plan_hash") != manifest["plan_hash"]:
                raise PlanMismatchError(f"{out_dir} holds results of a different plan; use another directory")
        done = {r.key: r for r in RmseTable.from_csv(csv_path)}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")

    tasks = plan.tasks()
    todo = [t for t in tasks if plan.task_key(t) not in done]
    if todo:
        fresh = not csv_path.exists() or not done
        with open(csv_path, "w" if fresh else "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fresh:
                w.writerow(CSV_HEADER)
                fh.flush()

            def emit(rec: RmseRecord):
                done[rec.key] = rec
                w.writerow(rec.to_row())
                fh.flush()
                if progress is not None:
                    progress(rec)

            if workers <= 1:
                _init_worker(_contexts(plan))
                for t in todo:
                    emit(_run_task(t, plan))
            else:
                with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                         initargs=(_contexts(plan),)) as pool:
                    futures = [pool.submit(_run_task, t, plan) for t in todo]
                    for fut in as_completed(futures):
                        emit(fut.result())

    table = RmseTable(done[plan.task_key(t)] for t in tasks)
    table.to_csv(csv_path)
    return table
