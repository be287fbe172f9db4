"""Command-line interface: ``enkfbench run | analyze | forward``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, load_config, output_root
from .forward import DynamicState, write_trajectory_csv
from .grid import write_field_csv
from .harness import PlanMismatchError, RmseTable, run_plan, scenario_with_overrides
from .scenarios import SCENARIOS, generate_truth, write_observations_csv
from .stats import MissingPairsError, write_report

log = logging.getLogger("enkfbench")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _nsyn(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("n_syn values must be positive")
    return values


def _override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key.path=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.split("."), yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="enkfbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute an experiment plan")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--workers", type=int, default=None, help="worker processes (overrides the config)")
    r.add_argument("--resume", action="store_true", help="continue a partially completed run")
    r.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")

    a = sub.add_parser("analyze", help="comparison statistics for result tables")
    a.add_argument("--table", required=True, type=Path, nargs="+")
    a.add_argument("--nsyn", type=_nsyn, default=[1, 10, 100])
    a.add_argument("--out", type=Path, default=None)
    a.add_argument("--resamples", type=int, default=10_000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--force", action="store_true", help="combine tables from different plans")

    f = sub.add_parser("forward", help="reference field, observations and snapshots of one scenario")
    f.add_argument("--scenario", required=True, choices=SCENARIOS)
    f.add_argument("--seed", type=int, required=True, help="truth seed")
    f.add_argument("--out", type=Path, default=None)
    f.add_argument("--every", type=int, default=None, help="snapshot interval in steps (default: observation interval)")
    f.add_argument("--set", dest="overrides", type=_override, action="append", default=[],
                   metavar="KEY=VALUE", help="scenario override, e.g. reference.stddev=0")
    return p


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = args.out or cfg.output_dir()
    workers = args.workers or cfg.workers
    if (Path(out) / "results.csv").exists() and not args.resume:
        log.error("%s already holds results; pass --resume to continue or choose another directory", out)
        return EXIT_RUNTIME
    total = len(cfg.plan.tasks())

    def progress(rec):
        log.info("%s %s n_e=%d #%d rmse=%.4f%s", rec.scenario, rec.variant, rec.n_e, rec.experiment,
                 rec.rmse, " (diverged)" if rec.diverged else "")

    table = run_plan(cfg.plan, out, workers=workers, resume=args.resume, progress=progress)
    log.info("%d/%d records in %s", len(table), total, Path(out) / "results.csv")
    return EXIT_OK


def cmd_analyze(args) -> int:
    hashes = {}
    records = []
    for path in args.table:
        manifest = path.parent / "manifest.json"
        if manifest.exists():
            hashes[str(path)] = json.loads(manifest.read_text()).get("plan_hash")
        records += RmseTable.from_csv(path).records
    if len(set(hashes.values())) > 1 and not args.force:
        log.error("tables come from different plans (%s); pass --force to combine them",
                  ", ".join(f"{k}: {v[:12]}" for k, v in hashes.items()))
        return EXIT_CONFIG
    out = args.out or output_root() / "analysis"
    written = write_report(RmseTable(records), out, args.nsyn, args.resamples, args.seed)
    (Path(out) / "report_manifest.json").write_text(json.dumps(
        {"tables": [str(p) for p in args.table], "plan_hashes": hashes, "nsyn": args.nsyn,
         "resamples": args.resamples, "seed": args.seed}, indent=2) + "\n")
    log.info("wrote %d files to %s", len(written), out)
    return EXIT_OK


def _nest(overrides) -> dict:
    out: dict = {}
    for keys, value in overrides:
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


def cmd_forward(args) -> int:
    try:
        spec = scenario_with_overrides(args.scenario, _nest(args.overrides))
    except (KeyError, TypeError, ValueError) as exc:
        log.error("invalid override: %s", exc)
        return EXIT_CONFIG
    out = args.out or output_root() / f"forward-{args.scenario}-{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    every = args.every or spec.obs_interval
    truth = generate_truth(spec, args.seed)
    write_field_csv(truth.field, out / "reference_field.csv")
    write_observations_csv(truth, out / "observations.csv")
    obs = truth.observations()
    header = "time_index,step," + ",".join(f"cell_{c}" for c in spec.obs_cells)
    rows = np.column_stack([np.arange(len(truth.batches)), [b.step for b in truth.batches], obs])
    with open(out / "observation_matrix.csv", "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(f"{int(row[0])},{int(row[1])}," + ",".join(repr(float(x)) for x in row[2:]) + "\n")
    model = spec.forward_model()
    states = model.run(truth.field.values[None], _batched(spec.initial_state()), spec.n_steps, keep="all")
    write_trajectory_csv([DynamicState(s.head[0], None if s.conc is None else s.conc[0]) for s in states],
                         out / "trajectory.csv", every=every)
    log.info("wrote reference field, %d observation times and snapshots to %s", len(truth.batches), out)
    return EXIT_OK


def _batched(state: DynamicState) -> DynamicState:
    return DynamicState(state.head[None], None if state.conc is None else state.conc[None])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "run" else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    handlers = {"run": cmd_run, "analyze": cmd_analyze, "forward": cmd_forward}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlanMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingPairsError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
