"""YAML run configuration with line-anchored validation.

Example::

    scenario: tracer
    n_experiments: 100
    ensemble_sizes: [50, 100]
    variants:
      - classical
      - kind: local
        length_scale: 150.0
    sweeps:
      hybrid: {beta: [0.25, 0.75]}
    scenario_overrides:
      reference: {stddev: 0.0}
    output: tracer-main
    workers: 4

Every key is optional except ``scenario``; omitted keys take the defaults of
:class:`~enkfbench.harness.ExperimentPlan` and the scenario constants.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .harness import ExperimentPlan
from .scenarios import SCENARIOS, build_scenario
from .variants import VARIANTS, VariantConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "OUTPUT_ROOT_ENV", "output_root"]

OUTPUT_ROOT_ENV = "ENKFBENCH_OUTPUT_ROOT"

#: plan defaults used when a config leaves them out (the full comparison set-up)
DEFAULT_ENSEMBLE_SIZES = (50, 70, 100, 250, 500, 1000, 2000)
DEFAULT_N_EXPERIMENTS = 1000

TOP_KEYS = {
    "scenario", "variants", "ensemble_sizes", "n_experiments", "truth_seed", "base_experiment_seed",
    "noise_scales", "paired", "record_wall_time", "sweeps", "scenario_overrides", "output", "workers",
}


class ConfigError(ValueError):
    """Invalid run configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def output_root() -> Path:
    """Default directory for run outputs (``$ENKFBENCH_OUTPUT_ROOT`` or ``./enkfbench-runs``)."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "enkfbench-runs"))


@dataclass
class RunConfig:
    plan: ExperimentPlan
    output: str
    workers: int = 1
    sweeps: dict | None = None

    def output_dir(self) -> Path:
        p = Path(self.output)
        return p if p.is_absolute() else output_root() / p

    def to_dict(self) -> dict:
        """Plain mapping that :func:`parse_config` maps back to an equal config."""
        plan = self.plan
        swept = _swept_labels(self.sweeps or {})
        out = {
            "scenario": plan.scenario,
            "variants": [v.kind if not v.params else {"kind": v.kind, **v.params}
                         for v in plan.variants if v.label not in swept],
            "ensemble_sizes": list(plan.ensemble_sizes),
            "n_experiments": plan.n_experiments,
            "truth_seed": plan.truth_seed,
            "base_experiment_seed": plan.base_experiment_seed,
            "noise_scales": list(plan.noise_scales),
            "paired": plan.paired,
            "record_wall_time": plan.record_wall_time,
            "scenario_overrides": plan.scenario_overrides,
            "output": self.output,
            "workers": self.workers,
        }
        if self.sweeps:
            out["sweeps"] = self.sweeps
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _swept_labels(sweeps: dict) -> set:
    return {v.label for v in _expand_sweeps(sweeps)}


def _expand_sweeps(sweeps: dict) -> list[VariantConfig]:
    out = []
    for kind, grid in sweeps.items():
        for name, values in grid.items():
            for value in values:
                out.append(VariantConfig(kind, {name: value}))
    return out


def _line(node) -> int:
    return node.start_mark.line + 1


def _mapping(node, what, source):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{what} must be a mapping", _line(node), source)
    return [(k.value, k, v) for k, v in node.value]


def _check_keys(node, allowed, what, source):
    for key, knode, _ in _mapping(node, what, source):
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {what}; allowed: {', '.join(sorted(allowed))}",
                              _line(knode), source)


def _find(node, key):
    for k, v in node.value:
        if k.value == key:
            return k, v
    return None, None


def _check_overrides(node, template: dict, path: str, source: str):
    for key, knode, vnode in _mapping(node, path or "scenario_overrides", source):
        if key not in template:
            raise ConfigError(f"unknown scenario field {path + '.' if path else ''}{key!r}", _line(knode), source)
        sub = template[key]
        if isinstance(sub, dict) and isinstance(vnode, yaml.MappingNode) and key != "noise_std":
            _check_overrides(vnode, sub, f"{path + '.' if path else ''}{key}", source)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Validate and build a :class:`RunConfig`; raises :class:`ConfigError` with line numbers."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1, source) from exc
    if root is None:
        raise ConfigError("empty configuration", None, source)
    _check_keys(root, TOP_KEYS, "run configuration", source)

    scenario = data.get("scenario")
    if scenario not in SCENARIOS:
        k, v = _find(root, "scenario")
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}",
                          _line(v) if v is not None else None, source)

    variants = []
    k, vnode = _find(root, "variants")
    raw = data.get("variants", list(VARIANTS))
    if vnode is not None and not isinstance(vnode, yaml.SequenceNode):
        raise ConfigError("variants must be a list", _line(vnode), source)
    for idx, item in enumerate(raw):
        item_node = vnode.value[idx] if vnode is not None else None
        try:
            if isinstance(item, str):
                variants.append(VariantConfig(item))
            elif isinstance(item, dict) and "kind" in item:
                params = {p: v for p, v in item.items() if p != "kind"}
                if item_node is not None:
                    allowed = {"kind"} | (set(VARIANTS.get(item["kind"], VARIANTS["classical"])().get_params())
                                          - {"on_failure"})
                    _check_keys(item_node, allowed, f"variant {item['kind']!r}", source)
                variants.append(VariantConfig(item["kind"], params))
            else:
                raise ValueError("each variant is a name or a mapping with a 'kind' key")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), _line(item_node) if item_node is not None else None, source) from exc

    sweeps = data.get("sweeps") or {}
    k, snode = _find(root, "sweeps")
    if snode is not None and sweeps:
        for kind, knode, gnode in _mapping(snode, "sweeps", source):
            if kind not in VARIANTS:
                raise ConfigError(f"unknown variant {kind!r} in sweeps", _line(knode), source)
            allowed = set(VARIANTS[kind]().get_params()) - {"on_failure"}
            _check_keys(gnode, allowed, f"sweeps.{kind}", source)
            for pname, pk, pv in _mapping(gnode, f"sweeps.{kind}", source):
                if not isinstance(pv, yaml.SequenceNode):
                    raise ConfigError(f"sweeps.{kind}.{pname} must be a list", _line(pv), source)
        variants += [v for v in _expand_sweeps(sweeps) if v.label not in {x.label for x in variants}]

    overrides = data.get("scenario_overrides") or {}
    k, onode = _find(root, "scenario_overrides")
    if onode is not None and overrides:
        _check_overrides(onode, build_scenario(scenario).to_dict(), "", source)

    plan_kwargs = {"ensemble_sizes": list(DEFAULT_ENSEMBLE_SIZES), "n_experiments": DEFAULT_N_EXPERIMENTS}
    plan_kwargs.update({f.name: data[f.name] for f in fields(ExperimentPlan)
                        if f.name in data and f.name not in ("variants", "scenario_overrides")})
    try:
        plan = ExperimentPlan(scenario=scenario, variants=variants, scenario_overrides=overrides,
                              **{k: v for k, v in plan_kwargs.items() if k != "scenario"})
        from .harness import scenario_with_overrides
        scenario_with_overrides(scenario, overrides)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid plan: {exc}", None, source) from exc

    workers = data.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        k, v = _find(root, "workers")
        raise ConfigError("workers must be a positive integer", _line(v) if v is not None else None, source)
    output = str(data.get("output", Path(source).stem if source != "<config>" else plan.scenario))
    return RunConfig(plan, output, workers, sweeps or None)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", None, str(path)) from exc
    return parse_config(text, str(path))
