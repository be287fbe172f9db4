"""The two synthetic set-ups (tracer test and pumping-well test) and their reference truths."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .enkf import Ensemble, MeasurementBatch
from .forward import (
    BoundarySpec, DynamicState, FluidProps, ForwardModel, RockProps, SolverSettings,
)
from .grid import FieldStats, Grid2D, LogPermField, sample_fields

__all__ = [
    "SCENARIOS",
    "ScenarioSpec",
    "SyntheticTruth",
    "build_scenario",
    "generate_truth",
    "initial_ensemble",
    "write_observations_csv",
]

SCENARIOS = ("tracer", "well")
DAY = 86400.0


@dataclass(frozen=True)
class ScenarioSpec:
    """Complete definition of one synthetic set-up.

    Times are in seconds, lengths in metres, concentrations in mol/l.
    ``obs_cells`` are flat cell indices, all observing ``obs_kind``.
    """

    name: str
    grid: Grid2D
    dt: float
    n_steps: int
    flow_bc: BoundarySpec
    transport_bc: BoundarySpec | None
    initial_head: float
    initial_conc: float | None
    fluid: FluidProps
    rock: RockProps
    diffusion: float
    obs_cells: tuple[int, ...]
    obs_kind: str
    obs_interval: int
    n_obs_times: int
    noise_std: dict
    reference: FieldStats
    ensemble: FieldStats
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if not self.dt > 0 or self.n_steps < 1:
            raise ValueError("dt must be positive and n_steps >= 1")
        if self.obs_interval < 1 or self.n_obs_times < 1:
            raise ValueError("obs_interval and n_obs_times must be >= 1")
        if self.obs_interval * self.n_obs_times > self.n_steps:
            raise ValueError("observation schedule runs past the simulated period")
        if self.obs_kind not in ("head", "conc"):
            raise ValueError(f"obs_kind must be 'head' or 'conc', got {self.obs_kind!r}")
        if self.obs_kind == "conc" and self.transport_bc is None:
            raise ValueError("concentration observations need a transport model")
        if (self.transport_bc is None) != (self.initial_conc is None):
            raise ValueError("initial_conc must be given exactly when transport is modelled")
        if not self.obs_cells or any(not 0 <= c < self.grid.n_cells for c in self.obs_cells):
            raise ValueError("observation cells must lie in the grid")
        if not self.noise_std.get(self.obs_kind, 0) > 0:
            raise ValueError(f"missing positive noise for {self.obs_kind!r}")

    @property
    def sim_time(self) -> float:
        return self.dt * self.n_steps

    @property
    def obs_steps(self) -> list[int]:
        """Model steps at which measurements are taken."""
        return [k * self.obs_interval for k in range(1, self.n_obs_times + 1)]

    def forward_model(self) -> ForwardModel:
        return ForwardModel(self.grid, self.dt, self.fluid, self.rock, self.flow_bc,
                            self.transport_bc, self.diffusion, self.solver)

    def initial_state(self) -> DynamicState:
        """Initial head and concentration with Dirichlet cells set to their boundary values."""
        mask, vals = self.flow_bc.dirichlet(self.grid)
        head = np.where(mask, vals, self.initial_head).ravel()
        conc = None
        if self.transport_bc is not None:
            mask, vals = self.transport_bc.dirichlet(self.grid)
            conc = np.where(mask, vals, self.initial_conc).ravel()
        return DynamicState(head, conc)

    def with_noise_scale(self, scale: float) -> "ScenarioSpec":
        if not scale > 0:
            raise ValueError("noise scale must be positive")
        return replace(self, noise_std={k: v * scale for k, v in self.noise_std.items()})

    def to_dict(self) -> dict:
        """Plain nested mapping (lists instead of tuples) suitable for YAML/JSON."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None or isinstance(v, (str, int, float)):
                out[f.name] = v
            elif isinstance(v, tuple):
                out[f.name] = list(v)
            elif isinstance(v, dict):
                out[f.name] = dict(v)
            else:
                d = asdict(v)
                if "fixed" in d:
                    d["fixed"] = [list(p) for p in d["fixed"]]
                out[f.name] = d
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown scenario field(s): {sorted(unknown)}")
        d = dict(data)
        nested = {"grid": Grid2D, "fluid": FluidProps, "rock": RockProps,
                  "reference": FieldStats, "ensemble": FieldStats, "solver": SolverSettings}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        for key in ("flow_bc", "transport_bc"):
            if isinstance(d.get(key), dict):
                bc = dict(d[key])
                bc["fixed"] = tuple((int(c), float(v)) for c, v in bc.get("fixed", ()))
                d[key] = BoundarySpec(**bc)
        if "obs_cells" in d:
            d["obs_cells"] = tuple(int(c) for c in d["obs_cells"])
        return cls(**d)


def _tracer() -> ScenarioSpec:
    grid = Grid2D(31, 31, 2.0, 2.0)
    return ScenarioSpec(
        name="tracer",
        grid=grid,
        dt=6 * DAY,
        n_steps=200,
        flow_bc=BoundarySpec(south=11.0, north=10.0),
        transport_bc=BoundarySpec(south=80e-3, north=60e-3),
        initial_head=10.0,
        initial_conc=60e-3,
        fluid=FluidProps(),
        rock=RockProps(porosity=0.10),
        diffusion=1.5e-9,
        obs_cells=(grid.cell_of(19.0, 31.0), grid.cell_of(43.0, 31.0)),
        obs_kind="conc",
        obs_interval=2,
        n_obs_times=100,
        noise_std={"head": 5e-2, "conc": 7.1e-3},
        reference=FieldStats(-12.0, 0.5, 50.0),
        ensemble=FieldStats(-12.5, 0.5, 50.0),
    )


def _well() -> ScenarioSpec:
    grid = Grid2D(31, 31, 20.0, 20.0)
    center = grid.cell_of(310.0, 310.0)
    lattice = (3, 7, 11, 15, 19, 23, 27)
    observers = tuple(grid.index(i, j) for j in lattice for i in lattice if grid.index(i, j) != center)
    return ScenarioSpec(
        name="well",
        grid=grid,
        dt=1296.0,
        n_steps=1200,
        flow_bc=BoundarySpec(south=10.0, north=10.0, west=10.0, east=10.0, fixed=((center, 11.0),)),
        transport_bc=None,
        initial_head=10.0,
        initial_conc=None,
        fluid=FluidProps(),
        rock=RockProps(porosity=0.10),
        diffusion=0.0,
        obs_cells=observers,
        obs_kind="head",
        obs_interval=20,
        n_obs_times=60,
        noise_std={"head": 5e-2, "conc": 7.1e-3},
        reference=FieldStats(-12.0, 0.5, 60.0),
        ensemble=FieldStats(-12.5, 0.5, 60.0),
    )


def build_scenario(name: str) -> ScenarioSpec:
    """Default constants of the ``"tracer"`` or ``"well"`` set-up."""
    if name == "tracer":
        return _tracer()
    if name == "well":
        return _well()
    raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


@dataclass
class SyntheticTruth:
    """Reference field plus clean observations, one batch per scheduled time."""

    field: LogPermField
    batches: list[MeasurementBatch]

    def observations(self) -> np.ndarray:
        """Clean observation matrix ``(n_times, n_m)``."""
        return np.array([b.y for b in self.batches])


def _batches(spec: ScenarioSpec, values: np.ndarray) -> list[MeasurementBatch]:
    cells = np.asarray(spec.obs_cells)
    sigma = spec.noise_std[spec.obs_kind]
    return [MeasurementBatch(cells, spec.obs_kind, values[k], sigma, time_index=k, step=s)
            for k, s in enumerate(spec.obs_steps)]


def generate_truth(spec: ScenarioSpec, truth_seed: int) -> SyntheticTruth:
    """Sample the reference field and record clean observations along its trajectory."""
    ref = LogPermField(spec.grid, sample_fields(spec.grid, spec.reference, truth_seed, [0], purpose="truth")[0])
    model = spec.forward_model()
    state = spec.initial_state()
    h, c = state.head[None], None if state.conc is None else state.conc[None]
    cells = np.asarray(spec.obs_cells)
    obs = []
    step = 0
    for target in spec.obs_steps:
        for _ in range(target - step):
            h, c = model.step(ref.values[None], h, c)
        step = target
        obs.append((h if spec.obs_kind == "head" else c)[0, cells])
    return SyntheticTruth(ref, _batches(spec, np.array(obs)))


def with_truth_noise(spec: ScenarioSpec, truth: SyntheticTruth) -> SyntheticTruth:
    """Same clean observations with the measurement noise of ``spec`` (noise-scale sweeps)."""
    return SyntheticTruth(truth.field, _batches(spec, truth.observations()))


def initial_ensemble(spec: ScenarioSpec, n_e: int, experiment_seed: int) -> Ensemble:
    """Prior ensemble: member ``k`` field from stream ``(experiment_seed, "field", k)``."""
    if n_e < 2:
        raise ValueError("n_e must be >= 2")
    params = sample_fields(spec.grid, spec.ensemble, experiment_seed, range(n_e), purpose="field")
    state = spec.initial_state()
    head = np.tile(state.head, (n_e, 1))
    conc = None if state.conc is None else np.tile(state.conc, (n_e, 1))
    return Ensemble(params, head, conc)


def write_observations_csv(truth: SyntheticTruth, path) -> None:
    """Clean observations as rows ``time_index, step, cell, kind, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "step", "cell", "kind", "value"])
        for b in truth.batches:
            for cell, kind, y in zip(b.cells, b.kinds, b.y):
                w.writerow([b.time_index, b.step, int(cell), kind, repr(float(y))])
