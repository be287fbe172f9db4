"""Implicit finite-difference groundwater flow and tracer transport.

Everything here works on batches: dynamic fields have shape ``(m, n_cells)``
(or ``(n_cells,)`` for a single realization) and log10-permeability likewise.
Dirichlet conditions are imposed on cell centres; domain edges without a
Dirichlet value are no-flow.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid2D, LogPermField
from .linsolve import PreparedSystem, SolverDivergenceError, Stencil5, bicgstab

__all__ = [
    "FluidProps",
    "RockProps",
    "BoundarySpec",
    "SolverSettings",
    "DynamicState",
    "FaceVelocity",
    "ForwardModel",
    "SolverDivergenceError",
    "darcy_velocity",
    "step_flow",
    "step_transport",
    "run_forward",
    "boundary_flux",
    "write_trajectory_csv",
]


@dataclass(frozen=True)
class FluidProps:
    rho_f: float = 1000.0
    mu_f: float = 1.0e-3
    g: float = 9.81

    def __post_init__(self):
        if not (self.rho_f > 0 and self.mu_f > 0 and self.g > 0):
            raise ValueError("fluid properties must be strictly positive")

    @property
    def conductivity_factor(self) -> float:
        """rho_f * g / mu_f, converts permeability (m^2) to conductivity (m/s)."""
        return self.rho_f * self.g / self.mu_f


@dataclass(frozen=True)
class RockProps:
    porosity: float = 0.10
    specific_storage: float = 1.0e-5

    def __post_init__(self):
        if not (0 < self.porosity <= 1):
            raise ValueError(f"porosity must be in (0, 1], got {self.porosity}")
        if not self.specific_storage > 0:
            raise ValueError(f"specific storage must be > 0, got {self.specific_storage}")


@dataclass(frozen=True)
class BoundarySpec:
    """Edge conditions (``None`` means no-flow) plus fixed interior cells.

    ``fixed`` holds ``(flat cell index, value)`` pairs. Edge Dirichlet values
    apply to the whole outer row/column of cells; fixed cells win over edges.
    """

    south: float | None = None
    north: float | None = None
    west: float | None = None
    east: float | None = None
    fixed: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        for name in ("south", "north", "west", "east"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"{name} Dirichlet value must be finite")
        for cell, value in self.fixed:
            if not np.isfinite(value):
                raise ValueError(f"fixed value for cell {cell} must be finite")

    def dirichlet(self, grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
        """Boolean mask and values, both shaped ``(ny, nx)``."""
        mask = np.zeros(grid.shape, dtype=bool)
        values = np.zeros(grid.shape)
        # corners: north/south rows are written last
        for name, sl in (("west", np.s_[:, 0]), ("east", np.s_[:, -1]),
                         ("south", np.s_[0, :]), ("north", np.s_[-1, :])):
            v = getattr(self, name)
            if v is not None:
                mask[sl] = True
                values[sl] = v
        for cell, value in self.fixed:
            if not 0 <= cell < grid.n_cells:
                raise ValueError(f"fixed cell {cell} outside grid of {grid.n_cells} cells")
            j, i = divmod(int(cell), grid.nx)
            mask[j, i] = True
            values[j, i] = value
        return mask, values

    def extremes(self, grid: Grid2D) -> tuple[float, float] | None:
        mask, values = self.dirichlet(grid)
        if not mask.any():
            return None
        return float(values[mask].min()), float(values[mask].max())


@dataclass(frozen=True)
class SolverSettings:
    picard_rel_tol: float = 1e-10
    linear_rel_tol: float = 1e-14
    linear_max_iter: int = 500
    preconditioner: str = "ilu0"
    ilu_relax: float = 0.97
    transport_ilu_relax: float = 0.0
    direct_fallback: bool = True

    def __post_init__(self):
        for name in ("picard_rel_tol", "linear_rel_tol"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if self.linear_max_iter < 1:
            raise ValueError("linear_max_iter must be >= 1")
        for name in ("ilu_relax", "transport_ilu_relax"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.preconditioner not in ("ilu0", "jacobi"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class DynamicState:
    head: np.ndarray
    conc: np.ndarray | None = None

    def __post_init__(self):
        self.head = np.asarray(self.head, dtype=float)
        if self.conc is not None:
            self.conc = np.asarray(self.conc, dtype=float)
            if self.conc.shape != self.head.shape:
                raise ValueError("head and concentration arrays differ in shape")

    def copy(self) -> "DynamicState":
        return DynamicState(self.head.copy(), None if self.conc is None else self.conc.copy())


@dataclass
class FaceVelocity:
    """Darcy velocities (m/s) on interior faces.

    ``vx[..., j, i]`` sits between cells ``(i, j)`` and ``(i+1, j)`` and is
    positive in +x; ``vy[..., j, i]`` between ``(i, j)`` and ``(i, j+1)``,
    positive in +y. Faces on the domain edge carry no flow.
    """

    vx: np.ndarray
    vy: np.ndarray


def _batch(a, grid: Grid2D) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a = a.reshape(-1, grid.ny, grid.nx)
    return a, single


def _perm_array(perm, grid: Grid2D | None):
    if isinstance(perm, LogPermField):
        return perm.values, perm.grid
    if grid is None:
        raise ValueError("grid is required when permeability is given as an array")
    return np.asarray(perm, dtype=float), grid


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _transmissibility(log_perm: np.ndarray, grid: Grid2D, fluid: FluidProps):
    """Face conductances K_face * rho g / mu divided by the squared spacing."""
    k = fluid.conductivity_factor * 10.0 ** log_perm
    tx = _harmonic(k[:, :, :-1], k[:, :, 1:]) / grid.dx ** 2
    ty = _harmonic(k[:, :-1, :], k[:, 1:, :]) / grid.dy ** 2
    return tx, ty


def darcy_velocity(perm, head, fluid: FluidProps = FluidProps(), grid: Grid2D | None = None) -> FaceVelocity:
    """Face velocities ``-(rho g / mu) K_face dh/dn`` with harmonic-mean ``K_face``.

    Flow runs from high to low head.
    """
    values, grid = _perm_array(perm, grid)
    logk, _ = _batch(values, grid)
    h, single = _batch(head, grid)
    if h.shape[1:] != logk.shape[1:]:
        raise ValueError("head and permeability shapes differ")
    k = fluid.conductivity_factor * 10.0 ** logk
    vx = -_harmonic(k[:, :, :-1], k[:, :, 1:]) * (h[:, :, 1:] - h[:, :, :-1]) / grid.dx
    vy = -_harmonic(k[:, :-1, :], k[:, 1:, :]) * (h[:, 1:, :] - h[:, :-1, :]) / grid.dy
    if single:
        return FaceVelocity(vx[0], vy[0])
    return FaceVelocity(vx, vy)


def _stencil_from_faces(diag0, cx, cy, west_in=None, east_in=None, south_in=None, north_in=None):
    """Assemble ``diag0 + sum(coef)`` on the diagonal and ``-coef`` off it.

    ``cx``/``cy`` are symmetric face coefficients; the optional ``*_in`` arrays
    add one-sided (upwind) contributions per cell, already cell-shaped.
    """
    m, ny, nx = diag0.shape
    W = np.zeros((m, ny, nx))
    E = np.zeros((m, ny, nx))
    S = np.zeros((m, ny, nx))
    N = np.zeros((m, ny, nx))
    W[:, :, 1:] = cx
    E[:, :, :-1] = cx
    S[:, 1:, :] = cy
    N[:, :-1, :] = cy
    for arr, extra in ((W, west_in), (E, east_in), (S, south_in), (N, north_in)):
        if extra is not None:
            arr += extra
    C = diag0 + W + E + S + N
    return Stencil5(C, -W, -E, -S, -N)


def _impose_dirichlet(st: Stencil5, b: np.ndarray, mask: np.ndarray, values: np.ndarray):
    """Identity rows on Dirichlet cells; their couplings move to the right-hand side."""
    if not mask.any():
        return
    vals = np.where(mask, values, 0.0)
    # neighbour of (j,i) to the west is (j,i-1), etc.
    b[:, :, 1:] -= np.where(mask[:, :-1], st.W[:, :, 1:] * vals[:, :-1], 0.0)
    st.W[:, :, 1:] = np.where(mask[:, :-1], 0.0, st.W[:, :, 1:])
    b[:, :, :-1] -= np.where(mask[:, 1:], st.E[:, :, :-1] * vals[:, 1:], 0.0)
    st.E[:, :, :-1] = np.where(mask[:, 1:], 0.0, st.E[:, :, :-1])
    b[:, 1:, :] -= np.where(mask[:-1, :], st.S[:, 1:, :] * vals[:-1, :], 0.0)
    st.S[:, 1:, :] = np.where(mask[:-1, :], 0.0, st.S[:, 1:, :])
    b[:, :-1, :] -= np.where(mask[1:, :], st.N[:, :-1, :] * vals[1:, :], 0.0)
    st.N[:, :-1, :] = np.where(mask[1:, :], 0.0, st.N[:, :-1, :])
    for arr in (st.W, st.E, st.S, st.N):
        arr[:, mask] = 0.0
    st.C[:, mask] = 1.0
    b[:, mask] = values[mask]


def _flow_system(tx, ty, storage, h_old, mask, values):
    diag0 = np.full(h_old.shape, storage)
    st = _stencil_from_faces(diag0, tx, ty)
    b = storage * h_old
    _impose_dirichlet(st, b, mask, values)
    return st, b


def _transport_system(vel: FaceVelocity, grid, porosity, diffusion, dt, c_old, mask, values):
    m = c_old.shape[0]
    vx = vel.vx.reshape(m, grid.ny, grid.nx - 1)
    vy = vel.vy.reshape(m, grid.ny - 1, grid.nx)
    # upwind inflow coefficients per receiving cell (non-conservative v . grad c)
    west_in = np.zeros_like(c_old)
    east_in = np.zeros_like(c_old)
    south_in = np.zeros_like(c_old)
    north_in = np.zeros_like(c_old)
    west_in[:, :, 1:] = np.maximum(vx, 0.0) / grid.dx
    east_in[:, :, :-1] = np.maximum(-vx, 0.0) / grid.dx
    south_in[:, 1:, :] = np.maximum(vy, 0.0) / grid.dy
    north_in[:, :-1, :] = np.maximum(-vy, 0.0) / grid.dy
    cx = np.full((m, grid.ny, grid.nx - 1), diffusion / grid.dx ** 2)
    cy = np.full((m, grid.ny - 1, grid.nx), diffusion / grid.dy ** 2)
    storage = porosity / dt
    st = _stencil_from_faces(np.full(c_old.shape, storage), cx, cy, west_in, east_in, south_in, north_in)
    b = storage * c_old
    _impose_dirichlet(st, b, mask, values)
    return st, b


def _prepare(st: Stencil5, settings: SolverSettings, transport: bool = False) -> PreparedSystem:
    # lumped (modified) ILU helps the diffusion-dominated flow operator, plain
    # ILU(0) is at least as good for the advection-dominated transport operator
    relax = settings.transport_ilu_relax if transport else settings.ilu_relax
    return PreparedSystem(st, settings.preconditioner, relax)


def _picard(system, b, x0, settings: SolverSettings):
    """Picard loop around the linear solve.

    The coefficients do not depend on the unknown here, so the second pass
    confirms convergence without further Krylov iterations.
    """
    if not isinstance(system, PreparedSystem):
        system = _prepare(system, settings)
    x = x0
    for _ in range(50):
        x_new, _ = bicgstab(system, b, x, tol=settings.linear_rel_tol, maxiter=settings.linear_max_iter,
                            fallback=settings.direct_fallback)
        change = np.sqrt(np.sum((x_new - x) ** 2, axis=(1, 2)))
        scale = np.sqrt(np.sum(x_new ** 2, axis=(1, 2)))
        x = x_new
        if np.all(change <= settings.picard_rel_tol * np.where(scale > 0, scale, 1.0)):
            return x
    raise SolverDivergenceError("Picard iteration did not converge in 50 passes")


def step_flow(state: DynamicState, perm, fluid: FluidProps, rock: RockProps, bc: BoundarySpec,
              dt: float, settings: SolverSettings = SolverSettings(), grid: Grid2D | None = None) -> DynamicState:
    """One backward-Euler step of ``S_s dh/dt = div(K grad h)``; concentration is carried over."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    values, grid = _perm_array(perm, grid)
    logk, _ = _batch(values, grid)
    h, single = _batch(state.head, grid)
    tx, ty = _transmissibility(logk, grid, fluid)
    mask, dvals = bc.dirichlet(grid)
    st, b = _flow_system(tx, ty, rock.specific_storage / dt, h, mask, dvals)
    h_new = _picard(st, b, h, settings)
    h_new = h_new.reshape(state.head.shape)
    return DynamicState(h_new, None if state.conc is None else state.conc.copy())


def step_transport(state: DynamicState, velocity: FaceVelocity, rock: RockProps, bc: BoundarySpec,
                   diffusion: float, dt: float, settings: SolverSettings = SolverSettings(),
                   grid: Grid2D | None = None) -> DynamicState:
    """One backward-Euler upwind step of ``phi dc/dt = D_m lap(c) - v . grad(c)``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if grid is None:
        raise ValueError("grid is required")
    if state.conc is None:
        raise ValueError("state has no concentration field")
    c, single = _batch(state.conc, grid)
    mask, dvals = bc.dirichlet(grid)
    st, b = _transport_system(velocity, grid, rock.porosity, diffusion, dt, c, mask, dvals)
    c_new = _picard(_prepare(st, settings, transport=True), b, c, settings)
    return DynamicState(state.head.copy(), c_new.reshape(state.conc.shape))


def boundary_flux(perm, head, fluid: FluidProps, bc: BoundarySpec, grid: Grid2D | None = None):
    """Volumetric flux (m^2/s per unit thickness) leaving each Dirichlet cell into the rest.

    Returns ``(net, gross)`` summed over all Dirichlet cells.
    """
    values, grid = _perm_array(perm, grid)
    vel = darcy_velocity(values, head, fluid, grid)
    mask, _ = bc.dirichlet(grid)
    vx = vel.vx.reshape(-1, grid.ny, grid.nx - 1)
    vy = vel.vy.reshape(-1, grid.ny - 1, grid.nx)
    out = []
    # flux across faces joining a Dirichlet cell to a free cell, counted positive out of the Dirichlet cell
    east_face = mask[:, :-1] & ~mask[:, 1:]
    west_face = ~mask[:, :-1] & mask[:, 1:]
    north_face = mask[:-1, :] & ~mask[1:, :]
    south_face = ~mask[:-1, :] & mask[1:, :]
    out.append(np.where(east_face, vx, 0.0) * grid.dy)
    out.append(-np.where(west_face, vx, 0.0) * grid.dy)
    out.append(np.where(north_face, vy, 0.0) * grid.dx)
    out.append(-np.where(south_face, vy, 0.0) * grid.dx)
    net = sum(o.sum(axis=(1, 2)) for o in out)
    gross = sum(np.abs(o).sum(axis=(1, 2)) for o in out)
    return net, gross


class ForwardModel:
    """Batched time stepper with per-parameter caching of flow conductances.

    One call to :meth:`step` advances every member by ``dt`` and increments
    :attr:`steps` by one.
    """

    def __init__(self, grid: Grid2D, dt: float, fluid: FluidProps, rock: RockProps,
                 flow_bc: BoundarySpec, transport_bc: BoundarySpec | None = None,
                 diffusion: float = 0.0, settings: SolverSettings = SolverSettings()):
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.grid = grid
        self.dt = float(dt)
        self.fluid = fluid
        self.rock = rock
        self.flow_bc = flow_bc
        self.transport_bc = transport_bc
        self.diffusion = float(diffusion)
        self.settings = settings
        self.steps = 0
        self._flow_mask = flow_bc.dirichlet(grid)
        self._transport_mask = transport_bc.dirichlet(grid) if transport_bc is not None else None
        self._flow_key = None
        self._flow_cache = None
        self._transport_key = None
        self._transport_cache = None

    @property
    def has_transport(self) -> bool:
        return self.transport_bc is not None

    def _flow(self, logk):
        if self._flow_key is None or self._flow_key.shape != logk.shape \
                or not np.array_equal(self._flow_key, logk):
            tx, ty = _transmissibility(logk, self.grid, self.fluid)
            mask, vals = self._flow_mask
            storage = self.rock.specific_storage / self.dt
            st, b_const = _flow_system(tx, ty, storage, np.zeros(logk.shape), mask, vals)
            self._flow_key = logk.copy()
            self._flow_cache = (_prepare(st, self.settings), b_const, np.where(mask, 0.0, storage))
        return self._flow_cache

    def _transport(self, vel: FaceVelocity, shape):
        key = (vel.vx, vel.vy)
        if self._transport_key is None or self._transport_key[0].shape != vel.vx.shape \
                or not (np.array_equal(self._transport_key[0], vel.vx)
                        and np.array_equal(self._transport_key[1], vel.vy)):
            mask, vals = self._transport_mask
            st, b_const = _transport_system(vel, self.grid, self.rock.porosity, self.diffusion,
                                            self.dt, np.zeros(shape), mask, vals)
            storage = self.rock.porosity / self.dt
            self._transport_key = (vel.vx.copy(), vel.vy.copy())
            self._transport_cache = (_prepare(st, self.settings, transport=True), b_const, np.where(mask, 0.0, storage))
        return self._transport_cache

    def step(self, log_perm: np.ndarray, head: np.ndarray, conc: np.ndarray | None = None):
        """Advance ``(m, n_cells)`` head (and concentration) arrays by one step."""
        grid = self.grid
        logk = np.asarray(log_perm, dtype=float).reshape(-1, grid.ny, grid.nx)
        h = np.asarray(head, dtype=float).reshape(-1, grid.ny, grid.nx)
        system, b_const, storage = self._flow(logk)
        h_new = _picard(system, b_const + storage * h, h, self.settings)
        c_new = None
        if self.has_transport:
            if conc is None:
                raise ValueError("transport model needs a concentration field")
            c = np.asarray(conc, dtype=float).reshape(-1, grid.ny, grid.nx)
            vel = darcy_velocity(logk, h_new, self.fluid, grid)
            system, b_const, storage = self._transport(vel, c.shape)
            c_new = _picard(system, b_const + storage * c, c, self.settings).reshape(np.shape(conc))
        self.steps += 1
        return h_new.reshape(np.shape(head)), c_new

    def run(self, log_perm, state: DynamicState, n_steps: int, keep: str = "last"):
        """Apply :meth:`step` ``n_steps`` times; ``keep="all"`` returns every state."""
        states = [state]
        cur = state
        for _ in range(n_steps):
            h, c = self.step(log_perm, cur.head, cur.conc)
            cur = DynamicState(h, c)
            if keep == "all":
                states.append(cur)
        return states if keep == "all" else cur


def run_forward(model: ForwardModel, initial: DynamicState, perm, t_from: float, t_to: float):
    """Trajectory at step boundaries from ``t_from`` to ``t_to`` (seconds).

    Both times must lie on the model's uniform step grid. Parameters are not
    modified.
    """
    values, _ = _perm_array(perm, model.grid)
    n_from = t_from / model.dt
    n_to = t_to / model.dt
    if not (np.isclose(n_from, round(n_from)) and np.isclose(n_to, round(n_to))):
        raise ValueError("t_from and t_to must be multiples of the step length")
    if t_to < t_from:
        raise ValueError("t_to must not precede t_from")
    n = int(round(n_to)) - int(round(n_from))
    try:
        return model.run(values, initial, n, keep="all")
    except SolverDivergenceError as exc:
        raise SolverDivergenceError(f"forward run from t={t_from:g}s failed: {exc}",
                                    exc.residual, exc.members) from exc


def write_trajectory_csv(states, path, every: int = 1) -> None:
    """Snapshots as rows ``step, cell, h, c`` (single realization)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "cell", "h", "c"])
        for step, st in enumerate(states):
            if step % every:
                continue
            h = np.ravel(st.head)
            c = np.ravel(st.conc) if st.conc is not None else None
            for k in range(h.size):
                w.writerow([step, k, repr(float(h[k])), "" if c is None else repr(float(c[k]))])
