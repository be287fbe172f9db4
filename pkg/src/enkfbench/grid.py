"""Uniform 2D grids and MultiGaussian log10-permeability fields."""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as la
from scipy.spatial.distance import cdist

from .rng import stream

__all__ = [
    "Grid2D",
    "FieldStats",
    "LogPermField",
    "DegenerateCovarianceError",
    "spherical_correlation",
    "build_covariance",
    "covariance_factor",
    "sample_field",
    "sample_fields",
    "write_field_csv",
    "read_field_csv",
    "write_field_binary",
    "read_field_binary",
]


class DegenerateCovarianceError(np.linalg.LinAlgError):
    """Covariance matrix could not be factorized, even with diagonal jitter."""


@dataclass(frozen=True)
class Grid2D:
    """Cell-centred uniform grid; cell ``(i, j)`` has flat index ``j * nx + i``."""

    nx: int
    ny: int
    dx: float
    dy: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError(f"cell sizes must be positive, got dx={self.dx}, dy={self.dy}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(ny, nx)`` of a field reshaped row-major."""
        return (self.ny, self.nx)

    def index(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise IndexError(f"cell ({i}, {j}) outside {self.nx}x{self.ny} grid")
        return j * self.nx + i

    def cell_of(self, x: float, y: float) -> int:
        """Flat index of the cell containing the physical point ``(x, y)``."""
        i = int(math.floor(x / self.dx))
        j = int(math.floor(y / self.dy))
        return self.index(i, j)

    def centers(self) -> np.ndarray:
        """Cell-centre coordinates, shape ``(n_cells, 2)``."""
        ii, jj = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        return np.column_stack([(ii.ravel() + 0.5) * self.dx, (jj.ravel() + 0.5) * self.dy])


@dataclass(frozen=True)
class FieldStats:
    """Mean, standard deviation and correlation length of a log10-permeability field.

    ``model`` selects the correlation function: ``"spherical"`` (cubic, the
    default), ``"spherical_quadratic"`` (the bracketed quadratic variant, kept for
    sensitivity runs) or ``"gaussian"``.
    """

    mean: float
    stddev: float
    corr_length: float
    model: str = "spherical"

    def __post_init__(self):
        if not self.stddev >= 0:
            raise ValueError(f"stddev must be >= 0, got {self.stddev}")
        if not self.corr_length > 0:
            raise ValueError(f"corr_length must be > 0, got {self.corr_length}")
        if self.model not in _CORRELATION_MODELS:
            raise ValueError(f"unknown correlation model {self.model!r}")


@dataclass(frozen=True, eq=False)
class LogPermField:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_cells,):
            raise ValueError(f"expected {self.grid.n_cells} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def permeability(self) -> np.ndarray:
        """Permeability in m^2."""
        return 10.0 ** self.values


def _check_distance(d, a):
    d = np.asarray(d, dtype=float)
    if not (np.isfinite(a) and a > 0):
        raise ValueError(f"correlation length must be finite and > 0, got {a}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and non-negative")
    return d


def spherical_correlation(d, a: float, quadratic: bool = False):
    """Spherical correlation ``1 - 1.5 u + 0.5 u**3`` for ``u = d/a < 1``, else 0.

    With ``quadratic=True`` the last term is ``0.5 u**2`` instead.
    """
    d = _check_distance(d, a)
    u = d / a
    tail = u * u if quadratic else u ** 3
    rho = np.where(u < 1.0, 1.0 - 1.5 * u + 0.5 * tail, 0.0)
    return float(rho) if rho.ndim == 0 else rho


def _gaussian_correlation(d, a):
    d = _check_distance(d, a)
    return np.exp(-((d / a) ** 2))


_CORRELATION_MODELS = {
    "spherical": lambda d, a: spherical_correlation(d, a),
    "spherical_quadratic": lambda d, a: spherical_correlation(d, a, quadratic=True),
    "gaussian": _gaussian_correlation,
}


def build_covariance(grid: Grid2D, stats: FieldStats) -> np.ndarray:
    """Dense cell-to-cell covariance ``stddev**2 * rho(distance)``."""
    xy = grid.centers()
    dist = cdist(xy, xy)
    rho = np.asarray(_CORRELATION_MODELS[stats.model](dist, stats.corr_length))
    cov = stats.stddev ** 2 * rho
    # cdist is symmetric already; enforce it bitwise
    return 0.5 * (cov + cov.T)


@functools.lru_cache(maxsize=8)
def covariance_factor(grid: Grid2D, stats: FieldStats) -> np.ndarray:
    """Lower Cholesky factor of the field covariance (cached, read-only).

    A jitter of ``1e-10 * stddev**2`` is added to the diagonal.
    """
    n = grid.n_cells
    if stats.stddev == 0:
        factor = np.zeros((n, n))
    else:
        cov = build_covariance(grid, stats)
        cov[np.diag_indices(n)] += 1e-10 * stats.stddev ** 2
        try:
            factor = la.cholesky(cov, lower=True, check_finite=False)
        except la.LinAlgError as exc:
            raise DegenerateCovarianceError(
                f"covariance for {stats} on {grid.nx}x{grid.ny} grid is not positive "
                "definite after 1e-10*stddev^2 jitter; try a larger jitter or another model"
            ) from exc
    factor.setflags(write=False)
    return factor


def sample_fields(grid: Grid2D, stats: FieldStats, seed: int, members, purpose: str = "field") -> np.ndarray:
    """Stack of fields, one per member index, shape ``(len(members), n_cells)``.

    Member ``k`` always uses the stream ``(seed, purpose, k)``, so a member's
    field does not depend on which other members are drawn alongside it.
    """
    members = list(members)
    z = np.empty((len(members), grid.n_cells))
    for row, k in enumerate(members):
        z[row] = stream(seed, purpose, k).standard_normal(grid.n_cells)
    factor = covariance_factor(grid, stats)
    # row-by-row products keep each member bitwise independent of the batch
    out = np.empty_like(z)
    for row in range(len(z)):
        out[row] = factor @ z[row]
    return stats.mean + out


def sample_field(grid: Grid2D, stats: FieldStats, seed: int) -> LogPermField:
    """One MultiGaussian realization ``mean + L z``; bitwise reproducible per seed."""
    values = sample_fields(grid, stats, seed, [0])[0]
    return LogPermField(grid, values)


def write_field_csv(field: LogPermField, path) -> None:
    xy = field.grid.centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "x", "y", "log10K"])
        for k, ((x, y), v) in enumerate(zip(xy, field.values)):
            w.writerow([k, repr(float(x)), repr(float(y)), repr(float(v))])


def read_field_csv(path, grid: Grid2D) -> LogPermField:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    values = np.empty(len(rows))
    for row in rows:
        values[int(row["cell"])] = float(row["log10K"])
    return LogPermField(grid, values)


def write_field_binary(field: LogPermField, path) -> None:
    """Little-endian float64 column dump with a grid header, via ``np.savez``."""
    g = field.grid
    np.savez(Path(path), grid=np.array([g.nx, g.ny, g.dx, g.dy], dtype="<f8"),
             values=field.values.astype("<f8"))


def read_field_binary(path) -> LogPermField:
    with np.load(Path(path)) as data:
        nx, ny, dx, dy = data["grid"]
        return LogPermField(Grid2D(int(nx), int(ny), float(dx), float(dy)), data["values"])
