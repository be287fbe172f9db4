"""Augmented-state ensembles, the measurement model and the stochastic EnKF analysis."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np
import scipy.linalg as la
from scipy.special import ndtri

from .rng import stream

__all__ = [
    "KINDS",
    "Ensemble",
    "MeasurementBatch",
    "Gain",
    "SingularInnovationError",
    "state_indices",
    "apply_H",
    "perturb_observations",
    "kalman_gain",
    "analysis_update",
    "save_ensemble",
    "load_ensemble",
]

#: block order of the augmented state vector
KINDS = ("param", "head", "conc")


class SingularInnovationError(np.linalg.LinAlgError):
    """``H P H^T + R`` is not positive definite."""


@dataclass
class Ensemble:
    """Ensemble of augmented states, one row per member.

    ``params`` holds log10 permeability, ``head`` and ``conc`` the dynamic
    states; all arrays are ``(n_e, n_cells)``. ``conc`` is ``None`` for
    flow-only models.
    """

    params: np.ndarray
    head: np.ndarray
    conc: np.ndarray | None = None

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.head = np.atleast_2d(np.asarray(self.head, dtype=float))
        if self.conc is not None:
            self.conc = np.atleast_2d(np.asarray(self.conc, dtype=float))
        shapes = {a.shape for a in self.blocks()}
        if len(shapes) != 1:
            raise ValueError(f"ensemble blocks differ in shape: {shapes}")
        if self.n_members < 2:
            raise ValueError("an ensemble needs at least two members")

    def blocks(self):
        return [b for b in (self.params, self.head, self.conc) if b is not None]

    @property
    def kinds(self) -> tuple[str, ...]:
        return KINDS if self.conc is not None else KINDS[:2]

    @property
    def n_members(self) -> int:
        return self.params.shape[0]

    @property
    def n_cells(self) -> int:
        return self.params.shape[1]

    @property
    def n_state(self) -> int:
        return self.n_cells * len(self.kinds)

    def matrix(self) -> np.ndarray:
        """State matrix ``(n_s, n_e)``: columns are members, blocks stacked param/head/conc."""
        return np.concatenate(self.blocks(), axis=1).T

    def with_matrix(self, X: np.ndarray) -> "Ensemble":
        n = self.n_cells
        X = np.asarray(X)
        parts = [np.ascontiguousarray(X[k * n:(k + 1) * n].T) for k in range(len(self.kinds))]
        return Ensemble(*parts) if len(parts) == 3 else Ensemble(parts[0], parts[1])

    def copy(self) -> "Ensemble":
        return Ensemble(self.params.copy(), self.head.copy(), None if self.conc is None else self.conc.copy())

    def mean_params(self) -> np.ndarray:
        return self.params.mean(axis=0)

    def member(self, i: int) -> dict:
        """One realization as a mapping kind -> per-cell array."""
        return {k: b[i] for k, b in zip(self.kinds, self.blocks())}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(b)) for b in self.blocks())


@dataclass
class MeasurementBatch:
    """Observations at one assimilation time.

    ``cells`` are flat grid indices, ``kinds`` the observed variable per
    entry (``"head"`` or ``"conc"``), ``y`` the observed values and
    ``noise_std`` the measurement standard deviations; ``R = diag(noise_std**2)``.
    ``step`` is the model step at which the batch applies and ``time_index``
    its position in the schedule.
    """

    cells: np.ndarray
    kinds: tuple[str, ...]
    y: np.ndarray
    noise_std: np.ndarray
    time_index: int = 0
    step: int = 0

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=int).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        n_m = self.cells.size
        if isinstance(self.kinds, str):
            self.kinds = (self.kinds,) * n_m
        self.kinds = tuple(self.kinds)
        self.noise_std = np.broadcast_to(np.asarray(self.noise_std, dtype=float), (n_m,)).copy()
        if n_m < 1:
            raise ValueError("a measurement batch needs at least one observation")
        if self.y.size != n_m or len(self.kinds) != n_m:
            raise ValueError("cells, kinds and y must have equal length")
        if any(k not in ("head", "conc") for k in self.kinds):
            raise ValueError(f"observed kinds must be 'head' or 'conc', got {self.kinds}")
        if np.any(self.noise_std <= 0) or not np.all(np.isfinite(self.noise_std)):
            raise ValueError("noise standard deviations must be positive and finite")
        if np.any(self.cells < 0):
            raise ValueError("observation cells must be non-negative")

    @property
    def n_obs(self) -> int:
        return self.cells.size

    @property
    def R(self) -> np.ndarray:
        return self.noise_std ** 2


def state_indices(batch: MeasurementBatch, ensemble: Ensemble) -> np.ndarray:
    """Rows of the augmented state vector selected by ``H``."""
    kinds = ensemble.kinds
    n = ensemble.n_cells
    if np.any(batch.cells >= n):
        raise ValueError("observation cell outside the grid")
    idx = np.empty(batch.n_obs, dtype=int)
    for m, (cell, kind) in enumerate(zip(batch.cells, batch.kinds)):
        if kind not in kinds:
            raise ValueError(f"ensemble has no {kind!r} block to observe")
        idx[m] = kinds.index(kind) * n + cell
    return idx


def apply_H(ensemble: Ensemble, batch: MeasurementBatch) -> np.ndarray:
    """Predicted observations, shape ``(n_e, n_m)``."""
    return ensemble.matrix()[state_indices(batch, ensemble)].T


def perturb_observations(batch: MeasurementBatch, n_e: int, seed: int) -> np.ndarray:
    """Perturbed observations ``d_i = y + eps_i``, shape ``(n_e, n_m)``.

    All members share the stream ``(seed, "obs", time_index)``; member ``i``
    reads uniforms ``i*n_m .. (i+1)*n_m - 1`` (one 64-bit word each) and maps
    them through the normal quantile function. A member's perturbation is
    therefore shared across filter variants and ensemble sizes.
    """
    u = stream(seed, "obs", batch.time_index).random((n_e, batch.n_obs))
    eps = ndtri(np.maximum(u, 2.0 ** -60))
    return batch.y + eps * batch.noise_std


@dataclass
class Gain:
    """Kalman gain ``K = cov_xy @ inv(innov)`` kept in factored form.

    ``cov_xy`` is ``P H^T`` (``n_s x n_m``), ``innov`` is ``H P H^T + R``.
    """

    cov_xy: np.ndarray
    innov: np.ndarray
    _factor: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if not np.any(self.cov_xy):
            # no state-observation covariance: the gain is zero whatever innov is
            self._factor = None
            return
        try:
            self._factor = la.cho_factor(self.innov, lower=True, check_finite=True)
        except (la.LinAlgError, ValueError) as exc:
            raise SingularInnovationError(f"innovation covariance is not positive definite: {exc}") from exc

    def apply(self, innovations: np.ndarray) -> np.ndarray:
        """State increments for member innovations ``(n_e, n_m)``; returns ``(n_s, n_e)``."""
        innovations = np.asarray(innovations)
        if self._factor is None:
            return np.zeros((self.cov_xy.shape[0], innovations.shape[0]))
        w = la.cho_solve(self._factor, innovations.T)
        return self.cov_xy @ w

    def matrix(self) -> np.ndarray:
        if self._factor is None:
            return np.zeros_like(self.cov_xy)
        return la.cho_solve(self._factor, self.cov_xy.T).T


def _anomalies(ensemble: Ensemble):
    X = ensemble.matrix()
    return X, X - X.mean(axis=1, keepdims=True)


def kalman_gain(ensemble: Ensemble, batch: MeasurementBatch) -> Gain:
    """Ensemble gain from anomalies, never forming the full ``P_e``."""
    X, A = _anomalies(ensemble)
    HA = A[state_indices(batch, ensemble)]
    scale = 1.0 / (ensemble.n_members - 1)
    return Gain(A @ HA.T * scale, HA @ HA.T * scale + np.diag(batch.R))


def analysis_update(ensemble: Ensemble, batch: MeasurementBatch, d: np.ndarray, gain: Gain) -> Ensemble:
    """``x_i^a = x_i^f + K (d_i - H x_i^f)`` for every member; returns a new ensemble."""
    X = ensemble.matrix()
    innov = np.asarray(d) - X[state_indices(batch, ensemble)].T
    return ensemble.with_matrix(X + gain.apply(innov))


def save_ensemble(ensemble: Ensemble, directory) -> None:
    """Binary column dump (one ``.npy`` per block) plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind, block in zip(ensemble.kinds, ensemble.blocks()):
        np.save(directory / f"{kind}.npy", block.astype("<f8"))
    (directory / "manifest.json").write_text(json.dumps(
        {"kinds": list(ensemble.kinds), "n_members": ensemble.n_members, "n_cells": ensemble.n_cells}, indent=2))


def load_ensemble(directory) -> Ensemble:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blocks = [np.load(directory / f"{k}.npy") for k in manifest["kinds"]]
    return Ensemble(*blocks)
