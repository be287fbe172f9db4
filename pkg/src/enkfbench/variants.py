"""Ensemble Kalman filter variants for joint parameter and state estimation.

Every filter is an estimator whose :meth:`fit` consumes an
:class:`AssimilationProblem` and leaves the final analysis ensemble in
``ensemble_``. Hyperparameters follow the usual ``get_params`` /
``set_params`` protocol so a sweep can ``clone`` a template filter.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import lru_cache
import numbers

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_scalar

from .enkf import (
    Ensemble, Gain, MeasurementBatch, SingularInnovationError, analysis_update,
    kalman_gain, perturb_observations, state_indices,
)
from .forward import DynamicState, ForwardModel
from .grid import Grid2D
from .linsolve import SolverDivergenceError

__all__ = [
    "AssimilationProblem",
    "gaspari_cohn",
    "localized_gain",
    "hybrid_gain",
    "damped_update",
    "normal_score_transform",
    "normal_score_back",
    "normal_score_forward",
    "NormalScoreTable",
    "NormalScoreTransformer",
    "EnKFBase",
    "ClassicalEnKF",
    "DampedEnKF",
    "LocalEnKF",
    "HybridEnKF",
    "DualEnKF",
    "NormalScoreEnKF",
    "IterativeEnKF",
    "VariantConfig",
    "make_filter",
    "VARIANTS",
    "DEFAULT_STATIC_VARIANCE",
]

#: prior variances of the static covariance used by the hybrid filter
DEFAULT_STATIC_VARIANCE = {"param": 0.25, "head": 0.05 ** 2, "conc": 7.1e-3 ** 2}


@dataclass
class AssimilationProblem:
    """Everything a filter needs for one synthetic experiment.

    ``initial`` carries the prior parameters and the initial dynamic states
    at ``t = 0``; ``batches`` are ordered by model step; ``seed`` keys the
    observation perturbations.
    """

    model: ForwardModel
    initial: Ensemble
    batches: list[MeasurementBatch]
    seed: int = 0

    def __post_init__(self):
        steps = [b.step for b in self.batches]
        if any(s < 0 for s in steps) or steps != sorted(steps):
            raise ValueError("measurement batches must have non-negative, non-decreasing steps")
        if self.initial.n_cells != self.model.grid.n_cells:
            raise ValueError("ensemble and model grid disagree")
        if self.model.has_transport != (self.initial.conc is not None):
            raise ValueError("ensemble must carry a concentration block exactly when the model has transport")

    @property
    def grid(self) -> Grid2D:
        return self.model.grid


def _advance(model: ForwardModel, ens: Ensemble, n_steps: int, params=None) -> Ensemble:
    """Forecast the dynamic states ``n_steps`` ahead with fixed parameters."""
    params = ens.params if params is None else params
    h, c = ens.head, ens.conc
    for _ in range(n_steps):
        h, c = model.step(params, h, c)
    return Ensemble(params.copy(), h, c)


# ---------------------------------------------------------------------------
# localization

def gaspari_cohn(d, length_scale: float):
    """Fifth-order piecewise rational taper with support ``2 a``, ``a = sqrt(10/3) * length_scale``.

    ``length_scale`` is the distance at which a Gaussian of matching curvature
    at the origin would have dropped to ``exp(-1/2)``.
    """
    if not length_scale > 0:
        raise ValueError(f"length_scale must be positive, got {length_scale}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    r = d / (np.sqrt(10.0 / 3.0) * length_scale)
    out = np.zeros_like(r)
    near = r <= 1.0
    far = (r > 1.0) & (r < 2.0)
    x = r[near]
    out[near] = -0.25 * x**5 + 0.5 * x**4 + 0.625 * x**3 - 5.0 / 3.0 * x**2 + 1.0
    x = r[far]
    out[far] = x**5 / 12.0 - 0.5 * x**4 + 0.625 * x**3 + 5.0 / 3.0 * x**2 - 5.0 * x + 4.0 - 2.0 / (3.0 * x)
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=16)
def _cell_distances(grid: Grid2D, cells: tuple[int, ...]) -> np.ndarray:
    centers = grid.centers()
    d = cdist(centers, centers[list(cells)])
    d.setflags(write=False)
    return d


def localized_gain(ensemble: Ensemble, batch: MeasurementBatch, length_scale: float, grid: Grid2D) -> Gain:
    """Gain with ``P H^T`` tapered entry-wise by cell-center distance; ``H P H^T`` is left untapered."""
    base = kalman_gain(ensemble, batch)
    rho = gaspari_cohn(_cell_distances(grid, tuple(int(c) for c in batch.cells)), length_scale)
    rho = np.tile(rho, (len(ensemble.kinds), 1))
    return Gain(base.cov_xy * rho, base.innov)


def hybrid_gain(ensemble: Ensemble, batch: MeasurementBatch, beta: float,
                static_variance: dict | None = None) -> Gain:
    """Gain from ``beta * P_e + (1 - beta) * B`` with a diagonal static ``B``.

    ``B`` has one variance per variable kind. Only the observed rows of ``B H^T``
    are nonzero and ``H B H^T`` couples observations of the same state entry.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    static_variance = {**DEFAULT_STATIC_VARIANCE, **(static_variance or {})}
    base = kalman_gain(ensemble, batch)
    idx = state_indices(batch, ensemble)
    b_obs = np.array([static_variance[k] for k in batch.kinds], dtype=float)
    BHt = np.zeros_like(base.cov_xy)
    BHt[idx, np.arange(batch.n_obs)] = b_obs
    HBHt = np.where(idx[:, None] == idx[None, :], b_obs[:, None], 0.0)
    HPHt = base.innov - np.diag(batch.R)
    return Gain(beta * base.cov_xy + (1.0 - beta) * BHt,
                beta * HPHt + (1.0 - beta) * HBHt + np.diag(batch.R))


def damped_update(ensemble: Ensemble, batch: MeasurementBatch, d: np.ndarray, gain: Gain,
                  alpha: float) -> Ensemble:
    """Analysis whose parameter increment is scaled by ``alpha``; states get the full increment."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    X = ensemble.matrix()
    innov = np.asarray(d) - X[state_indices(batch, ensemble)].T
    dX = gain.apply(innov)
    dX[: ensemble.n_cells] *= alpha
    return ensemble.with_matrix(X + dX)


# ---------------------------------------------------------------------------
# normal-score transform

SPREADS = ("range", "std", "gap", "spacing")


@dataclass
class NormalScoreTable:
    """Per-row lookup between original values and cumulative probabilities.

    ``nodes`` has shape ``(n_rows, n + 2)``: the sorted sample plus one
    support point below and above. ``g`` holds the matching cumulative
    probabilities, ``0`` and ``1`` at the support points.
    """

    nodes: np.ndarray
    g: np.ndarray

    @property
    def n(self) -> int:
        return self.g.size - 2


def _quantile_nodes(n: int):
    z = ndtri((np.arange(1, n + 1) - 0.5) / n)
    return z, np.concatenate([[0.0], ndtr(z), [1.0]])


def normal_score_transform(x, spread: str = "spacing"):
    """Rank-based normal scores of each row of ``x`` (shape ``(n_rows, n)`` or ``(n,)``).

    The member of rank ``i`` (1-based, ties broken by position) maps to
    ``Phi^{-1}((i - 0.5) / n)``. Returns ``(z, table)``.
    """
    if spread not in SPREADS:
        raise ValueError(f"spread must be one of {SPREADS}, got {spread!r}")
    x = np.asarray(x, dtype=float)
    one_d = x.ndim == 1
    x2 = np.atleast_2d(x)
    if not np.all(np.isfinite(x2)):
        raise ValueError("normal-score transform needs finite values")
    n_rows, n = x2.shape
    if n < 2:
        raise ValueError("need at least two samples per row")
    order = np.argsort(x2, axis=1, kind="stable")
    sorted_x = np.take_along_axis(x2, order, axis=1)
    z_nodes, g = _quantile_nodes(n)
    z = np.empty_like(x2)
    np.put_along_axis(z, order, np.broadcast_to(z_nodes, x2.shape), axis=1)

    lo, hi = sorted_x[:, 0], sorted_x[:, -1]
    if spread == "range":
        below = above = 3.0 * (hi - lo)
    elif spread == "std":
        below = above = 3.0 * x2.std(axis=1, ddof=1)
    elif spread == "gap":
        below = 3.0 * (sorted_x[:, 1] - lo)
        above = 3.0 * (hi - sorted_x[:, -2])
    else:
        below = above = 3.0 * (hi - lo) / (n - 1)
    nodes = np.concatenate([(lo - below)[:, None], sorted_x, (hi + above)[:, None]], axis=1)
    table = NormalScoreTable(nodes, g)
    return (z[0] if one_d else z), table


def normal_score_back(z, table: NormalScoreTable):
    """Map normal scores back to original units by linear interpolation in ``Phi(z)``.

    Values beyond the support points are clamped to them. Scores produced
    by :func:`normal_score_transform` reproduce the original sample exactly.
    """
    z = np.asarray(z, dtype=float)
    one_d = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[0] != table.nodes.shape[0]:
        raise ValueError("row count differs from the table")
    G = ndtr(z2)
    g = table.g
    k = np.clip(np.searchsorted(g, G, side="right") - 1, 0, g.size - 2)
    g0, g1 = g[k], g[k + 1]
    frac = np.clip((G - g0) / (g1 - g0), 0.0, 1.0)
    x0 = np.take_along_axis(table.nodes, k, axis=1)
    x1 = np.take_along_axis(table.nodes, k + 1, axis=1)
    x = np.where(frac == 0.0, x0, x0 + frac * (x1 - x0))
    return x[0] if one_d else x


def normal_score_forward(x, table: NormalScoreTable, rows=None, z_clip: float = 5.0):
    """Transform arbitrary values through an existing table.

    ``x`` has shape ``(n_rows, k)``; ``rows`` picks the table rows to use
    (default: all, in order). Scores are limited to ``[-z_clip, z_clip]``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rows = np.arange(table.nodes.shape[0]) if rows is None else np.asarray(rows)
    if x.shape[0] != rows.size:
        raise ValueError("one row of values per table row is required")
    lo, hi = ndtr(-z_clip), ndtr(z_clip)
    out = np.empty_like(x)
    for r, row in enumerate(rows):
        G = np.interp(x[r], table.nodes[row], table.g)
        out[r] = ndtri(np.clip(G, lo, hi))
    return out


class NormalScoreTransformer(TransformerMixin, BaseEstimator):
    """Column-wise normal-score transformer.

    ``fit_transform`` returns exact rank quantiles; ``transform`` maps new
    samples through the fitted tables and ``inverse_transform`` maps scores
    back.
    """

    def __init__(self, spread: str = "spacing", z_clip: float = 5.0):
        self.spread = spread
        self.z_clip = z_clip

    def _validate(self):
        if self.spread not in SPREADS:
            raise ValueError(f"spread must be one of {SPREADS}, got {self.spread!r}")
        check_scalar(self.z_clip, "z_clip", numbers.Real, min_val=0.0, include_boundaries="neither")

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def fit_transform(self, X, y=None):
        self._validate()
        X = check_array(X, ensure_min_samples=2)
        z, self.table_ = normal_score_transform(X.T, self.spread)
        self.n_features_in_ = X.shape[1]
        return z.T

    def transform(self, X):
        check_is_fitted(self, "table_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return normal_score_forward(X.T, self.table_, z_clip=self.z_clip).T

    def inverse_transform(self, Z):
        check_is_fitted(self, "table_")
        Z = check_array(Z)
        return normal_score_back(Z.T, self.table_).T


# ---------------------------------------------------------------------------
# filters

class EnKFBase(BaseEstimator):
    """Sequential stochastic EnKF with a per-variant analysis step.

    After :meth:`fit`:

    ``ensemble_``
        last analysis ensemble (the last valid one if the run failed)
    ``n_forward_steps_``
        ensemble-wide model steps spent
    ``diverged_``
        whether a solve or analysis failed; ``failure_`` holds the message
    """

    on_failure: str

    def _analyze(self, ens: Ensemble, batch: MeasurementBatch, d: np.ndarray, problem) -> Ensemble:
        return analysis_update(ens, batch, d, kalman_gain(ens, batch))

    def _check_params(self):
        if self.on_failure not in ("flag", "raise"):
            raise ValueError(f"on_failure must be 'flag' or 'raise', got {self.on_failure!r}")

    def _loop(self, problem: AssimilationProblem):
        model = problem.model
        ens = problem.initial.copy()
        step = 0
        for batch in problem.batches:
            ens = _advance(model, ens, batch.step - step)
            step = batch.step
            d = perturb_observations(batch, ens.n_members, problem.seed)
            ens = self._accept(self._analyze(ens, batch, d, problem))

    def _accept(self, ens: Ensemble) -> Ensemble:
        if not ens.is_finite():
            raise FloatingPointError("analysis produced non-finite values")
        self.ensemble_ = ens
        self.n_analyses_ += 1
        return ens

    def fit(self, problem: AssimilationProblem, y=None):
        """Run the filter over every measurement batch of ``problem``."""
        self._check_params()
        if not isinstance(problem, AssimilationProblem):
            raise TypeError("fit expects an AssimilationProblem")
        start = problem.model.steps
        self.ensemble_ = problem.initial.copy()
        self.n_analyses_ = 0
        self.diverged_ = False
        self.failure_ = None
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                self._loop(problem)
        except (SolverDivergenceError, np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
            if self.on_failure == "raise":
                raise
            self.diverged_ = True
            self.failure_ = f"{type(exc).__name__}: {exc}"
        self.n_forward_steps_ = problem.model.steps - start
        return self

    def predict(self, X=None):
        """Ensemble-mean log10 permeability per cell."""
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.mean_params()


class ClassicalEnKF(EnKFBase):
    """Stochastic EnKF with the raw ensemble covariance."""

    def __init__(self, on_failure: str = "flag"):
        self.on_failure = on_failure


class DampedEnKF(EnKFBase):
    """Parameter increments scaled by ``alpha``."""

    def __init__(self, alpha: float = 0.1, on_failure: str = "flag"):
        self.alpha = alpha
        self.on_failure = on_failure

    def _check_params(self):
        super()._check_params()
        check_scalar(self.alpha, "alpha", numbers.Real, min_val=0.0, max_val=1.0,
                     include_boundaries="right")

    def _analyze(self, ens, batch, d, problem):
        return damped_update(ens, batch, d, kalman_gain(ens, batch), self.alpha)


class LocalEnKF(EnKFBase):
    """Gaspari-Cohn tapering of the state-observation covariance."""

    def __init__(self, length_scale: float = 150.0, on_failure: str = "flag"):
        self.length_scale = length_scale
        self.on_failure = on_failure

    def _check_params(self):
        super()._check_params()
        check_scalar(self.length_scale, "length_scale", numbers.Real, min_val=0.0,
                     include_boundaries="neither")

    def _analyze(self, ens, batch, d, problem):
        return analysis_update(ens, batch, d, localized_gain(ens, batch, self.length_scale, problem.grid))


class HybridEnKF(EnKFBase):
    """Blend of ensemble and static diagonal covariances."""

    def __init__(self, beta: float = 0.5, static_variance: dict | None = None, on_failure: str = "flag"):
        self.beta = beta
        self.static_variance = static_variance
        self.on_failure = on_failure

    def _check_params(self):
        super()._check_params()
        check_scalar(self.beta, "beta", numbers.Real, min_val=0.0, max_val=1.0)
        for k, v in (self.static_variance or {}).items():
            if k not in DEFAULT_STATIC_VARIANCE or not v > 0:
                raise ValueError(f"invalid static variance {k!r}: {v!r}")

    def _analyze(self, ens, batch, d, problem):
        return analysis_update(ens, batch, d, hybrid_gain(ens, batch, self.beta, self.static_variance))


class NormalScoreEnKF(EnKFBase):
    """Analysis carried out on marginal normal scores of every state entry."""

    def __init__(self, spread: str = "spacing", z_clip: float = 5.0, on_failure: str = "flag"):
        self.spread = spread
        self.z_clip = z_clip
        self.on_failure = on_failure

    def _check_params(self):
        super()._check_params()
        NormalScoreTransformer(self.spread, self.z_clip)._validate()

    def _analyze(self, ens, batch, d, problem):
        X = ens.matrix()
        Z, table = normal_score_transform(X, self.spread)
        idx = state_indices(batch, ens)
        d_t = normal_score_forward(np.asarray(d).T, table, rows=idx, z_clip=self.z_clip).T
        r_t = np.maximum(d_t.var(axis=0, ddof=1), 1e-12)
        z_batch = MeasurementBatch(batch.cells, batch.kinds, np.zeros(batch.n_obs), np.sqrt(r_t),
                                   batch.time_index, batch.step)
        z_ens = ens.with_matrix(Z)
        Z_a = analysis_update(z_ens, z_batch, d_t, kalman_gain(z_ens, z_batch)).matrix()
        return ens.with_matrix(normal_score_back(Z_a, table))


def dual_step(model: ForwardModel, previous: Ensemble, batch: MeasurementBatch, d: np.ndarray,
              n_steps: int) -> Ensemble:
    """One cycle of the two-stage filter.

    Forecast from ``previous``, update the parameters only, rerun the
    forecast from the previous analysis states with the new parameters and
    finally update the states only. Both stages use the same ``d``.
    """
    forecast = _advance(model, previous, n_steps)
    gain = kalman_gain(forecast, batch)
    n = forecast.n_cells
    Xf = forecast.matrix()
    innov = np.asarray(d) - Xf[state_indices(batch, forecast)].T
    params = forecast.params + (Gain(gain.cov_xy[:n], gain.innov).apply(innov)).T
    rerun = _advance(model, previous, n_steps, params=params)
    gain = kalman_gain(rerun, batch)
    Xr = rerun.matrix()
    innov = np.asarray(d) - Xr[state_indices(batch, rerun)].T
    Xr[n:] += Gain(gain.cov_xy[n:], gain.innov).apply(innov)
    return rerun.with_matrix(Xr)


class DualEnKF(EnKFBase):
    """Parameter update, forecast rerun, then state update at each assimilation time."""

    def __init__(self, on_failure: str = "flag"):
        self.on_failure = on_failure

    def _loop(self, problem):
        ens = problem.initial.copy()
        step = 0
        for batch in problem.batches:
            d = perturb_observations(batch, ens.n_members, problem.seed)
            ens = self._accept(dual_step(problem.model, ens, batch, d, batch.step - step))
            step = batch.step


def iterative_run(model: ForwardModel, initial: Ensemble, params: np.ndarray, step: int) -> Ensemble:
    """Rerun from the initial dynamic states to ``step`` with the given parameters."""
    return _advance(model, initial, step, params=params)


class IterativeEnKF(EnKFBase):
    """Restart-from-zero filter: each analysis follows a full rerun with the current parameters."""

    def __init__(self, on_failure: str = "flag"):
        self.on_failure = on_failure

    def _loop(self, problem):
        params = problem.initial.params.copy()
        for batch in problem.batches:
            forecast = iterative_run(problem.model, problem.initial, params, batch.step)
            d = perturb_observations(batch, forecast.n_members, problem.seed)
            ens = self._accept(analysis_update(forecast, batch, d, kalman_gain(forecast, batch)))
            params = ens.params


VARIANTS = {
    "classical": ClassicalEnKF,
    "damped": DampedEnKF,
    "local": LocalEnKF,
    "hybrid": HybridEnKF,
    "dual": DualEnKF,
    "normal_score": NormalScoreEnKF,
    "iterative": IterativeEnKF,
}


@dataclass(frozen=True)
class VariantConfig:
    """Variant name plus hyperparameter overrides, e.g. ``VariantConfig("local", {"length_scale": 25.0})``."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; choose from {sorted(VARIANTS)}")
        valid = set(VARIANTS[self.kind]().get_params()) - {"on_failure"}
        bad = set(self.params) - valid
        if bad:
            raise ValueError(f"variant {self.kind!r} has no parameter(s) {sorted(bad)}")

    @property
    def label(self) -> str:
        """Stable identifier used in result tables."""
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"

    def to_dict(self) -> dict:
        return asdict(self)

    def __hash__(self):
        return hash(self.label)


def _fmt(v) -> str:
    if isinstance(v, dict):
        return "{" + ",".join(f"{k}:{_fmt(x)}" for k, x in sorted(v.items())) + "}"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def make_filter(config: VariantConfig, **kwargs) -> EnKFBase:
    """Fresh filter instance for ``config``."""
    return VARIANTS[config.kind](**{**config.params, **kwargs})
