"""Paired subset-resampling comparison of RMSE distributions.

For two variants evaluated on the same experiments, the outperformance
probability is the fraction of random experiment subsets (size ``n_syn``,
drawn without replacement) on which variant ``a`` has the smaller mean RMSE.
Relative differences of the means are then split by significance to find
the smallest difference that can be trusted at a given ``n_syn``.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

__all__ = [
    "ComparisonResult",
    "SignificanceSummary",
    "rmse_mean",
    "subset_indices",
    "subset_means",
    "outperformance",
    "outperformance_probability",
    "quotient_and_reldiff",
    "compare_all",
    "significance_sets",
    "subset_mean_histogram",
    "MissingPairsError",
    "check_paired",
    "write_report",
]

SIGNIFICANCE = 0.95


class MissingPairsError(ValueError):
    """Some ``(variant, n_e, experiment)`` records needed for paired comparison are absent."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(map(str, self.missing[:20]))
        more = f" and {len(self.missing) - 20} more" if len(self.missing) > 20 else ""
        super().__init__(f"missing paired records (variant, n_e, experiment): {shown}{more}")


def _samples(dist) -> np.ndarray:
    x = np.asarray(dist, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty RMSE distribution")
    return x


def rmse_mean(dist) -> float:
    """Arithmetic mean of an RMSE sample."""
    return float(np.mean(_samples(dist)))


def subset_indices(n_samples: int, n_syn: int, n_resamples: int = 10_000, seed: int = 0) -> np.ndarray:
    """``(n_resamples, n_syn)`` index subsets, each drawn without replacement.

    The draws depend only on ``(seed, n_samples, n_syn)``, so every pair of
    variants compared at the same ``n_syn`` sees the same subsets.
    """
    if not 1 <= n_syn <= n_samples:
        raise ValueError(f"n_syn must be in [1, {n_samples}], got {n_syn}")
    rng = stream(seed, "subsets", n_samples, n_syn)
    if n_syn == n_samples:
        return np.tile(np.arange(n_samples), (n_resamples, 1))
    idx = np.empty((n_resamples, n_syn), dtype=np.int64)
    chunk = max(1, 2_000_000 // n_samples)
    for start in range(0, n_resamples, chunk):
        stop = min(n_resamples, start + chunk)
        keys = rng.random((stop - start, n_samples))
        idx[start:stop] = np.argpartition(keys, n_syn - 1, axis=1)[:, :n_syn]
    return idx


def subset_means(dist, idx: np.ndarray) -> np.ndarray:
    return _samples(dist)[idx].mean(axis=1)


@dataclass(frozen=True)
class Outperformance:
    p_a_lt_b: float
    p_b_lt_a: float
    ties: float


def outperformance(dist_a, dist_b, n_syn: int, n_resamples: int = 10_000, seed: int = 0,
                   paired: bool = True) -> Outperformance:
    """Fractions of subsets where ``a`` beats ``b``, ``b`` beats ``a``, and exact ties."""
    a, b = _samples(dist_a), _samples(dist_b)
    if paired and a.size != b.size:
        raise ValueError("paired comparison needs index-aligned samples of equal length")
    ia = subset_indices(a.size, n_syn, n_resamples, seed)
    ib = ia if paired else subset_indices(b.size, n_syn, n_resamples, seed + 1)
    ma, mb = a[ia].mean(axis=1), b[ib].mean(axis=1)
    lt = np.count_nonzero(ma < mb)
    gt = np.count_nonzero(ma > mb)
    return Outperformance(lt / n_resamples, gt / n_resamples, (n_resamples - lt - gt) / n_resamples)


def outperformance_probability(dist_a, dist_b, n_syn: int, n_resamples: int = 10_000, seed: int = 0,
                               paired: bool = True) -> float:
    """Probability that the mean RMSE of ``a`` over ``n_syn`` experiments is below that of ``b``."""
    return outperformance(dist_a, dist_b, n_syn, n_resamples, seed, paired).p_a_lt_b


def quotient_and_reldiff(dist_a, dist_b) -> tuple[float, float]:
    """``q = smaller mean / larger mean`` and ``d = 1 - q``."""
    ma, mb = rmse_mean(dist_a), rmse_mean(dist_b)
    if ma <= 0 or mb <= 0:
        raise ValueError("RMSE means must be positive")
    q = min(ma, mb) / max(ma, mb)
    return q, 1.0 - q


@dataclass(frozen=True)
class ComparisonResult:
    """Pair ordered so that ``a`` has the smaller (or equal) mean RMSE."""

    a: str
    b: str
    n_e: int
    n_syn: int
    p_a_lt_b: float
    q_a_lt_b: float
    d_a_lt_b: float
    ties: float = 0.0

    @property
    def significant(self) -> bool:
        return self.p_a_lt_b > SIGNIFICANCE


def compare_all(dists: dict[str, np.ndarray], n_e: int, n_syn: int, n_resamples: int = 10_000,
                seed: int = 0) -> list[ComparisonResult]:
    """Every unordered pair of variants at one ensemble size, with shared subsets."""
    names = sorted(dists)
    if not names:
        return []
    sizes = {len(dists[v]) for v in names}
    if len(sizes) != 1:
        raise ValueError("paired comparison needs equal sample counts for all variants")
    idx = subset_indices(sizes.pop(), n_syn, n_resamples, seed)
    means = {v: subset_means(dists[v], idx) for v in names}
    out = []
    for x, y in itertools.combinations(names, 2):
        if rmse_mean(dists[y]) < rmse_mean(dists[x]):
            x, y = y, x
        q, d = quotient_and_reldiff(dists[x], dists[y])
        lt = np.count_nonzero(means[x] < means[y])
        gt = np.count_nonzero(means[x] > means[y])
        out.append(ComparisonResult(x, y, n_e, n_syn, lt / n_resamples, q, d,
                                    (n_resamples - lt - gt) / n_resamples))
    return out


@dataclass
class SignificanceSummary:
    """Significant and insignificant relative differences at one ``(n_e, n_syn)``.

    ``manual`` is set when the smallest significant difference lies below the
    largest insignificant one; ``offending`` then lists the pairs involved.
    No threshold is chosen automatically in that case.
    """

    D_plus: list[float]
    D_minus: list[float]
    d_min_plus: float | None
    d_max_minus: float | None
    manual: bool
    offending: list[ComparisonResult] = field(default_factory=list)

    @property
    def threshold(self) -> float | None:
        """Smallest significant difference when unambiguous, else ``None``."""
        return None if self.manual else self.d_min_plus


def significance_sets(results: list[ComparisonResult], level: float = SIGNIFICANCE) -> SignificanceSummary:
    plus = [r for r in results if r.p_a_lt_b > level]
    minus = [r for r in results if r.p_a_lt_b <= level]
    d_min = min((r.d_a_lt_b for r in plus), default=None)
    d_max = max((r.d_a_lt_b for r in minus), default=None)
    manual = d_min is not None and d_max is not None and d_min < d_max
    offending = []
    if manual:
        offending = [r for r in plus if r.d_a_lt_b < d_max] + [r for r in minus if r.d_a_lt_b > d_min]
    return SignificanceSummary([r.d_a_lt_b for r in plus], [r.d_a_lt_b for r in minus], d_min, d_max,
                               manual, offending)


def subset_mean_histogram(dist, n_syn: int, bins=40, n_resamples: int = 10_000, seed: int = 0,
                          range_=None):
    """Histogram ``(counts, edges)`` of subset-mean RMSEs."""
    m = subset_means(dist, subset_indices(len(_samples(dist)), n_syn, n_resamples, seed))
    return np.histogram(m, bins=bins, range=range_)


# ---------------------------------------------------------------------------
# report files

def check_paired(table) -> None:
    """Raise :class:`MissingPairsError` unless every ``(scenario, n_e)`` group is a full product."""
    by_group: dict = {}
    for r in table:
        g = by_group.setdefault((r.scenario, r.n_e), {"variants": set(), "experiments": set(), "have": set()})
        g["variants"].add(r.variant)
        g["experiments"].add(r.experiment)
        g["have"].add((r.variant, r.experiment))
    missing = []
    for (scen, n_e), g in by_group.items():
        for v in g["variants"]:
            for i in g["experiments"]:
                if (v, i) not in g["have"]:
                    missing.append((v, n_e, i))
    if missing:
        raise MissingPairsError(missing)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in s)


def write_report(table, out_dir, nsyn=(1, 10, 100), n_resamples: int = 10_000, seed: int = 0,
                 bins: int = 40) -> list[Path]:
    """Emit every comparison table for an :class:`~enkfbench.harness.RmseTable`.

    Files (all CSV):

    ``means.csv``
        ``scenario, variant, n_e, n_samples, mean_rmse, n_diverged``
    ``quotients_<scenario>_ne<n_e>.csv``
        square matrix, entry ``(row, col)`` = mean(row) / mean(col)
    ``probabilities_<scenario>_ne<n_e>_nsyn<k>.csv``
        square matrix, entry ``(row, col)`` = P(mean of row < mean of col)
    ``comparisons.csv``
        ``scenario, n_e, n_syn, a, b, p_a_lt_b, q, d, ties, significant``
    ``thresholds.csv``
        one row per scenario, columns ``n_e=<n>/n_syn=<k>``; a cell holds the
        smallest significant relative difference, ``manual(<d_min>,<d_max>)``
        when thresholding is ambiguous or ``none`` if nothing is significant
    ``histograms_<scenario>_ne<n_e>_nsyn<k>.csv``
        ``variant, bin_lo, bin_hi, count`` of subset-mean RMSEs

    ``n_syn`` values exceeding the number of experiments are skipped.
    """
    check_paired(table)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    groups: dict = {}
    diverged: dict = {}
    for r in table:
        groups.setdefault(r.scenario, {}).setdefault(r.n_e, {}).setdefault(r.variant, []).append((r.experiment, r.rmse))
        diverged[(r.scenario, r.variant, r.n_e)] = diverged.get((r.scenario, r.variant, r.n_e), 0) + int(r.diverged)
    dists = {s: {n: {v: np.array([x for _, x in sorted(rows)]) for v, rows in vs.items()}
                 for n, vs in ns.items()} for s, ns in groups.items()}

    mean_rows = []
    for s in sorted(dists):
        for n in sorted(dists[s]):
            for v in sorted(dists[s][n]):
                x = dists[s][n][v]
                mean_rows.append([s, v, n, x.size, _fmt(rmse_mean(x)), diverged[(s, v, n)]])
    _write(out / "means.csv", ["scenario", "variant", "n_e", "n_samples", "mean_rmse", "n_diverged"], mean_rows)
    written.append(out / "means.csv")

    comp_rows = []
    thresholds: dict = {}
    for s in sorted(dists):
        for n in sorted(dists[s]):
            d = dists[s][n]
            names = sorted(d)
            means = {v: rmse_mean(d[v]) for v in names}
            p = out / f"quotients_{_slug(s)}_ne{n}.csv"
            _write(p, ["variant"] + names, [[a] + [_fmt(means[a] / means[b]) for b in names] for a in names])
            written.append(p)
            n_avail = len(next(iter(d.values())))
            for k in nsyn:
                if k > n_avail:
                    continue
                results = compare_all(d, n, k, n_resamples, seed)
                lookup = {}
                for r in results:
                    lookup[(r.a, r.b)] = r.p_a_lt_b
                    lookup[(r.b, r.a)] = 1.0 - r.p_a_lt_b - r.ties
                    comp_rows.append([s, n, k, r.a, r.b, _fmt(r.p_a_lt_b), _fmt(r.q_a_lt_b), _fmt(r.d_a_lt_b),
                                      _fmt(r.ties), int(r.significant)])
                p = out / f"probabilities_{_slug(s)}_ne{n}_nsyn{k}.csv"
                _write(p, ["variant"] + names,
                       [[a] + ["" if a == b else _fmt(lookup[(a, b)]) for b in names] for a in names])
                written.append(p)
                summary = significance_sets(results)
                if summary.manual:
                    cell = f"manual({summary.d_min_plus:.4f},{summary.d_max_minus:.4f})"
                elif summary.d_min_plus is None:
                    cell = "none"
                else:
                    cell = f"{summary.d_min_plus:.4f}"
                thresholds.setdefault(s, {})[f"n_e={n}/n_syn={k}"] = cell

                all_means = {v: subset_means(d[v], subset_indices(n_avail, k, n_resamples, seed)) for v in names}
                lo = min(m.min() for m in all_means.values())
                hi = max(m.max() for m in all_means.values())
                rows = []
                for v in names:
                    counts, edges = np.histogram(all_means[v], bins=bins, range=(lo, hi if hi > lo else lo + 1e-12))
                    rows += [[v, _fmt(edges[j]), _fmt(edges[j + 1]), int(counts[j])] for j in range(bins)]
                p = out / f"histograms_{_slug(s)}_ne{n}_nsyn{k}.csv"
                _write(p, ["variant", "bin_lo", "bin_hi", "count"], rows)
                written.append(p)

    _write(out / "comparisons.csv",
           ["scenario", "n_e", "n_syn", "a", "b", "p_a_lt_b", "q", "d", "ties", "significant"], comp_rows)
    written.append(out / "comparisons.csv")
    cols = sorted({c for row in thresholds.values() for c in row},
                  key=lambda c: tuple(int(x.split("=")[1]) for x in c.split("/")))
    _write(out / "thresholds.csv", ["scenario"] + cols,
           [[s] + [thresholds[s].get(c, "") for c in cols] for s in sorted(thresholds)])
    written.append(out / "thresholds.csv")
    return written
