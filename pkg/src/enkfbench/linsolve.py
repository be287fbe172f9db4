"""Batched BiCGStab for 5-point stencil systems on a 2D grid.

A system is stored as five coefficient arrays of shape ``(m, ny, nx)``, one
batch entry per ensemble member. Row ``(j, i)`` reads::

    C x[j,i] + W x[j,i-1] + E x[j,i+1] + S x[j-1,i] + N x[j+1,i] = b[j,i]

Coefficients that would point outside the grid must be zero. The Krylov
iteration runs member by member inside a compiled kernel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["Stencil5", "PreparedSystem", "SolverDivergenceError", "bicgstab", "PRECONDITIONERS"]

PRECONDITIONERS = {"jacobi": 0, "ilu0": 1}


class SolverDivergenceError(RuntimeError):
    """Iterative solve failed to reach the requested tolerance."""

    def __init__(self, message: str, residual=None, members=None):
        super().__init__(message)
        self.residual = residual
        self.members = members


@dataclass
class Stencil5:
    C: np.ndarray
    W: np.ndarray
    E: np.ndarray
    S: np.ndarray
    N: np.ndarray

    @property
    def shape(self):
        return self.C.shape

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.C * x
        y[:, :, 1:] += self.W[:, :, 1:] * x[:, :, :-1]
        y[:, :, :-1] += self.E[:, :, :-1] * x[:, :, 1:]
        y[:, 1:, :] += self.S[:, 1:, :] * x[:, :-1, :]
        y[:, :-1, :] += self.N[:, :-1, :] * x[:, 1:, :]
        return y

    def to_dense(self, member: int = 0) -> np.ndarray:
        """Dense matrix of one batch entry (tests and debugging only)."""
        _, ny, nx = self.shape
        n = nx * ny
        A = np.zeros((n, n))
        rows = np.arange(n)
        A[rows, rows] = self.C[member].ravel()
        w, e = self.W[member].ravel(), self.E[member].ravel()
        s, nn = self.S[member].ravel(), self.N[member].ravel()
        A[rows[1:], rows[1:] - 1] = w[1:]
        A[rows[:-1], rows[:-1] + 1] = e[:-1]
        A[rows[nx:], rows[nx:] - nx] = s[nx:]
        A[rows[:-nx], rows[:-nx] + nx] = nn[:-nx]
        return A


@numba.njit(cache=True)
def _matvec(C, W, E, S, N, x, nx, out):
    # arrays are (n_cells, m): the member axis is innermost so sweeps vectorize
    n, m = x.shape
    for k in range(n):
        for q in range(m):
            acc = C[k, q] * x[k, q]
            if k >= 1:
                acc += W[k, q] * x[k - 1, q]
            if k + 1 < n:
                acc += E[k, q] * x[k + 1, q]
            if k >= nx:
                acc += S[k, q] * x[k - nx, q]
            if k + nx < n:
                acc += N[k, q] * x[k + nx, q]
            out[k, q] = acc


@numba.njit(cache=True)
def _ilu0_diag(C, W, E, S, N, nx, relax, dinv):
    """Inverse pivots of the 5-point (modified) ILU(0) factorization (D+L) D^-1 (D+U).

    ``relax`` in [0, 1] lumps that fraction of the dropped fill-in onto the
    diagonal (0 is plain ILU(0), 1 is MILU).
    """
    n, m = C.shape
    for k in range(n):
        for q in range(m):
            v = C[k, q]
            lump = 0.0
            if k >= 1:
                fill = N[k - 1, q] if k - 1 + nx < n else 0.0
                v -= W[k, q] * E[k - 1, q] * dinv[k - 1, q]
                lump -= W[k, q] * fill * dinv[k - 1, q]
            if k >= nx:
                fill = E[k - nx, q] if (k - nx + 1) % nx != 0 else 0.0
                v -= S[k, q] * N[k - nx, q] * dinv[k - nx, q]
                lump -= S[k, q] * fill * dinv[k - nx, q]
            # lumping can wipe out the pivot at strong coefficient contrasts;
            # keep the plain ILU(0) pivot there, and the diagonal as last resort
            floor = 1e-8 * abs(C[k, q])
            if abs(v + relax * lump) > floor:
                v = v + relax * lump
            elif abs(v) <= floor:
                v = C[k, q]
            dinv[k, q] = 1.0 / v


@numba.njit(cache=True)
def _psolve(kind, C, W, E, S, N, dinv, nx, r, z):
    n, m = r.shape
    if kind == 0:
        for k in range(n):
            for q in range(m):
                z[k, q] = r[k, q] / C[k, q]
        return
    # (D + L) y = r, then (I + D^-1 U) z = y
    for q in range(m):
        z[0, q] = r[0, q] * dinv[0, q]
    for k in range(1, nx):
        for q in range(m):
            z[k, q] = (r[k, q] - W[k, q] * z[k - 1, q]) * dinv[k, q]
    for k in range(nx, n):
        for q in range(m):
            z[k, q] = (r[k, q] - W[k, q] * z[k - 1, q] - S[k, q] * z[k - nx, q]) * dinv[k, q]
    for k in range(n - 2, n - nx - 1, -1):
        for q in range(m):
            z[k, q] -= E[k, q] * z[k + 1, q] * dinv[k, q]
    for k in range(n - nx - 1, -1, -1):
        for q in range(m):
            z[k, q] -= (E[k, q] * z[k + 1, q] + N[k, q] * z[k + nx, q]) * dinv[k, q]


@numba.njit(cache=True)
def _dots(a, b, out):
    n, m = a.shape
    for q in range(m):
        out[q] = 0.0
    for k in range(n):
        for q in range(m):
            out[q] += a[k, q] * b[k, q]


@numba.njit(cache=True)
def _residual(C, W, E, S, N, b, x, nx, r, rnorm):
    _matvec(C, W, E, S, N, x, nx, r)
    n, m = r.shape
    for k in range(n):
        for q in range(m):
            r[k, q] = b[k, q] - r[k, q]
    _dots(r, r, rnorm)
    for q in range(m):
        rnorm[q] = np.sqrt(rnorm[q])


@numba.njit(cache=True)
def _bicgstab_batch(C, W, E, S, N, dinv, b, x, nx, kind, tol, maxiter, iters, resid):
    """BiCGStab on every column of ``b`` at once; ``x`` is updated in place.

    ``iters[q]`` is set to the iteration count, or -1 when column ``q`` did not
    converge; ``resid[q]`` to its final relative residual.
    """
    n, m = b.shape
    bnorm = np.empty(m)
    _dots(b, b, bnorm)
    target = np.empty(m)
    for q in range(m):
        bnorm[q] = np.sqrt(bnorm[q])
        if bnorm[q] == 0.0:
            bnorm[q] = 1.0
        target[q] = tol * bnorm[q]
    r = np.empty((n, m))
    rnorm = np.empty(m)
    _residual(C, W, E, S, N, b, x, nx, r, rnorm)
    active = np.empty(m, dtype=np.bool_)
    n_active = 0
    for q in range(m):
        iters[q] = 0
        active[q] = rnorm[q] > target[q]
        if active[q]:
            n_active += 1
    rhat = r.copy()
    p = np.zeros((n, m))
    v = np.zeros((n, m))
    phat = np.empty((n, m))
    s = np.empty((n, m))
    shat = np.empty((n, m))
    t = np.empty((n, m))
    rho = np.ones(m)
    alpha = np.ones(m)
    omega = np.ones(m)
    rho_new = np.empty(m)
    beta = np.empty(m)
    tmp = np.empty(m)
    tmp2 = np.empty(m)
    it = 0
    while n_active > 0 and it < maxiter:
        it += 1
        _dots(rhat, r, rho_new)
        for q in range(m):
            if active[q] and (rho_new[q] == 0.0 or omega[q] == 0.0):
                # breakdown: restart this column from its current residual
                for k in range(n):
                    rhat[k, q] = r[k, q]
                    p[k, q] = 0.0
                    v[k, q] = 0.0
                rho[q] = 1.0
                alpha[q] = 1.0
                omega[q] = 1.0
                acc = 0.0
                for k in range(n):
                    acc += r[k, q] * r[k, q]
                rho_new[q] = acc
            beta[q] = (rho_new[q] / rho[q]) * (alpha[q] / omega[q]) if active[q] else 0.0
        for k in range(n):
            for q in range(m):
                if active[q]:
                    p[k, q] = r[k, q] + beta[q] * (p[k, q] - omega[q] * v[k, q])
        _psolve(kind, C, W, E, S, N, dinv, nx, p, phat)
        _matvec(C, W, E, S, N, phat, nx, v)
        _dots(rhat, v, tmp)
        for q in range(m):
            alpha[q] = rho_new[q] / tmp[q] if (active[q] and tmp[q] != 0.0) else 0.0
        for k in range(n):
            for q in range(m):
                s[k, q] = r[k, q] - alpha[q] * v[k, q]
                x[k, q] += alpha[q] * phat[k, q]
        _psolve(kind, C, W, E, S, N, dinv, nx, s, shat)
        _matvec(C, W, E, S, N, shat, nx, t)
        _dots(t, s, tmp)
        _dots(t, t, tmp2)
        _dots(s, s, beta)
        for q in range(m):
            if not active[q] or np.sqrt(beta[q]) <= target[q] or tmp2[q] <= 0.0:
                omega[q] = 0.0
            else:
                omega[q] = tmp[q] / tmp2[q]
        for k in range(n):
            for q in range(m):
                x[k, q] += omega[q] * shat[k, q]
        for q in range(m):
            if active[q] and omega[q] == 0.0:
                omega[q] = 1.0
        # true residual each sweep keeps the recursion honest near round-off
        _residual(C, W, E, S, N, b, x, nx, r, rnorm)
        for q in range(m):
            if active[q]:
                iters[q] = it
                rho[q] = rho_new[q]
                if rnorm[q] <= target[q]:
                    active[q] = False
                    n_active -= 1
                elif not np.isfinite(rnorm[q]):
                    active[q] = False
                    n_active -= 1
                    iters[q] = -1
    for q in range(m):
        resid[q] = rnorm[q] / bnorm[q]
        if active[q]:
            iters[q] = -1


class PreparedSystem:
    """Row-scaled coefficients in solver layout plus preconditioner data.

    Build once per matrix and reuse across right-hand sides.
    """

    def __init__(self, system: Stencil5, precond: str = "ilu0", relax: float = 0.0):
        self.kind = PRECONDITIONERS[precond]
        m, ny, nx = system.shape
        self.shape = (m, ny, nx)
        self.inv_diag = np.ascontiguousarray((1.0 / system.C.reshape(m, -1)).T)
        self.C = np.ones_like(self.inv_diag)
        self.W = np.ascontiguousarray(system.W.reshape(m, -1).T * self.inv_diag)
        self.E = np.ascontiguousarray(system.E.reshape(m, -1).T * self.inv_diag)
        self.S = np.ascontiguousarray(system.S.reshape(m, -1).T * self.inv_diag)
        self.N = np.ascontiguousarray(system.N.reshape(m, -1).T * self.inv_diag)
        self.dinv = np.empty_like(self.C)
        if self.kind == 1:
            _ilu0_diag(self.C, self.W, self.E, self.S, self.N, nx, float(relax), self.dinv)

    def to_sparse(self, member: int) -> sp.csr_matrix:
        """Row-scaled matrix of one batch entry in CSR form."""
        _, ny, nx = self.shape
        n = nx * ny
        q = member
        offsets = {0: self.C[:, q], -1: self.W[1:, q], 1: self.E[:-1, q],
                   -nx: self.S[nx:, q], nx: self.N[:-nx, q]}
        return sp.diags(list(offsets.values()), list(offsets), shape=(n, n), format="csc")


def bicgstab(system, b: np.ndarray, x0: np.ndarray | None = None, *,
             tol: float = 1e-14, maxiter: int = 500, precond: str = "ilu0",
             relax: float = 0.0, fallback: bool = False):
    """Preconditioned BiCGStab, run independently for every batch entry.

    ``system`` is a :class:`Stencil5` or a :class:`PreparedSystem` (in which
    case ``precond`` and ``relax`` are taken from it). Rows are scaled to unit
    diagonal before iterating, so ``"jacobi"`` preconditioning is exact row
    scaling and ``||b - A x|| <= tol * ||b||`` is measured on the scaled system.

    Returns ``(x, iterations)``; raises :class:`SolverDivergenceError` when any
    entry fails to converge within ``maxiter`` iterations. With ``fallback``
    such entries are instead solved by sparse LU (their iteration count is
    reported as ``-1``); the error is then raised only for non-finite results.
    """
    if not isinstance(system, PreparedSystem):
        system = PreparedSystem(system, precond, relax)
    ps = system
    m, ny, nx = ps.shape
    bs = np.ascontiguousarray(b.reshape(m, -1).T * ps.inv_diag)
    if x0 is None:
        x = np.zeros_like(bs)
    else:
        x = np.ascontiguousarray(np.asarray(x0, dtype=float).reshape(m, -1).T)
    iters = np.zeros(m, dtype=np.int64)
    resid = np.zeros(m)
    _bicgstab_batch(ps.C, ps.W, ps.E, ps.S, ps.N, ps.dinv, bs, x, nx, ps.kind,
                    float(tol), int(maxiter), iters, resid)
    bad = np.flatnonzero(iters < 0)
    if bad.size and fallback:
        for q in bad:
            x[:, q] = spla.spsolve(ps.to_sparse(q), bs[:, q])
        bad = bad[~np.all(np.isfinite(x[:, bad]), axis=0)]
    if bad.size:
        raise SolverDivergenceError(
            f"BiCGStab did not reach relative residual {tol:g} within {maxiter} iterations "
            f"for {bad.size} system(s); worst residual {float(np.max(resid[bad])):.3e}",
            residual=resid, members=bad)
    return np.ascontiguousarray(x.T).reshape(m, ny, nx), iters
