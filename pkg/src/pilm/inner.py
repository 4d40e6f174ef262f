"""Fixed-point solution of the damped normal equations.

Solves ``(P + mu I + B) d = -g`` with the splitting iteration

    y^1     = -(P + mu I)^{-1} g
    y^{l+1} = -(P + mu I)^{-1} (g + B y^l)

which only ever factorizes the diagonal blocks ``P_i + mu I``.  The linear
residual ``r^l = (P + B + mu I) y^l + g`` shrinks by at most
``rho = ||B (P + mu I)^{-1}||`` per step.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError

__all__ = [
    "BlockFactorization", "InnerResult", "factor_blocks", "solve_block_rhs",
    "coupling_rhs", "fixed_point_solve", "InnerDivergenceWarning", "dense_rho",
]

log = logging.getLogger(__name__)


class InnerDivergenceWarning(RuntimeWarning):
    """Inner residuals grew; the splitting is not contracting at this mu."""


def _factor(A, block=None):
    A = sp.csc_matrix(A)
    if not np.all(np.isfinite(A.data)):
        raise NumericalError("non-finite entries in block matrix", block)
    try:
        # symmetric mode without pivoting: an LDL^T-style factor for SPD input
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                         options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NumericalError(f"factorization failed: {exc}", block) from exc


@dataclass
class BlockFactorization:
    factors: list
    mu: float
    matrices: list = field(repr=False, default=None)

    @property
    def K(self):
        return len(self.factors)


def factor_blocks(bs, mu, pool=None):
    """Factor ``P_i + mu I`` for every block."""
    mu = float(mu)
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")

    def task(i):
        Pi = bs.P[i]
        A = (Pi + mu * sp.identity(Pi.shape[0], format="csr")).tocsc()
        return A, _factor(A, i)

    if pool is None:
        out = [task(i) for i in range(bs.K)]
    else:
        out = pool.map("factor", task, bs.K)
    return BlockFactorization([f for _, f in out], mu, [A for A, _ in out])


def solve_block_rhs(fac, i, rhs):
    """Solve ``(P_i + mu I) y_i = rhs``."""
    rhs = np.asarray(rhs, dtype=float)
    if not rhs.any():
        return np.zeros_like(rhs)
    y = fac.factors[i].solve(rhs)
    if not np.all(np.isfinite(y)):
        raise NumericalError("non-finite block solution", i)
    return y


def coupling_rhs(bs, i, y_prev):
    """``-(g_i + sum_{j in N_i} B_ij y_j)``."""
    if not isinstance(y_prev, (list, tuple)):
        y_prev = bs.split(np.asarray(y_prev, dtype=float))
    return -(bs.g[i] + bs.coupling_block(i, y_prev))


@dataclass
class InnerResult:
    d: np.ndarray
    inner_residual_norms: list
    rho_bound: float | None
    iterations_used: int
    diverged: bool = False


def dense_rho(bs, mu):
    """``||B (P + mu I)^{-1}||_2`` from dense matrices (desk-scale checks)."""
    P = bs.dense_P()
    B = bs.dense_B()
    M = np.linalg.solve((P + mu * np.eye(bs.n)).T, B.T).T
    return float(np.linalg.norm(M, 2))


def fixed_point_solve(bs, fac, ell, pool=None, rtol=None, ell_max=100, b_norm=None,
                      debug=False, warn=True):
    """Run the splitting iteration and return the last iterate.

    With ``rtol=None`` exactly ``ell`` iterates are formed.  Otherwise
    ``ell`` is a minimum and the loop stops at the first ``l`` with
    ``||r^l|| <= rtol`` (absolute), or at ``ell_max``.  Growth of the
    residual is flagged in the result and, with ``warn``, as an
    :class:`InnerDivergenceWarning`.
    """
    ell = int(ell)
    if ell < 1:
        raise ValueError(f"ell must be at least 1, got {ell}")
    K = bs.K
    mu = fac.mu
    limit = ell if rtol is None else max(ell, int(ell_max))

    def run(phase, fn):
        if pool is None:
            return [fn(i) for i in range(K)]
        return pool.map(phase, fn, K)

    y = run("first_solve", lambda i: solve_block_rhs(fac, i, -bs.g[i]))
    norms = []
    level = 1
    while True:
        last = level >= limit
        current = y

        def step(i, current=current, last=last):
            c = bs.g[i] + bs.coupling_block(i, current)
            r = fac.matrices[i] @ current[i] + c
            nxt = None if last else solve_block_rhs(fac, i, -c)
            return r, nxt

        outs = run("inner_step", step)
        rnorm = float(np.sqrt(sum(float(r @ r) for r, _ in outs)))
        if not np.isfinite(rnorm):
            raise NumericalError("non-finite inner residual")
        norms.append(rnorm)
        if last or (rtol is not None and level >= ell and rnorm <= rtol):
            break
        y = [nxt for _, nxt in outs]
        level += 1

    diverged = len(norms) > 1 and norms[-1] > norms[0]
    if diverged and warn:
        warnings.warn(f"inner residual grew from {norms[0]:.3e} to {norms[-1]:.3e} "
                      f"over {len(norms)} steps (mu={mu:.3e})", InnerDivergenceWarning,
                      stacklevel=2)
    if debug and bs.n <= 2000:
        rho = dense_rho(bs, mu)
        for a, b in zip(norms, norms[1:]):
            if b > rho * a * (1 + 1e-8) + 1e-12 * (norms[0] + 1.0):
                raise AssertionError(f"contraction violated: {b:.3e} > {rho:.3e} * {a:.3e}")
    d = np.concatenate(y)
    rho_bound = None if b_norm is None else float(b_norm) / mu
    return InnerResult(d, norms, rho_bound, len(norms), diverged)
