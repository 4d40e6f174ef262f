"""Block decomposition ``J^T J = P + B`` of the normal matrix.

For a block-ordered problem, block ``i`` owns the Jacobian rows of its own
residuals restricted to its own columns (``J_iR``) and the coupling-residual
rows restricted to its columns (``J_irho``).  Then

    P_i  = J_iR^T J_iR + J_irho^T J_irho
    B_ij = J_irho^T J_jrho            (i != j, stored only for j in N_i)
    g_i  = J_iR^T R_i + J_irho^T rho

and ``P`` is block diagonal while ``B`` carries all inter-block coupling.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import PartitionError

__all__ = [
    "BlockSystem", "split_jacobian", "split_block", "assemble_block",
    "assemble_coupling", "assemble_blocks", "estimate_B_norm", "power_norm",
    "write_spy",
]


@dataclass
class BlockSystem:
    offsets: np.ndarray
    P: list
    B: dict
    g: list
    neighbors: list
    mu: float = 0.0
    J_rho: list = field(default=None, repr=False)

    @property
    def K(self):
        return len(self.P)

    @property
    def n(self):
        return int(self.offsets[-1])

    def split(self, y):
        return [y[self.offsets[i]:self.offsets[i + 1]] for i in range(self.K)]

    def gradient(self):
        return np.concatenate(self.g)

    def coupling_block(self, i, y_blocks):
        """``(B y)_i`` summed over ``j in N_i`` in ascending ``j``."""
        out = np.zeros(len(self.g[i]))
        for j in self.neighbors[i]:
            out += self.B[i, j] @ y_blocks[j]
        return out

    def matvec_B(self, y):
        yb = self.split(y)
        return np.concatenate([self.coupling_block(i, yb) for i in range(self.K)])

    def matvec_P(self, y):
        yb = self.split(y)
        return np.concatenate([self.P[i] @ yb[i] for i in range(self.K)])

    def dense_P(self):
        return sp.block_diag(self.P, format="csr").toarray() if self.K else np.zeros((0, 0))

    def dense_B(self):
        out = np.zeros((self.n, self.n))
        o = self.offsets
        for (i, j), blk in self.B.items():
            out[o[i]:o[i + 1], o[j]:o[j + 1]] = blk.toarray()
        return out


def _block_columns(part, offsets, i):
    if offsets is not None:
        return slice(int(offsets[i]), int(offsets[i + 1]))
    return part.block_vars(i)


def split_block(J, part, i, offsets=None, J_hat=None):
    """``(J_iR, J_irho)`` for block ``i``.

    ``offsets`` gives contiguous column ranges for a block-ordered problem;
    without it the block columns are looked up from the partition.
    """
    cols = _block_columns(part, offsets, i)
    rows = J[part.E[i]]
    own = rows[:, cols].tocsr()
    if own.nnz != rows.nnz:
        raise PartitionError(f"residuals of block {i} touch variables outside block {i}")
    if J_hat is None:
        J_hat = J[part.E_hat]
    return own, J_hat[:, cols].tocsr()


def split_jacobian(J, part, offsets=None):
    J = sp.csr_matrix(J)
    J_hat = J[part.E_hat]
    return [split_block(J, part, i, offsets, J_hat) for i in range(part.K)]


def assemble_block(J_own, J_rho, R_own, rho):
    """``(P_i, g_i)`` from the block's Jacobian pieces and residuals."""
    P = (J_own.T @ J_own + J_rho.T @ J_rho).tocsr()
    P.sort_indices()
    g = J_own.T @ R_own + J_rho.T @ rho
    return P, np.asarray(g, dtype=float)


def assemble_coupling(J_rho, i, neighbors):
    """``{(i, j): B_ij}`` for every ``j`` in ``neighbors``."""
    At = J_rho[i].T.tocsr()
    out = {}
    for j in neighbors:
        blk = (At @ J_rho[j]).tocsr()
        blk.sort_indices()
        out[i, j] = blk
    return out


def assemble_blocks(split, R, part, offsets=None, mu=0.0):
    """Sequential assembly of the full :class:`BlockSystem`."""
    R = np.asarray(R, dtype=float)
    rho = R[part.E_hat]
    P, g = [], []
    for i, (own, jr) in enumerate(split):
        Pi, gi = assemble_block(own, jr, R[part.E[i]], rho)
        P.append(Pi)
        g.append(gi)
    J_rho = [jr for _, jr in split]
    B = {}
    for i in range(part.K):
        B.update(assemble_coupling(J_rho, i, part.neighbors[i]))
    if offsets is None:
        offsets = np.concatenate([[0], np.cumsum(part.block_sizes)])
    return BlockSystem(np.asarray(offsets), P, B, g, list(part.neighbors), mu, J_rho)


def _power(matvec, rmatvec, v, iters):
    v = v / np.linalg.norm(v)
    history = []
    for _ in range(max(1, int(iters))):
        w = matvec(v)
        est = float(np.linalg.norm(w))
        history.append(est)
        if est == 0.0:
            break
        u = rmatvec(w)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            break
        v = u / nu
    return history, v


def _start_vector(n, seed, v0):
    if v0 is not None and np.any(v0):
        return np.array(v0, dtype=float)
    return np.random.default_rng(seed).standard_normal(n)


def power_norm(matvec, rmatvec, n, iters=30, seed=0, v0=None):
    """Spectral-norm estimate of an operator by power iteration on ``A^T A``.

    Returns the history of estimates ``||A v_t||`` with ``||v_t|| = 1``; the
    sequence is nondecreasing in exact arithmetic.  ``v0`` warm-starts the
    iteration (a random vector from ``seed`` otherwise).
    """
    if n == 0:
        return [0.0]
    return _power(matvec, rmatvec, _start_vector(n, seed, v0), iters)[0]


def estimate_B_norm(bs, iters=30, seed=0, v0=None, return_vector=False):
    """Power-iteration estimate of ``||B||_2`` from block mat-vecs only.

    ``B`` is symmetric, so the same mat-vec serves as its transpose.  With
    ``return_vector`` the final iterate comes back too, for warm starts.
    """
    if not bs.B:
        return (0.0, None) if return_vector else 0.0
    hist, v = _power(bs.matvec_B, bs.matvec_B, _start_vector(bs.n, seed, v0), iters)
    return (max(hist), v) if return_vector else max(hist)


def write_spy(bs, path):
    """CSV of the nonzero pattern of ``P + B`` with the owning block pair."""
    o = bs.offsets
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "block_row", "block_col", "part", "value"])
        for i, Pi in enumerate(bs.P):
            coo = Pi.tocoo()
            for r, c, v in zip(coo.row, coo.col, coo.data):
                w.writerow([int(o[i] + r), int(o[i] + c), i, i, "P", repr(float(v))])
        for (i, j) in sorted(bs.B):
            coo = bs.B[i, j].tocoo()
            for r, c, v in zip(coo.row, coo.col, coo.data):
                w.writerow([int(o[i] + r), int(o[j] + c), i, j, "B", repr(float(v))])
