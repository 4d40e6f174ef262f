"""Variable partitioning and the induced residual partition.

Points are the vertices of the coupling graph; two points are joined when
some geometric observation involves both.  A K-way vertex partition is
computed with a small multilevel scheme (heavy-edge matching to coarsen,
greedy region growing on the coarsest graph, boundary refinement while
projecting back).  A residual belongs to block ``s`` when all of its
variables lie in block ``s`` and to the coupling set otherwise.
"""
from __future__ import annotations

import dataclasses
import heapq
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import PartitionError

__all__ = [
    "VariableGraph", "Partition", "Reordering", "build_variable_graph",
    "partition_variables", "induce_residual_partition", "reorder", "edge_cut",
]

DEFAULT_IMBALANCE = 0.05


@dataclass
class VariableGraph:
    """Weighted undirected point graph stored as a symmetric CSR matrix."""

    adjacency: sp.csr_matrix
    vertex_weight: np.ndarray = None

    def __post_init__(self):
        if self.vertex_weight is None:
            self.vertex_weight = np.ones(self.adjacency.shape[0], dtype=np.int64)

    @property
    def n_vertices(self):
        return self.adjacency.shape[0]

    def weight(self, a, b):
        return int(self.adjacency[a, b])

    def edges(self):
        """Iterate ``(a, b, w)`` with ``a < b``."""
        upper = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        for a, b, w in zip(upper.row[order], upper.col[order], upper.data[order]):
            yield int(a), int(b), int(w)


def build_variable_graph(p):
    """Coupling graph of ``p``; coordinate observations add no edges."""
    rows, cols = [], []
    for meas in p.measurements:
        pts = meas.points
        for a in range(len(pts)):
            for b in range(a + 1, len(pts)):
                rows.append(pts[a])
                cols.append(pts[b])
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    data = np.ones(2 * len(rows), dtype=np.int64)
    adj = sp.coo_matrix((data, (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
                        shape=(p.n_points, p.n_points)).tocsr()
    adj.sum_duplicates()
    adj.sort_indices()
    return VariableGraph(adj)


def edge_cut(graph, block_of):
    upper = sp.triu(graph.adjacency, k=1).tocoo()
    block_of = np.asarray(block_of)
    return int(upper.data[block_of[upper.row] != block_of[upper.col]].sum())


# ---------------------------------------------------------------------------
# multilevel partitioner
# ---------------------------------------------------------------------------

class _Level:
    __slots__ = ("adj", "vwgt", "cmap", "indptr", "indices", "data")

    def __init__(self, adj, vwgt):
        self.adj = adj
        self.vwgt = vwgt
        self.cmap = None
        self.indptr = adj.indptr.tolist()
        self.indices = adj.indices.tolist()
        self.data = adj.data.tolist()

    @property
    def n(self):
        return len(self.vwgt)


def _coarsen(level, rng, max_vwgt):
    n = level.n
    indptr, indices, data = level.indptr, level.indices, level.data
    vwgt = level.vwgt.tolist()
    match = [-1] * n
    for v in rng.permutation(n).tolist():
        if match[v] != -1:
            continue
        best, best_w = v, 0
        for t in range(indptr[v], indptr[v + 1]):
            u = indices[t]
            # neighbours are index-sorted, so strict '>' keeps the lowest index on ties
            if match[u] == -1 and u != v and data[t] > best_w and vwgt[u] + vwgt[v] <= max_vwgt:
                best, best_w = u, data[t]
        match[v] = best
        match[best] = v
    cmap = np.empty(n, dtype=np.int64)
    c = 0
    for v in range(n):
        if match[v] >= v:
            cmap[v] = c
            cmap[match[v]] = c
            c += 1
    proj = sp.csr_matrix((np.ones(n, dtype=np.int64), (np.arange(n), cmap)), shape=(n, c))
    cadj = (proj.T @ level.adj @ proj).tocsr()
    cadj.setdiag(0)
    cadj.eliminate_zeros()
    cadj.sort_indices()
    level.cmap = cmap
    return _Level(cadj, np.bincount(cmap, weights=level.vwgt, minlength=c).astype(np.int64))


def _grow(level, K, rng):
    """Greedy graph growing: fill blocks one at a time from random seeds."""
    n = level.n
    vwgt = level.vwgt.tolist()
    indptr, indices, data = level.indptr, level.indices, level.data
    part = [-1] * n
    remaining_w = sum(vwgt)
    remaining_v = n
    unassigned = rng.permutation(n).tolist()
    cursor = 0
    for s in range(K):
        blocks_left = K - s
        target = remaining_w / blocks_left
        if s == K - 1:
            for v in range(n):
                if part[v] == -1:
                    part[v] = s
            break
        w_s = 0
        conn = {}
        heap = []
        while w_s < target and remaining_v > blocks_left - 1:
            v = -1
            while heap:
                negc, u = heapq.heappop(heap)
                if part[u] == -1 and conn.get(u) == -negc:
                    v = u
                    break
            if v == -1:
                while part[unassigned[cursor]] != -1:
                    cursor += 1
                v = unassigned[cursor]
            if w_s > 0 and w_s + vwgt[v] > target * (1 + DEFAULT_IMBALANCE) and w_s >= 0.5 * target:
                break
            part[v] = s
            w_s += vwgt[v]
            remaining_w -= vwgt[v]
            remaining_v -= 1
            for t in range(indptr[v], indptr[v + 1]):
                u = indices[t]
                if part[u] == -1:
                    conn[u] = conn.get(u, 0) + data[t]
                    heapq.heappush(heap, (-conn[u], u))
    return np.asarray(part, dtype=np.int64)


def _refine(level, part, K, max_w, passes=10):
    """Greedy boundary refinement under a block-weight cap.

    A vertex moves to the adjacent block with the largest positive cut
    gain; zero-gain moves are taken only if they strictly improve balance.
    The loop stops when a full pass makes no move, so the result is a local
    minimum of the cut over single-vertex moves.
    """
    indptr, indices, data = level.indptr, level.indices, level.data
    vwgt = level.vwgt.tolist()
    part = part.tolist()
    bw = [0] * K
    for v, s in enumerate(part):
        bw[s] += vwgt[v]
    for _ in range(passes):
        moved = 0
        for v in range(level.n):
            own = part[v]
            conn = {}
            for t in range(indptr[v], indptr[v + 1]):
                b = part[indices[t]]
                conn[b] = conn.get(b, 0) + data[t]
            if len(conn) == 0 or (len(conn) == 1 and own in conn):
                continue
            w = vwgt[v]
            if bw[own] - w <= 0:
                continue
            c_own = conn.get(own, 0)
            best, best_gain = -1, None
            for b in sorted(conn):
                if b == own or bw[b] + w > max_w:
                    continue
                gain = conn[b] - c_own
                if gain > 0 or (gain == 0 and bw[own] - bw[b] > w):
                    if best_gain is None or gain > best_gain:
                        best, best_gain = b, gain
            if best >= 0:
                part[v] = best
                bw[own] -= w
                bw[best] += w
                moved += 1
        if not moved:
            break
    return np.asarray(part, dtype=np.int64)


def _rebalance(level, part, K, max_w):
    """Move cheapest vertices out of overweight blocks until all fit the cap.

    Candidate moves of the heaviest block are ranked once per round by cut
    gain and applied in that order; gains are not refreshed within a round.
    """
    indptr, indices, data = level.indptr, level.indices, level.data
    vwgt = level.vwgt
    bw = np.bincount(part, weights=vwgt, minlength=K)
    for _ in range(K * K + 1):
        heavy = int(np.argmax(bw))
        if bw[heavy] <= max_w:
            break
        cands = []
        for v in np.flatnonzero(part == heavy).tolist():
            conn = {}
            for t in range(indptr[v], indptr[v + 1]):
                b = int(part[indices[t]])
                conn[b] = conn.get(b, 0) + data[t]
            c_own = conn.get(heavy, 0)
            others = [b for b in conn if b != heavy]
            if others:
                b = max(others, key=lambda b: (conn[b], -bw[b], -b))
                cands.append((conn[b] - c_own, -v, b))
            else:
                cands.append((-c_own, -v, -1))
        cands.sort(reverse=True)
        moved = False
        for gain, negv, b in cands:
            if bw[heavy] <= max_w:
                break
            v = -negv
            w = int(vwgt[v])
            if b < 0 or bw[b] + w > max_w:
                light = int(np.argmin(bw))
                if light == heavy or bw[light] + w > max_w:
                    continue
                b = light
            part[v] = b
            bw[heavy] -= w
            bw[b] += w
            moved = True
        if not moved:
            break
    return part


def _cut(level, part):
    upper = sp.triu(level.adj, k=1).tocoo()
    return int(upper.data[part[upper.row] != part[upper.col]].sum())


def balance_cap(n_vertices, K, imbalance=DEFAULT_IMBALANCE):
    """Largest allowed block size, in points."""
    return max(math.ceil(n_vertices / K), math.floor((1 + imbalance) * n_vertices / K))


def partition_variables(g, K, seed=0, imbalance=DEFAULT_IMBALANCE, trials=4):
    """Balanced K-way partition of the points of ``g``.

    Returns a :class:`Partition` with only ``block_of`` filled; use
    :func:`induce_residual_partition` for the residual sets.
    """
    n = g.n_vertices
    K = int(K)
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    if K > n:
        raise ValueError(f"K = {K} exceeds the number of points ({n})")
    if K == 1:
        return Partition(1, np.zeros(n, dtype=np.int64))
    rng = np.random.default_rng(seed)
    max_w = balance_cap(n, K, imbalance)

    levels = [_Level(g.adjacency.astype(np.int64).tocsr(), np.asarray(g.vertex_weight, dtype=np.int64))]
    coarse_limit = max(20 * K, 80)
    while levels[-1].n > coarse_limit:
        nxt = _coarsen(levels[-1], rng, max_vwgt=max(1, max_w // 2))
        if nxt.n > 0.95 * levels[-1].n:
            levels[-1].cmap = None
            break
        levels.append(nxt)

    coarsest = levels[-1]
    heaviest = int(coarsest.vwgt.max())
    best = None
    for _ in range(max(1, trials)):
        part = _grow(coarsest, K, rng)
        part = _refine(coarsest, part, K, max_w + heaviest)
        key = (_cut(coarsest, part), int(np.bincount(part, weights=coarsest.vwgt, minlength=K).max()))
        if best is None or key < best[0]:
            best = (key, part)
    part = best[1]

    for lvl in reversed(levels[:-1]):
        part = part[lvl.cmap]
        slack = int(lvl.vwgt.max()) if lvl is not levels[0] else 0
        part = _refine(lvl, part, K, max_w + slack)
    fine = levels[0]
    part = _rebalance(fine, part, K, max_w)
    part = _refine(fine, part, K, max_w)
    counts = np.bincount(part, minlength=K)
    if (counts == 0).any():
        # pull the lowest-index vertex of the largest block into each empty one
        for s in np.flatnonzero(counts == 0):
            donor = int(np.argmax(counts))
            v = int(np.flatnonzero(part == donor)[0])
            part[v] = s
            counts = np.bincount(part, minlength=K)
    return Partition(K, part)


# ---------------------------------------------------------------------------
# residual partition and reordering
# ---------------------------------------------------------------------------

@dataclass
class Partition:
    """Point blocks plus, once induced, the residual blocks.

    ``E[s]`` lists the residuals whose variables all lie in block ``s``;
    ``E_hat`` lists the coupling residuals; ``neighbors[i]`` holds the blocks
    ``j != i`` that share a coupling residual with block ``i``.
    """

    K: int
    block_of: np.ndarray
    E: list = None
    E_hat: np.ndarray = None
    neighbors: list = None

    def __post_init__(self):
        self.block_of = np.asarray(self.block_of, dtype=np.int64)

    @property
    def point_counts(self):
        return np.bincount(self.block_of, minlength=self.K)

    @property
    def block_sizes(self):
        """Scalar-variable count ``n_s`` of every block."""
        return 2 * self.point_counts

    @property
    def var_block(self):
        return np.repeat(self.block_of, 2)

    def block_vars(self, s):
        return np.flatnonzero(self.var_block == s)

    @property
    def m(self):
        return sum(len(e) for e in self.E) + len(self.E_hat)

    @property
    def separability_ratio(self):
        coupled = len(self.E_hat)
        inner = self.m - coupled
        return math.inf if inner == 0 else coupled / inner

    def summary(self):
        return {
            "K": self.K,
            "block_sizes": [int(v) for v in self.block_sizes],
            "E_sizes": None if self.E is None else [int(len(e)) for e in self.E],
            "E_hat": None if self.E_hat is None else int(len(self.E_hat)),
            "separability_ratio": None if self.E is None else self.separability_ratio,
        }


def induce_residual_partition(p, block_of, K=None):
    block_of = np.asarray(block_of, dtype=np.int64)
    if block_of.shape != (p.n_points,):
        raise ValueError("block_of must assign every point")
    if K is None:
        K = int(block_of.max()) + 1
    inner_block = np.full(p.m, -1, dtype=np.int64)
    pairs = set()
    for grp in p.compiled.groups:
        blocks = block_of[grp.idx]
        same = (blocks == blocks[:, :1]).all(axis=1)
        inner_block[grp.rows[same]] = blocks[same, 0]
        for row in blocks[~same]:
            for a in set(row.tolist()):
                for b in set(row.tolist()):
                    if a != b:
                        pairs.add((a, b))
    E = [np.flatnonzero(inner_block == s) for s in range(K)]
    E_hat = np.flatnonzero(inner_block < 0)
    neighbors = [tuple(sorted(b for a, b in pairs if a == s)) for s in range(K)]
    return Partition(K, block_of, E, E_hat, neighbors)


@dataclass
class Reordering:
    """Index maps between an original problem and its block-ordered copy.

    All ``*_perm`` arrays map new positions to old ones, so
    ``x_new = x_old[var_perm]``.
    """

    point_perm: np.ndarray
    var_perm: np.ndarray
    meas_perm: np.ndarray
    var_offsets: np.ndarray
    row_offsets: np.ndarray
    partition: Partition = field(repr=False)

    def to_new(self, x_old):
        return np.asarray(x_old)[self.var_perm]

    def to_old(self, x_new):
        out = np.empty_like(np.asarray(x_new, dtype=float))
        out[self.var_perm] = x_new
        return out

    def rows_to_old(self, r_new):
        out = np.empty_like(np.asarray(r_new, dtype=float))
        out[self.meas_perm] = r_new
        return out


def _remap(meas, old_to_new):
    if meas.kind == "coordinate":
        return dataclasses.replace(meas, i=int(old_to_new[meas.i]))
    if meas.kind == "distance":
        return dataclasses.replace(meas, i=int(old_to_new[meas.i]), j=int(old_to_new[meas.j]))
    return dataclasses.replace(meas, i=int(old_to_new[meas.i]), j=int(old_to_new[meas.j]),
                               k=int(old_to_new[meas.k]))


def reorder(p, part):
    """Block-ordered copy of ``p``: variables by block, residuals E_1..E_K then E_hat."""
    from .model import Problem

    if part.E is None:
        part = induce_residual_partition(p, part.block_of, part.K)
    point_perm = np.argsort(part.block_of, kind="stable")
    old_to_new = np.empty_like(point_perm)
    old_to_new[point_perm] = np.arange(len(point_perm))
    var_perm = np.column_stack([2 * point_perm, 2 * point_perm + 1]).ravel()
    meas_perm = np.concatenate(list(part.E) + [part.E_hat]).astype(np.int64)
    measurements = [_remap(p.measurements[j], old_to_new) for j in meas_perm]
    gt = None if p.ground_truth is None else p.ground_truth[var_perm]
    new_p = Problem(p.n_points, measurements, gt)

    counts = part.point_counts
    var_offsets = np.concatenate([[0], np.cumsum(2 * counts)])
    sizes = [len(e) for e in part.E]
    row_offsets = np.concatenate([[0], np.cumsum(sizes), [p.m]])
    new_block_of = part.block_of[point_perm]
    E = [np.arange(row_offsets[s], row_offsets[s + 1]) for s in range(part.K)]
    E_hat = np.arange(row_offsets[part.K], p.m)
    new_part = Partition(part.K, new_block_of, E, E_hat, list(part.neighbors))
    return new_p, Reordering(point_perm, var_perm, meas_perm, var_offsets, row_offsets, new_part)


def check_partition(part, n_points, m):
    """Raise :class:`PartitionError` unless ``part`` is a true set partition."""
    if part.block_of.shape != (n_points,):
        raise PartitionError("block_of does not cover every point")
    if part.block_of.min() < 0 or part.block_of.max() >= part.K:
        raise PartitionError("block index out of range")
    if part.E is not None:
        allrows = np.concatenate(list(part.E) + [part.E_hat])
        if len(allrows) != m or not np.array_equal(np.sort(allrows), np.arange(m)):
            raise PartitionError("residual blocks do not partition the measurements")
