"""Weighted network-adjustment least-squares problems.

A problem is a set of 2-D points and a list of geometric observations on
them.  The unknown vector stacks point coordinates as
``x = (X_0, Y_0, X_1, Y_1, ...)`` so point ``i`` owns variables ``2i`` and
``2i + 1``.  Each observation contributes one weighted residual
``r_j = (model_j(x) - observed_j) / sigma_j`` and the objective is
``F(x) = 0.5 * ||R(x)||^2``.

Evaluation is vectorized per observation type; the sparsity pattern of the
Jacobian is compiled once per problem and only the values are recomputed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import ClassVar, NamedTuple, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .errors import EvaluationError

__all__ = [
    "Distance", "Angle", "PointLine", "Coordinate", "Measurement", "Problem",
    "SparseRow", "eval_residual", "eval_residual_gradient", "eval_R", "eval_J",
    "eval_F", "eval_gradient", "wrap_angle", "problem_to_dict",
    "problem_from_dict", "load_problem", "save_problem", "PROBLEM_FORMAT",
]

PROBLEM_FORMAT = "pilm-problem"
PROBLEM_VERSION = 1

_TWO_PI = 2.0 * math.pi


def _check_sigma(sigma):
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be positive and finite, got {sigma!r}")


def _check_distinct(*idx):
    if len(set(idx)) != len(idx):
        raise ValueError(f"point indices must be pairwise distinct, got {idx}")
    if min(idx) < 0:
        raise ValueError(f"point indices must be non-negative, got {idx}")


@dataclass(frozen=True)
class Distance:
    """Euclidean distance ``d`` between points ``i`` and ``j``."""

    i: int
    j: int
    d: float
    sigma: float
    kind: ClassVar[str] = "distance"

    def __post_init__(self):
        _check_distinct(self.i, self.j)
        _check_sigma(self.sigma)

    @property
    def points(self):
        return (self.i, self.j)

    @property
    def value(self):
        return self.d


@dataclass(frozen=True)
class Angle:
    """Angle observation on the triple ``(i, j, k)``.

    The modelled quantity is ``atan2(P_k - P_j) - atan2(P_k - P_i)``, the
    difference of the bearings of ``P_k`` seen from ``P_j`` and from ``P_i``.
    ``alpha`` and ``sigma`` are in radians.
    """

    i: int
    j: int
    k: int
    alpha: float
    sigma: float
    kind: ClassVar[str] = "angle"

    def __post_init__(self):
        _check_distinct(self.i, self.j, self.k)
        _check_sigma(self.sigma)

    @property
    def points(self):
        return (self.i, self.j, self.k)

    @property
    def value(self):
        return self.alpha


@dataclass(frozen=True)
class PointLine:
    """Distance ``d`` from point ``k`` to the line through ``i`` and ``j``."""

    k: int
    i: int
    j: int
    d: float
    sigma: float
    kind: ClassVar[str] = "point_line"

    def __post_init__(self):
        _check_distinct(self.k, self.i, self.j)
        _check_sigma(self.sigma)

    @property
    def points(self):
        return (self.k, self.i, self.j)

    @property
    def value(self):
        return self.d


@dataclass(frozen=True)
class Coordinate:
    """Direct observation of one coordinate of point ``i`` (axis 0 = X, 1 = Y)."""

    i: int
    axis: int
    value: float
    sigma: float
    kind: ClassVar[str] = "coordinate"

    def __post_init__(self):
        if self.axis not in (0, 1):
            raise ValueError(f"axis must be 0 (X) or 1 (Y), got {self.axis!r}")
        if self.i < 0:
            raise ValueError(f"point index must be non-negative, got {self.i}")
        _check_sigma(self.sigma)

    @property
    def points(self):
        return (self.i,)


Measurement = Union[Distance, Angle, PointLine, Coordinate]
_KINDS = {cls.kind: cls for cls in (Distance, Angle, PointLine, Coordinate)}


def wrap_angle(a):
    """Wrap angles into ``(-pi, pi]``."""
    a = np.asarray(a, dtype=float)
    return a - _TWO_PI * np.ceil((a - math.pi) / _TWO_PI)


# ---------------------------------------------------------------------------
# vectorized kernels
#
# Each kernel receives the (n_points, 2) coordinate view and the point-index
# matrix for its type, and returns (raw residual, Jacobian values, bad mask).
# Jacobian values are laid out per row in the same order as ``_columns``.
# ---------------------------------------------------------------------------

def _distance_kernel(xy, idx, obs):
    pi, pj = xy[idx[:, 0]], xy[idx[:, 1]]
    diff = pi - pj
    length = np.hypot(diff[:, 0], diff[:, 1])
    bad = length == 0.0
    safe = np.where(bad, 1.0, length)
    u = diff / safe[:, None]
    jac = np.column_stack([u[:, 0], u[:, 1], -u[:, 0], -u[:, 1]])
    return length - obs, jac, bad


def _angle_kernel(xy, idx, obs):
    pi, pj, pk = xy[idx[:, 0]], xy[idx[:, 1]], xy[idx[:, 2]]
    a = pk - pj
    b = pk - pi
    ra = a[:, 0] ** 2 + a[:, 1] ** 2
    rb = b[:, 0] ** 2 + b[:, 1] ** 2
    bad = (ra == 0.0) | (rb == 0.0)
    raw = np.arctan2(a[:, 1], a[:, 0]) - np.arctan2(b[:, 1], b[:, 0])
    res = wrap_angle(raw - obs)
    ra = np.where(bad, 1.0, ra)
    rb = np.where(bad, 1.0, rb)
    # d atan2(v, u) = (-v du + u dv) / (u^2 + v^2)
    ga = np.column_stack([-a[:, 1] / ra, a[:, 0] / ra])
    gb = np.column_stack([-b[:, 1] / rb, b[:, 0] / rb])
    jac = np.column_stack([
        gb[:, 0], gb[:, 1],              # P_i enters -atan2(P_k - P_i) with -P_i
        -ga[:, 0], -ga[:, 1],            # P_j
        ga[:, 0] - gb[:, 0], ga[:, 1] - gb[:, 1],  # P_k
    ])
    return res, jac, bad


def _point_line_kernel(xy, idx, obs):
    pk, pi, pj = xy[idx[:, 0]], xy[idx[:, 1]], xy[idx[:, 2]]
    xk, yk = pk[:, 0], pk[:, 1]
    xi, yi = pi[:, 0], pi[:, 1]
    xj, yj = pj[:, 0], pj[:, 1]
    cross = (xj - xi) * (yi - yk) - (xi - xk) * (yj - yi)
    dx, dy = xi - xj, yi - yj
    den = np.hypot(dx, dy)
    bad = den == 0.0
    den = np.where(bad, 1.0, den)
    s = np.sign(cross)
    dist = np.abs(cross) / den
    # partials of the signed cross product
    c_xk, c_yk = yj - yi, xi - xj
    c_xi, c_yi = yk - yj, xj - xk
    c_xj, c_yj = yi - yk, xk - xi
    # partials of the base length with respect to P_i (P_j gets the negation)
    l_x, l_y = dx / den, dy / den
    q = cross / den ** 2
    jac = np.column_stack([
        s * c_xk / den, s * c_yk / den,
        s * (c_xi / den - q * l_x), s * (c_yi / den - q * l_y),
        s * (c_xj / den + q * l_x), s * (c_yj / den + q * l_y),
    ])
    return dist - obs, jac, bad


_KERNELS = {
    "distance": _distance_kernel,
    "angle": _angle_kernel,
    "point_line": _point_line_kernel,
}


class _Group:
    """Struct-of-arrays view of all measurements of one type."""

    __slots__ = ("kind", "rows", "idx", "axis", "obs", "inv_sigma", "pos")

    def __init__(self, kind, rows, idx, axis, obs, sigma):
        self.kind = kind
        self.rows = np.asarray(rows, dtype=np.int64)
        self.idx = np.asarray(idx, dtype=np.int64).reshape(len(self.rows), -1)
        self.axis = None if axis is None else np.asarray(axis, dtype=np.int64)
        self.obs = np.asarray(obs, dtype=float)
        self.inv_sigma = 1.0 / np.asarray(sigma, dtype=float)
        self.pos = None

    def columns(self):
        if self.kind == "coordinate":
            return (2 * self.idx[:, 0] + self.axis)[:, None]
        # (X_a, Y_a, X_b, Y_b, ...) in the kernel's point order
        cols = np.empty((len(self.rows), 2 * self.idx.shape[1]), dtype=np.int64)
        cols[:, 0::2] = 2 * self.idx
        cols[:, 1::2] = 2 * self.idx + 1
        return cols

    def evaluate(self, xy, x, want_jac):
        if self.kind == "coordinate":
            col = 2 * self.idx[:, 0] + self.axis
            res = (x[col] - self.obs) * self.inv_sigma
            jac = self.inv_sigma[:, None] if want_jac else None
            return res, jac, None
        raw, jac, bad = _KERNELS[self.kind](xy, self.idx, self.obs)
        res = raw * self.inv_sigma
        if want_jac:
            jac = jac * self.inv_sigma[:, None]
        return res, jac, bad


class _Compiled:
    """Per-problem evaluation plan: grouped measurements and CSR layout."""

    def __init__(self, problem):
        buckets = {}
        for row, meas in enumerate(problem.measurements):
            b = buckets.setdefault(meas.kind, ([], [], [], [], []))
            b[0].append(row)
            b[1].append(meas.points)
            b[2].append(getattr(meas, "axis", 0))
            b[3].append(meas.value)
            b[4].append(meas.sigma)
        self.m = len(problem.measurements)
        self.n = 2 * problem.n_points
        self.groups = []
        for kind in ("distance", "angle", "point_line", "coordinate"):
            if kind not in buckets:
                continue
            rows, idx, axis, obs, sigma = buckets[kind]
            self.groups.append(_Group(kind, rows, idx,
                                      axis if kind == "coordinate" else None,
                                      obs, sigma))
        nnz_row = np.zeros(self.m, dtype=np.int64)
        for g in self.groups:
            nnz_row[g.rows] = 2 * g.idx.shape[1] if g.kind != "coordinate" else 1
        self.indptr = np.concatenate([[0], np.cumsum(nnz_row)])
        self.indices = np.empty(self.indptr[-1], dtype=np.int32)
        for g in self.groups:
            cols = g.columns()
            rank = np.argsort(np.argsort(cols, axis=1, kind="stable"), axis=1)
            g.pos = self.indptr[g.rows][:, None] + rank
            self.indices[g.pos] = cols

    def run(self, x, want_jac):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"x must have shape ({self.n},), got {x.shape}")
        xy = x.reshape(-1, 2)
        R = np.empty(self.m)
        data = np.empty(self.indptr[-1]) if want_jac else None
        for g in self.groups:
            res, jac, bad = g.evaluate(xy, x, want_jac)
            if bad is not None and bad.any():
                if g.kind == "distance" and not want_jac:
                    bad = np.zeros_like(bad)
                else:
                    j = int(g.rows[np.flatnonzero(bad)[0]])
                    raise EvaluationError(f"degenerate geometry in {g.kind} observation", index=j)
            R[g.rows] = res
            if want_jac:
                data[g.pos] = jac
        if not np.all(np.isfinite(R)):
            j = int(np.flatnonzero(~np.isfinite(R))[0])
            raise EvaluationError("non-finite residual", index=j)
        if not want_jac:
            return R, None
        if not np.all(np.isfinite(data)):
            pos = int(np.flatnonzero(~np.isfinite(data))[0])
            j = int(np.searchsorted(self.indptr, pos, side="right") - 1)
            raise EvaluationError("non-finite Jacobian entry", index=j)
        J = sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()),
                          shape=(self.m, self.n))
        J.has_sorted_indices = True
        return R, J


@dataclass(eq=False)
class Problem:
    """Point count, ordered observations and optional ground-truth coordinates."""

    n_points: int
    measurements: Sequence[Measurement]
    ground_truth: np.ndarray | None = None
    _compiled: _Compiled | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.measurements = tuple(self.measurements)
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if not self.measurements:
            raise ValueError("a problem needs at least one measurement")
        seen = np.zeros(self.n_points, dtype=bool)
        for j, meas in enumerate(self.measurements):
            pts = meas.points
            if max(pts) >= self.n_points:
                raise ValueError(f"measurement {j} references point {max(pts)} "
                                 f"but n_points = {self.n_points}")
            seen[list(pts)] = True
        if not seen.all():
            raise ValueError(f"point {int(np.flatnonzero(~seen)[0])} is not observed")
        if self.ground_truth is not None:
            gt = np.asarray(self.ground_truth, dtype=float)
            if gt.shape != (self.n,):
                raise ValueError(f"ground_truth must have length {self.n}")
            self.ground_truth = gt

    @property
    def n(self):
        return 2 * self.n_points

    @property
    def m(self):
        return len(self.measurements)

    @property
    def compiled(self):
        if self._compiled is None:
            self._compiled = _Compiled(self)
        return self._compiled

    def coordinate_guess(self, fill=0.0):
        """Starting point built from the coordinate observations.

        Several observations of one coordinate are combined by their
        inverse-variance weighted mean; unobserved coordinates get ``fill``.
        """
        num = np.zeros(self.n)
        den = np.zeros(self.n)
        for meas in self.measurements:
            if meas.kind == "coordinate":
                w = 1.0 / meas.sigma ** 2
                num[2 * meas.i + meas.axis] += w * meas.value
                den[2 * meas.i + meas.axis] += w
        x = np.full(self.n, float(fill))
        seen = den > 0
        x[seen] = num[seen] / den[seen]
        return x

    def type_counts(self):
        counts = {k: 0 for k in _KINDS}
        for meas in self.measurements:
            counts[meas.kind] += 1
        return counts


class SparseRow(NamedTuple):
    """One Jacobian row: sorted column indices and their values."""

    indices: np.ndarray
    values: np.ndarray
    size: int

    def toarray(self):
        out = np.zeros(self.size)
        out[self.indices] = self.values
        return out


def _single(meas, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size % 2:
        raise ValueError("x must be a flat vector of (X, Y) pairs")
    n_points = x.size // 2
    if max(meas.points) >= n_points:
        raise ValueError(f"measurement references point {max(meas.points)} "
                         f"but x holds {n_points} points")
    g = _Group(meas.kind, [0], [meas.points], [getattr(meas, "axis", 0)]
               if meas.kind == "coordinate" else None, [meas.value], [meas.sigma])
    return g, x


def eval_residual(meas, x):
    """Weighted residual of a single measurement at ``x``."""
    g, x = _single(meas, x)
    res, _, bad = g.evaluate(x.reshape(-1, 2), x, False)
    if bad is not None and bad[0] and meas.kind != "distance":
        raise EvaluationError(f"degenerate geometry in {meas.kind} observation")
    value = float(res[0])
    if not math.isfinite(value):
        raise EvaluationError(f"non-finite {meas.kind} residual")
    return value


def eval_residual_gradient(meas, x):
    """Analytic gradient of :func:`eval_residual` as a :class:`SparseRow`."""
    g, x = _single(meas, x)
    _, jac, bad = g.evaluate(x.reshape(-1, 2), x, True)
    if bad is not None and bad[0]:
        raise EvaluationError(f"degenerate geometry in {meas.kind} observation")
    cols = g.columns()[0]
    vals = np.asarray(jac[0], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise EvaluationError(f"non-finite {meas.kind} gradient")
    order = np.argsort(cols)
    return SparseRow(cols[order], vals[order], x.size)


def eval_R(p, x):
    """Weighted residual vector, in measurement order."""
    return p.compiled.run(x, False)[0]


def eval_J(p, x):
    """Sparse (CSR) Jacobian of :func:`eval_R`."""
    return p.compiled.run(x, True)[1]


def eval_RJ(p, x):
    """Residual vector and Jacobian from a single pass."""
    return p.compiled.run(x, True)


def eval_F(p, x):
    R = eval_R(p, x)
    return 0.5 * float(R @ R)


def eval_gradient(p, x):
    R, J = eval_RJ(p, x)
    return J.T @ R


# ---------------------------------------------------------------------------
# problem files
# ---------------------------------------------------------------------------

def _meas_to_dict(meas):
    out = {"type": meas.kind, "indices": [int(i) for i in meas.points]}
    if meas.kind == "coordinate":
        out["axis"] = "xy"[meas.axis]
    out["value"] = float(meas.value)
    out["sigma"] = float(meas.sigma)
    return out


def _meas_from_dict(d):
    kind = d["type"]
    if kind not in _KINDS:
        raise ValueError(f"unknown measurement type {kind!r}")
    idx = [int(i) for i in d["indices"]]
    value, sigma = float(d["value"]), float(d["sigma"])
    expected = {"distance": 2, "angle": 3, "point_line": 3, "coordinate": 1}[kind]
    if len(idx) != expected:
        raise ValueError(f"{kind} needs {expected} indices, got {len(idx)}")
    if kind == "distance":
        return Distance(idx[0], idx[1], value, sigma)
    if kind == "angle":
        return Angle(idx[0], idx[1], idx[2], value, sigma)
    if kind == "point_line":
        return PointLine(idx[0], idx[1], idx[2], value, sigma)
    axis = d.get("axis")
    if axis not in ("x", "y"):
        raise ValueError(f"coordinate axis must be 'x' or 'y', got {axis!r}")
    return Coordinate(idx[0], "xy".index(axis), value, sigma)


def problem_to_dict(p, include_truth=True):
    out = {
        "format": PROBLEM_FORMAT,
        "version": PROBLEM_VERSION,
        "n_points": int(p.n_points),
        "measurements": [_meas_to_dict(m) for m in p.measurements],
    }
    if include_truth and p.ground_truth is not None:
        out["ground_truth"] = [float(v) for v in p.ground_truth]
    return out


def problem_from_dict(d):
    if d.get("format", PROBLEM_FORMAT) != PROBLEM_FORMAT:
        raise ValueError(f"not a problem file: format {d.get('format')!r}")
    if int(d.get("version", PROBLEM_VERSION)) > PROBLEM_VERSION:
        raise ValueError(f"unsupported problem file version {d['version']}")
    gt = d.get("ground_truth")
    return Problem(
        n_points=int(d["n_points"]),
        measurements=[_meas_from_dict(m) for m in d["measurements"]],
        ground_truth=None if gt is None else np.asarray(gt, dtype=float),
    )


def save_problem(p, path, include_truth=True):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(p, include_truth), fh)
        fh.write("\n")


def load_problem(path):
    with open(path) as fh:
        return problem_from_dict(json.load(fh))
