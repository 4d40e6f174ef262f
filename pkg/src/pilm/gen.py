"""Synthetic network-adjustment problems with known ground truth.

Points are drawn without replacement from a regular ``2 sqrt(n) x 2 sqrt(n)``
grid (so a quarter of the grid nodes is occupied), ``grid_spacing`` length
units apart.  Geometric observations are added one at a time, with partners
chosen with probability decaying as ``exp(-dist / decay_length)``, until the
mean number of geometric observations per point reaches ``avg_obs_per_point``.
Every point then gets an X and a Y coordinate observation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import UnavailableError
from .model import Angle, Coordinate, Distance, PointLine, Problem, wrap_angle

__all__ = ["GenConfig", "generate", "grid_side", "coordinate_error", "CoordinateError"]

_KIND_ORDER = ("distance", "angle", "point_line")
_ANGLE_UNITS = {
    "rad": 1.0,
    "deg": math.pi / 180.0,
    "gon": math.pi / 200.0,
    "cgon": math.pi / 20000.0,
    "mgon": math.pi / 200000.0,
    "arcsec": math.pi / 648000.0,
}


@dataclass
class GenConfig:
    n_hat: int
    seed: int = 0
    # length units between neighbouring grid nodes
    grid_spacing: float = 20.0
    sigma_dist: float = 0.01
    sigma_angle: float = 1.0
    angle_unit: str = "cgon"
    sigma_coord_loose: float = 1.0
    sigma_coord_tight: float = 0.01
    tight_fraction: float = 0.01
    avg_obs_per_point: float = 6.0
    # relative frequency of distance, angle, point-line observations
    type_weights: tuple = (1.0, 1.0, 1.0)
    decay_length: float = 2.0
    # multiplies every noise draw; 0 gives exact observations
    noise_scale: float = 1.0
    min_angle_sep: float = 0.05
    # in grid steps; keeps points off the kink of |offset|
    min_line_offset: float = 0.5

    def validate(self):
        grid_side(self.n_hat)
        if self.angle_unit not in _ANGLE_UNITS:
            raise ValueError(f"angle_unit must be one of {sorted(_ANGLE_UNITS)}, "
                             f"got {self.angle_unit!r}")
        for name in ("sigma_dist", "sigma_angle", "sigma_coord_loose",
                     "sigma_coord_tight", "decay_length", "avg_obs_per_point",
                     "grid_spacing"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.tight_fraction <= 1.0:
            raise ValueError("tight_fraction must lie in [0, 1]")
        w = np.asarray(self.type_weights, dtype=float)
        if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("type_weights needs three non-negative entries, not all zero")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")

    @property
    def angle_sigma_rad(self):
        return float(self.sigma_angle) * _ANGLE_UNITS[self.angle_unit]

    def to_dict(self):
        d = asdict(self)
        d["type_weights"] = list(self.type_weights)
        return d


def grid_side(n_hat):
    """Side of the sampling grid, ``2 sqrt(n_hat)``; rejects non-square counts."""
    n_hat = int(n_hat)
    if n_hat < 4:
        raise ValueError(f"n_hat must be at least 4, got {n_hat}")
    root = math.isqrt(n_hat)
    if root * root != n_hat:
        raise ValueError(f"n_hat = {n_hat} does not give an integer grid side "
                         f"(2*sqrt(n_hat) = {2 * math.sqrt(n_hat):.3f}); use a perfect square")
    return 2 * root


class _PartnerSampler:
    """Distance-decayed sampling of observation partners around an anchor."""

    def __init__(self, pts, decay, rng):
        self.rng = rng
        n = len(pts)
        radius = 6.0 * decay
        if n <= 400:
            lists = [np.delete(np.arange(n), a) for a in range(n)]
        else:
            tree = cKDTree(pts)
            lists = []
            for a, nb in enumerate(tree.query_ball_point(pts, r=radius)):
                nb = np.asarray(sorted(nb), dtype=np.int64)
                nb = nb[nb != a]
                if len(nb) < 2:
                    _, nb = tree.query(pts[a], k=min(n, 4))
                    nb = np.asarray(sorted(int(v) for v in nb if v != a))
                lists.append(nb)
        self.neighbors = lists
        self.probs = []
        for a, nb in enumerate(lists):
            w = np.exp(-np.hypot(*(pts[nb] - pts[a]).T) / decay)
            self.probs.append(w / w.sum())

    def draw(self, anchor, count):
        nb = self.neighbors[anchor]
        if len(nb) < count:
            return None
        return self.rng.choice(nb, size=count, replace=False, p=self.probs[anchor])


def _true_angle(xy, i, j, k):
    a = xy[k] - xy[j]
    b = xy[k] - xy[i]
    return float(wrap_angle(math.atan2(a[1], a[0]) - math.atan2(b[1], b[0])))


def _true_offset(xy, k, i, j):
    (xk, yk), (xi, yi), (xj, yj) = xy[k], xy[i], xy[j]
    cross = (xj - xi) * (yi - yk) - (xi - xk) * (yj - yi)
    return abs(cross) / math.hypot(xi - xj, yi - yj)


def generate(cfg):
    """Build a random problem from ``cfg``; the result carries ``ground_truth``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    side = grid_side(cfg.n_hat)
    n_hat = int(cfg.n_hat)

    cells = rng.choice(side * side, size=n_hat, replace=False)
    xy = cfg.grid_spacing * np.column_stack([cells % side, cells // side]).astype(float)
    sampler = _PartnerSampler(xy, cfg.decay_length * cfg.grid_spacing, rng)

    weights = np.asarray(cfg.type_weights, dtype=float)
    weights = weights / weights.sum()
    sig_a = cfg.angle_sigma_rad
    target = cfg.avg_obs_per_point * n_hat
    incidences = 0
    meas = []
    misses = 0
    while incidences < target:
        if misses > 1000 * n_hat:
            raise RuntimeError("observation sampling keeps failing; relax the geometry filters")
        kind = _KIND_ORDER[rng.choice(3, p=weights)]
        anchor = int(rng.integers(n_hat))
        if kind == "distance":
            other = sampler.draw(anchor, 1)
            if other is None:
                misses += 1
                continue
            j = int(other[0])
            d = float(np.hypot(*(xy[anchor] - xy[j])))
            meas.append(Distance(anchor, j, d + cfg.noise_scale * cfg.sigma_dist * rng.standard_normal(),
                                 cfg.sigma_dist))
            incidences += 2
            continue
        pair = sampler.draw(anchor, 2)
        if pair is None:
            misses += 1
            continue
        p, q = int(pair[0]), int(pair[1])
        if kind == "angle":
            # anchor is the common endpoint P_k of both bearings
            alpha = _true_angle(xy, p, q, anchor)
            if min(abs(alpha), math.pi - abs(alpha)) < cfg.min_angle_sep:
                misses += 1
                continue
            obs = float(wrap_angle(alpha + cfg.noise_scale * sig_a * rng.standard_normal()))
            meas.append(Angle(p, q, anchor, obs, sig_a))
        else:
            off = _true_offset(xy, anchor, p, q)
            if off < cfg.min_line_offset * cfg.grid_spacing:
                misses += 1
                continue
            meas.append(PointLine(anchor, p, q,
                                  off + cfg.noise_scale * cfg.sigma_dist * rng.standard_normal(),
                                  cfg.sigma_dist))
        incidences += 3

    n_tight = int(round(cfg.tight_fraction * n_hat))
    tight = np.zeros(n_hat, dtype=bool)
    tight[rng.choice(n_hat, size=n_tight, replace=False)] = True
    for i in range(n_hat):
        sigma = cfg.sigma_coord_tight if tight[i] else cfg.sigma_coord_loose
        for axis in (0, 1):
            noise = cfg.noise_scale * sigma * rng.standard_normal()
            meas.append(Coordinate(i, axis, float(xy[i, axis] + noise), sigma))

    return Problem(n_points=n_hat, measurements=meas, ground_truth=xy.ravel().copy())


@dataclass
class CoordinateError:
    errors: np.ndarray
    median: float
    p90: float
    p99: float
    max: float

    def summary(self):
        return {"median": self.median, "p90": self.p90, "p99": self.p99, "max": self.max}


def coordinate_error(x, ground_truth):
    """Per-variable absolute error ``|x_i - x*_i|`` and its quantiles."""
    if ground_truth is None:
        raise UnavailableError("problem carries no ground truth")
    x = np.asarray(x, dtype=float)
    gt = np.asarray(ground_truth, dtype=float)
    if x.shape != gt.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {gt.shape}")
    err = np.abs(x - gt)
    q = np.quantile(err, [0.5, 0.9, 0.99])
    return CoordinateError(err, float(q[0]), float(q[1]), float(q[2]), float(err.max()))
