"""Outer Levenberg-Marquardt loops: the block-parallel inexact method and a
classical baseline that solves the full damped system directly.

Both loops share damping rules, the nonmonotone line search

    F(x + alpha d) <= F(x) - c alpha^2 ||g||^2 + eps_k,   eps_k = eps0 gamma^k,

and the termination tests.  Only the way the direction ``d`` is produced
differs.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.sparse as sp

from . import blocks as blk
from .errors import EvaluationError, StallError
from .inner import _factor, factor_blocks, fixed_point_solve
from .model import eval_R, eval_RJ
from .partition import build_variable_graph, induce_residual_partition, partition_variables, reorder
from .runtime import WorkerPool, default_workers

__all__ = [
    "Theoretical", "Practical", "DeltaSchedule", "LineSearch", "FullStep",
    "Termination", "SolverConfig", "IterationRecord", "Status", "SolveResult",
    "choose_mu", "line_search", "check_termination", "sigma_fractions",
    "pilm_solve", "classical_lm_solve", "config_to_dict",
]

log = logging.getLogger(__name__)

SIGMA_LEVELS = (1.0, 2.0, 3.0)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Theoretical:
    """``mu = max(mu_min, C_mu ||B||)`` with ``||B||`` from power iteration."""

    mu_min: float = 1e-10
    C_mu: float = 2.0
    mu_max: float = 1e10
    norm_iters: int = 30

    def validate(self):
        if not self.C_mu > 1:
            raise ValueError("C_mu must exceed 1")
        _check_bounds(self.mu_min, self.mu_max)


@dataclass(frozen=True)
class Practical:
    """Halve ``mu`` after a step with ``alpha > 0.5``, double it otherwise.

    ``mu0=None`` starts from ``max(1, ||R(x0)||)``.
    """

    mu0: float | None = None
    mu_min: float = 1e-10
    mu_max: float = 1e10

    def validate(self):
        _check_bounds(self.mu_min, self.mu_max)
        if self.mu0 is not None and not self.mu0 > 0:
            raise ValueError("mu0 must be positive")


@dataclass(frozen=True)
class DeltaSchedule:
    """``mu = mu_bar ||g||^delta``."""

    mu_bar: float = 1.0
    delta: float = 1.0
    mu_min: float = 1e-14
    mu_max: float = 1e10

    def validate(self):
        if not self.mu_bar > 0:
            raise ValueError("mu_bar must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        _check_bounds(self.mu_min, self.mu_max)


MuMode = Union[Theoretical, Practical, DeltaSchedule]


def _check_bounds(lo, hi):
    if not 0 < lo <= hi:
        raise ValueError(f"need 0 < mu_min <= mu_max, got {lo}, {hi}")


@dataclass(frozen=True)
class LineSearch:
    beta: float = 0.5
    alpha_min: float = 1e-16

    def validate(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")


@dataclass(frozen=True)
class FullStep:
    def validate(self):
        pass


@dataclass(frozen=True)
class Termination:
    """Stopping rules; ``None`` disables a rule.

    ``grad_rtol`` stops once ``||g|| <= grad_rtol * ||g0||``.
    """

    grad_tol: float | None = None
    grad_rtol: float | None = None
    sigma_fractions: tuple | None = (0.68, 0.95, 0.995)
    max_outer_iters: int = 200
    time_budget: float | None = None

    def validate(self):
        if self.sigma_fractions is not None:
            f = tuple(self.sigma_fractions)
            if len(f) != 3 or not all(0 <= v <= 1 for v in f):
                raise ValueError("sigma_fractions needs three values in [0, 1]")
        if self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be non-negative")


@dataclass(frozen=True)
class SolverConfig:
    """Settings shared by both solvers.

    ``c=None`` picks ``c_scale / ||J(x0)||^2`` so the sufficient-decrease
    term is on the scale of an actual LM decrease; ``eps0=None`` uses
    ``eps_rel * F(x0)``.  Setting ``inner_eta`` switches the inner loop to
    adaptive mode: at least ``ell`` and at most ``ell_max`` steps, stopping
    once ``||r^l|| <= inner_eta * ||g||^inner_power``.
    """

    K: int = 1
    ell: int = 5
    c: float | None = None
    c_scale: float = 1e-4
    eps0: float | None = None
    eps_rel: float = 1e-3
    gamma: float = 0.9
    mu_mode: MuMode = field(default_factory=Practical)
    alpha_mode: Union[LineSearch, FullStep] = field(default_factory=LineSearch)
    termination: Termination = field(default_factory=Termination)
    seed: int = 0
    workers: int | None = None
    inner_eta: float | None = None
    inner_power: float = 1.0
    ell_max: int = 100
    imbalance: float = 0.05
    partition_trials: int = 4
    keep_iterates: bool = False
    debug: bool = False

    def validate(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.ell < 1:
            raise ValueError("ell must be at least 1")
        if self.c is not None and not self.c > 0:
            raise ValueError("c must be positive")
        if self.eps0 is not None and not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if not self.eps_rel > 0:
            raise ValueError("eps_rel must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        self.mu_mode.validate()
        self.alpha_mode.validate()
        self.termination.validate()


def config_to_dict(cfg):
    """JSON-ready echo of a config, with the mode class names kept."""
    def conv(obj):
        if dataclasses.is_dataclass(obj):
            out = {"type": type(obj).__name__}
            out.update({f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj)})
            return out
        if isinstance(obj, tuple):
            return list(obj)
        return obj
    return conv(cfg)


# ---------------------------------------------------------------------------
# records and results
# ---------------------------------------------------------------------------

@dataclass
class IterationRecord:
    k: int
    F: float
    grad_norm: float
    mu: float
    alpha: float
    backtracks: int
    inner_residual_norms: list
    rho_bound: float | None
    within_sigma: tuple
    elapsed: float
    eps_k: float = 0.0
    F_new: float = 0.0
    step_norm: float = 0.0
    residual_percentiles: dict = field(default_factory=dict)
    mu_retries: int = 0
    inner_diverged: bool = False

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["within_sigma"] = list(self.within_sigma)
        return d


@dataclass(frozen=True)
class Status:
    kind: str
    criterion: str | None = None

    @property
    def converged(self):
        return self.kind == "Converged"

    def __str__(self):
        return f"{self.kind}({self.criterion})" if self.criterion else self.kind


@dataclass
class SolveResult:
    x: np.ndarray
    records: list
    status: Status
    F: float
    grad_norm: float
    within_sigma: tuple
    wall_time: float
    timings: dict
    c: float
    eps0: float
    gamma: float
    partition: dict | None = None
    iterates: list | None = None
    config: dict | None = None

    def __iter__(self):
        return iter((self.x, self.records, self.status))

    @property
    def iterations(self):
        return len(self.records)

    def fraction_history(self):
        """σ-fractions at every visited iterate, the final one included."""
        return [r.within_sigma for r in self.records] + [self.within_sigma]

    def summary(self):
        return {
            "status": str(self.status),
            "iterations": self.iterations,
            "F": self.F,
            "grad_norm": self.grad_norm,
            "within_sigma": list(self.within_sigma),
            "wall_time": self.wall_time,
            "timings": dict(self.timings),
            "partition": self.partition,
        }


# ---------------------------------------------------------------------------
# building blocks of the outer loop
# ---------------------------------------------------------------------------

def choose_mu(mode, bs, grad_norm, prev_mu=None, prev_alpha=None, b_norm=None, seed=0):
    """Damping for the next step, clipped to ``[mu_min, mu_max]``.

    ``b_norm`` overrides the power-iteration estimate of ``||B||`` in
    Theoretical mode.
    """
    if isinstance(mode, Theoretical):
        if b_norm is None:
            b_norm = 0.0 if bs is None else blk.estimate_B_norm(bs, mode.norm_iters, seed)
        mu = mode.C_mu * b_norm
    elif isinstance(mode, Practical):
        if prev_mu is None:
            if mode.mu0 is None:
                raise ValueError("Practical mode needs mu0 for the first step")
            mu = mode.mu0
        else:
            mu = prev_mu / 2 if prev_alpha is not None and prev_alpha > 0.5 else 2 * prev_mu
    elif isinstance(mode, DeltaSchedule):
        mu = mode.mu_bar * float(grad_norm) ** mode.delta
    else:
        raise TypeError(f"unknown damping mode {mode!r}")
    return float(min(max(mu, mode.mu_min), mode.mu_max))


def line_search(p, x, d, g, c, eps_k, beta=0.5, F_x=None, alpha_min=1e-16):
    """Largest ``alpha`` in ``{1, beta, beta^2, ...}`` meeting the
    nonmonotone decrease condition.

    ``g`` may be the gradient or its norm.  Trial points where the model
    cannot be evaluated count as rejections.
    """
    if not eps_k > 0:
        raise ValueError("eps_k must be positive")
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("search direction has non-finite entries")
    gsq = float(np.dot(g, g)) if np.ndim(g) else float(g) ** 2
    if F_x is None:
        R = eval_R(p, x)
        F_x = 0.5 * float(R @ R)
    alpha = 1.0
    backtracks = 0
    best = math.inf
    while alpha >= alpha_min:
        try:
            R = eval_R(p, x + alpha * d)
            F_new = 0.5 * float(R @ R)
        except EvaluationError:
            F_new = math.inf
        best = min(best, F_new)
        if F_new <= F_x - c * alpha * alpha * gsq + eps_k:
            return alpha, F_new, backtracks
        alpha *= beta
        backtracks += 1
    raise StallError("line search step underflow",
                     diagnostics={"F": F_x, "best_trial_F": best, "eps_k": eps_k,
                                  "grad_norm_sq": gsq, "backtracks": backtracks})


def sigma_fractions(R_weighted):
    """Fractions of weighted residuals strictly below 1, 2 and 3."""
    r = np.abs(np.asarray(R_weighted, dtype=float))
    if r.size == 0:
        return (1.0, 1.0, 1.0)
    return tuple(float(np.count_nonzero(r < s)) / r.size for s in SIGMA_LEVELS)


def check_termination(R_weighted, grad_norm, cfg, grad0=None):
    """``Status('Converged', ...)`` when a stopping rule holds, else ``None``.

    ``cfg`` is a :class:`Termination` or a :class:`SolverConfig`.
    """
    term = cfg.termination if isinstance(cfg, SolverConfig) else cfg
    if term.sigma_fractions is not None:
        f = sigma_fractions(R_weighted)
        if all(a >= b for a, b in zip(f, term.sigma_fractions)):
            return Status("Converged", "sigma")
    if term.grad_tol is not None and grad_norm <= term.grad_tol:
        return Status("Converged", "gradient")
    if term.grad_rtol is not None and grad0 is not None and grad_norm <= term.grad_rtol * grad0:
        return Status("Converged", "gradient")
    return None


def _percentiles(R):
    q = np.percentile(np.abs(R), [50, 90, 99])
    return {"p50": float(q[0]), "p90": float(q[1]), "p99": float(q[2])}


def _spectral_sq(J, seed):
    hist = blk.power_norm(lambda v: J @ v, lambda w: J.T @ w, J.shape[1], iters=20, seed=seed)
    return max(hist) ** 2


# ---------------------------------------------------------------------------
# direction engines
# ---------------------------------------------------------------------------

class _BlockEngine:
    """Block assembly plus fixed-point inner solve on a reordered problem."""

    def __init__(self, part, offsets, cfg, pool):
        self.part = part
        self.offsets = offsets
        self.cfg = cfg
        self.pool = pool
        self.bs = None
        self._b_vec = None

    def prepare(self, R, J, timings):
        t0 = time.perf_counter()
        split = blk.split_jacobian(J, self.part, self.offsets)
        timings["split"] += time.perf_counter() - t0
        part = self.part
        rho = R[part.E_hat]

        def assemble(i):
            own, jr = split[i]
            return blk.assemble_block(own, jr, R[part.E[i]], rho)

        pg = self.pool.map("assemble", assemble, part.K)
        J_rho = [jr for _, jr in split]
        coupled = self.pool.map(
            "coupling", lambda i: blk.assemble_coupling(J_rho, i, part.neighbors[i]), part.K)
        B = {}
        for d in coupled:
            B.update(d)
        self.bs = blk.BlockSystem(self.offsets, [P for P, _ in pg], B, [g for _, g in pg],
                                  list(part.neighbors), 0.0, J_rho)
        return self.bs.gradient()

    def b_norm(self, mode, seed):
        # warm-started from the previous outer iteration, where B barely moves
        iters = mode.norm_iters if isinstance(mode, Theoretical) else 10
        if self._b_vec is None:
            iters = max(iters, 30)
        est, self._b_vec = blk.estimate_B_norm(self.bs, iters, seed, self._b_vec,
                                               return_vector=True)
        return est

    def direction(self, mu, grad_norm, b_norm):
        cfg = self.cfg
        self.bs.mu = mu
        fac = factor_blocks(self.bs, mu, self.pool)
        rtol = None
        if cfg.inner_eta is not None:
            rtol = cfg.inner_eta * grad_norm ** cfg.inner_power
        res = fixed_point_solve(self.bs, fac, cfg.ell, pool=self.pool, rtol=rtol,
                                ell_max=cfg.ell_max, b_norm=b_norm, debug=cfg.debug, warn=False)
        return res.d, res.inner_residual_norms, res.rho_bound, res.diverged


class _DirectEngine:
    """Full damped normal equations factored in one piece."""

    def __init__(self):
        self.JtJ = None
        self.g = None

    def prepare(self, R, J, timings):
        t0 = time.perf_counter()
        self.JtJ = (J.T @ J).tocsr()
        self.g = J.T @ R
        timings["assemble"] += time.perf_counter() - t0
        return self.g

    def b_norm(self, mode, seed):
        return 0.0

    def direction(self, mu, grad_norm, b_norm):
        A = (self.JtJ + mu * sp.identity(self.JtJ.shape[0], format="csr")).tocsc()
        d = _factor(A).solve(-self.g)
        return d, [float(np.linalg.norm(A @ d + self.g))], 0.0, False


# ---------------------------------------------------------------------------
# the shared outer loop
# ---------------------------------------------------------------------------

def _open_log(log_path):
    if log_path is None:
        return None
    if hasattr(log_path, "write"):
        return log_path
    return open(log_path, "w")


def _outer_loop(p, x, cfg, engine, timings, t_start, to_old, log_fh):
    term = cfg.termination
    mode = cfg.mu_mode
    t0 = time.perf_counter()
    R, J = eval_RJ(p, x)
    timings["evaluate"] += time.perf_counter() - t0
    F = 0.5 * float(R @ R)
    F0 = F
    eps0 = cfg.eps0 if cfg.eps0 is not None else cfg.eps_rel * max(F0, np.finfo(float).tiny)
    c = cfg.c if cfg.c is not None else cfg.c_scale / max(_spectral_sq(J, cfg.seed), 1e-300)
    if isinstance(mode, Practical) and mode.mu0 is None:
        mode = dataclasses.replace(mode, mu0=max(1.0, float(np.linalg.norm(R))))

    records = []
    iterates = [to_old(x)] if cfg.keep_iterates else None
    prev_mu = prev_alpha = None
    grad0 = None
    status = None
    g = None
    k = 0
    while True:
        g = engine.prepare(R, J, timings)
        gnorm = float(np.linalg.norm(g))
        if grad0 is None:
            grad0 = gnorm
        fractions = sigma_fractions(R)
        status = check_termination(R, gnorm, term, grad0)
        if status is not None:
            break
        if k >= term.max_outer_iters:
            status = Status("MaxIters")
            break
        if term.time_budget is not None and time.perf_counter() - t_start >= term.time_budget:
            status = Status("TimeBudget")
            break

        eps_k = eps0 * cfg.gamma ** k
        t0 = time.perf_counter()
        b_norm = engine.b_norm(mode, cfg.seed)
        mu = choose_mu(mode, None, gnorm, prev_mu, prev_alpha, b_norm=b_norm)
        timings["damping"] += time.perf_counter() - t0

        retries = 0
        while True:
            d, inner_norms, rho_bound, diverged = engine.direction(mu, gnorm, b_norm)
            if isinstance(cfg.alpha_mode, FullStep):
                alpha, backtracks = 1.0, 0
                t0 = time.perf_counter()
                Rn = eval_R(p, x + d)
                F_new = 0.5 * float(Rn @ Rn)
                timings["line_search"] += time.perf_counter() - t0
                break
            t0 = time.perf_counter()
            try:
                alpha, F_new, backtracks = line_search(
                    p, x, d, g, c, eps_k, cfg.alpha_mode.beta, F_x=F,
                    alpha_min=cfg.alpha_mode.alpha_min)
                break
            except StallError as exc:
                if retries >= 1:
                    exc.diagnostics = dict(exc.diagnostics or {}, k=k, mu=mu)
                    status = Status("Stalled")
                    log.warning("stalled at iteration %d: %s", k, exc.diagnostics)
                    break
                retries += 1
                mu = min(2 * mu, mode.mu_max)
            finally:
                timings["line_search"] += time.perf_counter() - t0
        if status is not None:
            break

        step = alpha * d
        rec = IterationRecord(
            k=k, F=F, grad_norm=gnorm, mu=mu, alpha=alpha, backtracks=backtracks,
            inner_residual_norms=[float(v) for v in inner_norms],
            rho_bound=None if rho_bound is None else float(rho_bound),
            within_sigma=fractions, elapsed=time.perf_counter() - t_start,
            eps_k=eps_k, F_new=F_new, step_norm=float(np.linalg.norm(step)),
            residual_percentiles=_percentiles(R), mu_retries=retries, inner_diverged=diverged)
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec.to_dict()) + "\n")
        log.debug("k=%d F=%.6e |g|=%.3e mu=%.3e alpha=%.3g", k, F, gnorm, mu, alpha)

        x = x + step
        t0 = time.perf_counter()
        try:
            R, J = eval_RJ(p, x)
        except EvaluationError as exc:
            exc.iteration = k + 1
            raise
        timings["evaluate"] += time.perf_counter() - t0
        F = 0.5 * float(R @ R)
        if iterates is not None:
            iterates.append(to_old(x))
        prev_mu, prev_alpha = mu, alpha
        k += 1

    n_div = sum(r.inner_diverged for r in records)
    if n_div:
        log.warning("inner residuals grew in %d of %d outer iterations; mu was below the "
                    "contraction range there", n_div, len(records))
    gnorm = float(np.linalg.norm(g))
    return x, R, F, gnorm, records, status, c, eps0, iterates


def _finish(p_orig, x_old, records, status, F, gnorm, R, t_start, timings, c, eps0, cfg,
            part_summary, iterates, log_fh, own_log):
    wall = time.perf_counter() - t_start
    res = SolveResult(
        x=x_old, records=records, status=status, F=F, grad_norm=gnorm,
        within_sigma=sigma_fractions(R), wall_time=wall, timings=dict(timings), c=c,
        eps0=eps0, gamma=cfg.gamma, partition=part_summary, iterates=iterates,
        config=config_to_dict(cfg))
    if log_fh is not None:
        log_fh.write(json.dumps({"summary": res.summary()}) + "\n")
        if own_log:
            log_fh.close()
    return res


def pilm_solve(p, cfg=None, x0=None, log_path=None):
    """Block-parallel inexact LM.

    The problem is partitioned into ``cfg.K`` blocks and reordered so every
    block owns a contiguous slice of variables; the returned ``x`` is in the
    original ordering.
    """
    cfg = cfg or SolverConfig()
    cfg.validate()
    t_start = time.perf_counter()
    timings = defaultdict(float)
    x0 = p.coordinate_guess() if x0 is None else np.asarray(x0, dtype=float).copy()

    t0 = time.perf_counter()
    graph = build_variable_graph(p)
    part = partition_variables(graph, cfg.K, seed=cfg.seed, imbalance=cfg.imbalance,
                               trials=cfg.partition_trials)
    part = induce_residual_partition(p, part.block_of, cfg.K)
    q, ro = reorder(p, part)
    timings["partition"] += time.perf_counter() - t0

    workers = cfg.workers if cfg.workers is not None else default_workers(cfg.K)
    own_log = log_path is not None and not hasattr(log_path, "write")
    log_fh = _open_log(log_path)
    with WorkerPool(workers) as pool:
        engine = _BlockEngine(ro.partition, ro.var_offsets, cfg, pool)
        x, R, F, gnorm, records, status, c, eps0, iterates = _outer_loop(
            q, ro.to_new(x0), cfg, engine, timings, t_start, ro.to_old, log_fh)
        for phase, t in pool.timings.items():
            timings[phase] += t
    summary = part.summary()
    summary["workers"] = workers
    return _finish(p, ro.to_old(x), records, status, F, gnorm, ro.rows_to_old(R), t_start,
                   timings, c, eps0, cfg, summary, iterates, log_fh, own_log)


def classical_lm_solve(p, cfg=None, x0=None, log_path=None):
    """LM with the full system ``(J^T J + mu I) d = -J^T R`` solved directly."""
    cfg = cfg or SolverConfig()
    cfg.validate()
    t_start = time.perf_counter()
    timings = defaultdict(float)
    x0 = p.coordinate_guess() if x0 is None else np.asarray(x0, dtype=float).copy()
    own_log = log_path is not None and not hasattr(log_path, "write")
    log_fh = _open_log(log_path)
    x, R, F, gnorm, records, status, c, eps0, iterates = _outer_loop(
        p, x0, cfg, _DirectEngine(), timings, t_start, lambda v: v.copy(), log_fh)
    return _finish(p, x, records, status, F, gnorm, R, t_start, timings, c, eps0, cfg,
                   None, iterates, log_fh, own_log)
