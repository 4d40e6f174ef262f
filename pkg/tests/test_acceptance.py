"""Acceptance criteria, one test per criterion.

Every test records a PASS/FAIL/SKIP line that is printed in the terminal
summary (``pytest tests/test_acceptance.py``) and also printed directly when
run with ``-s``.  Tolerances are the stated ones; nothing is relaxed.
"""
import os
import time

import numpy as np
import pytest

from pilm.blocks import estimate_B_norm
from pilm.gen import GenConfig, coordinate_error, generate
from pilm.inner import dense_rho, factor_blocks, fixed_point_solve
from pilm.model import eval_F, eval_gradient, eval_residual_gradient
from pilm.outer import (
    DeltaSchedule, FullStep, Practical, SolverConfig, Termination, Theoretical,
    classical_lm_solve, pilm_solve,
)

import conftest
from conftest import block_system, disjoint_union, random_problem
from test_model import _random_measurement, central_fd


def record(n, ok, detail):
    verdict = "PASS" if ok else "FAIL"
    conftest.ACCEPTANCE[n] = (verdict, detail)
    print(f"criterion {n}: {verdict}  {detail}")
    assert ok, detail


def record_skip(n, detail):
    conftest.ACCEPTANCE[n] = ("SKIP", detail)
    print(f"criterion {n}: SKIP  {detail}")
    pytest.skip(detail)


# shared large runs ------------------------------------------------------------

@pytest.fixture(scope="module")
def big():
    """n_hat = 10^4 problem solved by LM and by PILM at K = 4, 8, 16."""
    p = generate(GenConfig(n_hat=10_000, seed=1))
    runs = {"lm": classical_lm_solve(p, SolverConfig())}
    for K in (4, 8, 16):
        runs[K] = pilm_solve(p, SolverConfig(K=K, ell=5, mu_mode=Practical()))
    return p, runs


# 1 ----------------------------------------------------------------------------

def test_criterion_01_gradient_correctness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    count = 0
    for kind in ("distance", "angle", "point_line", "coordinate"):
        for _ in range(100):
            meas, x = _random_measurement(kind, rng)
            row = eval_residual_gradient(meas, x).toarray()
            fd = central_fd(meas, x)
            worst = max(worst, np.linalg.norm(row - fd) / max(np.linalg.norm(fd), 1e-300))
            count += 1
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-6 and elapsed < 10,
           f"{count} rows, worst relative error {worst:.2e} (tol 1e-6), {elapsed:.2f}s (< 10s)")


# 2 ----------------------------------------------------------------------------

def test_criterion_02_block_assembly_oracle():
    rng = np.random.default_rng(7)
    worst_P = worst_g = 0.0
    max_n = 0
    for t in range(20):
        K = (2, 3, 5)[t % 3]
        p = random_problem(rng, int(rng.integers(30, 250)))
        max_n = max(max_n, p.n)
        x = p.ground_truth + rng.normal(0, 0.5, p.n)
        bs, J, R, _, _ = block_system(p, K, x, seed=t)
        Jd = J.toarray()
        JtJ = Jd.T @ Jd
        worst_P = max(worst_P, np.linalg.norm(bs.dense_P() + bs.dense_B() - JtJ) / np.linalg.norm(JtJ))
        g = Jd.T @ R
        worst_g = max(worst_g, np.linalg.norm(bs.gradient() - g) / np.linalg.norm(g))
    record(2, worst_P <= 1e-12 and worst_g <= 1e-12 and max_n <= 500,
           f"20 problems (n <= {max_n}), P+B vs J^T J {worst_P:.1e}, g vs J^T R {worst_g:.1e}")


# 3 and 4 ----------------------------------------------------------------------

def _desk_instances():
    out = []
    for t in range(20):
        n_hat = (36, 49, 64, 81, 100)[t % 5]
        K = (2, 3, 4)[t % 3]
        p = generate(GenConfig(n_hat=n_hat, seed=100 + t))
        x = p.coordinate_guess()
        bs, J, R, _, _ = block_system(p, K, x, seed=t)
        out.append((bs, J.toarray()))
    return out


@pytest.fixture(scope="module")
def desk():
    return _desk_instances()


def test_criterion_03_fixed_point_matches_direct(desk):
    worst = 0.0
    for bs, Jd in desk:
        b_norm = np.linalg.norm(bs.dense_B(), 2)
        mu = 2.0 * b_norm
        fac = factor_blocks(bs, mu)
        d = fixed_point_solve(bs, fac, 60).d
        g = bs.gradient()
        d_star = np.linalg.solve(Jd.T @ Jd + mu * np.eye(bs.n), -g)
        worst = max(worst, np.linalg.norm(d - d_star) / np.linalg.norm(d_star))
    record(3, worst <= 1e-8, f"20 instances, mu = 2||B||, ell = 60: worst relative error {worst:.2e}")


def test_criterion_04_inner_inequalities(desk):
    slack = 1e-10
    violations = []
    checked = 0
    for idx, (bs, Jd) in enumerate(desk):
        g = bs.gradient()
        gn = np.linalg.norm(g)
        b_norm = np.linalg.norm(bs.dense_B(), 2)
        jn2 = np.linalg.norm(Jd, 2) ** 2
        for ell in (1, 2, 5, 10):
            # v) needs mu = C_mu ||B||; i)-iv) hold for any mu, so a smaller one is checked too
            for C_mu, mu in ((2.0, 2.0 * b_norm), (None, 0.3 * b_norm)):
                fac = factor_blocks(bs, mu)
                res = fixed_point_solve(bs, fac, ell, warn=False)
                rho = dense_rho(bs, mu)
                r = res.inner_residual_norms[-1]
                d = res.d
                checks = {
                    "i": rho - b_norm / mu,
                    "ii": r - rho ** ell * gn,
                    "iii": np.linalg.norm(d) - (1 + rho ** ell) * gn / mu,
                    "iv": d @ g - (rho ** ell / mu - 1 / (jn2 + mu)) * gn ** 2,
                }
                if C_mu is not None:
                    checks["v"] = r - C_mu ** -ell * gn
                for name, excess in checks.items():
                    checked += 1
                    if excess > slack:
                        violations.append((idx, ell, name, excess))
    record(4, not violations,
           f"{checked} inequality checks on the criterion-3 instances, {len(violations)} "
           f"violations beyond {slack:g}" + (f": {violations[:3]}" if violations else ""))


# 5 ----------------------------------------------------------------------------

def test_criterion_05_separable_first_iterate_is_exact():
    worst = 0.0
    Ks = (1, 2, 4, 8)
    for K in Ks:
        p = disjoint_union([generate(GenConfig(n_hat=36, seed=s)) for s in range(K)])
        bs, J, R, _, _ = block_system(p, K, p.coordinate_guess())
        assert not bs.B, "partitioner failed to separate the components"
        g = bs.gradient()
        for mu in (1e-3, 1.0, 1e3):
            res = fixed_point_solve(bs, factor_blocks(bs, mu), 1)
            worst = max(worst, res.inner_residual_norms[0] / np.linalg.norm(g))
            Jd = J.toarray()
            d_lm = np.linalg.solve(Jd.T @ Jd + mu * np.eye(bs.n), -g)
            assert np.linalg.norm(res.d - d_lm) <= 1e-8 * np.linalg.norm(d_lm)
    record(5, worst <= 1e-12, f"K in {Ks}, empty coupling set: worst ||r^1||/||g|| = {worst:.1e}")


# 6 ----------------------------------------------------------------------------

def test_criterion_06_theoretical_global_convergence():
    p = generate(GenConfig(n_hat=1024, seed=1))
    x0 = p.coordinate_guess()
    F0 = eval_F(p, x0)
    cfg = SolverConfig(K=4, ell=5, mu_mode=Theoretical(C_mu=2.0, mu_min=1e-10),
                       eps0=1e-3 * F0, gamma=0.9,
                       termination=Termination(grad_rtol=1e-4, sigma_fractions=None,
                                               max_outer_iters=200))
    t0 = time.perf_counter()
    res = pilm_solve(p, cfg, x0)
    elapsed = time.perf_counter() - t0
    g0 = res.records[0].grad_norm
    dec = eps = 0.0
    bad = 0
    for r in res.records:
        dec += res.c * r.alpha ** 2 * r.grad_norm ** 2
        eps += r.eps_k
        if r.F_new > (F0 - dec + eps) * (1 + 1e-12):
            bad += 1
    reached = res.grad_norm <= 1e-4 * g0
    record(6, reached and bad == 0 and elapsed < 300,
           f"{res.status} after {res.iterations} iterations, ||g||/||g0|| = "
           f"{res.grad_norm / g0:.2e} (target 1e-4), telescoped-descent violations {bad}, "
           f"{elapsed:.0f}s")


# 7 ----------------------------------------------------------------------------

def _sigma_run_ok(res):
    hist = np.asarray(res.fraction_history())
    tail = hist[-6:]  # iterates over the final 5 iterations
    mono = bool(np.all(np.diff(tail, axis=0) >= 0))
    return res.status.kind == "Converged" and res.status.criterion == "sigma" and mono, mono


def test_criterion_07_sigma_fraction_termination(big):
    p_small = generate(GenConfig(n_hat=1024, seed=1))
    small = pilm_solve(p_small, SolverConfig(K=4, ell=5, mu_mode=Practical()))
    _, runs = big
    large = runs[4]
    ok_s, mono_s = _sigma_run_ok(small)
    ok_l, mono_l = _sigma_run_ok(large)
    record(7, ok_s and ok_l,
           f"n_hat=1024: {small.status} in {small.iterations} it, tail monotone {mono_s}; "
           f"n_hat=10^4: {large.status} in {large.iterations} it, tail monotone {mono_l}")


# 8 ----------------------------------------------------------------------------

def test_criterion_08_k_sweep(big):
    _, runs = big
    t_lm = runs["lm"].wall_time
    times = {K: runs[K].wall_time for K in (4, 8, 16)}
    best = min(times, key=times.get)
    ratio = times[best] / t_lm
    detail = (f"LM {t_lm:.1f}s; PILM " + ", ".join(f"K={K} {t:.1f}s" for K, t in times.items())
              + f"; best/LM = {ratio:.2f} (target <= 0.5)")
    cores = os.cpu_count() or 1
    if cores < 4:
        record_skip(8, f"needs >= 4 cores, found {cores}; measured on this machine: {detail}")
    same_rule = all(runs[K].status == runs["lm"].status for K in times)
    record(8, same_rule and ratio <= 0.5, detail)


# 9 ----------------------------------------------------------------------------

def test_criterion_09_determinism_across_workers():
    p = generate(GenConfig(n_hat=1024, seed=3))
    streams = []
    for workers in (1, 4):
        res = pilm_solve(p, SolverConfig(K=4, seed=11, workers=workers, keep_iterates=True))
        streams.append(res.iterates)
    same = len(streams[0]) == len(streams[1]) and all(
        a.tobytes() == b.tobytes() for a, b in zip(*streams))
    record(9, same, f"workers 1 vs 4: {len(streams[0])} iterates, bitwise identical {same}")


# 10 ---------------------------------------------------------------------------

def _local_problem():
    # noise-free network with a weak coupling relative to the block diagonal,
    # so the local-rate hypothesis ||B|| < lambda_min(P) holds near the solution
    return generate(GenConfig(n_hat=64, seed=3, noise_scale=0.0, tight_fraction=0.0,
                              grid_spacing=10.0, angle_unit="deg", sigma_dist=0.2,
                              sigma_coord_loose=0.03))


def test_criterion_10_local_rate():
    p = _local_problem()
    rng = np.random.default_rng(0)
    x0 = p.ground_truth + rng.uniform(-1e-3, 1e-3, p.n)
    start_err = coordinate_error(x0, p.ground_truth).max
    K = 4
    bs, *_ = block_system(p, K, p.ground_truth)
    b_norm = np.linalg.norm(bs.dense_B(), 2)
    lam_min = min(np.linalg.eigvalsh(P.toarray()).min() for P in bs.P)
    floor = np.linalg.norm(eval_gradient(p, p.ground_truth))

    cfg = SolverConfig(K=K, ell=1, ell_max=200, inner_eta=1.0, inner_power=2.0,
                       mu_mode=DeltaSchedule(mu_bar=1.0, delta=1.0), alpha_mode=FullStep(),
                       termination=Termination(grad_tol=1e-11, sigma_fractions=None,
                                               max_outer_iters=30))
    res = pilm_solve(p, cfg, x0)
    g = [r.grad_norm for r in res.records] + [res.grad_norm]
    first = next(k for k, v in enumerate(g) if v <= 1e-3)
    below = next((k for k, v in enumerate(g) if v < 1e-10), None)
    steps = None if below is None else below - first
    # tail: consecutive pairs before the iterates reach the round-off floor
    ratios = [g[k + 1] / g[k] ** 2 for k in range(len(g) - 1) if g[k + 1] > 100 * floor]
    worst = max(ratios) if ratios else float("nan")
    ok = (start_err <= 1e-3 and b_norm < lam_min and steps is not None and steps <= 6
          and ratios and worst < 1e3)
    record(10, bool(ok),
           f"||B|| {b_norm:.3g} < lambda_min(P) {lam_min:.3g}; ||g||: "
           + " -> ".join(f"{v:.1e}" for v in g[:below + 1 if below is not None else None])
           + f"; {steps} iterations from <= 1e-3 to < 1e-10; max ||g+||/||g||^2 = {worst:.2f}")


# 11 ---------------------------------------------------------------------------

def test_criterion_11_coordinate_error(big):
    p, runs = big
    init = coordinate_error(p.coordinate_guess(), p.ground_truth).median
    res = runs[4]
    final = coordinate_error(res.x, p.ground_truth).median
    lm = coordinate_error(runs["lm"].x, p.ground_truth).median
    record(11, final <= 0.1 * init,
           f"PILM K=4 median {final:.4f} vs initial {init:.4f}: ratio {final / init:.3f} "
           f"(target <= 0.1); LM ratio {lm / init:.3f}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
