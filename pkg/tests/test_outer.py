import io
import json
import math

import numpy as np
import pytest
import scipy.sparse as sp

from pilm.blocks import BlockSystem
from pilm.errors import StallError
from pilm.gen import GenConfig, generate
from pilm.model import Coordinate, Problem, eval_F
from pilm.outer import (
    DeltaSchedule, FullStep, LineSearch, Practical, SolverConfig, Status, Termination,
    Theoretical, check_termination, choose_mu, classical_lm_solve, line_search, pilm_solve,
    sigma_fractions,
)

from conftest import disjoint_union


def _bs_with_norm(b):
    B = {(0, 1): sp.csr_matrix([[b]]), (1, 0): sp.csr_matrix([[b]])} if b else {}
    nb = [(1,), (0,)] if b else [(), ()]
    return BlockSystem(np.array([0, 1, 2]), [sp.csr_matrix((1, 1))] * 2, B,
                       [np.zeros(1)] * 2, nb)


# choose_mu -------------------------------------------------------------------

def test_theoretical_separable_gives_floor():
    assert choose_mu(Theoretical(), _bs_with_norm(0.0), 1.0) == 1e-10


def test_theoretical_scales_coupling_norm():
    assert choose_mu(Theoretical(C_mu=3), _bs_with_norm(2.0), 1.0) == pytest.approx(6.0)
    assert choose_mu(Theoretical(C_mu=2), None, 1.0, b_norm=5.0) == 10.0


def test_practical_halves_and_doubles():
    mode = Practical(mu0=7.0)
    assert choose_mu(mode, None, 1.0, 1e5, 1.0) == 5e4
    assert choose_mu(mode, None, 1.0, 1e5, 0.5) == 2e5
    assert choose_mu(mode, None, 1.0) == 7.0
    assert choose_mu(mode, None, 1.0, 1e10, 0.1) == 1e10
    assert choose_mu(mode, None, 1.0, 1e-10, 1.0) == 1e-10


def test_delta_schedule():
    assert choose_mu(DeltaSchedule(1.0, 1.0), None, 0.01) == pytest.approx(0.01)
    assert choose_mu(DeltaSchedule(2.0, 0.5), None, 0.04) == pytest.approx(0.4)


def test_mode_validation():
    with pytest.raises(ValueError):
        SolverConfig(mu_mode=Theoretical(C_mu=1.0)).validate()
    with pytest.raises(ValueError):
        SolverConfig(alpha_mode=LineSearch(beta=1.0)).validate()
    with pytest.raises(ValueError):
        SolverConfig(gamma=1.0).validate()


# line_search -----------------------------------------------------------------

def _quadratic():
    """F = x0^2/2 + x1^2/2 through two unit-sigma coordinate observations."""
    return Problem(1, [Coordinate(0, 0, 0.0, 1.0), Coordinate(0, 1, 0.0, 1.0)])


def test_large_slack_accepts_unit_step():
    p = _quadratic()
    x = np.array([1.0, 0.0])
    alpha, F_new, bt = line_search(p, x, np.array([5.0, 5.0]), np.array([1.0, 0.0]),
                                   1e-8, eps_k=1e3)
    assert (alpha, bt) == (1.0, 0)
    assert F_new == pytest.approx(eval_F(p, x + [5.0, 5.0]))


def test_exact_newton_step_on_quadratic():
    p = _quadratic()
    alpha, F_new, bt = line_search(p, np.array([1.0, 0.0]), np.array([-1.0, 0.0]),
                                   np.array([1.0, 0.0]), c=0.5, eps_k=1e-12)
    assert alpha == 1.0 and F_new == 0.0 and bt == 0


def test_ascent_direction_backtracks():
    p = _quadratic()
    x = np.array([1.0, 0.0])
    g = np.array([1.0, 0.0])
    c, eps = 1e-4, 1e-3
    alpha, F_new, bt = line_search(p, x, g, g, c, eps)
    assert bt >= 1 and alpha == 0.5 ** bt
    assert F_new <= eval_F(p, x) - c * alpha ** 2 * (g @ g) + eps
    # the previous trial was rejected
    prev = 2 * alpha
    assert eval_F(p, x + prev * g) > eval_F(p, x) - c * prev ** 2 * (g @ g) + eps


def test_underflow_raises_stall():
    p = _quadratic()
    g = np.array([1.0, 0.0])
    with pytest.raises(StallError) as info:
        line_search(p, np.array([1.0, 0.0]), 1e20 * g, g, 1e-4, 1e-300)
    assert info.value.diagnostics["backtracks"] > 50


# termination -----------------------------------------------------------------

def test_termination_examples():
    term = Termination()
    assert check_termination(np.zeros(5), 1.0, term) == Status("Converged", "sigma")
    assert sigma_fractions([0.5, 1.5, 2.5, 10]) == (0.25, 0.5, 0.75)
    assert check_termination(np.array([0.5, 1.5, 2.5, 10]), 1.0, term) is None
    # strict inequality: exactly 1 is outside the first band
    assert sigma_fractions([1.0]) == (0.0, 1.0, 1.0)
    assert check_termination(np.full(3, 50.0), 1e-9, Termination(grad_tol=1e-8)) \
        == Status("Converged", "gradient")
    assert check_termination(np.full(3, 50.0), 1e-3, Termination(grad_rtol=1e-2), grad0=1.0) \
        == Status("Converged", "gradient")
    assert str(Status("MaxIters")) == "MaxIters"


# whole solves ----------------------------------------------------------------

def _separable_zero_residual():
    parts = [generate(GenConfig(n_hat=25, seed=s, noise_scale=0.0)) for s in (1, 2)]
    return disjoint_union(parts)


def _telescoped(res, F0):
    lhs = []
    acc_dec = acc_eps = 0.0
    for r in res.records:
        acc_dec += res.c * r.alpha ** 2 * r.grad_norm ** 2
        acc_eps += r.eps_k
        lhs.append((r.F_new, F0 - acc_dec + acc_eps))
    return lhs


def test_separable_theoretical_reaches_gradient_tolerance():
    p = _separable_zero_residual()
    rng = np.random.default_rng(0)
    x0 = p.ground_truth + rng.uniform(-0.05, 0.05, p.n)
    cfg = SolverConfig(K=2, mu_mode=Theoretical(),
                       termination=Termination(grad_tol=1e-6, sigma_fractions=None))
    res = pilm_solve(p, cfg, x0)
    assert res.partition["E_hat"] == 0
    assert res.status == Status("Converged", "gradient")
    F0 = eval_F(p, x0)
    for F_next, bound in _telescoped(res, F0):
        assert F_next <= bound * (1 + 1e-12) + 1e-12
    # separable: the single inner step is exact
    for r in res.records:
        assert r.inner_residual_norms[-1] <= 1e-9 * r.grad_norm


def test_k1_matches_classical_trajectory():
    p = generate(GenConfig(n_hat=64, seed=5))
    term = Termination(max_outer_iters=8, sigma_fractions=None)
    cfg = SolverConfig(K=1, ell=1, termination=term, keep_iterates=True)
    a = pilm_solve(p, cfg)
    b = classical_lm_solve(p, cfg)
    assert len(a.iterates) == len(b.iterates) == 9
    for xa, xb in zip(a.iterates, b.iterates):
        assert np.linalg.norm(xa - xb) <= 1e-10 * max(1.0, np.linalg.norm(xb))
    assert [r.alpha for r in a.records] == [r.alpha for r in b.records]


def test_linear_problem_one_step():
    rng = np.random.default_rng(1)
    meas, num, den = [], np.zeros(6), np.zeros(6)
    for _ in range(20):
        i, axis = int(rng.integers(3)), int(rng.integers(2))
        v, s = rng.normal(), rng.uniform(0.5, 2)
        meas.append(Coordinate(i, axis, v, s))
        num[2 * i + axis] += v / s ** 2
        den[2 * i + axis] += 1 / s ** 2
    for i in range(3):
        for axis in range(2):
            meas.append(Coordinate(i, axis, 0.0, 10.0))
            den[2 * i + axis] += 1e-2
    p = Problem(3, meas)
    cfg = SolverConfig(mu_mode=Practical(mu0=1e-10),
                       termination=Termination(grad_tol=1e-8, sigma_fractions=None))
    res = classical_lm_solve(p, cfg, np.full(6, 3.0))
    assert res.iterations == 1
    np.testing.assert_allclose(res.x, num / den, rtol=1e-8, atol=1e-10)


def test_theoretical_rho_bound_and_summability():
    p = generate(GenConfig(n_hat=100, seed=2))
    cfg = SolverConfig(K=3, mu_mode=Theoretical(C_mu=2.0),
                       termination=Termination(max_outer_iters=15))
    res = pilm_solve(p, cfg)
    F0 = res.records[0].F
    for r in res.records:
        assert r.rho_bound <= 0.5 + 1e-12
        assert 0 <= r.within_sigma[0] <= r.within_sigma[1] <= r.within_sigma[2] <= 1
    total = sum(r.alpha ** 2 * r.grad_norm ** 2 for r in res.records)
    assert res.c * total <= F0 + res.eps0 / (1 - res.gamma)


def test_full_step_takes_unit_steps():
    p = _separable_zero_residual()
    x0 = p.ground_truth + np.random.default_rng(3).uniform(-1e-3, 1e-3, p.n)
    # round-off puts the gradient floor near 2e-9 here
    cfg = SolverConfig(K=2, mu_mode=DeltaSchedule(), alpha_mode=FullStep(),
                       termination=Termination(grad_tol=1e-6, sigma_fractions=None,
                                               max_outer_iters=20))
    res = pilm_solve(p, cfg, x0)
    assert res.status.converged
    assert all(r.alpha == 1.0 and r.backtracks == 0 for r in res.records)


def test_budget_and_iteration_limits():
    p = generate(GenConfig(n_hat=64, seed=4))
    res = pilm_solve(p, SolverConfig(K=2, termination=Termination(time_budget=1e-9)))
    assert res.status == Status("TimeBudget") and res.iterations == 0
    res = pilm_solve(p, SolverConfig(K=2, termination=Termination(max_outer_iters=2,
                                                                  sigma_fractions=None)))
    assert res.status == Status("MaxIters") and res.iterations == 2
    assert not res.status.converged


def test_run_log_lines():
    p = generate(GenConfig(n_hat=36, seed=4))
    buf = io.StringIO()
    res = pilm_solve(p, SolverConfig(K=2, termination=Termination(max_outer_iters=3,
                                                                  sigma_fractions=None)),
                     log_path=buf)
    lines = [json.loads(s) for s in buf.getvalue().splitlines()]
    assert len(lines) == res.iterations + 1
    assert lines[0]["k"] == 0 and "summary" in lines[-1]
    assert math.isfinite(lines[0]["F"])


def test_unpacks_as_triple():
    p = generate(GenConfig(n_hat=36, seed=4))
    x, records, status = pilm_solve(p, SolverConfig(K=2, termination=Termination(
        max_outer_iters=1, sigma_fractions=None)))
    assert x.shape == (p.n,) and len(records) == 1 and status.kind == "MaxIters"
