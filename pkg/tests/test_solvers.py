"""Noisy-oracle solver drivers: SOS, LSOS (exact and inexact), SGD variants."""

import math

import numpy as np
import pytest

from stochnewton.core import PHASE_GAIN, PHASE_LINE_SEARCH, RngStream
from stochnewton.linalg import SpdOperator, solve_cg
from stochnewton.solvers import (DeltaSchedule, GainParams, SolverConfig,
                                 run_lsos, run_sgd, run_solver, run_sos)
from stochnewton.steplen import LineSearchConfig
from stochnewton.synthetic import (HESS_HOUSEHOLDER, NoisyOracle,
                                   exact_solution, generate_problem)

from conftest import ExactQuadraticOracle, random_spd


def _noisy_setup(n, kappa, sigma, seed, form="dense"):
    problem = generate_problem(n, kappa, sigma, hess_form=form,
                               rng=RngStream(seed, 2**32))
    exact_solution(problem)
    oracle = NoisyOracle(problem, RngStream(seed, 0).child(1))
    x0 = RngStream(seed, 0).child(0).normal(0, 5, n)
    return problem, oracle, x0


class TestSos:
    def test_newton_step_solves_quadratic_in_one_iteration(self, rng):
        oracle = ExactQuadraticOracle(random_spd(8, rng), rng.standard_normal(8))
        cfg = SolverConfig(method="sos", gain=GainParams(alpha0=1.0),
                           max_iters=5, grad_tol=1e-12)
        res = run_sos(oracle, cfg, rng.standard_normal(8))
        assert res.iterations == 1
        assert np.linalg.norm(res.x - oracle.x_star) <= 1e-10

    def test_method_validation(self, rng):
        oracle = ExactQuadraticOracle(np.eye(2))
        with pytest.raises(ValueError):
            run_sos(oracle, SolverConfig(method="lsos"), np.zeros(2))

    def test_gain_steps_match_schedule_exactly(self, rng):
        oracle = ExactQuadraticOracle(random_spd(5, rng))
        cfg = SolverConfig(method="sos", gain=GainParams(alpha0=0.3, T=100.0),
                           max_iters=6)
        res = run_sos(oracle, cfg, rng.standard_normal(5))
        for rec in res.trace.records:
            assert rec.phase == PHASE_GAIN
            assert rec.step_len == pytest.approx(0.3 * 100 / (100 + rec.iter),
                                                 rel=1e-15)


class TestLsosDeterministic:
    def test_reaches_tight_gradient_tolerance(self):
        _, oracle, x0 = _noisy_setup(50, 100.0, 0.0, seed=1)
        cfg = SolverConfig(method="lsos",
                           ls=LineSearchConfig(switch_rule="step_only"),
                           max_iters=50, grad_tol=1e-8)
        res = run_lsos(oracle, cfg, x0)
        assert res.stop_reason == "grad_tol"
        assert res.final_grad_norm <= 1e-8

    def test_exact_mode_reproduces_reference_damped_newton(self):
        # clean-room damped Newton loop; iterates must agree to 1e-12
        problem, _, x0 = _noisy_setup(12, 50.0, 0.0, seed=2)

        class RecordingOracle(NoisyOracle):
            xs = []

            def sample(self, x, **want):
                if want.get("want_gradient"):
                    self.xs.append(x.copy())
                return super().sample(x, **want)

        oracle = RecordingOracle(problem, RngStream(2, 0).child(1))
        cfg = SolverConfig(
            method="lsos",
            ls=LineSearchConfig(zeta_kind="zero", t_min=1e-30, t_start=1.0),
            max_iters=25, grad_tol=1e-9)
        run_lsos(oracle, cfg, x0)

        x = x0.copy()
        reference = [x.copy()]
        for _ in range(len(oracle.xs) - 1):
            g = problem.gradient(x)
            d = np.linalg.solve(problem.hess_dense(x), -g)
            f0 = problem.value(x)
            t = 1.0
            while not (problem.value(x + t * d)
                       <= f0 + 1e-4 * t * float(g @ d)):
                t *= 0.5
            x = x + t * d
            reference.append(x.copy())
        for got, want in zip(oracle.xs, reference):
            assert np.linalg.norm(got - want) <= 1e-12 * max(
                1.0, np.linalg.norm(want))

    def test_bitwise_reproducible_across_runs(self):
        _, oracle1, x0 = _noisy_setup(20, 100.0, 0.3, seed=3)
        _, oracle2, _ = _noisy_setup(20, 100.0, 0.3, seed=3)
        cfg = SolverConfig(method="lsos", max_iters=60)
        r1 = run_lsos(oracle1, cfg, x0)
        r2 = run_lsos(oracle2, cfg, x0)
        assert np.array_equal(r1.x, r2.x)
        assert r1.trace.column("f_hat") == r2.trace.column("f_hat")
        assert r1.trace.column("step_len") == r2.trace.column("step_len")


class TestLsosNoisy:
    def test_phase_flips_once_and_stays(self):
        _, oracle, x0 = _noisy_setup(20, 100.0, 0.5, seed=4)
        cfg = SolverConfig(method="lsos", max_iters=150)
        res = run_lsos(oracle, cfg, x0)
        phases = res.trace.column("phase")
        assert res.k_tau is not None
        switch = phases.index(PHASE_GAIN)
        assert all(p == PHASE_LINE_SEARCH for p in phases[:switch])
        assert all(p == PHASE_GAIN for p in phases[switch:])

    def test_anchored_gain_steps_follow_schedule(self):
        _, oracle, x0 = _noisy_setup(20, 100.0, 0.5, seed=5)
        cfg = SolverConfig(method="lsos", max_iters=150)
        res = run_lsos(oracle, cfg, x0)
        recs = res.trace.records
        k_tau = res.k_tau
        t_anchor = next(r.step_len for r in recs if r.iter == k_tau)
        T = cfg.gain.T
        for r in recs:
            if r.phase == PHASE_GAIN:
                expected = t_anchor * T / (T + r.iter - k_tau)
                assert r.step_len == pytest.approx(expected, rel=1e-12)

    def test_noise_reduces_error_from_start(self):
        # statistical sanity: final error far below the wild start
        errors = []
        for rep in range(5):
            _, oracle, x0 = _noisy_setup(20, 100.0, 0.1, seed=100 + rep)
            res = run_lsos(oracle, SolverConfig(method="lsos", max_iters=80), x0)
            errors.append(res.trace.records[-1].true_error /
                          res.trace.records[0].true_error)
        assert np.mean(errors) < 1e-3


class TestLsosInexact:
    def test_residual_certificates_respect_forcing_rule(self):
        problem = generate_problem(60, 100.0, 0.01, hess_form=HESS_HOUSEHOLDER,
                                   rng=RngStream(6, 2**32))
        exact_solution(problem)
        oracle = NoisyOracle(problem, RngStream(6, 0).child(1))
        x0 = RngStream(6, 0).child(0).normal(0, 5, 60)
        cfg = SolverConfig(method="lsos_inexact",
                           delta=DeltaSchedule("geometric", rho=0.95),
                           max_iters=80)
        res = run_lsos(oracle, cfg, x0)
        checked = 0
        for rec in res.trace.records:
            if rec.cg_relres is not None:
                assert rec.cg_relres <= max(0.95 ** rec.iter, 1e-6) + 1e-15
                checked += 1
        assert checked == len(res.trace)

    def test_unclamped_tolerance_still_moves(self):
        # delta_0 = 1 would accept d = 0 without the clamp; the first
        # iteration must still make progress
        problem = generate_problem(30, 50.0, 0.0, hess_form=HESS_HOUSEHOLDER,
                                   rng=RngStream(7, 2**32))
        oracle = NoisyOracle(problem, RngStream(7, 0))
        cfg = SolverConfig(method="lsos_inexact",
                           delta=DeltaSchedule("geometric", rho=0.95),
                           max_iters=1)
        x0 = np.zeros(30)
        res = run_lsos(oracle, cfg, x0)
        assert res.trace.records[0].cg_iters >= 1
        assert not np.array_equal(res.x, x0)


class TestDescentBound:
    def test_inexact_directions_satisfy_expected_descent(self, rng):
        # with residual <= mu/(2L) ||g||, directions obey
        # g.d <= -||g||^2 / (2L) on quadratics (exact oracle)
        for _ in range(50):
            n = int(rng.integers(3, 12))
            mu, L = 1.0, float(rng.uniform(4.0, 40.0))
            h = random_spd(n, rng, mu, L)
            g = h @ rng.standard_normal(n)
            delta = mu / (2 * L)
            d = solve_cg(SpdOperator.from_dense(h), -g, rel_tol=delta).d
            assert float(g @ d) <= -float(g @ g) / (2 * L) * (1 - 1e-10)


class TestSgd:
    def test_first_step_has_unit_length(self):
        _, oracle, x0 = _noisy_setup(20, 100.0, 0.1, seed=8)
        res = run_sgd(oracle, SolverConfig(method="sgd", max_iters=3), x0)
        first = res.trace.records[0]
        assert first.step_len * first.grad_norm_hat == pytest.approx(1.0,
                                                                     rel=1e-12)

    def test_fixed_step_descends_on_quadratic(self, rng):
        h = random_spd(6, rng, 1, 4)
        oracle = ExactQuadraticOracle(h, rng.standard_normal(6))
        cfg = SolverConfig(method="sgd", gain=GainParams(alpha0=0.2, T=1e12),
                           max_iters=50)
        res = run_sgd(oracle, cfg, rng.standard_normal(6))
        errs = [r.true_error for r in res.trace.records]
        assert errs[-1] < 1e-6 * errs[0]
        ratios = [b / a for a, b in zip(errs, errs[1:]) if a > 1e-14]
        assert max(ratios) < 1.0  # classical linear convergence

    def test_line_search_variant_beats_plain_sgd(self):
        # mirrors the harness comparison at small scale: same x0 per seed
        per_seed = []
        for rep in range(8):
            problem, _, x0 = _noisy_setup(50, 100.0, 0.1, seed=300 + rep)
            finals = {}
            for method in ("sgd", "sgd_ls"):
                oracle = NoisyOracle(problem, RngStream(300 + rep, 1).child(2))
                res = run_sgd(oracle, SolverConfig(method=method, max_iters=40),
                              x0)
                finals[method] = res.trace.records[-1].true_error
            per_seed.append(finals)
        mean_ls = np.mean([f["sgd_ls"] for f in per_seed])
        mean_plain = np.mean([f["sgd"] for f in per_seed])
        assert mean_ls <= mean_plain


class TestRobustness:
    def test_fallback_to_gradient_on_indefinite_hessian(self, rng):
        class IndefiniteOracle(ExactQuadraticOracle):
            def sample(self, x, **want):
                s = super().sample(x, **want)
                if s.hessian is not None:
                    bad = self.h.copy()
                    bad[0, 0] = -1.0
                    s = type(s)(value=s.value, gradient=s.gradient,
                                hessian=SpdOperator.from_dense(bad))
                return s

        oracle = IndefiniteOracle(random_spd(5, rng), rng.standard_normal(5))
        cfg = SolverConfig(method="lsos",
                           ls=LineSearchConfig(zeta_kind="zero"), max_iters=30,
                           grad_tol=1e-6)
        res = run_lsos(oracle, cfg, rng.standard_normal(5))
        assert all(r.fallback for r in res.trace.records)
        assert res.trace.records[-1].true_error < res.trace.records[0].true_error

    def test_divergent_gain_run_is_flagged(self, rng):
        oracle = ExactQuadraticOracle(random_spd(4, rng), rng.standard_normal(4))
        cfg = SolverConfig(method="sos", gain=GainParams(alpha0=1e6, T=1e12),
                           max_iters=100)
        res = run_sos(oracle, cfg, rng.standard_normal(4))
        assert res.stop_reason == "diverged"
        assert res.trace.records[-1].f_hat == math.inf
        assert res.trace.records[-1].true_error == math.inf

    def test_time_budget_respected(self):
        _, oracle, x0 = _noisy_setup(150, 100.0, 0.5, seed=9)
        cfg = SolverConfig(method="lsos", max_iters=10**6, time_budget_s=0.05)
        res = run_lsos(oracle, cfg, x0)
        assert res.stop_reason == "time_budget"
        assert res.iterations < 10**6

    def test_zero_gradient_stops(self, rng):
        oracle = ExactQuadraticOracle(random_spd(3, rng))
        res = run_solver(oracle, SolverConfig(method="sgd", max_iters=5),
                         np.zeros(3))
        assert res.stop_reason == "zero_direction"
        assert res.iterations == 0
