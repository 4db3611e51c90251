"""Solver drivers for general noisy oracles.

All methods share one iteration skeleton ``x_{k+1} = x_k + t_k d_k`` and
differ in how ``d_k`` and ``t_k`` are produced:

====================  =========================  ==============================
method                direction                  step length
====================  =========================  ==============================
``sos``               ``-B(x_k)^{-1} g(x_k)``    pre-defined gain sequence
``lsos``              same, residual ``<= delta_k ||g||``
                                                 line search, then gain sequence
``lsos_inexact``      ``lsos`` with geometric ``delta_k`` (CG-solved systems)
``sgd``               ``-g(x_k)``                pre-defined gain sequence
``sgd_ls``            ``-g(x_k)``                line search, then gain sequence
====================  =========================  ==============================

The line-search methods start in an active phase and deactivate it -- once,
irreversibly -- when the accepted displacement drops below ``t_min``; from
then on steps come from a gain sequence anchored at the switch iteration.
If a sampled Hessian turns out not to be positive definite, that iteration
falls back to the steepest-descent direction and the trace records it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (PHASE_GAIN, PHASE_LINE_SEARCH, RunTrace, TraceRecord,
                   Vector, as_vector)
from .linalg import NotPositiveDefiniteError, solve_cg, solve_direct
from .steplen import (GainSchedule, LineSearchConfig, T_DAMPED,
                      T_DAMPED_ANCHORED, backtrack, switch_check)

METHOD_SOS = "sos"
METHOD_LSOS = "lsos"
METHOD_LSOS_INEXACT = "lsos_inexact"
METHOD_SGD = "sgd"
METHOD_SGD_LS = "sgd_ls"

_NEWTON_METHODS = (METHOD_SOS, METHOD_LSOS, METHOD_LSOS_INEXACT)
_LS_METHODS = (METHOD_LSOS, METHOD_LSOS_INEXACT, METHOD_SGD_LS)
ALL_METHODS = (METHOD_SOS, METHOD_LSOS, METHOD_LSOS_INEXACT, METHOD_SGD,
               METHOD_SGD_LS)

DELTA_ZERO = "zero"
DELTA_GEOMETRIC = "geometric"
DELTA_CONSTANT = "constant"


@dataclass(frozen=True)
class DeltaSchedule:
    """Forcing-term sequence for the Newton-system residual, ``delta_k``."""

    kind: str = DELTA_ZERO
    rho: float = 0.95
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in (DELTA_ZERO, DELTA_GEOMETRIC, DELTA_CONSTANT):
            raise ValueError(f"unknown delta kind {self.kind!r}")
        if self.kind == DELTA_GEOMETRIC and not (0.0 < self.rho < 1.0):
            raise ValueError("rho must lie in (0, 1)")
        if self.kind == DELTA_CONSTANT and self.value < 0:
            raise ValueError("constant delta must be >= 0")

    def at(self, k: int) -> float:
        if self.kind == DELTA_ZERO:
            return 0.0
        if self.kind == DELTA_GEOMETRIC:
            return self.rho ** k
        return self.value


AUTO_ALPHA0 = "auto"  # alpha0 = 1 / ||d_0||


@dataclass(frozen=True)
class GainParams:
    """Parameters of the pre-defined gain sequence ``alpha_k = alpha0 T/(T+k)``.

    ``alpha0 = "auto"`` resolves to ``1 / ||d_0||`` at the first iteration,
    which makes the very first step have unit length.
    """

    alpha0: object = AUTO_ALPHA0
    T: float = 1e6


@dataclass
class SolverConfig:
    method: str = METHOD_LSOS
    gain: GainParams = field(default_factory=GainParams)
    ls: LineSearchConfig = field(default_factory=LineSearchConfig)
    delta: DeltaSchedule = field(default_factory=DeltaSchedule)
    cg_rel_floor: float = 1e-6
    cg_max_iters: Optional[int] = None
    max_iters: int = 100
    time_budget_s: float = math.inf
    grad_tol: Optional[float] = None

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SolverResult:
    x: Vector
    trace: RunTrace
    stop_reason: str
    iterations: int
    final_grad_norm: Optional[float]
    k_tau: Optional[int] = None
    eval_counts: Optional[object] = None


def run_sos(oracle, cfg: SolverConfig, x0: Vector) -> SolverResult:
    """Gain-sequence-only driver with noisy Newton directions."""
    if cfg.method != METHOD_SOS:
        raise ValueError(f"run_sos got method {cfg.method!r}")
    return _drive(oracle, cfg, x0)


def run_lsos(oracle, cfg: SolverConfig, x0: Vector) -> SolverResult:
    """Line-search driver with (inexact) noisy Newton directions."""
    if cfg.method not in (METHOD_LSOS, METHOD_LSOS_INEXACT):
        raise ValueError(f"run_lsos got method {cfg.method!r}")
    return _drive(oracle, cfg, x0)


def run_sgd(oracle, cfg: SolverConfig, x0: Vector) -> SolverResult:
    """Noisy gradient descent, with or without the line-search machinery."""
    if cfg.method not in (METHOD_SGD, METHOD_SGD_LS):
        raise ValueError(f"run_sgd got method {cfg.method!r}")
    return _drive(oracle, cfg, x0)


def run_solver(oracle, cfg: SolverConfig, x0: Vector) -> SolverResult:
    if cfg.method == METHOD_SOS:
        return run_sos(oracle, cfg, x0)
    if cfg.method in (METHOD_LSOS, METHOD_LSOS_INEXACT):
        return run_lsos(oracle, cfg, x0)
    return run_sgd(oracle, cfg, x0)


def _direction(oracle_sample, g, cfg, k):
    """Return (d, cg_iters, cg_relres, fallback) honoring the residual rule."""
    delta_k = cfg.delta.at(k)
    b = oracle_sample.hessian
    try:
        if delta_k == 0.0 and b.is_explicit:
            return solve_direct(b, -g), None, None, False
        # the residual rule caps at 1: an unclamped tolerance >= 1 would
        # accept d = 0, so force at least one CG step
        rel = min(max(delta_k, cfg.cg_rel_floor), 1.0 - 1e-12)
        res = solve_cg(b, -g, rel_tol=rel, max_iters=cfg.cg_max_iters)
        return res.d, res.iters, res.rel_res, False
    except NotPositiveDefiniteError:
        return -g, None, None, True


def _append_divergence_record(trace, oracle, k, elapsed, gnorm, phase, t=0.0):
    """Mark a diverged run so downstream error curves see an infinite error."""
    has_ref = getattr(getattr(oracle, "problem", None), "f_star", None) is not None
    trace.append(TraceRecord(iter=k, wall_time_s=elapsed, f_hat=math.inf,
                             true_error=math.inf if has_ref else None,
                             grad_norm_hat=gnorm, step_len=t, phase=phase))


def _drive(oracle, cfg: SolverConfig, x0: Vector) -> SolverResult:
    x = as_vector(x0, oracle.n).copy()
    needs_newton = cfg.method in _NEWTON_METHODS
    line_search = cfg.method in _LS_METHODS

    trace = RunTrace()
    gain: Optional[GainSchedule] = None
    phase = PHASE_LINE_SEARCH if line_search else PHASE_GAIN
    k_tau: Optional[int] = None
    elapsed = 0.0
    stop_reason = "max_iters"
    gnorm: Optional[float] = None

    if not line_search and not isinstance(cfg.gain.alpha0, str):
        gain = GainSchedule(T_DAMPED, alpha0=cfg.gain.alpha0, T=cfg.gain.T)

    k = 0
    while k < cfg.max_iters:
        if elapsed >= cfg.time_budget_s:
            stop_reason = "time_budget"
            break
        tic = time.perf_counter()

        sample = oracle.sample(x, want_gradient=True, want_hessian=needs_newton)
        g = sample.gradient
        gnorm = float(np.linalg.norm(g))
        if not math.isfinite(gnorm):
            stop_reason = "diverged"
            _append_divergence_record(trace, oracle, k, elapsed, gnorm, phase)
            break
        if cfg.grad_tol is not None and gnorm <= cfg.grad_tol:
            stop_reason = "grad_tol"
            break

        if needs_newton:
            d, cg_iters, cg_relres, fallback = _direction(sample, g, cfg, k)
        else:
            d, cg_iters, cg_relres, fallback = -g, None, None, False
        dnorm = float(np.linalg.norm(d))
        if dnorm == 0.0:
            stop_reason = "zero_direction"
            break
        if not math.isfinite(dnorm):
            stop_reason = "diverged"
            _append_divergence_record(trace, oracle, k, elapsed, gnorm, phase)
            break

        if gain is None and not line_search:
            # alpha0 = "auto": unit-length first step
            gain = GainSchedule(T_DAMPED, alpha0=1.0 / dnorm, T=cfg.gain.T)

        f_hat: Optional[float] = None
        if phase == PHASE_LINE_SEARCH:
            f0 = oracle.sample(x, want_value=True).value
            f_hat = f0

            def f_trial(t, x=x, d=d):
                return oracle.sample(x + t * d, want_value=True).value

            res = backtrack(f_trial, f0, float(g @ d), cfg.ls, cfg.ls.zeta(k))
            t = res.t
            if (not res.accepted) or switch_check(t, dnorm, cfg.ls):
                # one-way switch: anchor the gain sequence at this iteration
                phase = PHASE_GAIN
                k_tau = k
                gain = GainSchedule(T_DAMPED_ANCHORED,
                                    alpha0=cfg.ls.t_min / dnorm,
                                    T=cfg.gain.T, k_tau=k, current_k=k)
                t = gain.next_gain()
        else:
            t = gain.next_gain()

        x_next = x + t * d
        elapsed += time.perf_counter() - tic
        if not np.all(np.isfinite(x_next)):
            stop_reason = "diverged"
            _append_divergence_record(trace, oracle, k, elapsed, gnorm, phase, t)
            break

        if f_hat is None:
            f_hat = oracle.sample(x, want_value=True).value
        trace.append(TraceRecord(
            iter=k, wall_time_s=elapsed, f_hat=f_hat,
            true_error=oracle.true_error(x), grad_norm_hat=gnorm,
            step_len=t, phase=phase, cg_iters=cg_iters, cg_relres=cg_relres,
            fallback=fallback,
        ))
        x = x_next
        k += 1

    return SolverResult(x=x, trace=trace, stop_reason=stop_reason,
                        iterations=k, final_grad_norm=gnorm, k_tau=k_tau,
                        eval_counts=oracle.counts())
