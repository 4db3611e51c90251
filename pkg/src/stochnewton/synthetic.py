"""Strongly convex synthetic test problems with controlled Gaussian noise.

The objective is

    phi(x) = sum_i lambda_i * (exp(x_i) - x_i) + (x - e)^T A (x - e),

with ``lambda_i`` logarithmically spaced in ``[1, kappa]``, ``A`` symmetric
positive definite with eigenvalues ``lambda_i`` and ``e`` the all-ones
vector.  ``A`` is built either as an explicit dense matrix (random
orthogonal basis) or in factored form ``A = V D V^T`` with ``V`` a product
of three Householder reflectors, which keeps every matvec O(n) and never
materializes ``V``.

Noise model: ``f = phi + eps_f`` with ``eps_f ~ N(0, sigma)``; gradient
noise is i.i.d. ``N(0, sigma)`` per coordinate; Hessian noise is a diagonal
matrix with ``N(0, sigma)`` entries, redrawn at every evaluation and frozen
inside the returned operator handle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import EvalCounts, OracleSample, RngStream, Vector, as_vector
from .linalg import SpdOperator, solve_cg, solve_direct

HESS_DENSE = "dense"
HESS_HOUSEHOLDER = "householder"


class HouseholderOperator:
    """``A = V D V^T`` with ``V = (I - 2 v3 v3^T)(I - 2 v2 v2^T)(I - 2 v1 v1^T)``.

    ``D`` holds positive diagonal entries and each ``v_j`` has unit norm.
    Application costs O(n) per reflector.
    """

    __slots__ = ("d", "vs")

    def __init__(self, d: np.ndarray, vs):
        self.d = np.asarray(d, dtype=np.float64)
        if np.any(self.d <= 0):
            raise ValueError("diagonal entries must be positive")
        self.vs = [np.asarray(v, dtype=np.float64) for v in vs]
        for v in self.vs:
            nrm = np.linalg.norm(v)
            if abs(nrm - 1.0) > 1e-12:
                raise ValueError(f"reflector vector norm {nrm} != 1")

    @property
    def n(self) -> int:
        return self.d.size

    def apply(self, x: Vector) -> Vector:
        # V^T x: reflectors right to left (v3, v2, v1), then D, then V
        y = x.copy()
        for v in reversed(self.vs):
            y -= (2.0 * (v @ y)) * v
        y *= self.d
        for v in self.vs:
            y -= (2.0 * (v @ y)) * v
        return y

    def materialize(self) -> np.ndarray:
        """Dense ``V D V^T`` (test oracle; only sensible for small n)."""
        a = np.empty((self.n, self.n))
        eye = np.eye(self.n)
        for j in range(self.n):
            a[:, j] = self.apply(eye[:, j])
        return a


def _log_spaced(n: int, kappa: float) -> np.ndarray:
    lambdas = np.logspace(0.0, math.log10(kappa), n)
    lambdas[0] = 1.0
    lambdas[-1] = kappa
    return lambdas


@dataclass
class ConvexRandomProblem:
    """One instance of the synthetic family, with exact-oracle access."""

    n: int
    kappa: float
    sigma: float
    lambdas: np.ndarray
    hess_form: str
    a_dense: Optional[np.ndarray] = None
    a_factored: Optional[HouseholderOperator] = None
    achieved_density: float = 1.0
    x_star: Optional[Vector] = None
    f_star: Optional[float] = None
    ones: Vector = field(init=False)

    def __post_init__(self):
        self.ones = np.ones(self.n)
        if (self.a_dense is None) == (self.a_factored is None):
            raise ValueError("exactly one of a_dense / a_factored must be set")

    # -- exact oracle ------------------------------------------------------

    def quad_apply(self, v: Vector) -> Vector:
        if self.a_dense is not None:
            return self.a_dense @ v
        return self.a_factored.apply(v)

    def value(self, x: Vector) -> float:
        # exp may overflow to inf on wild trial points; the line search
        # treats non-finite values as rejections, so do not warn here
        r = x - self.ones
        with np.errstate(over="ignore"):
            return float(self.lambdas @ (np.exp(x) - x) + r @ self.quad_apply(r))

    def gradient(self, x: Vector) -> Vector:
        with np.errstate(over="ignore"):
            return self.lambdas * (np.exp(x) - 1.0) + 2.0 * self.quad_apply(x - self.ones)

    def hess_diag_part(self, x: Vector) -> Vector:
        with np.errstate(over="ignore"):
            return self.lambdas * np.exp(x)

    def hess_matvec(self, x: Vector, v: Vector) -> Vector:
        return self.hess_diag_part(x) * v + 2.0 * self.quad_apply(v)

    def hess_dense(self, x: Vector) -> np.ndarray:
        if self.a_dense is None:
            raise ValueError("dense Hessian unavailable for factored problems")
        return np.diag(self.hess_diag_part(x)) + 2.0 * self.a_dense

    def metadata(self) -> dict:
        return {
            "n": self.n,
            "kappa": self.kappa,
            "sigma": self.sigma,
            "hess_form": self.hess_form,
            "achieved_density": self.achieved_density,
        }


def generate_problem(n: int, kappa: float, sigma: float,
                     hess_form: str = HESS_DENSE, density: float = 1.0,
                     rng: Optional[RngStream] = None) -> ConvexRandomProblem:
    """Draw one problem instance.

    ``density`` only affects the dense form: the SPD matrix built from a
    random orthogonal basis is thresholded towards the requested density,
    but the sparsification is kept only when it provably preserves positive
    definiteness; otherwise the matrix stays dense and ``achieved_density``
    records what happened.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kappa <= 1:
        raise ValueError("kappa must be > 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if not (0.0 < density <= 1.0):
        raise ValueError("density must lie in (0, 1]")
    if rng is None:
        rng = RngStream(0, 0)

    lambdas = _log_spaced(n, kappa)

    if hess_form == HESS_DENSE:
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        q *= np.sign(np.diag(r))  # fix the QR sign convention
        a = (q * lambdas) @ q.T
        a = 0.5 * (a + a.T)
        achieved = 1.0
        if density < 1.0:
            a_sparse, achieved = _sparsify_spd(a, density)
            if a_sparse is not None:
                a = a_sparse
        return ConvexRandomProblem(n, kappa, sigma, lambdas, hess_form,
                                   a_dense=a, achieved_density=achieved)

    if hess_form == HESS_HOUSEHOLDER:
        vs = []
        for _ in range(3):
            v = rng.standard_normal(n)
            vs.append(v / np.linalg.norm(v))
        op = HouseholderOperator(lambdas, vs)
        return ConvexRandomProblem(n, kappa, sigma, lambdas, hess_form,
                                   a_factored=op)

    raise ValueError(f"unknown hess_form {hess_form!r}")


def _sparsify_spd(a: np.ndarray, density: float):
    """Symmetric thresholding towards `density`; returns (matrix, achieved).

    Keeps the diagonal, zeroes the smallest off-diagonal entries, and
    accepts the result only if the smallest eigenvalue stays positive.
    """
    n = a.shape[0]
    off = np.abs(a[np.triu_indices(n, k=1)])
    target_offdiag = max(0, int(round((density * n * n - n) / 2)))
    if target_offdiag >= off.size:
        return None, 1.0
    cut = np.partition(off, off.size - target_offdiag)[off.size - target_offdiag] \
        if target_offdiag > 0 else np.inf
    mask = np.abs(a) >= cut
    np.fill_diagonal(mask, True)
    a_thr = np.where(mask & mask.T, a, 0.0)
    if np.linalg.eigvalsh(a_thr)[0] <= 0:
        return None, 1.0
    achieved = float(np.count_nonzero(a_thr)) / (n * n)
    return a_thr, achieved


def noisy_eval(problem: ConvexRandomProblem, x: Vector, rng: RngStream, *,
               want_value: bool = False, want_gradient: bool = False,
               want_hessian: bool = False) -> OracleSample:
    """One noisy oracle evaluation; draws happen in a fixed (f, g, B) order.

    With ``sigma == 0`` the exact quantities are returned.  The Hessian
    handle freezes its diagonal noise realization, so all matvecs within one
    sample see the same perturbed matrix.
    """
    x = as_vector(x, problem.n)
    sigma = problem.sigma
    value = gradientv = hess = None
    if want_value:
        value = problem.value(x) + rng.gaussian(0.0, sigma)
    if want_gradient:
        gradientv = problem.gradient(x) + rng.normal(0.0, sigma, problem.n)
    if want_hessian:
        noise = rng.normal(0.0, sigma, problem.n)
        if problem.a_dense is not None:
            b = problem.hess_dense(x)
            b[np.diag_indices(problem.n)] += noise
            hess = SpdOperator.from_dense(b)
        else:
            diag = problem.hess_diag_part(x) + noise
            fac = problem.a_factored

            def matvec(v, diag=diag, fac=fac):
                return diag * v + 2.0 * fac.apply(v)

            hess = SpdOperator.from_matvec(problem.n, matvec)
    return OracleSample(value=value, gradient=gradientv, hessian=hess)


class NoisyOracle:
    """Stateful wrapper around :func:`noisy_eval` with evaluation accounting.

    Also carries the exact objective and the reference optimum (when
    computed), which the harness uses for true-error traces; those exact
    queries do not touch the noise stream or the counters.
    """

    def __init__(self, problem: ConvexRandomProblem, rng: RngStream):
        self.problem = problem
        self.rng = rng
        self.n = problem.n
        self._f_evals = 0
        self._g_evals = 0
        self._hvp_evals = 0

    def sample(self, x: Vector, *, want_value=False, want_gradient=False,
               want_hessian=False) -> OracleSample:
        s = noisy_eval(self.problem, x, self.rng, want_value=want_value,
                       want_gradient=want_gradient, want_hessian=want_hessian)
        if want_value:
            self._f_evals += 1
        if want_gradient:
            self._g_evals += 1
        hess = s.hessian
        if hess is not None:
            # route matvec counting into this oracle's hvp counter
            inner_apply = hess.apply

            def counted(v, _inner=inner_apply):
                self._hvp_evals += 1
                return _inner(v)

            hess = SpdOperator(hess.n, matvec=counted, dense=hess.dense)
        return OracleSample(value=s.value, gradient=s.gradient, hessian=hess,
                            eval_counts=self.counts())

    def counts(self) -> EvalCounts:
        return EvalCounts(self._f_evals, self._g_evals, self._hvp_evals)

    # exact-side queries (instrumentation, never noisy)
    def true_value(self, x: Vector) -> float:
        return self.problem.value(x)

    def true_error(self, x: Vector) -> Optional[float]:
        if self.problem.f_star is None:
            return None
        return self.problem.value(x) - self.problem.f_star


def exact_solution(problem: ConvexRandomProblem, tol: float = 1e-8,
                   max_iters: int = 200) -> tuple[Vector, float]:
    """Minimize the exact objective by damped Newton; caches the result.

    Newton systems are solved directly for dense problems and by tightly
    converged CG for factored ones.  Fails loudly if the gradient norm does
    not drop below ``tol`` within ``max_iters`` iterations.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if problem.x_star is not None and problem.f_star is not None:
        return problem.x_star, problem.f_star

    x = np.zeros(problem.n)
    for _ in range(max_iters):
        g = problem.gradient(x)
        gnorm = np.linalg.norm(g)
        if gnorm <= tol:
            break
        if problem.a_dense is not None:
            d = solve_direct(SpdOperator.from_dense(problem.hess_dense(x)), -g)
        else:
            op = SpdOperator.from_matvec(problem.n,
                                         lambda v, x=x: problem.hess_matvec(x, v))
            d = solve_cg(op, -g, rel_tol=1e-12, max_iters=4 * problem.n).d
        f0 = problem.value(x)
        slope = float(g @ d)
        # rounding slack: near the optimum the predicted decrease drops below
        # the float resolution of f, which must not stall the full Newton step
        slack = 8.0 * np.finfo(float).eps * max(1.0, abs(f0))
        t = 1.0
        for _ in range(60):
            fx = problem.value(x + t * d)
            if math.isfinite(fx) and fx <= f0 + 1e-4 * t * slope + slack:
                break
            t *= 0.5
        x = x + t * d
    else:
        raise RuntimeError(
            f"exact Newton did not reach ||grad|| <= {tol} in {max_iters} iterations "
            f"(last ||grad|| = {gnorm:.3e})"
        )
    problem.x_star = x
    problem.f_star = problem.value(x)
    return problem.x_star, problem.f_star
