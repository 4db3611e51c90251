import numpy as np
import pytest

from stochnewton.core import EvalCounts, OracleSample, RngStream
from stochnewton.finitesum import QuadraticSumProblem
from stochnewton.linalg import SpdOperator


def random_spd(n, rng, eig_lo=1.0, eig_hi=10.0):
    """SPD matrix with eigenvalues linearly spaced in [eig_lo, eig_hi]."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q *= np.sign(np.diag(r))
    return (q * np.linspace(eig_lo, eig_hi, n)) @ q.T


class ExactQuadraticOracle:
    """Noise-free oracle for f(x) = x^T H x / 2 - b^T x (solver-driver tests)."""

    def __init__(self, h, b=None):
        self.h = np.asarray(h, dtype=np.float64)
        self.n = self.h.shape[0]
        self.b = np.zeros(self.n) if b is None else np.asarray(b, np.float64)
        self.x_star = np.linalg.solve(self.h, self.b)
        self.f_star = self._value(self.x_star)
        self.problem = self  # divergence marking looks for .problem.f_star

    def _value(self, x):
        return float(0.5 * x @ self.h @ x - self.b @ x)

    def sample(self, x, *, want_value=False, want_gradient=False,
               want_hessian=False):
        return OracleSample(
            value=self._value(x) if want_value else None,
            gradient=self.h @ x - self.b if want_gradient else None,
            hessian=SpdOperator.from_dense(self.h) if want_hessian else None,
        )

    def counts(self):
        return EvalCounts()

    def true_error(self, x):
        return self._value(x) - self.f_star


def quadratic_sum_problem(N, n, seed=0):
    rng = RngStream(seed, 0)
    hessians, rhs = [], []
    for _ in range(N):
        hessians.append(random_spd(n, rng))
        rhs.append(rng.standard_normal(n))
    return QuadraticSumProblem(hessians, rhs)


@pytest.fixture
def rng():
    return RngStream(1234, 0)
