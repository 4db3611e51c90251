"""SPD linear algebra kernels for the Newton systems.

Direct solves go through a Cholesky factorization; the iterative path is a
plain conjugate-gradient loop with a *relative* residual stopping rule (the
achieved residual is always recomputed from scratch before being reported, so
the returned certificate can be trusted).  Indefiniteness surfaces as
:class:`NotPositiveDefiniteError`; the solver drivers decide the fallback.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .core import Vector


class NotPositiveDefiniteError(Exception):
    """The (sampled) Hessian failed an SPD check during a solve."""


class SpdOperator:
    """A symmetric positive definite linear map ``v -> B v``.

    Either backed by an explicit dense matrix (``dense is not None``) or by a
    matvec closure.  ``n`` is the dimension.
    """

    __slots__ = ("n", "dense", "_matvec", "n_applies")

    def __init__(self, n: int, matvec: Optional[Callable[[Vector], Vector]] = None,
                 dense: Optional[np.ndarray] = None):
        if dense is None and matvec is None:
            raise ValueError("need a dense matrix or a matvec")
        self.n = int(n)
        self.dense = dense
        self._matvec = matvec
        self.n_applies = 0

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "SpdOperator":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        return cls(a.shape[0], dense=a)

    @classmethod
    def from_matvec(cls, n: int, matvec: Callable[[Vector], Vector]) -> "SpdOperator":
        return cls(n, matvec=matvec)

    @property
    def is_explicit(self) -> bool:
        return self.dense is not None

    def apply(self, v: Vector) -> Vector:
        self.n_applies += 1
        if self._matvec is not None:
            return self._matvec(v)
        return self.dense @ v

    def __call__(self, v: Vector) -> Vector:
        return self.apply(v)


def solve_direct(op: SpdOperator, rhs: Vector) -> Vector:
    """Solve ``B d = rhs`` by Cholesky factorization of the explicit matrix.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorization meets a non-positive pivot.  Callers treat this
        as "the sampled Hessian is not SPD" and fall back to steepest descent.
    """
    if not op.is_explicit:
        raise ValueError("solve_direct needs an explicit matrix")
    try:
        cho = scipy.linalg.cho_factor(op.dense, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc
    return scipy.linalg.cho_solve(cho, rhs, check_finite=False)


@dataclass(frozen=True)
class CgResult:
    d: Vector
    rel_res: float
    iters: int


def solve_cg(op: SpdOperator, rhs: Vector, rel_tol: float,
             max_iters: Optional[int] = None) -> CgResult:
    """Conjugate gradients for ``B d = rhs`` from ``d0 = 0``.

    Stops once ``||B d - rhs|| <= rel_tol * ||rhs||`` or after ``max_iters``
    iterations (default ``2 n``).  The residual used in the loop is refreshed
    from a true matvec every 50 iterations to limit recurrence drift, and the
    reported ``rel_res`` is always recomputed from the returned ``d``.

    Raises
    ------
    NotPositiveDefiniteError
        On detected negative curvature ``p^T B p <= 0``.
    """
    if not (0.0 < rel_tol < 1.0):
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    if max_iters is None:
        max_iters = 2 * op.n
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return CgResult(np.zeros(op.n), 0.0, 0)

    d = np.zeros(op.n)
    r = rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    iters = 0
    threshold = rel_tol * rhs_norm
    while iters < max_iters and np.sqrt(rs) > threshold:
        bp = op.apply(p)
        curv = float(p @ bp)
        if curv <= 0.0:
            raise NotPositiveDefiniteError(
                f"negative curvature in CG at iteration {iters}: p^T B p = {curv}"
            )
        alpha = rs / curv
        d += alpha * p
        iters += 1
        if iters % 50 == 0:
            r = rhs - op.apply(d)
        else:
            r -= alpha * bp
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new

    final = float(np.linalg.norm(rhs - op.apply(d))) / rhs_norm
    return CgResult(d, final, iters)


def fd_gradient_check(f: Callable[[Vector], float], grad: Callable[[Vector], Vector],
                      x: Vector, h: float = 1e-6) -> float:
    """Max scaled error between ``grad(x)`` and central differences of ``f``.

    Per-coordinate central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``
    are compared against ``grad(x)``; errors are scaled by
    ``max(1, ||grad(x)||_inf)`` so the result is meaningful both near and far
    from stationary points.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad(x), dtype=np.float64)
    fd = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fd[i] = (f(xp) - f(xm)) / (2.0 * h)
    scale = max(1.0, float(np.max(np.abs(g))))
    return float(np.max(np.abs(fd - g)) / scale)


def fd_hvp_check(grad: Callable[[Vector], Vector], hvp: Callable[[Vector, Vector], Vector],
                 x: Vector, v: Vector, h: float = 1e-6) -> float:
    """Scaled error of ``hvp(x, v)`` against central differences of ``grad`` along ``v``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    hv = np.asarray(hvp(x, v), dtype=np.float64)
    fd = (np.asarray(grad(x + h * v)) - np.asarray(grad(x - h * v))) / (2.0 * h)
    scale = max(1.0, float(np.max(np.abs(hv))))
    return float(np.max(np.abs(fd - hv)) / scale)
