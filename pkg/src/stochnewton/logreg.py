"""L2-regularized logistic regression components and LIBSVM-format data.

With margin ``m_i = b_i a_i^T x`` and ``z_i = 1 + exp(-m_i)``:

    phi_i(x)      = log(z_i) + (mu/2) ||x||^2
    grad phi_i(x) = ((1 - z_i)/z_i) b_i a_i + mu x
    hess phi_i(x) = ((z_i - 1)/z_i^2) a_i a_i^T + mu I

The loss factors are evaluated through the stable sigmoid, so values and
gradients stay finite for |m_i| up to the float64 exponent range:
``(1-z)/z = -sigmoid(-m)`` and ``(z-1)/z^2 = sigmoid(m) sigmoid(-m)``, the
latter lying in ``(0, 1/4]``.  Each component is ``mu``-strongly convex and
the full Hessian is bounded above by ``L = mu + max_i ||a_i||^2``.
"""

from __future__ import annotations

import gzip
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from .core import RngStream, Vector
from .finitesum import FiniteSumProblem


class LibsvmFormatError(ValueError):
    """Malformed LIBSVM input; the message carries the offending line number."""


@dataclass
class Dataset:
    """Binary classification data: sparse rows ``a_i`` and labels in {-1, +1}."""

    features: sp.csr_matrix
    labels: np.ndarray
    label_mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = sp.csr_matrix(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("one label per row required")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if not np.all(np.isfinite(self.features.data)):
            raise ValueError("non-finite feature values")

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]

    @property
    def max_row_norm_sq(self) -> float:
        sq = self.features.multiply(self.features).sum(axis=1)
        return float(np.max(sq)) if self.N else 0.0

    def to_libsvm(self, fh) -> None:
        """Serialize in LIBSVM text format (1-based indices, +1/-1 labels)."""
        indptr, indices, data = (self.features.indptr, self.features.indices,
                                 self.features.data)
        for i in range(self.N):
            label = "+1" if self.labels[i] > 0 else "-1"
            parts = [label]
            for k in range(indptr[i], indptr[i + 1]):
                parts.append(f"{indices[k] + 1}:{float(data[k])!r}")
            fh.write(" ".join(parts) + "\n")


def _open_maybe_gzip(path: str):
    with open(path, "rb") as probe:
        magic = probe.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def parse_libsvm(source: Union[str, io.TextIOBase], n_features: Optional[int] = None) -> Dataset:
    """Parse LIBSVM text: ``<label> <idx>:<val> ...`` with 1-based indices.

    ``source`` is a path (gzip detected by magic bytes) or a text stream.
    Label sets {0,1}, {-1,+1} and {1,2} are normalized to {-1,+1} by mapping
    the smaller raw label to -1; the mapping is recorded on the dataset.
    Malformed tokens raise :class:`LibsvmFormatError` with the line number;
    non-increasing indices within a line only warn.
    """
    if isinstance(source, str):
        fh = _open_maybe_gzip(source)
        close = True
    else:
        fh, close = source, False
    raw_labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    max_index = 0
    try:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError as exc:
                raise LibsvmFormatError(f"line {lineno}: bad label {tokens[0]!r}") from exc
            entries = []
            prev_idx = 0
            for tok in tokens[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError as exc:
                    raise LibsvmFormatError(f"line {lineno}: bad token {tok!r}") from exc
                if idx < 1:
                    raise LibsvmFormatError(f"line {lineno}: index {idx} < 1")
                if idx <= prev_idx:
                    warnings.warn(f"line {lineno}: non-increasing feature index {idx}")
                prev_idx = idx
                entries.append((idx - 1, val))
                max_index = max(max_index, idx)
            raw_labels.append(label)
            rows.append(entries)
    finally:
        if close:
            fh.close()
    if not rows:
        raise LibsvmFormatError("no data lines found")

    uniq = sorted(set(raw_labels))
    if len(uniq) > 2:
        raise LibsvmFormatError(f"expected two classes, found labels {uniq}")
    if uniq == [-1.0, 1.0] or uniq in ([-1.0], [1.0]):
        mapping = {-1.0: -1.0, 1.0: 1.0}
    elif len(uniq) == 2:
        mapping = {uniq[0]: -1.0, uniq[1]: 1.0}
    else:
        mapping = {uniq[0]: 1.0}
    labels = np.array([mapping[l] for l in raw_labels])

    n = n_features if n_features is not None else max_index
    if n < max_index:
        raise LibsvmFormatError(f"n_features={n} below max index {max_index}")
    mat = sp.lil_matrix((len(rows), max(n, 1)))
    for i, entries in enumerate(rows):
        for j, v in entries:
            mat[i, j] = v
    return Dataset(mat.tocsr(), labels, label_mapping={k: v for k, v in mapping.items()})


def generate_synthetic_classification(N: int, n: int, separation: float,
                                      rng: RngStream,
                                      feature_condition: float = 1.0) -> Dataset:
    """Two Gaussian clouds at distance `separation` along a random direction.

    Labels mark cloud membership, so the Bayes error (the induced label
    noise w.r.t. the separating hyperplane) is ``Phi(-separation/2)``:
    large separations give linearly separable data with high probability.

    ``feature_condition > 1`` rescales coordinates with log-spaced factors
    so the feature second-moment matrix has roughly that condition number,
    imitating the badly scaled raw features of real datasets.
    """
    if N < 1 or n < 1:
        raise ValueError("N and n must be >= 1")
    if feature_condition < 1:
        raise ValueError("feature_condition must be >= 1")
    w = rng.standard_normal(n)
    w /= np.linalg.norm(w)
    labels = np.where(rng.uniform(0.0, 1.0, N) < 0.5, -1.0, 1.0)
    points = rng.standard_normal((N, n)) + np.outer(labels * (separation / 2.0), w)
    if feature_condition > 1.0:
        points = points * np.logspace(0.0, 0.5 * math.log10(feature_condition), n)
    return Dataset(sp.csr_matrix(points), labels)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class LogRegModel(FiniteSumProblem):
    """The finite-sum logistic objective over a :class:`Dataset`.

    ``mu`` defaults to ``1/N``.  Batch operations are vectorized through the
    sparse feature matrix.
    """

    def __init__(self, dataset: Dataset, mu: Optional[float] = None):
        self.dataset = dataset
        self.mu = float(mu) if mu is not None else 1.0 / dataset.N
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        L = self.mu + dataset.max_row_norm_sq
        super().__init__(dataset.N, dataset.n, mu_strong=self.mu, grad_lipschitz=L)
        self._x_star: Optional[Vector] = None
        self._f_star: Optional[float] = None

    # margins m_i = b_i a_i^T x for the rows in idx
    def _margins(self, idx, x: Vector) -> np.ndarray:
        return self.dataset.labels[idx] * (self.dataset.features[idx] @ x)

    def _component_value(self, i, x):
        m = float(self._margins([i], x)[0])
        return float(np.logaddexp(0.0, -m) + 0.5 * self.mu * (x @ x))

    def _component_gradient(self, i, x):
        return self._component_gradients([i], x)[0]

    def _component_hvp(self, i, x, v):
        return self._batch_hvp(np.asarray([i]), x, v)

    def _batch_value(self, idx, x):
        m = self._margins(idx, x)
        return float(np.mean(np.logaddexp(0.0, -m)) + 0.5 * self.mu * (x @ x))

    def _batch_gradient(self, idx, x):
        m = self._margins(idx, x)
        coeff = -_sigmoid(-m) * self.dataset.labels[idx]  # (1-z)/z * b_i
        g = np.asarray(self.dataset.features[idx].T @ coeff).ravel() / idx.size
        return g + self.mu * x

    def _component_gradients(self, idx, x):
        m = self._margins(idx, x)
        coeff = -_sigmoid(-m) * self.dataset.labels[idx]
        rows = self.dataset.features[idx].multiply(coeff[:, None]).toarray()
        return rows + self.mu * x[None, :]

    def _batch_hvp(self, idx, x, v):
        rows = self.dataset.features[idx]
        m = self._margins(idx, x)
        w = _sigmoid(m) * _sigmoid(-m)  # (z-1)/z^2, in (0, 1/4]
        av = rows @ v
        hv = np.asarray(rows.T @ (w * av)).ravel() / idx.size
        return hv + self.mu * v

    def _batch_hessian(self, idx, x):
        rows = self.dataset.features[idx]
        m = self._margins(idx, x)
        w = _sigmoid(m) * _sigmoid(-m)
        h = (rows.multiply(w[:, None]).T @ rows) / idx.size
        h = np.asarray(h.todense() if sp.issparse(h) else h)
        return h + self.mu * np.eye(self.n)

    def loss_factors(self, idx, x: Vector) -> np.ndarray:
        """Per-row gradient scalars ``(1-z_i)/z_i * b_i`` (loss part only)."""
        m = self._margins(idx, x)
        return -_sigmoid(-m) * self.dataset.labels[idx]

    def accuracy(self, x: Vector) -> float:
        pred = np.where(self.dataset.features @ x >= 0, 1.0, -1.0)
        return float(np.mean(pred == self.dataset.labels))

    @property
    def f_star(self) -> Optional[float]:
        """Reference optimal value, if :meth:`reference_optimum` has run."""
        return self._f_star

    def reference_optimum(self, tol: float = 1e-10,
                          max_iters: int = 200) -> tuple[Vector, float]:
        """Deterministic full-gradient damped Newton reference; cached."""
        if self._x_star is not None:
            return self._x_star, self._f_star
        x = np.zeros(self.n)
        all_idx = np.arange(self.N)
        for _ in range(max_iters):
            g = self._batch_gradient(all_idx, x)
            if np.linalg.norm(g) <= tol:
                break
            h = self._batch_hessian(all_idx, x)
            d = np.linalg.solve(h, -g)
            f0 = self._batch_value(all_idx, x)
            slope = float(g @ d)
            slack = 8.0 * np.finfo(float).eps * max(1.0, abs(f0))
            t = 1.0
            for _ in range(60):
                if self._batch_value(all_idx, x + t * d) <= f0 + 1e-4 * t * slope + slack:
                    break
                t *= 0.5
            x = x + t * d
        else:
            raise RuntimeError(f"reference Newton did not reach ||grad|| <= {tol}")
        self._x_star = x
        self._f_star = self._batch_value(all_idx, x)
        return self._x_star, self._f_star


class LogRegSagaTable:
    """Memory-lean SAGA table for logistic components with sparse rows.

    Components share the structure ``grad phi_i(x) = c_i(x) a_i + mu x``, so
    the table stores one scalar per component and a single accumulated
    loss-part sum; the regularizer term is added analytically at the current
    iterate instead of being replayed from per-slot storage.  The estimator
    stays exactly unbiased and coincides with the dense table whenever all
    slots were refreshed at the same iterate.
    """

    def __init__(self, model: LogRegModel, x0: Vector):
        self.model = model
        all_idx = np.arange(model.N)
        self.scalars = model.loss_factors(all_idx, x0)
        model.grad_evals += model.N
        self.loss_sum = np.asarray(
            model.dataset.features.T @ self.scalars).ravel()

    def estimate(self, x: Vector, batch) -> Vector:
        batch = np.asarray(batch, dtype=np.int64)
        fresh = self.model.loss_factors(batch, x)
        self.model.grad_evals += batch.size
        rows = self.model.dataset.features[batch]
        corr = np.asarray(rows.T @ (fresh - self.scalars[batch])).ravel() / batch.size
        return corr + self.loss_sum / self.model.N + self.model.mu * x

    def update(self, batch, x_new: Vector) -> None:
        batch = np.asarray(batch, dtype=np.int64)
        fresh = self.model.loss_factors(batch, x_new)
        self.model.grad_evals += batch.size
        rows = self.model.dataset.features[batch]
        self.loss_sum = self.loss_sum + np.asarray(
            rows.T @ (fresh - self.scalars[batch])).ravel()
        self.scalars[batch] = fresh

    def recompute_sum(self) -> Vector:
        return np.asarray(
            self.model.dataset.features.T @ self.scalars).ravel()
