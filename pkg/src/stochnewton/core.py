"""Shared domain types: reproducible RNG streams, oracle samples and run traces.

Everything downstream (problem generators, solvers, the experiment harness)
builds on the three contracts defined here:

* :class:`RngStream` -- splittable, replication-safe random streams,
* :class:`OracleSample` -- one noisy evaluation of (f, g, B) with accounting,
* :class:`RunTrace` -- the per-iteration record emitted by every solver run.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

Vector = NDArray[np.float64]

PHASE_LINE_SEARCH = "LS"
PHASE_GAIN = "GAIN"

TRACE_CSV_COLUMNS = (
    "run_id",
    "iter",
    "time_s",
    "f_hat",
    "true_error",
    "grad_norm",
    "step",
    "phase",
)


def as_vector(x, n: Optional[int] = None) -> Vector:
    """Coerce `x` to a float64 1-D array and validate it.

    Raises ValueError on wrong dimension or non-finite entries; this is the
    boundary check behind the "no NaN/Inf after public operations" contract.
    """
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"dimension mismatch: expected {n}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


class RngStream:
    """A named, reproducible random stream.

    Streams are identified by ``(seed, key)`` where ``key`` extends
    ``(stream_id,)`` with the path of :meth:`child` splits.  The generator is
    PCG64 seeded through ``numpy.random.SeedSequence(entropy=seed,
    spawn_key=key)``, so

    * the same ``(seed, key)`` always reproduces the same draw sequence,
      independently of how many other streams exist, and
    * distinct keys yield statistically independent streams.

    This is what makes replication ``r`` of an experiment independent of the
    total replication count: each replication owns stream id ``r``.
    """

    __slots__ = ("seed", "key", "_gen")

    def __init__(self, seed: int, stream_id: int = 0, _key: Optional[tuple] = None):
        self.seed = int(seed)
        self.key = _key if _key is not None else (int(stream_id),)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def stream_id(self) -> int:
        return self.key[0]

    def child(self, tag: int) -> "RngStream":
        """Split off an independent stream; never reuses this stream's draws."""
        return RngStream(self.seed, _key=self.key + (int(tag),))

    def gaussian(self, mean: float, stddev: float) -> float:
        """One draw from N(mean, stddev); ``stddev == 0`` returns ``mean`` exactly."""
        if stddev < 0:
            raise ValueError(f"stddev must be >= 0, got {stddev}")
        if stddev == 0.0:
            return float(mean)
        return float(self._gen.normal(mean, stddev))

    def normal(self, mean: float, stddev: float, size) -> Vector:
        if stddev < 0:
            raise ValueError(f"stddev must be >= 0, got {stddev}")
        if stddev == 0.0:
            return np.full(size, float(mean))
        return self._gen.normal(mean, stddev, size)

    def standard_normal(self, size) -> Vector:
        return self._gen.standard_normal(size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> NDArray[np.int64]:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"


def new_rng_stream(seed: int, stream_id: int) -> RngStream:
    """Create the stream identified by ``(seed, stream_id)``."""
    return RngStream(seed, stream_id)


def gaussian(rng: RngStream, mean: float, stddev: float) -> float:
    return rng.gaussian(mean, stddev)


@dataclass(frozen=True)
class EvalCounts:
    """Cumulative oracle evaluation counters at sampling time."""

    f_evals: int = 0
    g_evals: int = 0
    hvp_evals: int = 0

    def __post_init__(self):
        if min(self.f_evals, self.g_evals, self.hvp_evals) < 0:
            raise ValueError("evaluation counts must be non-negative")


@dataclass(frozen=True)
class OracleSample:
    """One (possibly noisy) oracle response.

    Any subset of value / gradient / hessian may be present, depending on
    what the caller asked for.  ``hessian`` is a linear-operator handle (see
    :class:`stochnewton.linalg.SpdOperator`); for noisy oracles the noise
    realization is frozen inside the handle, so repeated applications within
    one sample are consistent.
    """

    value: Optional[float] = None
    gradient: Optional[Vector] = None
    hessian: Optional[object] = None
    eval_counts: EvalCounts = field(default_factory=EvalCounts)


@dataclass
class TraceRecord:
    """One solver iteration: observables at iterate ``x_k`` plus the step taken."""

    iter: int
    wall_time_s: float
    f_hat: float
    true_error: Optional[float]
    grad_norm_hat: float
    step_len: float
    phase: str
    # diagnostics, not part of the CSV schema
    cg_iters: Optional[int] = None
    cg_relres: Optional[float] = None
    fallback: bool = False


class RunTrace:
    """Append-only per-run record with monotonicity checks on insertion.

    Invariants enforced:
      * ``iter`` strictly increasing,
      * ``wall_time_s`` non-decreasing,
      * the phase switches LS -> GAIN at most once and never back.
    """

    def __init__(self, run_id: str = "run"):
        self.run_id = run_id
        self.records: list[TraceRecord] = []

    def append(self, rec: TraceRecord) -> None:
        if rec.phase not in (PHASE_LINE_SEARCH, PHASE_GAIN):
            raise ValueError(f"unknown phase {rec.phase!r}")
        if self.records:
            last = self.records[-1]
            if rec.iter <= last.iter:
                raise ValueError(f"iter must increase: {last.iter} -> {rec.iter}")
            if rec.wall_time_s < last.wall_time_s:
                raise ValueError("wall_time_s must be non-decreasing")
            if last.phase == PHASE_GAIN and rec.phase == PHASE_LINE_SEARCH:
                raise ValueError("phase cannot return from GAIN to LS")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def final(self) -> TraceRecord:
        if not self.records:
            raise ValueError("empty trace")
        return self.records[-1]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


def _fmt(x: Optional[float]) -> str:
    # repr of a Python float is the shortest round-trip form; '' encodes absent
    if x is None:
        return ""
    return repr(float(x))


def write_trace_csv(trace: RunTrace, fh) -> None:
    """Write `trace` in the canonical schema.

    Columns: ``run_id,iter,time_s,f_hat,true_error,grad_norm,step,phase``;
    ``true_error`` is the empty string when unknown.
    """
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_CSV_COLUMNS)
    for r in trace.records:
        w.writerow(
            [
                trace.run_id,
                r.iter,
                _fmt(r.wall_time_s),
                _fmt(r.f_hat),
                _fmt(r.true_error),
                _fmt(r.grad_norm_hat),
                _fmt(r.step_len),
                r.phase,
            ]
        )


def trace_to_csv_text(trace: RunTrace) -> str:
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    return buf.getvalue()


def read_trace_csv(fh) -> RunTrace:
    """Parse a trace written by :func:`write_trace_csv` (invariants re-checked)."""
    rd = csv.reader(fh)
    header = next(rd, None)
    if header is None:
        raise ValueError("empty trace file")
    if tuple(header) != TRACE_CSV_COLUMNS:
        raise ValueError(f"unexpected trace header: {header}")
    trace: Optional[RunTrace] = None
    for row in rd:
        if not row:
            continue
        run_id, it, t, f_hat, true_err, gnorm, step, phase = row
        if trace is None:
            trace = RunTrace(run_id)
        trace.append(
            TraceRecord(
                iter=int(it),
                wall_time_s=float(t),
                f_hat=float(f_hat),
                true_error=float(true_err) if true_err != "" else None,
                grad_norm_hat=float(gnorm),
                step_len=float(step),
                phase=phase,
            )
        )
    if trace is None:
        raise ValueError("trace file has no records")
    return trace
