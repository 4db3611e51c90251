"""Self-contained invariant battery behind ``stochnewton check``.

Each check returns (ok, detail); the runner prints one PASS/FAIL line per
check.  These are fast smoke versions of the full test suite, meant for
installed environments where pytest is unavailable.
"""

from __future__ import annotations

import io

import numpy as np

from .core import RngStream
from .finitesum import QuadraticSumProblem, SagaTable, make_partition
from .linalg import SpdOperator, fd_gradient_check, solve_cg, solve_direct
from .logreg import LogRegModel, generate_synthetic_classification
from .slbfgs import LbfgsMemory
from .steplen import LineSearchConfig, backtrack
from .synthetic import (HESS_HOUSEHOLDER, generate_problem)


def _check_rng():
    a = RngStream(42, 0).normal(0, 1, 100)
    b = RngStream(42, 0).normal(0, 1, 100)
    c = RngStream(42, 1).normal(0, 1, 100)
    ok = np.array_equal(a, b) and not np.allclose(a, c)
    return ok, "replay identical, sibling stream distinct"


def _check_gaussian_moments():
    draws = RngStream(7, 0).normal(0.0, 1.0, 200_000)
    ok = abs(draws.mean()) < 0.01 and abs(draws.var() - 1.0) < 0.02
    return ok, f"mean={draws.mean():.4f} var={draws.var():.4f}"


def _check_spectrum():
    p = generate_problem(10, 1e3, 0.0, rng=RngStream(1, 0))
    eigs = np.linalg.eigvalsh(p.a_dense)
    err = np.max(np.abs(eigs - p.lambdas))
    return err < 1e-8, f"max eigenvalue error {err:.2e}"


def _check_householder():
    p = generate_problem(30, 100.0, 0.0, hess_form=HESS_HOUSEHOLDER,
                         rng=RngStream(2, 0))
    dense = p.a_factored.materialize()
    rng = RngStream(3, 0)
    err = max(np.max(np.abs(p.a_factored.apply(v) - dense @ v))
              for v in (rng.standard_normal(30) for _ in range(20)))
    return err < 1e-10, f"factored/dense max deviation {err:.2e}"


def _check_fd():
    p = generate_problem(8, 50.0, 0.0, rng=RngStream(4, 0))
    x = RngStream(5, 0).normal(0, 1, 8)
    err = fd_gradient_check(p.value, p.gradient, x, h=1e-6)
    data = generate_synthetic_classification(40, 6, 2.0, RngStream(6, 0))
    model = LogRegModel(data)
    x2 = RngStream(7, 0).normal(0, 1, 6)
    all_idx = np.arange(model.N)
    err2 = fd_gradient_check(lambda z: model._batch_value(all_idx, z),
                             lambda z: model._batch_gradient(all_idx, z), x2)
    ok = err < 1e-5 and err2 < 1e-5
    return ok, f"synthetic {err:.1e}, logistic {err2:.1e}"


def _check_cg():
    rng = RngStream(8, 0)
    a = rng.standard_normal((30, 30))
    spd = a @ a.T + 30 * np.eye(30)
    rhs = rng.standard_normal(30)
    op = SpdOperator.from_dense(spd)
    res = solve_cg(op, rhs, rel_tol=1e-10)
    direct = solve_direct(op, rhs)
    certified = np.linalg.norm(spd @ res.d - rhs) / np.linalg.norm(rhs)
    ok = abs(certified - res.rel_res) < 1e-12 and np.allclose(res.d, direct, atol=1e-6)
    return ok, f"certificate {res.rel_res:.2e} in {res.iters} iterations"


def _check_unbiased():
    from itertools import combinations
    rng = RngStream(9, 0)
    hs, bs = [], []
    for _ in range(6):
        m = rng.standard_normal((4, 4))
        hs.append(m @ m.T + np.eye(4))
        bs.append(rng.standard_normal(4))
    prob = QuadraticSumProblem(hs, bs)
    x = rng.standard_normal(4)
    full = prob.full_gradient_exact(x)
    batches = list(combinations(range(6), 2))
    mean_sub = np.mean([prob.batch_gradient(np.array(b), x) for b in batches], axis=0)
    table = SagaTable(prob, rng.standard_normal(4))
    mean_saga = np.mean([table.estimate(x, np.array(b)) for b in batches], axis=0)
    err = max(np.max(np.abs(mean_sub - full)), np.max(np.abs(mean_saga - full)))
    return err < 1e-12, f"exhaustive estimator bias {err:.1e}"


def _check_saga_sum():
    rng = RngStream(10, 0)
    hs = []
    for _ in range(30):
        m = rng.standard_normal((5, 5))
        hs.append(m @ m.T + np.eye(5))
    prob = QuadraticSumProblem(hs, [rng.standard_normal(5) for _ in range(30)])
    table = SagaTable(prob, rng.standard_normal(5))
    for _ in range(200):
        batch = rng.choice(30, size=5)
        table.update(batch, rng.standard_normal(5))
    err = np.max(np.abs(table.running_sum - table.recompute_sum()))
    return err < 1e-10, f"running-sum drift {err:.1e}"


def _check_lbfgs():
    rng = RngStream(11, 0)
    n = 12
    a = rng.standard_normal((n, n))
    h = a @ a.T + n * np.eye(n)
    mem = LbfgsMemory(m=6, update_interval=1)
    for _ in range(6):
        s = rng.standard_normal(n)
        mem.insert_pair(s, h @ s)
    dense = mem.materialize(n)
    v = rng.standard_normal(n)
    err = np.max(np.abs(mem.apply_inverse_hessian(v) - dense @ v))
    spd = all(v @ mem.apply_inverse_hessian(v) > 0
              for v in (rng.standard_normal(n) for _ in range(50)))
    return err < 1e-10 and mem.verify_secant() and spd, \
        f"two-loop/dense deviation {err:.1e}"


def _check_backtrack():
    rng = RngStream(12, 0)
    cfg = LineSearchConfig(eta=0.3, beta=0.5, zeta_kind="zero", t_start=2.0)
    ok = True
    for _ in range(100):
        a = float(rng.uniform(0.5, 4.0))
        f = lambda t, a=a: 0.5 * a * (t - 1.0) ** 2
        res = backtrack(f, f(0.0), -a, cfg, 0.0)
        if res.accepted:
            # soundness + minimality of the accepted trial
            ok &= f(res.t) <= f(0.0) + cfg.eta * res.t * (-a) + 1e-15
            if res.n_trials > 1:
                prev = res.t / cfg.beta
                ok &= f(prev) > f(0.0) + cfg.eta * prev * (-a)
    return ok, "Armijo acceptance sound and minimal on quadratics"


def _check_partition():
    rng = RngStream(13, 0)
    part = make_partition(17, 5, rng)
    sizes = sorted(len(b) for b in part)
    covered = np.sort(np.concatenate(list(part)))
    ok = np.array_equal(covered, np.arange(17)) and sizes[-1] - sizes[0] <= 1
    return ok, f"sizes {sizes}"


CHECKS = [
    ("rng-reproducibility", _check_rng),
    ("gaussian-moments", _check_gaussian_moments),
    ("synthetic-spectrum", _check_spectrum),
    ("householder-equivalence", _check_householder),
    ("finite-difference-gradients", _check_fd),
    ("cg-certificate", _check_cg),
    ("estimator-unbiasedness", _check_unbiased),
    ("saga-running-sum", _check_saga_sum),
    ("lbfgs-identities", _check_lbfgs),
    ("backtracking-soundness", _check_backtrack),
    ("partition-coverage", _check_partition),
]


def run_checks(out=None) -> bool:
    """Run every check, print one line each; True when all pass."""
    import sys
    out = out or sys.stdout
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        out.write(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}\n")
    return all_ok
