"""Self-test suites behind ``dnkd verify``.

Each suite compares the library against a direct re-evaluation on random
instances from a fixed generator and returns a ``SuiteResult``.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import datastore as ds
from . import distill as dl
from . import teacher as tc


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float
    tolerance: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} cases={self.cases} worst={self.worst:.3e} tol={self.tolerance:.0e}"


def _random_teacher(rng, V, k=8):
    d = rng.uniform(0.0, 50.0, k)
    toks = rng.integers(0, V, k)
    return tc.teacher_distribution(list(zip(d, toks)), float(rng.uniform(1.0, 50.0)), V)


def decomposition_suite(n=500, seed=0):
    """Full KL equals binary KL plus (1 - p_t) times the non-target KL."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for _ in range(n):
        V = int(rng.integers(3, 40))
        teacher = _random_teacher(rng, V)
        t = int(rng.integers(0, V))
        if 1.0 - teacher.mass(t) < 1e-12:
            continue
        z = rng.normal(0.0, 3.0, V)
        worst = max(worst, dl.decomposition_check(teacher, z, t))
        cases += 1
    return SuiteResult("kl_decomposition", worst <= 1e-10, cases, worst, 1e-10)


def knn_suite(n_queries=50, seed=0):
    """Datastore search against a plain float64 linear scan."""
    rng = np.random.default_rng(seed)
    dim, n, k = 16, 2000, 8
    keys = rng.normal(size=(n, dim)).astype(np.float32)
    keys[100:110] = keys[0]  # exact ties
    store = ds.build(dim, 50)
    store.add_entries(keys, rng.integers(0, 50, n), np.stack([np.arange(n), np.zeros(n, dtype=np.int64)], 1))
    k64 = keys.astype(np.float64)
    mismatches = 0
    for i in range(n_queries):
        q = keys[0] if i == 0 else rng.normal(size=dim).astype(np.float32)
        dist = ((k64 - q.astype(np.float64)) ** 2).sum(axis=1)
        expect = sorted(range(n), key=lambda j: (dist[j], j))[:k]
        got = store.query(q, k)
        if list(got.indices) != expect:
            mismatches += 1
    return SuiteResult("knn_linear_scan", mismatches == 0, n_queries, float(mismatches), 0.0)


def _fd(f, z, h=1e-5):
    g = np.empty_like(z)
    for j in range(len(z)):
        up, dn = z.copy(), z.copy()
        up[j] += h
        dn[j] -= h
        g[j] = (f(up) - f(dn)) / (2 * h)
    return g


def gradient_suite(n=100, seed=0):
    """Analytic logit gradients of every loss against central differences."""
    rng = np.random.default_rng(seed)
    w = dl.LossWeights()
    worst = 0.0
    for _ in range(n):
        V = int(rng.integers(3, 20))
        teacher = _random_teacher(rng, V)
        t = int(rng.integers(0, V))
        if 1.0 - teacher.mass(t) < 1e-6:
            continue
        tb = dl.teacher_decompose(teacher, t)
        z = rng.normal(0.0, 2.0, V)
        checks = [
            lambda x: dl.cross_entropy_smoothed(x, t, w.label_smoothing),
            lambda x: dl.nkd_loss(teacher, x),
            lambda x: dl.binary_kl(tb, x, t),
            lambda x: dl.nontarget_kl(tb, x, t),
            lambda x: (dl.dnkd_loss(teacher, x, t, w).total, dl.dnkd_loss(teacher, x, t, w).grad),
        ]
        for f in checks:
            _, g = f(z)
            num = _fd(lambda x: f(x)[0], z)
            scale = max(np.linalg.norm(g), np.linalg.norm(num))
            if scale > 1e-6:
                worst = max(worst, float(np.linalg.norm(g - num) / scale))
    return SuiteResult("logit_gradients", worst <= 1e-6, n, worst, 1e-6)


def run_all():
    return [decomposition_suite(), knn_suite(), gradient_suite()]


def all_passed(results):
    return all(r.passed and not math.isnan(r.worst) for r in results)
