"""Randomised agreement checks between the compiled WMC and enumeration."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .provenance import FALSE, TRUE, Formula, brute_force_wmc, conj_all, disj_all, neg, var, wmc, wmc_grad

# Relative errors are measured against max(|a|, |b|, GRAD_FLOOR) so that
# derivatives which are exactly zero are compared on an absolute scale.
GRAD_FLOOR = 1e-6


def random_formula(rng: np.random.Generator, n_vars: int, depth: int) -> Formula:
    if depth == 0 or rng.random() < 0.2:
        r = rng.random()
        if r < 0.02:
            return TRUE
        if r < 0.04:
            return FALSE
        return var(int(rng.integers(n_vars)))
    op = rng.choice(["and", "or", "not"], p=[0.42, 0.42, 0.16])
    if op == "not":
        return neg(random_formula(rng, n_vars, depth - 1))
    kids = [random_formula(rng, n_vars, depth - 1) for _ in range(int(rng.integers(2, 4)))]
    return conj_all(kids) if op == "and" else disj_all(kids)


@dataclass
class SuiteResult:
    n_wmc: int
    max_abs_err: float
    wmc_seconds: float
    n_grad: int
    max_rel_err: float
    grad_seconds: float

    def passed(self, wmc_tol: float = 1e-9, grad_tol: float = 1e-4) -> bool:
        return self.max_abs_err <= wmc_tol and self.max_rel_err <= grad_tol


def run_wmc_suite(
    n_wmc: int = 10_000, n_grad: int = 1_000, seed: int = 0,
    max_vars: int = 12, depth: int = 6, h: float = 1e-5,
) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(n_wmc):
        n = int(rng.integers(1, max_vars + 1))
        f = random_formula(rng, n, depth)
        probs = {i: float(p) for i, p in enumerate(rng.random(n))}
        worst = max(worst, abs(wmc(f, probs) - brute_force_wmc(f, probs)))
    t_wmc = time.perf_counter() - t0

    worst_rel = 0.0
    t0 = time.perf_counter()
    for _ in range(n_grad):
        n = int(rng.integers(1, max_vars + 1))
        f = random_formula(rng, n, depth)
        probs = {i: float(p) for i, p in enumerate(rng.uniform(0.01, 0.99, n))}
        _, grads = wmc_grad(f, probs)
        for v in sorted(f.vars):
            up, dn = dict(probs), dict(probs)
            up[v] += h
            dn[v] -= h
            fd = (brute_force_wmc(f, up) - brute_force_wmc(f, dn)) / (2 * h)
            g = grads[v]
            worst_rel = max(worst_rel, abs(g - fd) / max(abs(g), abs(fd), GRAD_FLOOR))
    t_grad = time.perf_counter() - t0
    return SuiteResult(n_wmc, worst, t_wmc, n_grad, worst_rel, t_grad)
