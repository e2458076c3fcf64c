"""Closed-form analysis of distillation for linear regression.

With quadratic loss, one GD step on M synthetic pairs sends theta_0 to
(I - (eta/M) Dt^T Dt) theta_0 + (eta/M) Dt^T Tt, so a distilled set that
reaches the global minimum from every theta_0 must zero out the first
matrix — which forces Dt^T Dt to have full rank, hence M >= D.  This
module provides the exact M = D construction, the normal-equations
solver it relies on, and an empirical optimizer that exhibits the bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .data import LinearProblem
from .distillation import Adam
from .errors import SingularMatrixError

_COND_LIMIT = 1e12


def quadratic_loss(problem: LinearProblem, theta: np.ndarray) -> float:
    """1/(2N) || d theta - t ||^2."""
    theta = np.asarray(theta).reshape(-1, 1)
    r = problem.d @ theta - problem.t
    return float(np.sum(r * r)) / (2.0 * problem.d.shape[0])


def solve_normal(problem: LinearProblem) -> np.ndarray:
    """Unique solution of d^T d theta = d^T t via Cholesky."""
    gram = problem.d.T @ problem.d
    if np.linalg.cond(gram) > _COND_LIMIT:
        raise SingularMatrixError("d^T d is numerically rank-deficient")
    cf = scipy.linalg.cho_factor(gram)
    return scipy.linalg.cho_solve(cf, problem.d.T @ problem.t)


def theta1_closed_form(theta0, dtilde, ttilde, eta: float) -> np.ndarray:
    """One GD step on the synthetic quadratic loss, in matrix form."""
    theta0 = np.asarray(theta0, dtype=np.float64).reshape(-1, 1)
    dtilde = np.asarray(dtilde, dtype=np.float64)
    ttilde = np.asarray(ttilde, dtype=np.float64).reshape(-1, 1)
    m = dtilde.shape[0]
    scale = eta / m
    return theta0 - scale * (dtilde.T @ (dtilde @ theta0 - ttilde))


def exact_construction(problem: LinearProblem):
    """The M = D distilled set reaching the global minimum from any theta_0.

    Returns (N*I, N*theta_star, M/N^2); with that rate the contraction
    matrix I - (eta/M) Dt^T Dt vanishes exactly.
    """
    theta_star = solve_normal(problem)
    n, d = problem.d.shape
    dtilde = float(n) * np.eye(d)
    ttilde = float(n) * theta_star
    eta = d / float(n) ** 2  # makes (eta/M) Dt^T Dt == I for M == D
    return dtilde, ttilde, eta


@dataclass
class LowerBoundReport:
    m: int
    d: int
    worst_gap: float
    feasible: bool


def optimize_linear_distilled(problem: LinearProblem, m: int, iterations: int = 3000,
                              meta_lr: float = 0.05, batch_inits: int = 16,
                              lr_init: float = 0.1, seed: int = 0):
    """Meta-optimize M synthetic pairs (and the rate) for the linear model.

    Each iteration samples a batch of standard-normal theta_0 columns,
    forms theta_1 for all of them in one matrix expression, and follows
    the Adam gradient of the mean full-data loss.
    """
    n, d = problem.d.shape
    rng = np.random.default_rng(seed)
    dt = rng.standard_normal((m, d))
    tt = rng.standard_normal((m, 1))
    rho = np.array(np.log(np.expm1(lr_init)))
    adam = Adam(dt.size + tt.size + 1, meta_lr)
    data_c = ad.const(problem.d)
    for _ in range(iterations):
        theta0s = rng.standard_normal((d, batch_inits))
        dt_n, tt_n, rho_n = ad.leaf(dt), ad.leaf(tt), ad.leaf(rho)
        rate = ad.softplus(rho_n)
        gram = ad.mul(ad.mul(rate, ad.const(1.0 / m)), ad.matmul(ad.transpose(dt_n), dt_n))
        contraction = ad.sub(ad.const(np.eye(d)), gram)
        pull = ad.mul(ad.mul(rate, ad.const(1.0 / m)), ad.matmul(ad.transpose(dt_n), tt_n))
        theta1 = ad.add(ad.matmul(contraction, ad.const(theta0s)), pull)
        resid = ad.sub(ad.matmul(data_c, theta1), ad.const(problem.t))
        lnode = ad.mul(ad.sum_(ad.square(resid)), ad.const(0.5 / (n * batch_inits)))
        gmap = ad.backward(lnode, [dt_n, tt_n, rho_n])
        x = np.concatenate([dt.reshape(-1), tt.reshape(-1), [float(rho)]])
        g = np.concatenate(
            [gmap[dt_n].value.reshape(-1), gmap[tt_n].value.reshape(-1),
             [float(gmap[rho_n].value)]]
        )
        x = adam.step(x, g)
        dt = x[: dt.size].reshape(m, d)
        tt = x[dt.size : dt.size + m].reshape(m, 1)
        rho = np.array(x[-1])
    eta = float(np.logaddexp(0.0, rho))
    return dt, tt, eta


def verify_lower_bound(problem: LinearProblem, m: int, trials: int = 100,
                       gap_tol: float = 1e-3, iterations: int = 3000,
                       seed: int = 0) -> LowerBoundReport:
    """Optimize an M-pair distilled set, then report the worst optimality
    gap of one-step training over random theta_0 draws."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n, d = problem.d.shape
    dt, tt, eta = optimize_linear_distilled(problem, m, iterations=iterations, seed=seed)
    theta_star = solve_normal(problem)
    best = quadratic_loss(problem, theta_star)
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _ in range(trials):
        theta0 = rng.standard_normal((d, 1))
        theta1 = theta1_closed_form(theta0, dt, tt, eta)
        worst = max(worst, quadratic_loss(problem, theta1) - best)
    return LowerBoundReport(m=m, d=d, worst_gap=worst, feasible=worst <= gap_tol)
