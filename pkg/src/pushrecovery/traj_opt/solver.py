"""Augmented-Lagrangian NLP solver.

Problems are any object exposing::

    x0                      initial guess (1-D array)
    objective(x) -> (f, g)  value and gradient
    eq(x)   -> (c, J)       equality residuals c(x) = 0 and dense Jacobian
    ineq(x) -> (h, J)       inequality residuals h(x) <= 0 and dense Jacobian

The outer loop updates multipliers and the penalty; the inner minimization of
the augmented Lagrangian is a bound-free L-BFGS run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.optimize import minimize

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


class MaxIterations(RuntimeError):
    pass


class Nlp(Protocol):
    x0: np.ndarray

    def objective(self, x: np.ndarray) -> tuple[float, np.ndarray]: ...
    def eq(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...
    def ineq(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class SolverOptions:
    feas_tol: float = 1e-6
    stat_tol: float = 1e-4
    rho0: float = 10.0
    rho_max: float = 1e9
    rho_growth: float = 10.0
    max_outer: int = 30
    max_inner: int = 3000
    stall_limit: int = 3
    stall_rho: float = 1e3


@dataclass
class NlpSolution:
    x: np.ndarray
    objective: float
    max_violation: float
    stationarity: float
    iterations: int
    status: str
    history: list[tuple[float, float]] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


def violation(c: np.ndarray, h: np.ndarray) -> float:
    v = 0.0
    if c.size:
        v = float(np.max(np.abs(c)))
    if h.size:
        v = max(v, float(np.max(h)))
    return max(v, 0.0)


def solve(problem: Nlp, options: SolverOptions | None = None) -> NlpSolution:
    opt = options or SolverOptions()
    x = np.array(problem.x0, dtype=float)
    c, _ = problem.eq(x)
    h, _ = problem.ineq(x)
    lam = np.zeros(c.size)
    mu = np.zeros(h.size)
    rho = opt.rho0
    prev_viol = violation(c, h)
    stalls = 0
    history: list[tuple[float, float]] = []
    total_inner = 0
    f = stat = float("nan")
    status = MAX_ITER

    for outer in range(1, opt.max_outer + 1):

        def merit(z: np.ndarray) -> tuple[float, np.ndarray]:
            fz, gz = problem.objective(z)
            cz, Jc = problem.eq(z)
            hz, Jh = problem.ineq(z)
            shifted = np.maximum(0.0, mu + rho * hz)
            val = fz + lam @ cz + 0.5 * rho * cz @ cz + (shifted @ shifted - mu @ mu) / (2.0 * rho)
            grad = gz + Jc.T @ (lam + rho * cz) + Jh.T @ shifted
            return val, grad

        res = minimize(
            merit, x, jac=True, method="L-BFGS-B",
            options={"maxiter": opt.max_inner, "gtol": 1e-10, "ftol": 1e-15, "maxcor": 30},
        )
        x = res.x
        total_inner += int(res.nit)
        f, gf = problem.objective(x)
        c, Jc = problem.eq(x)
        h, Jh = problem.ineq(x)
        lam = lam + rho * c
        mu = np.maximum(0.0, mu + rho * h)
        viol = violation(c, h)
        grad_l = gf + Jc.T @ lam + Jh.T @ mu
        stat = float(np.max(np.abs(grad_l))) if grad_l.size else 0.0
        history.append((float(f), viol))
        log.debug("outer %d: f=%.6g viol=%.3g stat=%.3g rho=%.1e", outer, f, viol, stat, rho)

        if viol <= opt.feas_tol and stat <= opt.stat_tol:
            status = FEASIBLE
            break
        if viol > opt.feas_tol:
            if viol > 0.9 * prev_viol and rho >= opt.stall_rho:
                stalls += 1
            else:
                stalls = 0
            if stalls >= opt.stall_limit:
                status = INFEASIBLE
                break
            if viol > 0.25 * prev_viol:
                rho = min(rho * opt.rho_growth, opt.rho_max)
        prev_viol = min(prev_viol, viol) if viol > opt.feas_tol else viol

    return NlpSolution(x, float(f), violation(c, h), stat, outer, status, history)
