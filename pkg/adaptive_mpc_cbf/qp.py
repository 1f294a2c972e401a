# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Dense primal active-set solver for convex quadratic programs.

Problems have the form ``min 1/2 z'Hz + g'z`` subject to ``A_eq z = b_eq`` and ``A_ineq z >= b_ineq``.
Multipliers follow the Lagrangian ``f - y'(A_eq z - b_eq) - lam'(A_ineq z - b_ineq)`` so inequality duals are
non-negative at a solution.
"""

import logging
from bisect import insort
from dataclasses import dataclass
from enum import StrEnum
from typing import Self

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.errors import QpInfeasible
from adaptive_mpc_cbf.errors import QpUnbounded
from adaptive_mpc_cbf.errors import ShapeMismatch

logger = logging.getLogger(__name__)

REGULARIZATION = 1e-10
UNBOUNDED_STEP = 1e8
PHASE_ONE_PROXIMAL = 1e-6


def _matrix(values: npt.ArrayLike | None, columns: int) -> FloatArray:
    if values is None:
        return np.zeros((0, columns))
    return np.atleast_2d(np.asarray(values, dtype=float)).reshape(-1, columns)


def _vector(values: npt.ArrayLike | None) -> FloatArray:
    if values is None:
        return np.zeros(0)
    return np.asarray(values, dtype=float).ravel()


@dataclass(frozen=True)
class QpProblem:
    h: FloatArray
    g: FloatArray
    a_ineq: FloatArray
    b_ineq: FloatArray
    a_eq: FloatArray
    b_eq: FloatArray

    @classmethod
    def build(
        cls,
        h: npt.ArrayLike,
        g: npt.ArrayLike,
        a_ineq: npt.ArrayLike | None = None,
        b_ineq: npt.ArrayLike | None = None,
        a_eq: npt.ArrayLike | None = None,
        b_eq: npt.ArrayLike | None = None,
    ) -> Self:
        hessian = np.atleast_2d(np.asarray(h, dtype=float))
        size = hessian.shape[0]
        problem = cls(
            h=hessian,
            g=_vector(g),
            a_ineq=_matrix(a_ineq, size),
            b_ineq=_vector(b_ineq),
            a_eq=_matrix(a_eq, size),
            b_eq=_vector(b_eq),
        )
        problem.validate()
        return problem

    @property
    def size(self) -> int:
        return int(self.h.shape[0])

    def validate(self) -> None:
        n = self.size
        if self.h.shape != (n, n):
            raise ShapeMismatch(f'H must be square, got {self.h.shape}.')
        if not np.allclose(self.h, self.h.T, rtol=1e-10, atol=1e-12):
            raise ShapeMismatch('H must be symmetric.')
        if self.g.shape != (n,):
            raise ShapeMismatch(f'g must have {n} entries, got {self.g.shape}.')
        for name, matrix, rhs in (('ineq', self.a_ineq, self.b_ineq), ('eq', self.a_eq, self.b_eq)):
            if matrix.shape[1] != n or matrix.shape[0] != rhs.shape[0]:
                raise ShapeMismatch(f'A_{name} {matrix.shape} and b_{name} {rhs.shape} do not match {n} variables.')

    def objective(self, z: FloatArray) -> float:
        return float(0.5 * z @ self.h @ z + self.g @ z)


class QpStatus(StrEnum):
    OPTIMAL = 'optimal'
    MAX_ITERATIONS = 'max_iterations'


@dataclass(frozen=True)
class QpSolution:
    z: FloatArray
    eq_duals: FloatArray
    ineq_duals: FloatArray
    status: QpStatus
    iterations: int


def kkt_residual(problem: QpProblem, z: FloatArray, eq_duals: FloatArray, ineq_duals: FloatArray) -> float:
    """Largest violation among stationarity, primal and dual feasibility and complementary slackness."""

    stationarity = problem.h @ z + problem.g - problem.a_eq.T @ eq_duals - problem.a_ineq.T @ ineq_duals
    slack = problem.a_ineq @ z - problem.b_ineq
    parts = [
        np.abs(stationarity),
        np.abs(problem.a_eq @ z - problem.b_eq),
        np.maximum(0.0, -slack),
        np.maximum(0.0, -ineq_duals),
        np.abs(ineq_duals * slack),
    ]
    return max((float(part.max()) for part in parts if part.size), default=0.0)


class ActiveSetSolver:
    """Primal active-set method with an elastic phase-one start.

    Ties are broken deterministically: the most negative multiplier leaves the working set with the
    smallest index winning, and the smallest blocking index enters.
    """

    def __init__(self, tolerance: float = 1e-9, max_iterations: int = 5000) -> None:
        self.tolerance = tolerance
        self.max_iterations = max_iterations

    def solve(self, problem: QpProblem, warm_start: npt.ArrayLike | None = None) -> QpSolution:
        start = self._feasible_start(problem, warm_start)
        return self._iterate(problem, start, [])

    def _feasible_start(self, problem: QpProblem, warm_start: npt.ArrayLike | None) -> FloatArray:
        n = problem.size
        guess = np.zeros(n) if warm_start is None else _vector(warm_start)
        if guess.shape != (n,):
            raise ShapeMismatch(f'Warm start must have {n} entries, got {guess.shape}.')

        if problem.a_eq.shape[0]:
            residual = problem.a_eq @ guess - problem.b_eq
            correction = np.linalg.lstsq(problem.a_eq, residual, rcond=None)[0]
            guess = guess - correction
            mismatch = float(np.abs(problem.a_eq @ guess - problem.b_eq).max())
            if mismatch > self._feasibility_tolerance(problem):
                raise QpInfeasible(mismatch)

        violation = np.maximum(0.0, problem.b_ineq - problem.a_ineq @ guess)
        if not violation.size or violation.max() <= 0.0:
            return guess
        return self._phase_one(problem, guess, violation)

    def _feasibility_tolerance(self, problem: QpProblem) -> float:
        largest_rhs = np.abs(np.concatenate([problem.b_ineq, problem.b_eq])).max(initial=0.0)
        scale = max(1.0, float(largest_rhs))
        return 10.0 * self.tolerance * scale

    def _phase_one(self, problem: QpProblem, guess: FloatArray, violation: FloatArray) -> FloatArray:
        """Minimize the total violation ``sum t`` over ``A z + t >= b, t >= 0`` near the starting guess."""

        n, m = problem.size, problem.a_ineq.shape[0]
        identity = np.eye(m)
        elastic = QpProblem(
            h=PHASE_ONE_PROXIMAL * np.eye(n + m),
            g=np.concatenate([-PHASE_ONE_PROXIMAL * guess, np.ones(m)]),
            a_ineq=np.block([[problem.a_ineq, identity], [np.zeros((m, n)), identity]]),
            b_ineq=np.concatenate([problem.b_ineq, np.zeros(m)]),
            a_eq=np.hstack([problem.a_eq, np.zeros((problem.a_eq.shape[0], m))]),
            b_eq=problem.b_eq,
        )
        solution = self._iterate(elastic, np.concatenate([guess, violation]), [])
        z = solution.z[:n]
        total = float(np.maximum(0.0, problem.b_ineq - problem.a_ineq @ z).sum())
        if total > self._feasibility_tolerance(problem):
            logger.debug(f'Phase one certified infeasibility with total violation {total:.3e}.')
            raise QpInfeasible(total)
        return z

    def _equality_step(
        self, h: FloatArray, constraints: FloatArray, gradient: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        n, k = h.shape[0], constraints.shape[0]
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = h + REGULARIZATION * np.eye(n)
        kkt[:n, n:] = constraints.T
        kkt[n:, :n] = constraints
        rhs = np.concatenate([-gradient, np.zeros(k)])
        try:
            solution = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            solution = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        return solution[:n], -solution[n:]

    def _ratio_test(
        self, problem: QpProblem, z: FloatArray, step: FloatArray, working: list[int]
    ) -> tuple[float, int | None]:
        candidates = np.setdiff1d(np.arange(problem.a_ineq.shape[0]), working)
        if not candidates.size:
            return 1.0, None

        rows = problem.a_ineq[candidates]
        rate = rows @ step
        threshold = self.tolerance * np.linalg.norm(rows, axis=1) * np.linalg.norm(step)
        approaching = rate < -threshold
        if not approaching.any():
            return 1.0, None

        slack = np.maximum(0.0, rows[approaching] @ z - problem.b_ineq[candidates[approaching]])
        ratios = slack / -rate[approaching]
        position = int(np.argmin(ratios))
        if ratios[position] > 1.0:
            return 1.0, None
        return max(0.0, float(ratios[position])), int(candidates[approaching][position])

    def _iterate(self, problem: QpProblem, z: FloatArray, working: list[int]) -> QpSolution:
        n_eq = problem.a_eq.shape[0]
        eq_duals = np.zeros(n_eq)
        ineq_duals = np.zeros(problem.a_ineq.shape[0])
        dual_tolerance = self.tolerance * max(1.0, float(np.abs(problem.g).max(initial=0.0)))

        for iteration in range(1, self.max_iterations + 1):
            gradient = problem.h @ z + problem.g
            constraints = np.vstack([problem.a_eq, problem.a_ineq[working]])
            step, multipliers = self._equality_step(problem.h, constraints, gradient)

            if np.abs(step).max(initial=0.0) <= self.tolerance * (1.0 + np.abs(z).max(initial=0.0)):
                alpha, _ = self._ratio_test(problem, z, step, working)
                z = z + alpha * step
                eq_duals = multipliers[:n_eq]
                active_duals = multipliers[n_eq:]
                if not working or active_duals.min() >= -dual_tolerance:
                    ineq_duals = np.zeros(problem.a_ineq.shape[0])
                    ineq_duals[working] = np.maximum(active_duals, 0.0)
                    return QpSolution(z, eq_duals, ineq_duals, QpStatus.OPTIMAL, iteration)
                working.pop(int(np.argmin(active_duals)))
                continue

            alpha, blocking = self._ratio_test(problem, z, step, working)
            if blocking is None and np.abs(step).max() > UNBOUNDED_STEP * (1.0 + np.abs(z).max()):
                raise QpUnbounded('QP objective decreases without bound along a feasible direction.')

            z = z + alpha * step
            if blocking is not None:
                insort(working, blocking)

        logger.debug(f'Active-set solver stopped after {self.max_iterations} iterations.')
        return QpSolution(z, eq_duals, ineq_duals, QpStatus.MAX_ITERATIONS, self.max_iterations)


def solve_qp(
    problem: QpProblem,
    warm_start: npt.ArrayLike | None = None,
    tolerance: float = 1e-9,
    max_iterations: int = 5000,
) -> QpSolution:
    problem.validate()
    return ActiveSetSolver(tolerance, max_iterations).solve(problem, warm_start)
