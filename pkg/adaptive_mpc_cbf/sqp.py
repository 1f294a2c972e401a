# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Sequential quadratic programming for programs with a constant quadratic objective.

Constraints are smooth and possibly nonlinear: ``c_E(z) = 0`` and ``c_I(z) >= 0``. Each iteration linearizes them,
solves the QP subproblem with the exact objective Hessian and backtracks on the l1 merit function. When a
subproblem has no feasible point the elastic phase decides whether the program itself is infeasible.
"""

import logging
from abc import ABC
from abc import abstractmethod
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from enum import StrEnum
from typing import NamedTuple
from typing import Self

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import BoolArray
from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.config import SolverSettings
from adaptive_mpc_cbf.errors import QpInfeasible
from adaptive_mpc_cbf.errors import QpUnbounded
from adaptive_mpc_cbf.errors import ShapeMismatch
from adaptive_mpc_cbf.qp import ActiveSetSolver
from adaptive_mpc_cbf.qp import QpProblem

logger = logging.getLogger(__name__)

ELASTIC_PROXIMAL = 1e-6


class NlpProblem(ABC):
    """Objective ``1/2 z'Hz + g'z + constant``; constraint callables return values and Jacobians."""

    @property
    @abstractmethod
    def hessian(self) -> FloatArray: ...

    @property
    @abstractmethod
    def linear_cost(self) -> FloatArray: ...

    @property
    def constant_cost(self) -> float:
        return 0.0

    @property
    def size(self) -> int:
        return int(self.hessian.shape[0])

    @property
    @abstractmethod
    def hard_rows(self) -> BoolArray:
        """Inequality rows the elastic phase may not relax."""

    @abstractmethod
    def equalities(self, z: FloatArray) -> tuple[FloatArray, FloatArray]: ...

    @abstractmethod
    def inequalities(self, z: FloatArray) -> tuple[FloatArray, FloatArray]: ...

    def equality_values(self, z: FloatArray) -> FloatArray:
        return self.equalities(z)[0]

    def inequality_values(self, z: FloatArray) -> FloatArray:
        return self.inequalities(z)[0]

    def objective(self, z: FloatArray) -> float:
        return float(0.5 * z @ self.hessian @ z + self.linear_cost @ z + self.constant_cost)

    def objective_gradient(self, z: FloatArray) -> FloatArray:
        return self.hessian @ z + self.linear_cost


@dataclass(frozen=True)
class QuadraticNlp(NlpProblem):
    """Quadratic objective with affine constraints ``A_eq z = b_eq`` and ``A_ineq z >= b_ineq``."""

    h: FloatArray
    g: FloatArray
    a_ineq: FloatArray
    b_ineq: FloatArray
    a_eq: FloatArray
    b_eq: FloatArray
    hard: BoolArray | None = None

    @classmethod
    def from_qp(cls, problem: QpProblem, hard: npt.ArrayLike | None = None) -> Self:
        mask = None if hard is None else np.asarray(hard, dtype=bool)
        if mask is not None and mask.shape != problem.b_ineq.shape:
            raise ShapeMismatch(f'Hard-row mask {mask.shape} does not match {problem.b_ineq.shape} rows.')
        return cls(problem.h, problem.g, problem.a_ineq, problem.b_ineq, problem.a_eq, problem.b_eq, mask)

    @property
    def hessian(self) -> FloatArray:
        return self.h

    @property
    def linear_cost(self) -> FloatArray:
        return self.g

    @property
    def hard_rows(self) -> BoolArray:
        if self.hard is None:
            return np.zeros(self.b_ineq.shape[0], dtype=bool)
        return self.hard

    def equalities(self, z: FloatArray) -> tuple[FloatArray, FloatArray]:
        return self.a_eq @ z - self.b_eq, self.a_eq

    def inequalities(self, z: FloatArray) -> tuple[FloatArray, FloatArray]:
        return self.a_ineq @ z - self.b_ineq, self.a_ineq


class ElasticNlp(NlpProblem):
    """Violation-minimizing companion of a program: soft rows get non-negative violation variables.

    Variables are ``(z, t)``; the objective is ``sum t`` plus a small proximal term that picks the violation
    minimizer closest to the anchor.
    """

    def __init__(self, base: NlpProblem, anchor: FloatArray) -> None:
        self.base = base
        self.anchor = anchor
        self.soft_index = np.flatnonzero(~base.hard_rows)
        n, k = base.size, self.soft_index.size
        self._hessian = ELASTIC_PROXIMAL * np.eye(n + k)
        self._linear_cost = np.concatenate([-ELASTIC_PROXIMAL * anchor, np.ones(k)])
        self._selector = np.zeros((base.hard_rows.size, k))
        self._selector[self.soft_index, np.arange(k)] = 1.0

    @property
    def hessian(self) -> FloatArray:
        return self._hessian

    @property
    def linear_cost(self) -> FloatArray:
        return self._linear_cost

    @property
    def hard_rows(self) -> BoolArray:
        return np.ones(self.base.hard_rows.size + self.soft_index.size, dtype=bool)

    def split(self, w: FloatArray) -> tuple[FloatArray, FloatArray]:
        return w[: self.base.size], w[self.base.size :]

    def start(self, z: FloatArray) -> FloatArray:
        violation = np.maximum(0.0, -self.base.inequality_values(z))[self.soft_index]
        return np.concatenate([z, violation])

    def equalities(self, w: FloatArray) -> tuple[FloatArray, FloatArray]:
        z, t = self.split(w)
        values, jacobian = self.base.equalities(z)
        return values, np.hstack([jacobian, np.zeros((jacobian.shape[0], t.size))])

    def inequalities(self, w: FloatArray) -> tuple[FloatArray, FloatArray]:
        z, t = self.split(w)
        values, jacobian = self.base.inequalities(z)
        k = t.size
        stacked = np.concatenate([values + self._selector @ t, t])
        rows = np.block([[jacobian, self._selector], [np.zeros((k, z.size)), np.eye(k)]])
        return stacked, rows

    def equality_values(self, w: FloatArray) -> FloatArray:
        return self.base.equality_values(self.split(w)[0])

    def inequality_values(self, w: FloatArray) -> FloatArray:
        z, t = self.split(w)
        return np.concatenate([self.base.inequality_values(z) + self._selector @ t, t])


class NlpStatus(StrEnum):
    FEASIBLE = 'feasible'
    INFEASIBLE = 'infeasible'
    MAX_ITERATIONS = 'max_iterations'


@dataclass(frozen=True)
class NlpSolution:
    z: FloatArray
    status: NlpStatus
    kkt_residual: float
    constraint_violation: float
    iterations: int
    objective: float
    eq_duals: FloatArray
    ineq_duals: FloatArray
    merit_history: list[tuple[float, float]] = field(default_factory=list)
    min_violation: float | None = None

    @property
    def feasible(self) -> bool:
        return self.status is NlpStatus.FEASIBLE


class ElasticResult(NamedTuple):
    z_relaxed: FloatArray
    min_violation: float


class Measurement(NamedTuple):
    kkt: float
    violation: float
    eq_violation: float


def total_violation(problem: NlpProblem, z: FloatArray, soft_only: bool = False) -> float:
    inequality = np.maximum(0.0, -problem.inequality_values(z))
    if soft_only:
        return float(inequality[~problem.hard_rows].sum())
    return float(inequality.sum() + np.abs(problem.equality_values(z)).sum())


class SqpSolver:
    """Holds the QP workspace; one instance per controller, not shared between threads."""

    def __init__(self, settings: SolverSettings | None = None, restore: bool = True) -> None:
        self.settings = settings or SolverSettings()
        self.restore = restore
        self.qp = ActiveSetSolver(self.settings.qp_tolerance, self.settings.qp_max_iterations)

    def merit(self, problem: NlpProblem, z: FloatArray, penalty: float) -> float:
        return problem.objective(z) + penalty * total_violation(problem, z)

    def measure(self, problem: NlpProblem, z: FloatArray, eq_duals: FloatArray, ineq_duals: FloatArray) -> Measurement:
        eq_values, eq_jacobian = problem.equalities(z)
        ineq_values, ineq_jacobian = problem.inequalities(z)
        return self._measure(problem, z, eq_values, eq_jacobian, ineq_values, ineq_jacobian, eq_duals, ineq_duals)

    def _measure(
        self,
        problem: NlpProblem,
        z: FloatArray,
        eq_values: FloatArray,
        eq_jacobian: FloatArray,
        ineq_values: FloatArray,
        ineq_jacobian: FloatArray,
        eq_duals: FloatArray,
        ineq_duals: FloatArray,
    ) -> Measurement:
        gradient = problem.objective_gradient(z)
        stationarity = gradient - eq_jacobian.T @ eq_duals - ineq_jacobian.T @ ineq_duals
        scale = max(1.0, float(np.abs(gradient).max(initial=0.0)))
        kkt = max(
            float(np.abs(stationarity).max(initial=0.0)) / scale,
            float(np.abs(ineq_duals * ineq_values).max(initial=0.0)),
            float(np.maximum(0.0, -ineq_duals).max(initial=0.0)),
        )
        eq_violation = float(np.abs(eq_values).max(initial=0.0))
        violation = max(eq_violation, float(np.maximum(0.0, -ineq_values).max(initial=0.0)))
        return Measurement(kkt, violation, eq_violation)

    def _converged(self, measurement: Measurement) -> bool:
        return (
            measurement.kkt <= self.settings.kkt_tolerance
            and measurement.violation <= self.settings.feasibility_tolerance
            and measurement.eq_violation <= self.settings.equality_tolerance
        )

    def _line_search(
        self, problem: NlpProblem, z: FloatArray, step: FloatArray, penalty: float, violation: float
    ) -> tuple[float, float, float] | None:
        before = self.merit(problem, z, penalty)
        slope = min(0.0, float(problem.objective_gradient(z) @ step) - penalty * violation)
        alpha = 1.0
        while alpha >= self.settings.min_step:
            after = self.merit(problem, z + alpha * step, penalty)
            if after <= before + self.settings.armijo * alpha * slope:
                return alpha, before, after
            alpha /= 2.0
        return None

    def solve(self, problem: NlpProblem, init: npt.ArrayLike) -> NlpSolution:
        settings = self.settings
        z = np.asarray(init, dtype=float).copy()
        if z.shape != (problem.size,):
            raise ShapeMismatch(f'Initial point must have {problem.size} entries, got {z.shape}.')

        penalty = settings.merit_penalty_floor
        eq_duals: FloatArray | None = None
        ineq_duals: FloatArray | None = None
        merit_history: list[tuple[float, float]] = []
        restored = False
        iterations = 0

        while True:
            eq_values, eq_jacobian = problem.equalities(z)
            ineq_values, ineq_jacobian = problem.inequalities(z)

            if eq_duals is not None and ineq_duals is not None:
                measurement = self._measure(
                    problem, z, eq_values, eq_jacobian, ineq_values, ineq_jacobian, eq_duals, ineq_duals
                )
                logger.debug(
                    f'SQP iteration {iterations}: kkt {measurement.kkt:.2e}, violation {measurement.violation:.2e}, '
                    f'penalty {penalty:.1f}'
                )
                if self._converged(measurement):
                    return self._solution(
                        problem, z, NlpStatus.FEASIBLE, measurement, iterations, eq_duals, ineq_duals, merit_history
                    )
            if iterations >= settings.max_iterations:
                break

            subproblem = QpProblem(
                h=problem.hessian,
                g=problem.objective_gradient(z),
                a_ineq=ineq_jacobian,
                b_ineq=-ineq_values,
                a_eq=eq_jacobian,
                b_eq=-eq_values,
            )
            iterations += 1
            try:
                qp_solution = self.qp.solve(subproblem)
            except QpInfeasible:
                outcome = self._restore(problem, z, iterations, merit_history, restored)
                if isinstance(outcome, NlpSolution):
                    return outcome
                z, restored = outcome, True
                continue
            except QpUnbounded:
                logger.warning('QP subproblem is unbounded; returning the current iterate.')
                break

            eq_duals, ineq_duals = qp_solution.eq_duals, qp_solution.ineq_duals
            largest_dual = float(np.abs(np.concatenate([eq_duals, ineq_duals])).max(initial=0.0))
            penalty = max(penalty, settings.merit_penalty_factor * largest_dual, settings.merit_penalty_floor)

            violation = float(np.abs(eq_values).sum() + np.maximum(0.0, -ineq_values).sum())
            accepted = self._line_search(problem, z, qp_solution.z, penalty, violation)
            if accepted is None:
                logger.debug('SQP line search stalled.')
                break

            alpha, before, after = accepted
            assert after <= before, 'l1 merit increased across an accepted step'
            merit_history.append((before, after))
            z = z + alpha * qp_solution.z

        if eq_duals is None or ineq_duals is None:
            eq_duals = np.zeros(problem.equality_values(z).size)
            ineq_duals = np.zeros(problem.inequality_values(z).size)
        measurement = self.measure(problem, z, eq_duals, ineq_duals)
        status = NlpStatus.FEASIBLE if self._converged(measurement) else NlpStatus.MAX_ITERATIONS
        return self._solution(problem, z, status, measurement, iterations, eq_duals, ineq_duals, merit_history)

    def _restore(
        self,
        problem: NlpProblem,
        z: FloatArray,
        iterations: int,
        merit_history: list[tuple[float, float]],
        restored: bool,
    ) -> FloatArray | NlpSolution:
        """Jump to the least-violation point once; a second failure or a positive minimum is final."""

        if not self.restore or restored:
            return self._infeasible(problem, z, iterations, merit_history)
        relaxed, min_violation = elastic_feasibility(problem, z, self.settings)
        if min_violation > self.settings.feasibility_tolerance:
            logger.debug(f'Elastic phase left a violation of {min_violation:.3e}.')
            return self._infeasible(problem, relaxed, iterations, merit_history, min_violation)
        return relaxed

    def _solution(
        self,
        problem: NlpProblem,
        z: FloatArray,
        status: NlpStatus,
        measurement: Measurement,
        iterations: int,
        eq_duals: FloatArray,
        ineq_duals: FloatArray,
        merit_history: list[tuple[float, float]],
    ) -> NlpSolution:
        return NlpSolution(
            z=z,
            status=status,
            kkt_residual=measurement.kkt,
            constraint_violation=measurement.violation,
            iterations=iterations,
            objective=problem.objective(z),
            eq_duals=eq_duals,
            ineq_duals=ineq_duals,
            merit_history=merit_history,
        )

    def _infeasible(
        self,
        problem: NlpProblem,
        z: FloatArray,
        iterations: int,
        merit_history: list[tuple[float, float]],
        min_violation: float | None = None,
    ) -> NlpSolution:
        eq_values = problem.equality_values(z)
        ineq_values = problem.inequality_values(z)
        violation = max(
            float(np.abs(eq_values).max(initial=0.0)), float(np.maximum(0.0, -ineq_values).max(initial=0.0))
        )
        return NlpSolution(
            z=z,
            status=NlpStatus.INFEASIBLE if min_violation is not None else NlpStatus.MAX_ITERATIONS,
            kkt_residual=float('inf'),
            constraint_violation=violation,
            iterations=iterations,
            objective=problem.objective(z),
            eq_duals=np.zeros(eq_values.size),
            ineq_duals=np.zeros(ineq_values.size),
            merit_history=merit_history,
            min_violation=min_violation,
        )


def elastic_feasibility(
    problem: NlpProblem, init: npt.ArrayLike, settings: SolverSettings | None = None
) -> ElasticResult:
    """Find the point of least total soft-row violation; hard rows and equalities are kept exact.

    Always returns; when even the hard rows cannot be met the reported violation includes them.
    """

    z = np.asarray(init, dtype=float)
    elastic = ElasticNlp(problem, z)
    solution = SqpSolver(settings, restore=False).solve(elastic, elastic.start(z))
    relaxed, _ = elastic.split(solution.z)
    if solution.status is NlpStatus.FEASIBLE:
        return ElasticResult(relaxed, total_violation(problem, relaxed, soft_only=True))
    return ElasticResult(relaxed, total_violation(problem, relaxed))


def least_violation(
    problem: NlpProblem, solution: NlpSolution, settings: SolverSettings | None = None
) -> NlpSolution:
    """``solution`` moved to the elastic-phase point when it is not feasible.

    A result that already came out of the elastic phase is returned as is.
    """

    if solution.feasible or solution.min_violation is not None:
        return solution
    settings = settings or SolverSettings()
    relaxed, min_violation = elastic_feasibility(problem, solution.z, settings)
    eq_values = problem.equality_values(relaxed)
    ineq_values = problem.inequality_values(relaxed)
    violation = max(
        float(np.abs(eq_values).max(initial=0.0)), float(np.maximum(0.0, -ineq_values).max(initial=0.0))
    )
    status = NlpStatus.INFEASIBLE if min_violation > settings.feasibility_tolerance else solution.status
    return replace(
        solution,
        z=relaxed,
        status=status,
        constraint_violation=violation,
        objective=problem.objective(relaxed),
        min_violation=min_violation,
    )


def solve_nlp_sqp(problem: NlpProblem, init: npt.ArrayLike, settings: SolverSettings | None = None) -> NlpSolution:
    return SqpSolver(settings).solve(problem, init)
