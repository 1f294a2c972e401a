# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import itertools
from dataclasses import dataclass

import numpy as np
import pytest

from adaptive_mpc_cbf.arrays import BoolArray
from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.barriers import BarrierKind
from adaptive_mpc_cbf.barriers import BarrierSpec
from adaptive_mpc_cbf.barriers import SafetyEllipseParams
from adaptive_mpc_cbf.barriers import build_hocbf_row
from adaptive_mpc_cbf.barriers import eval_barrier
from adaptive_mpc_cbf.config import SolverSettings
from adaptive_mpc_cbf.config import VehicleParams
from adaptive_mpc_cbf.dynamics import step_rk4
from adaptive_mpc_cbf.geometry import BoundaryCircle
from adaptive_mpc_cbf.qp import QpProblem
from adaptive_mpc_cbf.qp import solve_qp
from adaptive_mpc_cbf.sqp import NlpProblem
from adaptive_mpc_cbf.sqp import NlpStatus
from adaptive_mpc_cbf.sqp import QuadraticNlp
from adaptive_mpc_cbf.sqp import SqpSolver
from adaptive_mpc_cbf.sqp import elastic_feasibility
from adaptive_mpc_cbf.sqp import least_violation
from adaptive_mpc_cbf.sqp import solve_nlp_sqp
from adaptive_mpc_cbf.sqp import total_violation
from tests.fixtures.numerics import central_jacobian

DT = 0.2
GRID_POINTS = 201


def contradictory_program(lower: float = 1.0) -> QuadraticNlp:
    """u >= lower and u <= 0 inside the acceleration bounds [-5, 4]."""

    problem = QpProblem.build(
        h=[[1.0]],
        g=[0.0],
        a_ineq=[[1.0], [-1.0], [1.0], [-1.0]],
        b_ineq=[lower, 0.0, -5.0, -4.0],
    )
    return QuadraticNlp.from_qp(problem, hard=[False, False, True, True])


@dataclass
class OneStepProgram(NlpProblem):
    """Single-step controller over z = (u, phi) with affine and nonlinear safety rows."""

    ego: FloatArray
    other: FloatArray
    reference: FloatArray
    weights: FloatArray
    hocbf_grad: FloatArray
    hocbf_constant: float
    road: BarrierSpec
    ellipse: BarrierSpec
    params: VehicleParams

    @property
    def hessian(self) -> FloatArray:
        return np.diag(self.weights)

    @property
    def linear_cost(self) -> FloatArray:
        return -self.weights * self.reference

    @property
    def hard_rows(self) -> BoolArray:
        return np.zeros(7, dtype=bool)

    def equalities(self, z: FloatArray) -> tuple[FloatArray, FloatArray]:
        return np.zeros(0), np.zeros((0, 2))

    def inequality_values(self, z: FloatArray) -> FloatArray:
        bounds = self.params.bounds
        ego_next = step_rk4(self.ego, z, self.params, DT)
        other_next = step_rk4(self.other, [0.0, 0.0], self.params, DT)
        return np.array(
            [
                z[0] - bounds.u_min,
                bounds.u_max - z[0],
                z[1] - bounds.phi_min,
                bounds.phi_max - z[1],
                self.hocbf_grad @ z + self.hocbf_constant,
                eval_barrier(self.road, ego_next) * self.road.scale,
                eval_barrier(self.ellipse, ego_next, other_next),
            ]
        )

    def inequalities(self, z: FloatArray) -> tuple[FloatArray, FloatArray]:
        return self.inequality_values(z), central_jacobian(self.inequality_values, z)


def one_step_program(rng: np.random.Generator, params: VehicleParams) -> OneStepProgram:
    v = rng.uniform(6.0, 15.0)
    ego = np.array([0.0, 0.0, rng.uniform(-0.1, 0.1), v])
    gap = 1.8 * v * rng.uniform(1.05, 1.6)
    other = np.array([gap, rng.uniform(-0.5, 0.5), 0.0, v * rng.uniform(0.5, 1.0)])
    radius = 50.0
    circle = BoundaryCircle(center=(rng.uniform(0.0, 10.0), radius + rng.uniform(1.0, 3.0)), radius=radius)
    speed_row = build_hocbf_row(BarrierSpec.speed_max(20.0), ego, None, [rng.uniform(0.3, 3.0)], params)
    return OneStepProgram(
        ego=ego,
        other=other,
        reference=np.array([rng.uniform(-3.0, 3.0), rng.uniform(-0.5, 0.5)]),
        weights=np.array([rng.uniform(0.5, 2.0), rng.uniform(5.0, 20.0)]),
        hocbf_grad=speed_row.grad_u,
        hocbf_constant=speed_row.constant,
        road=BarrierSpec.road(BarrierKind.ROAD_LEFT, circle),
        ellipse=BarrierSpec.rear_end_ellipse(SafetyEllipseParams(a=1.8, b=0.6)),
        params=params,
    )


def grid_minimum(program: OneStepProgram) -> tuple[float, FloatArray] | None:
    bounds = program.params.bounds
    best = None
    u_values = np.linspace(bounds.u_min, bounds.u_max, GRID_POINTS)
    phi_values = np.linspace(bounds.phi_min, bounds.phi_max, GRID_POINTS)
    for u, phi in itertools.product(u_values, phi_values):
        z = np.array([u, phi])
        if program.inequality_values(z).min() < 0.0:
            continue
        value = program.objective(z)
        if best is None or value < best[0]:
            best = (value, z)
    return best


def grid_cell(params: VehicleParams) -> FloatArray:
    bounds = params.bounds
    return np.array([bounds.u_max - bounds.u_min, bounds.phi_max - bounds.phi_min]) / (GRID_POINTS - 1)


def check_against_grid(seed: int, params: VehicleParams) -> None:
    program = one_step_program(np.random.default_rng(seed), params)
    oracle = grid_minimum(program)

    solution = solve_nlp_sqp(program, np.zeros(2))

    if oracle is None:
        assert not solution.feasible or solution.constraint_violation <= 1e-6
        return
    best_value, best_z = oracle
    assert solution.status is NlpStatus.FEASIBLE
    assert solution.constraint_violation <= 1e-6
    assert best_value - 1e-2 <= solution.objective <= best_value + 1e-6
    assert np.all(np.abs(solution.z - best_z) <= grid_cell(params) + 1e-9)


def test_convex_program_converges_in_one_iteration() -> None:
    """Test that a program with affine rows matches the QP solution after a single SQP iteration."""

    problem = QpProblem.build(h=2 * np.eye(2), g=[0.0, 0.0], a_ineq=[[1.0, 1.0]], b_ineq=[2.0])

    solution = solve_nlp_sqp(QuadraticNlp.from_qp(problem), np.array([3.0, 3.0]))

    assert solution.status is NlpStatus.FEASIBLE
    assert solution.iterations == 1
    assert solution.z == pytest.approx(solve_qp(problem).z)


def test_contradictory_rows_are_reported_infeasible() -> None:
    """Test that u >= 1 together with u <= 0 ends with an infeasible status and unit minimum violation."""

    solution = solve_nlp_sqp(contradictory_program(), np.zeros(1))

    assert solution.status is NlpStatus.INFEASIBLE
    assert not solution.feasible
    assert solution.min_violation == pytest.approx(1.0, abs=1e-6)


def test_least_violation_moves_a_stalled_solve_to_the_elastic_point() -> None:
    """Test that a solve stopped without restoration is moved to the point of least l1 violation."""

    program = contradictory_program(lower=2.0)
    stalled = SqpSolver(restore=False).solve(program, np.array([4.0]))
    assert stalled.status is NlpStatus.MAX_ITERATIONS
    assert total_violation(program, stalled.z) == pytest.approx(4.0)

    relaxed = least_violation(program, stalled)

    assert relaxed.status is NlpStatus.INFEASIBLE
    assert relaxed.min_violation == pytest.approx(2.0, abs=1e-6)
    assert total_violation(program, relaxed.z) == pytest.approx(2.0, abs=1e-6)
    assert -1e-6 <= relaxed.z[0] <= 2.0 + 1e-6


def test_least_violation_keeps_feasible_and_already_relaxed_solves() -> None:
    """Test that feasible results and results of the solver's own elastic phase are returned unchanged."""

    feasible = solve_nlp_sqp(QuadraticNlp.from_qp(QpProblem.build(h=np.eye(1), g=[1.0])), np.zeros(1))
    relaxed = solve_nlp_sqp(contradictory_program(), np.zeros(1))

    assert least_violation(contradictory_program(), feasible) is feasible
    assert least_violation(contradictory_program(), relaxed) is relaxed


def test_elastic_phase_on_feasible_program() -> None:
    """Test that a feasible program has a vanishing minimum violation."""

    problem = QpProblem.build(h=np.eye(1), g=[0.0], a_ineq=[[1.0], [-1.0]], b_ineq=[-1.0, -2.0])

    _, min_violation = elastic_feasibility(QuadraticNlp.from_qp(problem), np.array([5.0]))

    assert min_violation <= 1e-8


def test_elastic_phase_on_contradictory_rows() -> None:
    """Test that the least-violation point of u >= 1 and u <= 0 lies between the two rows."""

    relaxed, min_violation = elastic_feasibility(contradictory_program(), np.zeros(1))

    assert min_violation == pytest.approx(1.0, abs=1e-6)
    assert -1e-6 <= relaxed[0] <= 1.0 + 1e-6


def test_elastic_phase_keeps_hard_rows() -> None:
    """Test that relaxing soft rows never moves the point outside the hard acceleration bounds."""

    relaxed, min_violation = elastic_feasibility(contradictory_program(lower=7.0), np.zeros(1))

    assert min_violation == pytest.approx(7.0, abs=1e-6)
    assert relaxed[0] <= 4.0 + 1e-8


def test_minimum_violation_grows_with_the_gap() -> None:
    """Test that widening the gap between contradictory rows never lowers the minimum violation."""

    violations = [elastic_feasibility(contradictory_program(lower), np.zeros(1))[1] for lower in (0.5, 1.0, 2.0, 3.5)]

    assert violations == pytest.approx([0.5, 1.0, 2.0, 3.5], abs=1e-6)
    assert violations == sorted(violations)


def test_merit_never_increases(vehicle_params: VehicleParams) -> None:
    """Test that every accepted SQP step lowers or keeps the l1 merit value."""

    rng = np.random.default_rng(11)
    for _ in range(5):
        program = one_step_program(rng, vehicle_params)

        solution = solve_nlp_sqp(program, np.array([vehicle_params.bounds.u_max, 0.5]))

        assert solution.merit_history
        assert all(after <= before for before, after in solution.merit_history)


def test_iteration_limit_is_reported(vehicle_params: VehicleParams) -> None:
    """Test that stopping on the iteration cap is not reported as a converged solve."""

    program = one_step_program(np.random.default_rng(3), vehicle_params)

    solution = solve_nlp_sqp(program, np.array([4.0, 0.7]), SolverSettings(max_iterations=1, kkt_tolerance=1e-14))

    assert solution.status is NlpStatus.MAX_ITERATIONS
    assert solution.iterations == 1


@pytest.mark.parametrize('seed', [1, 2])
def test_one_step_program_matches_grid_search(seed: int, vehicle_params: VehicleParams) -> None:
    """Test that SQP lands within one cell and 1e-2 of the best point on a 201 x 201 grid of feasible controls."""

    check_against_grid(seed, vehicle_params)


@pytest.mark.slow
def test_one_step_program_matches_grid_search_on_many_instances(vehicle_params: VehicleParams) -> None:
    """Test that SQP agrees with the grid search on 100 random one-step programs."""

    for seed in range(100, 200):
        check_against_grid(seed, vehicle_params)
