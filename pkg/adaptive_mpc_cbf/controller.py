# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Parameterized MPC-CBF controller for one CAV.

The horizon program is transcribed by multiple shooting. Decision vector layout:
``[x_0 .. x_N | u_0 .. u_{N-1} | e_0 .. e_{N-1}]`` with states of size 4, controls of size 2 and one slack per
CLF (speed tracking, lane keeping) at every stage.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass
from typing import NamedTuple
from typing import Self

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import BoolArray
from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.barriers import TWO_VEHICLE_KINDS
from adaptive_mpc_cbf.barriers import BarrierKind
from adaptive_mpc_cbf.barriers import BarrierSpec
from adaptive_mpc_cbf.barriers import ClfSpec
from adaptive_mpc_cbf.barriers import HocbfRow
from adaptive_mpc_cbf.barriers import MergingParams
from adaptive_mpc_cbf.barriers import SafetyEllipseParams
from adaptive_mpc_cbf.barriers import build_clf_row
from adaptive_mpc_cbf.barriers import build_hocbf_row
from adaptive_mpc_cbf.barriers import eval_barrier
from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.dynamics import CONTROL_SIZE
from adaptive_mpc_cbf.dynamics import STATE_SIZE
from adaptive_mpc_cbf.dynamics import ControlInput
from adaptive_mpc_cbf.dynamics import VehicleState
from adaptive_mpc_cbf.dynamics import drift
from adaptive_mpc_cbf.dynamics import jacobians
from adaptive_mpc_cbf.dynamics import rollout
from adaptive_mpc_cbf.dynamics import step_rk4
from adaptive_mpc_cbf.geometry import Lane
from adaptive_mpc_cbf.geometry import MergeGeometry
from adaptive_mpc_cbf.sqp import NlpProblem
from adaptive_mpc_cbf.sqp import NlpSolution
from adaptive_mpc_cbf.sqp import NlpStatus
from adaptive_mpc_cbf.sqp import SqpSolver
from adaptive_mpc_cbf.sqp import least_violation
from adaptive_mpc_cbf.theta import ControllerTheta

logger = logging.getLogger(__name__)

CLF_COUNT = 2


@dataclass(frozen=True)
class NeighborView:
    i_p: VehicleState | None = None
    i_c: VehicleState | None = None
    i_p_id: int | None = None
    i_c_id: int | None = None


@dataclass(frozen=True)
class Layout:
    horizon: int

    @property
    def state_count(self) -> int:
        return STATE_SIZE * (self.horizon + 1)

    @property
    def control_count(self) -> int:
        return CONTROL_SIZE * self.horizon

    @property
    def size(self) -> int:
        return self.state_count + self.control_count + CLF_COUNT * self.horizon

    def state(self, h: int) -> slice:
        return slice(STATE_SIZE * h, STATE_SIZE * (h + 1))

    def control(self, h: int) -> slice:
        start = self.state_count + CONTROL_SIZE * h
        return slice(start, start + CONTROL_SIZE)

    def slack(self, h: int) -> slice:
        start = self.state_count + self.control_count + CLF_COUNT * h
        return slice(start, start + CLF_COUNT)

    def split(self, z: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        states = z[: self.state_count].reshape(self.horizon + 1, STATE_SIZE)
        controls = z[self.state_count : self.state_count + self.control_count].reshape(self.horizon, CONTROL_SIZE)
        slacks = z[self.state_count + self.control_count :].reshape(self.horizon, CLF_COUNT)
        return states, controls, slacks

    def pack(self, states: FloatArray, controls: FloatArray, slacks: FloatArray) -> FloatArray:
        return np.concatenate([states.ravel(), controls.ravel(), slacks.ravel()])


@dataclass(frozen=True)
class HorizonSolution:
    controls: FloatArray
    states: FloatArray
    slacks: FloatArray
    status: NlpStatus
    objective: float
    iterations: int

    @property
    def horizon(self) -> int:
        return int(self.controls.shape[0])

    @property
    def feasible(self) -> bool:
        return self.status is NlpStatus.FEASIBLE

    def first_control(self) -> ControlInput:
        return ControlInput.from_array(self.controls[0])


class ControlResult(NamedTuple):
    control: ControlInput
    solution: HorizonSolution
    feasible: bool


@dataclass(frozen=True)
class BarrierTerm:
    spec: BarrierSpec
    theta: tuple[float, ...]
    neighbour: FloatArray | None = None


@dataclass(frozen=True)
class LaneBarriers:
    """The six barrier families as seen by a CAV driving on one lane."""

    ellipse: BarrierSpec
    merging: BarrierSpec
    road_left: BarrierSpec
    road_right: BarrierSpec
    speed_max: BarrierSpec
    speed_min: BarrierSpec

    @classmethod
    def build(cls, config: AppConfig, geometry: MergeGeometry, lane: Lane) -> Self:
        scenario = config.scenario
        bounds = config.vehicle.bounds
        route = geometry.route(lane)
        left, right = geometry.boundaries(lane)
        ellipse = SafetyEllipseParams(
            scenario.ellipse_a, scenario.ellipse_b, scenario.ellipse_v_floor, frame_heading=route.heading
        )
        merging = MergingParams(scenario.varphi, scenario.delta, route, geometry.route(lane.other))
        return cls(
            ellipse=BarrierSpec.rear_end_ellipse(ellipse),
            merging=BarrierSpec.safe_merging(merging),
            road_left=BarrierSpec.road(BarrierKind.ROAD_LEFT, left),
            road_right=BarrierSpec.road(BarrierKind.ROAD_RIGHT, right),
            speed_max=BarrierSpec.speed_max(bounds.v_max),
            speed_min=BarrierSpec.speed_min(bounds.v_min),
        )

    def evaluate(
        self, ego: npt.ArrayLike, i_p: npt.ArrayLike | None = None, i_c: npt.ArrayLike | None = None
    ) -> dict[BarrierKind, float]:
        """Scaled barrier values; two-vehicle barriers appear only when their counterpart is given."""

        state = np.asarray(ego, dtype=float)
        values = {
            spec.kind: spec.scale * eval_barrier(spec, state)
            for spec in (self.road_left, self.road_right, self.speed_max, self.speed_min)
        }
        if i_p is not None:
            values[BarrierKind.REAR_END_ELLIPSE] = eval_barrier(self.ellipse, _physical(state), i_p)
        if i_c is not None:
            values[BarrierKind.SAFE_MERGING] = eval_barrier(self.merging, _physical(state), i_c)
        return values


def predict_constant_velocity(state: npt.ArrayLike, horizon: int, dt: float) -> FloatArray:
    """Zero-input prediction of a neighbour over the stages 0..horizon-1."""

    start = np.asarray(state, dtype=float)
    rate = drift(start)
    return np.array([start + h * dt * np.concatenate([rate[:2], [0.0, 0.0]]) for h in range(horizon)])


def _physical(state: FloatArray) -> FloatArray:
    """Predicted speeds can dip below zero between SQP iterates; speed-scaled barriers see the floor."""

    if state[3] >= 0.0:
        return state
    clipped = state.copy()
    clipped[3] = 0.0
    return clipped


def _central_gradient(function: Callable[[FloatArray], float], x: FloatArray, step: float) -> FloatArray:
    gradient = np.empty(x.size)
    for i in range(x.size):
        offset = np.zeros(x.size)
        offset[i] = step
        gradient[i] = (function(x + offset) - function(x - offset)) / (2.0 * step)
    return gradient


def warm_start_shift(prev: HorizonSolution) -> FloatArray:
    """Controls shifted left by one stage with the last control repeated."""

    if prev.horizon < 2:
        raise ValueError('Warm start needs a previous horizon of at least two stages.')
    return np.vstack([prev.controls[1:], prev.controls[-1:]])


class MpcProblem(NlpProblem):
    def __init__(
        self,
        ego: npt.ArrayLike,
        lane: Lane,
        neighbors: NeighborView,
        theta: ControllerTheta,
        geometry: MergeGeometry,
        config: AppConfig,
    ) -> None:
        scenario = config.scenario
        self.params = config.vehicle
        self.horizon = scenario.horizon
        self.dt = scenario.dt
        self.fd_step = config.solver.finite_difference_step
        self.layout = Layout(self.horizon)
        self.ego = np.asarray(ego, dtype=float)
        self.lane = lane
        self.route = geometry.route(lane)
        self.route.check_inside(self.ego[0], self.ego[1])
        self.theta = theta

        self.lane_barriers = LaneBarriers.build(config, geometry, lane)
        self.barriers = self._barrier_terms(neighbors)
        self.state_barriers = [term.spec for term in self.barriers if term.spec.kind not in TWO_VEHICLE_KINDS]
        self.clfs = (
            (ClfSpec.speed_tracking(scenario.v_des, slack_index=0), theta.clf_rate[0]),
            (ClfSpec.lane_keeping(self.route, slack_index=1), theta.clf_rate[1]),
        )
        self._hessian, self._linear_cost, self._constant_cost = self._objective(scenario.v_des)
        self._hard_rows = self._row_mask()

    def _barrier_terms(self, neighbors: NeighborView) -> list[BarrierTerm]:
        barriers = self.lane_barriers
        slopes = self.theta.class_k
        terms = []
        if neighbors.i_p is not None:
            prediction = predict_constant_velocity(neighbors.i_p, self.horizon, self.dt)
            terms.append(BarrierTerm(barriers.ellipse, (slopes.ellipse,), prediction))
        if neighbors.i_c is not None:
            prediction = predict_constant_velocity(neighbors.i_c, self.horizon, self.dt)
            terms.append(BarrierTerm(barriers.merging, (slopes.merging,), prediction))
        terms.extend(
            [
                BarrierTerm(barriers.road_left, slopes.road_left),
                BarrierTerm(barriers.road_right, slopes.road_right),
                BarrierTerm(barriers.speed_max, (slopes.speed_max,)),
                BarrierTerm(barriers.speed_min, (slopes.speed_min,)),
            ]
        )
        return terms

    def _objective(self, v_des: float) -> tuple[FloatArray, FloatArray, float]:
        layout = self.layout
        w_speed, w_lane, w_accel, w_steer = self.theta.objective
        hessian = np.zeros((layout.size, layout.size))
        linear = np.zeros(layout.size)
        constant = 0.0

        normal = self.route.normal
        offset = float(normal @ np.asarray(self.route.start))
        for h in range(self.horizon + 1):
            block = layout.state(h)
            v_index = block.start + 3
            position = slice(block.start, block.start + 2)
            hessian[v_index, v_index] += 2.0 * w_speed
            linear[v_index] -= 2.0 * w_speed * v_des
            hessian[position, position] += 2.0 * w_lane * np.outer(normal, normal)
            linear[position] -= 2.0 * w_lane * offset * normal
            constant += w_speed * v_des**2 + w_lane * offset**2

        for h in range(self.horizon):
            u_index, phi_index = layout.control(h).start, layout.control(h).start + 1
            hessian[u_index, u_index] += 2.0 * w_accel
            hessian[phi_index, phi_index] += 2.0 * w_steer
            slack = layout.slack(h)
            hessian[slack, slack] += 2.0 * np.diag(self.theta.slack)
        return hessian, linear, constant

    @property
    def hessian(self) -> FloatArray:
        return self._hessian

    @property
    def linear_cost(self) -> FloatArray:
        return self._linear_cost

    @property
    def constant_cost(self) -> float:
        return self._constant_cost

    @property
    def hard_rows(self) -> BoolArray:
        return self._hard_rows

    @property
    def row_counts(self) -> dict[str, int]:
        n = self.horizon
        return {
            'control_bounds': 4 * n,
            'hocbf': len(self.barriers) * n,
            'clf': CLF_COUNT * n,
            'state': len(self.state_barriers) * n,
        }

    def _row_mask(self) -> BoolArray:
        counts = self.row_counts
        return np.concatenate(
            [
                np.ones(counts['control_bounds'], dtype=bool),
                np.zeros(counts['hocbf'], dtype=bool),
                np.ones(counts['clf'], dtype=bool),
                np.zeros(counts['state'], dtype=bool),
            ]
        )

    def equalities(self, z: FloatArray) -> tuple[FloatArray, FloatArray]:
        layout = self.layout
        states, controls, _ = layout.split(z)
        values = np.empty(STATE_SIZE * (self.horizon + 1))
        jacobian = np.zeros((values.size, layout.size))

        values[:STATE_SIZE] = states[0] - self.ego
        jacobian[:STATE_SIZE, layout.state(0)] = np.eye(STATE_SIZE)
        for h in range(self.horizon):
            rows = slice(STATE_SIZE * (h + 1), STATE_SIZE * (h + 2))
            values[rows] = states[h + 1] - step_rk4(states[h], controls[h], self.params, self.dt)
            a, b = jacobians(states[h], controls[h], self.params, self.dt)
            jacobian[rows, layout.state(h + 1)] = np.eye(STATE_SIZE)
            jacobian[rows, layout.state(h)] = -a
            jacobian[rows, layout.control(h)] = -b
        return values, jacobian

    def equality_values(self, z: FloatArray) -> FloatArray:
        states, controls, _ = self.layout.split(z)
        predicted = [step_rk4(states[h], controls[h], self.params, self.dt) for h in range(self.horizon)]
        return np.concatenate([states[0] - self.ego, (states[1:] - np.array(predicted)).ravel()])

    def _hocbf_row(self, term: BarrierTerm, h: int, state: FloatArray) -> HocbfRow:
        other = None if term.neighbour is None else term.neighbour[h]
        ego = _physical(state) if term.spec.needs_other else state
        return build_hocbf_row(term.spec, ego, other, term.theta, self.params)

    def _hocbf_value(self, term: BarrierTerm, h: int, state: FloatArray, control: FloatArray) -> float:
        return term.spec.scale * self._hocbf_row(term, h, state).residual(control)

    def _clf_value(self, clf: ClfSpec, rate: float, state: FloatArray, control: FloatArray) -> float:
        return build_clf_row(clf, state, rate, self.params).residual(control)

    def _control_bound_rows(self, controls: FloatArray) -> tuple[FloatArray, FloatArray]:
        bounds = self.params.bounds
        layout = self.layout
        values = np.empty(4 * self.horizon)
        jacobian = np.zeros((values.size, layout.size))
        for h in range(self.horizon):
            u, phi = controls[h]
            u_index, phi_index = layout.control(h).start, layout.control(h).start + 1
            rows = 4 * h
            values[rows : rows + 4] = [u - bounds.u_min, bounds.u_max - u, phi - bounds.phi_min, bounds.phi_max - phi]
            jacobian[rows, u_index] = 1.0
            jacobian[rows + 1, u_index] = -1.0
            jacobian[rows + 2, phi_index] = 1.0
            jacobian[rows + 3, phi_index] = -1.0
        return values, jacobian

    def _hocbf_rows(
        self, states: FloatArray, controls: FloatArray, with_jacobian: bool
    ) -> tuple[FloatArray, FloatArray]:
        layout = self.layout
        values = np.empty(len(self.barriers) * self.horizon)
        jacobian = np.zeros((values.size, layout.size))
        row = 0
        for h in range(self.horizon):
            state, control = states[h], controls[h]
            for term in self.barriers:
                values[row] = self._hocbf_value(term, h, state, control)
                if with_jacobian:
                    jacobian[row, layout.state(h)] = _central_gradient(
                        lambda x, term=term, h=h, control=control: self._hocbf_value(term, h, x, control),
                        state,
                        self.fd_step,
                    )
                    jacobian[row, layout.control(h)] = term.spec.scale * self._hocbf_row(term, h, state).grad_u
                row += 1
        return values, jacobian

    def _clf_rows(
        self, states: FloatArray, controls: FloatArray, slacks: FloatArray, with_jacobian: bool
    ) -> tuple[FloatArray, FloatArray]:
        layout = self.layout
        values = np.empty(CLF_COUNT * self.horizon)
        jacobian = np.zeros((values.size, layout.size))
        row = 0
        for h in range(self.horizon):
            state, control = states[h], controls[h]
            for clf, rate in self.clfs:
                values[row] = slacks[h, clf.slack_index] - self._clf_value(clf, rate, state, control)
                if with_jacobian:
                    jacobian[row, layout.slack(h).start + clf.slack_index] = 1.0
                    jacobian[row, layout.state(h)] = -_central_gradient(
                        lambda x, clf=clf, rate=rate, control=control: self._clf_value(clf, rate, x, control),
                        state,
                        self.fd_step,
                    )
                    jacobian[row, layout.control(h)] = -build_clf_row(clf, state, rate, self.params).grad_u
                row += 1
        return values, jacobian

    def _state_rows(self, states: FloatArray, with_jacobian: bool) -> tuple[FloatArray, FloatArray]:
        layout = self.layout
        values = np.empty(len(self.state_barriers) * self.horizon)
        jacobian = np.zeros((values.size, layout.size))
        row = 0
        for h in range(1, self.horizon + 1):
            state = states[h]
            for spec in self.state_barriers:
                values[row] = spec.scale * eval_barrier(spec, state)
                if with_jacobian:
                    jacobian[row, layout.state(h)] = _central_gradient(
                        lambda x, spec=spec: spec.scale * eval_barrier(spec, x), state, self.fd_step
                    )
                row += 1
        return values, jacobian

    def _inequalities(self, z: FloatArray, with_jacobian: bool) -> tuple[FloatArray, FloatArray]:
        states, controls, slacks = self.layout.split(z)
        blocks = [
            self._control_bound_rows(controls),
            self._hocbf_rows(states, controls, with_jacobian),
            self._clf_rows(states, controls, slacks, with_jacobian),
            self._state_rows(states, with_jacobian),
        ]
        return np.concatenate([values for values, _ in blocks]), np.vstack([jacobian for _, jacobian in blocks])

    def inequalities(self, z: FloatArray) -> tuple[FloatArray, FloatArray]:
        return self._inequalities(z, with_jacobian=True)

    def inequality_values(self, z: FloatArray) -> FloatArray:
        return self._inequalities(z, with_jacobian=False)[0]

    def hocbf_residuals(self, state: npt.ArrayLike, control: npt.ArrayLike) -> dict[BarrierKind, float]:
        """Stage-0 HOCBF rows evaluated at a given state and control."""

        x = np.asarray(state, dtype=float)
        w = np.asarray(control, dtype=float)
        return {term.spec.kind: self._hocbf_value(term, 0, x, w) for term in self.barriers}

    def initial_guess(self, controls: npt.ArrayLike) -> FloatArray:
        """Roll the controls out from the measured state and size the slacks to the CLF rows."""

        inputs = np.asarray(controls, dtype=float).reshape(self.horizon, CONTROL_SIZE)
        states = rollout(self.ego, inputs, self.params, self.dt)
        slacks = np.zeros((self.horizon, CLF_COUNT))
        for h in range(self.horizon):
            for clf, rate in self.clfs:
                slacks[h, clf.slack_index] = max(0.0, self._clf_value(clf, rate, states[h], inputs[h]))
        return self.layout.pack(states, inputs, slacks)

    def horizon_solution(self, solution: NlpSolution) -> HorizonSolution:
        states, controls, slacks = self.layout.split(solution.z)
        return HorizonSolution(
            controls=controls.copy(),
            states=states.copy(),
            slacks=slacks.copy(),
            status=solution.status,
            objective=solution.objective,
            iterations=solution.iterations,
        )


def assemble_problem(
    ego: npt.ArrayLike,
    lane: Lane,
    neighbors: NeighborView,
    theta: ControllerTheta,
    geometry: MergeGeometry,
    config: AppConfig,
) -> MpcProblem:
    return MpcProblem(ego, lane, neighbors, theta, geometry, config)


class MpcController:
    """Receding-horizon controller of one CAV; owns its SQP workspace."""

    def __init__(self, config: AppConfig, geometry: MergeGeometry, lane: Lane) -> None:
        self.config = config
        self.geometry = geometry
        self.lane = lane
        self.solver = SqpSolver(config.solver)

    def assemble(self, ego: npt.ArrayLike, neighbors: NeighborView, theta: ControllerTheta) -> MpcProblem:
        return MpcProblem(ego, self.lane, neighbors, theta, self.geometry, self.config)

    def compute_control(
        self,
        ego: npt.ArrayLike,
        neighbors: NeighborView,
        theta: ControllerTheta,
        prev: HorizonSolution | None = None,
    ) -> ControlResult:
        problem = self.assemble(ego, neighbors, theta)
        if prev is not None and prev.horizon == problem.horizon:
            controls = warm_start_shift(prev)
        else:
            controls = np.zeros((problem.horizon, CONTROL_SIZE))

        solution = self.solver.solve(problem, problem.initial_guess(controls))
        if not solution.feasible:
            solution = least_violation(problem, solution, self.config.solver)
            logger.warning(
                f'MPC-CBF program is {solution.status} on lane {self.lane} '
                f'(minimum violation {solution.min_violation:.2e}); applying the clamped elastic-phase control.'
            )
        horizon = problem.horizon_solution(solution)
        control = horizon.first_control().clamped(self.config.vehicle)
        return ControlResult(control, horizon, solution.feasible)
