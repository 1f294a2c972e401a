# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Merging benchmark: Poisson arrivals on two roads, conflict assignment, lockstep control and integration."""

import logging
import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from typing import NamedTuple
from typing import Protocol

import numpy as np
import pandas as pd
from tqdm import tqdm

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.barriers import BarrierKind
from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.config import ScenarioConfig
from adaptive_mpc_cbf.config import SequencingPolicy
from adaptive_mpc_cbf.controller import ControlResult
from adaptive_mpc_cbf.controller import HorizonSolution
from adaptive_mpc_cbf.controller import LaneBarriers
from adaptive_mpc_cbf.controller import MpcController
from adaptive_mpc_cbf.controller import NeighborView
from adaptive_mpc_cbf.dynamics import ControlInput
from adaptive_mpc_cbf.dynamics import VehicleState
from adaptive_mpc_cbf.dynamics import step_rk4
from adaptive_mpc_cbf.geometry import Lane
from adaptive_mpc_cbf.geometry import MergeGeometry
from adaptive_mpc_cbf.metrics import CAV_COLUMNS
from adaptive_mpc_cbf.metrics import LOG_COLUMNS
from adaptive_mpc_cbf.metrics import MetricsReport
from adaptive_mpc_cbf.metrics import RolloutLog
from adaptive_mpc_cbf.metrics import compute_metrics
from adaptive_mpc_cbf.metrics import fuel_rate
from adaptive_mpc_cbf.rng import stream
from adaptive_mpc_cbf.theta import ControllerTheta

logger = logging.getLogger(__name__)

SAFETY_TOLERANCE = 1e-6
LOGGED_BARRIERS = {
    'b_ellipse': BarrierKind.REAR_END_ELLIPSE,
    'b_merge': BarrierKind.SAFE_MERGING,
    'b_road_l': BarrierKind.ROAD_LEFT,
    'b_road_r': BarrierKind.ROAD_RIGHT,
}


class Arrival(NamedTuple):
    lane: Lane
    time: float
    speed: float


class ArrivalProcess:
    """Independent Poisson processes per origin; initial speeds are uniform over the configured range."""

    def __init__(self, scenario: ScenarioConfig, seed: int) -> None:
        self.rate = scenario.arrival_rate
        self.speed_range = scenario.initial_speed_range
        self._gaps = {lane: stream(seed, f'arrivals:{lane}') for lane in Lane}
        self._speeds = stream(seed, 'initial-speeds')
        self._next = {lane: self._gap(lane) for lane in Lane}

    def _gap(self, lane: Lane) -> float:
        if self.rate <= 0:
            return math.inf
        return float(self._gaps[lane].exponential(1.0 / self.rate))

    def due(self, t: float) -> list[Arrival]:
        """All arrivals with time <= t not reported before, in time order (main road first on ties)."""

        pending = []
        for lane in Lane:
            while self._next[lane] <= t:
                pending.append((self._next[lane], lane))
                self._next[lane] += self._gap(lane)
        pending.sort(key=lambda item: (item[0], list(Lane).index(item[1])))
        low, high = self.speed_range
        return [Arrival(lane, time, float(self._speeds.uniform(low, high))) for time, lane in pending]


class AgentSnapshot(NamedTuple):
    cav_id: int
    lane: Lane
    state: VehicleState
    progress: float


@dataclass
class CavAgent:
    cav_id: int
    lane: Lane
    state: FloatArray
    arrival_time: float
    controller: MpcController
    control: ControlInput = ControlInput(0.0, 0.0)
    last_solution: HorizonSolution | None = None
    infeasible_count: int = 0

    def progress(self, geometry: MergeGeometry) -> float:
        return geometry.route(self.lane).progress(self.state[0], self.state[1])

    def snapshot(self, geometry: MergeGeometry) -> AgentSnapshot:
        return AgentSnapshot(self.cav_id, self.lane, VehicleState.from_array(self.state), self.progress(geometry))


class ThetaSource(Protocol):
    def theta_for(self, agent: CavAgent, view: NeighborView) -> ControllerTheta: ...


@dataclass(frozen=True)
class FixedTheta:
    theta: ControllerTheta

    def theta_for(self, agent: CavAgent, view: NeighborView) -> ControllerTheta:
        return self.theta


def assign_conflicts(agents: Sequence[AgentSnapshot], policy: SequencingPolicy) -> dict[int, NeighborView]:
    """``i_p`` is the nearest same-lane CAV ahead; ``i_c`` is the CAV on the other road that merges right before.

    FIFO orders crossings by arrival (CAV ids grow with arrival): ``i_c`` is the latest earlier arrival on the
    other road, even when the immediate predecessor in the crossing order is on the ego's own road. That
    predecessor is constrained as ``i_p`` by the rear-end barrier. SDF orders crossings by distance to the
    merging point: ``i_c`` is the nearest other-road CAV ahead of the ego in progress, lowest id first on ties.
    """

    views = {}
    for agent in agents:
        ahead = [other for other in agents if other.lane == agent.lane and other.progress > agent.progress]
        i_p = min(ahead, key=lambda other: other.progress) if ahead else None

        crossing = [other for other in agents if other.lane != agent.lane]
        if policy is SequencingPolicy.FIFO:
            earlier = [other for other in crossing if other.cav_id < agent.cav_id]
            i_c = max(earlier, key=lambda other: other.cav_id) if earlier else None
        else:
            closer = [other for other in crossing if other.progress > agent.progress]
            i_c = min(closer, key=lambda other: (other.progress, other.cav_id)) if closer else None

        views[agent.cav_id] = NeighborView(
            i_p=None if i_p is None else i_p.state,
            i_c=None if i_c is None else i_c.state,
            i_p_id=None if i_p is None else i_p.cav_id,
            i_c_id=None if i_c is None else i_c.cav_id,
        )
    return views


@dataclass
class MergeWorld:
    config: AppConfig
    theta_source: ThetaSource
    seed: int
    time: float = 0.0
    step: int = 0
    agents: list[CavAgent] = field(default_factory=list)
    spawned: int = 0
    spawning: bool = True

    def __post_init__(self) -> None:
        self.geometry = MergeGeometry.from_scenario(self.config.scenario)
        self.barriers = {lane: LaneBarriers.build(self.config, self.geometry, lane) for lane in Lane}
        self.arrivals = ArrivalProcess(self.config.scenario, self.seed)
        self.pending: dict[Lane, deque[Arrival]] = {lane: deque() for lane in Lane}
        self._deferred: set[Arrival] = set()
        self._rows: list[dict[str, float | int | str]] = []
        self._cavs: dict[int, dict[str, float | int | str | None]] = {}
        self.safety_violations: list[dict[str, float | int | str]] = []
        self.last_results: dict[int, ControlResult] = {}

    @property
    def scenario(self) -> ScenarioConfig:
        return self.config.scenario

    def index_of(self, agent: CavAgent) -> int:
        """Position in F(t); indices shift down by one whenever an earlier CAV leaves."""

        return self.agents.index(agent) + 1

    def snapshots(self) -> list[AgentSnapshot]:
        return [agent.snapshot(self.geometry) for agent in self.agents]

    def entry_state(self, lane: Lane, speed: float, progress: float = 0.0) -> FloatArray:
        route = self.geometry.route(lane)
        x, y = route.position(progress)
        return np.array([x, y, route.heading, speed])

    def place_agent(self, lane: Lane, state: FloatArray, arrival_time: float | None = None) -> CavAgent:
        agent = CavAgent(
            cav_id=self.spawned,
            lane=lane,
            state=np.asarray(state, dtype=float),
            arrival_time=self.time if arrival_time is None else arrival_time,
            controller=MpcController(self.config, self.geometry, lane),
        )
        self.spawned += 1
        self.agents.append(agent)
        self._cavs[agent.cav_id] = {
            'cav_id': agent.cav_id,
            'lane': str(lane),
            'arrival_time': agent.arrival_time,
            'exit_time': None,
        }
        logger.info(f'CAV {agent.cav_id} entered the {lane} road at t={self.time:.2f}s with v={state[3]:.2f}m/s.')
        return agent

    def _blocked(self, lane: Lane, state: FloatArray) -> bool:
        """A newcomer waits while it would start with a negative ellipse or merging barrier."""

        candidate = AgentSnapshot(
            self.spawned, lane, VehicleState.from_array(state), self.geometry.route(lane).progress(state[0], state[1])
        )
        view = assign_conflicts([*self.snapshots(), candidate], self.scenario.sequencing)[candidate.cav_id]
        values = self.barriers[lane].evaluate(state, view.i_p, view.i_c)
        return any(
            values.get(kind, 0.0) < 0.0 for kind in (BarrierKind.REAR_END_ELLIPSE, BarrierKind.SAFE_MERGING)
        )

    def spawn_arrivals(self) -> list[CavAgent]:
        for arrival in self.arrivals.due(self.time):
            self.pending[arrival.lane].append(arrival)

        spawned = []
        for lane in Lane:
            queue = self.pending[lane]
            while queue and self.spawned < self.scenario.max_cavs:
                arrival = queue[0]
                state = self.entry_state(lane, arrival.speed)
                if self._blocked(lane, state):
                    if arrival not in self._deferred:
                        logger.warning(f'Spawn on the {lane} road at t={self.time:.2f}s deferred by a blocking CAV.')
                        self._deferred.add(arrival)
                    break
                queue.popleft()
                spawned.append(self.place_agent(lane, state))

        if self.spawned >= self.scenario.max_cavs:
            self.spawning = False
            for queue in self.pending.values():
                queue.clear()
        return spawned

    def _control_all(self, views: dict[int, NeighborView]) -> dict[int, ControlResult]:
        results = {}
        for agent in self.agents:
            view = views[agent.cav_id]
            theta = self.theta_source.theta_for(agent, view)
            results[agent.cav_id] = agent.controller.compute_control(agent.state, view, theta, agent.last_solution)
        return results

    def _barrier_columns(self, agent: CavAgent, view: NeighborView) -> dict[str, float]:
        values = self.barriers[agent.lane].evaluate(agent.state, view.i_p, view.i_c)
        return {column: values.get(kind, math.nan) for column, kind in LOGGED_BARRIERS.items()}

    def _audit(
        self,
        agent: CavAgent,
        view: NeighborView,
        next_states: dict[int, FloatArray],
    ) -> None:
        i_p = None if view.i_p_id is None else next_states.get(view.i_p_id)
        i_c = None if view.i_c_id is None else next_states.get(view.i_c_id)
        values = self.barriers[agent.lane].evaluate(next_states[agent.cav_id], i_p, i_c)
        for kind, value in values.items():
            if value < -SAFETY_TOLERANCE:
                logger.warning(f'CAV {agent.cav_id}: {kind} barrier {value:.3e} after a feasible step.')
                self.safety_violations.append(
                    {'step': self.step, 'cav_id': agent.cav_id, 'barrier': str(kind), 'value': value}
                )

    def _record(self, agent: CavAgent, view: NeighborView, result: ControlResult) -> None:
        x, y, psi, v = agent.state
        control = result.control
        self._rows.append(
            {
                'step': self.step,
                'time': self.time,
                'cav_id': agent.cav_id,
                'lane': str(agent.lane),
                'x': x,
                'y': y,
                'psi': psi,
                'v': v,
                'u': control.u,
                'phi': control.phi,
                'feasible': int(result.feasible),
                **self._barrier_columns(agent, view),
                'fuel_rate': fuel_rate(v, control.u, self.config.fuel),
            }
        )

    def _remove_exited(self) -> list[CavAgent]:
        exited = [agent for agent in self.agents if agent.progress(self.geometry) >= self.geometry.length]
        for agent in exited:
            self.agents.remove(agent)
            self._cavs[agent.cav_id]['exit_time'] = self.time
            logger.info(f'CAV {agent.cav_id} crossed the merging point at t={self.time:.2f}s.')
        return exited

    def advance(self) -> None:
        """One lockstep step: spawn, snapshot, assign, solve, integrate, audit, then commit and retire."""

        if self.spawning:
            self.spawn_arrivals()
        views = assign_conflicts(self.snapshots(), self.scenario.sequencing)
        results = self._control_all(views)
        self.last_results = results

        params, dt = self.config.vehicle, self.scenario.dt
        next_states = {
            agent.cav_id: step_rk4(agent.state, results[agent.cav_id].control, params, dt) for agent in self.agents
        }
        for agent in self.agents:
            result = results[agent.cav_id]
            self._record(agent, views[agent.cav_id], result)
            if result.feasible:
                self._audit(agent, views[agent.cav_id], next_states)

        for agent in self.agents:
            result = results[agent.cav_id]
            agent.state = next_states[agent.cav_id]
            agent.control = result.control
            agent.last_solution = result.solution
            agent.infeasible_count += int(not result.feasible)

        self.time = (self.step + 1) * dt
        self.step += 1
        self._remove_exited()

    @property
    def finished(self) -> bool:
        if self.time >= self.scenario.time_cap - 1e-9:
            return True
        if self.agents or any(self.pending.values()):
            return False
        if not self.spawning:
            return True
        return self.spawned >= self.scenario.max_cavs or self.scenario.arrival_rate == 0

    def log(self) -> RolloutLog:
        rows = pd.DataFrame.from_records(self._rows, columns=list(LOG_COLUMNS))
        cavs = pd.DataFrame.from_records(list(self._cavs.values()), columns=list(CAV_COLUMNS))
        cavs['exit_time'] = cavs['exit_time'].astype(float)
        return RolloutLog(rows=rows, cavs=cavs, safety_violations=list(self.safety_violations))


def sim_step(world: MergeWorld) -> MergeWorld:
    world.advance()
    return world


def run_episode(
    config: AppConfig, theta_source: ThetaSource, seed: int | None = None, progress: bool = False
) -> tuple[MetricsReport, RolloutLog]:
    """Run until the configured number of CAVs has entered and left, or the time cap is hit."""

    world = MergeWorld(config, theta_source, config.scenario.seed if seed is None else seed)
    total_steps = math.ceil(config.scenario.time_cap / config.scenario.dt)
    with tqdm(total=total_steps, disable=not progress, desc=f'episode seed {world.seed}', unit='step') as bar:
        while not world.finished:
            sim_step(world)
            bar.update(1)

    log = world.log()
    report = compute_metrics(log)
    logger.info(
        f'Episode seed {world.seed}: {report.completed} CAVs completed, '
        f'{report.total_infeasible_count} infeasible solves, {len(log.safety_violations)} safety violations.'
    )
    return report, log
