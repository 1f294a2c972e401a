# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import math

import numpy as np
import pytest

from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.config import SequencingPolicy
from adaptive_mpc_cbf.dynamics import VehicleState
from adaptive_mpc_cbf.geometry import Lane
from adaptive_mpc_cbf.simulation import LOGGED_BARRIERS
from adaptive_mpc_cbf.simulation import AgentSnapshot
from adaptive_mpc_cbf.simulation import ArrivalProcess
from adaptive_mpc_cbf.simulation import FixedTheta
from adaptive_mpc_cbf.simulation import MergeWorld
from adaptive_mpc_cbf.simulation import assign_conflicts
from adaptive_mpc_cbf.simulation import run_episode
from adaptive_mpc_cbf.simulation import sim_step
from tests.fixtures.simulation import WorldFactory
from tests.fixtures.simulation import agent_by_id


def snapshot(cav_id: int, lane: Lane, progress: float) -> AgentSnapshot:
    return AgentSnapshot(cav_id, lane, VehicleState(progress, 0.0, 0.0, 10.0), progress)


FOUR_CAVS = [
    snapshot(0, Lane.MAIN, 50.0),
    snapshot(1, Lane.RAMP, 60.0),
    snapshot(2, Lane.MAIN, 30.0),
    snapshot(3, Lane.RAMP, 20.0),
]


def neighbor_ids(views: dict, cav_id: int) -> tuple[int | None, int | None]:
    return views[cav_id].i_p_id, views[cav_id].i_c_id


def test_zero_rate_never_spawns(app_config: AppConfig) -> None:
    """Test that an arrival rate of zero produces no arrivals at any time."""

    arrivals = ArrivalProcess(app_config.with_scenario(arrival_rate=0.0).scenario, seed=5)

    assert arrivals.due(1e6) == []


def test_arrivals_are_deterministic_per_seed(app_config: AppConfig) -> None:
    """Test that one seed always yields the same arrival sequence and another seed a different one."""

    first = ArrivalProcess(app_config.scenario, seed=42).due(200.0)
    again = ArrivalProcess(app_config.scenario, seed=42).due(200.0)
    other = ArrivalProcess(app_config.scenario, seed=43).due(200.0)

    assert first == again
    assert first != other


def test_arrivals_are_ordered_and_within_speed_range(app_config: AppConfig) -> None:
    """Test that due arrivals come out in time order with speeds drawn from the configured range."""

    arrivals = ArrivalProcess(app_config.scenario, seed=3).due(100.0)
    low, high = app_config.scenario.initial_speed_range

    assert [arrival.time for arrival in arrivals] == sorted(arrival.time for arrival in arrivals)
    assert all(low <= arrival.speed <= high for arrival in arrivals)
    assert all(arrival.time <= 100.0 for arrival in arrivals)


def test_arrivals_are_reported_once(app_config: AppConfig) -> None:
    """Test that polling twice does not repeat an arrival."""

    arrivals = ArrivalProcess(app_config.scenario, seed=9)
    early = arrivals.due(50.0)
    late = arrivals.due(100.0)

    assert all(arrival.time > 50.0 for arrival in late)
    assert len(early) + len(late) == len(ArrivalProcess(app_config.scenario, seed=9).due(100.0))


def test_poisson_count_matches_rate(app_config: AppConfig) -> None:
    """Test that a rate of 0.5/s over 100 s averages between 40 and 60 arrivals per origin over 100 seeds."""

    scenario = app_config.with_scenario(arrival_rate=0.5).scenario
    counts = {lane: [] for lane in Lane}
    for seed in range(100):
        arrivals = ArrivalProcess(scenario, seed).due(100.0)
        for lane in Lane:
            counts[lane].append(sum(arrival.lane is lane for arrival in arrivals))

    for lane in Lane:
        assert 40.0 <= np.mean(counts[lane]) <= 60.0


def test_fifo_assignment() -> None:
    """Test that FIFO pairs every CAV with the latest earlier arrival on the other road."""

    views = assign_conflicts(FOUR_CAVS, SequencingPolicy.FIFO)

    assert neighbor_ids(views, 0) == (None, None)
    assert neighbor_ids(views, 1) == (None, 0)
    assert neighbor_ids(views, 2) == (0, 1)
    assert neighbor_ids(views, 3) == (1, 2)


def test_sdf_assignment() -> None:
    """Test that SDF pairs every CAV with the nearest other-road CAV that is closer to the merging point."""

    views = assign_conflicts(FOUR_CAVS, SequencingPolicy.SDF)

    assert neighbor_ids(views, 0) == (None, 1)
    assert neighbor_ids(views, 1) == (None, None)
    assert neighbor_ids(views, 2) == (0, 1)
    assert neighbor_ids(views, 3) == (1, 2)


def test_single_cav_has_no_neighbors() -> None:
    """Test that a CAV alone in the control zone sees neither i_p nor i_c."""

    views = assign_conflicts([snapshot(7, Lane.RAMP, 10.0)], SequencingPolicy.FIFO)

    assert views[7].i_p is None
    assert views[7].i_c is None


def test_neighbor_states_are_copied_into_views() -> None:
    """Test that the view carries the neighbour states alongside their ids."""

    views = assign_conflicts(FOUR_CAVS, SequencingPolicy.FIFO)

    assert views[2].i_p == FOUR_CAVS[0].state
    assert views[2].i_c == FOUR_CAVS[1].state


def test_empty_world_only_advances_time(app_config: AppConfig, fixed_theta: FixedTheta) -> None:
    """Test that stepping a world without CAVs moves the clock and records nothing."""

    world = MergeWorld(app_config.with_scenario(arrival_rate=0.0), fixed_theta, seed=0)

    sim_step(world)

    assert world.time == pytest.approx(app_config.scenario.dt)
    assert world.step == 1
    assert world.agents == []
    assert world.log().rows.empty


def test_lone_cav_accelerates_toward_desired_speed(make_world: WorldFactory) -> None:
    """Test that a lone CAV below the desired speed gains speed and logs one feasible row."""

    world = make_world([(Lane.MAIN, 10.0, 10.0)])

    world.advance()

    agent = agent_by_id(world, 0)
    rows = world.log().rows
    assert agent.state[3] > 10.0
    assert len(rows) == 1
    assert rows['feasible'].tolist() == [1]
    assert math.isnan(rows['b_ellipse'].iloc[0])


def test_cav_leaves_after_crossing_merge_point(make_world: WorldFactory) -> None:
    """Test that a CAV crossing the merging point is removed and its exit time recorded."""

    world = make_world([(Lane.MAIN, 99.0, 10.0)])

    world.advance()

    cavs = world.log().cavs
    assert world.agents == []
    assert cavs['exit_time'].tolist() == pytest.approx([world.time])
    assert world.finished


def test_indices_shift_when_leader_leaves(make_world: WorldFactory) -> None:
    """Test that the follower's queue index drops to one once the leader exits."""

    world = make_world([(Lane.MAIN, 99.0, 10.0), (Lane.MAIN, 50.0, 10.0)])
    follower = agent_by_id(world, 1)
    assert world.index_of(follower) == 2

    world.advance()

    assert world.index_of(follower) == 1


def test_spawn_is_blocked_by_close_leader(make_world: WorldFactory) -> None:
    """Test that a newcomer is held back while it would start inside the leader's safety ellipse."""

    world = make_world([(Lane.MAIN, 2.0, 10.0)])

    assert world._blocked(Lane.MAIN, world.entry_state(Lane.MAIN, 10.0))


def test_spawn_proceeds_with_room_ahead(make_world: WorldFactory) -> None:
    """Test that newcomers on either road spawn when the barriers already hold at entry."""

    world = make_world([(Lane.MAIN, 40.0, 10.0)])

    assert not world._blocked(Lane.MAIN, world.entry_state(Lane.MAIN, 10.0))
    assert not world._blocked(Lane.RAMP, world.entry_state(Lane.RAMP, 10.0))


def test_follower_keeps_safe_distance(make_world: WorldFactory) -> None:
    """Test that a faster follower stays outside the leader's ellipse over several steps."""

    world = make_world([(Lane.MAIN, 60.0, 9.0), (Lane.MAIN, 30.0, 14.0)])

    for _ in range(10):
        world.advance()

    rows = world.log().rows
    follower = rows[(rows['cav_id'] == 1) & (rows['feasible'] == 1)]
    assert world.safety_violations == []
    assert (follower['b_ellipse'] >= -1e-6).all()


def test_episode_ends_once_the_last_cav_leaves(app_config: AppConfig, fixed_theta: FixedTheta) -> None:
    """Test that arrivals past the CAV quota are dropped so the episode stops right after the exit."""

    config = app_config.with_scenario(max_cavs=1, arrival_rate=0.5, time_cap=300.0)
    world = MergeWorld(config, fixed_theta, seed=3)

    while not world.finished:
        world.advance()

    cavs = world.log().cavs
    assert world.spawned == 1
    assert world.time < config.scenario.time_cap
    assert cavs['exit_time'].tolist() == pytest.approx([world.time])
    assert not any(world.pending.values())


def test_feasible_steps_satisfy_the_first_stage_rows(make_world: WorldFactory) -> None:
    """Test that every feasible solve applies a control meeting its own first-stage HOCBF rows."""

    world = make_world([(Lane.MAIN, 60.0, 9.0), (Lane.RAMP, 45.0, 12.0), (Lane.MAIN, 30.0, 14.0)])
    checked = 0

    for _ in range(15):
        views = assign_conflicts(world.snapshots(), world.scenario.sequencing)
        before = {agent.cav_id: (agent, agent.state.copy()) for agent in world.agents}
        world.advance()
        for cav_id, result in world.last_results.items():
            if not result.feasible:
                continue
            agent, state = before[cav_id]
            theta = world.theta_source.theta_for(agent, views[cav_id])
            problem = agent.controller.assemble(state, views[cav_id], theta)
            residuals = problem.hocbf_residuals(state, result.control)
            assert min(residuals.values()) >= -1e-6, (world.step, cav_id, residuals)
            checked += 1

    assert checked > 0


def test_travel_time_is_bounded_by_the_speed_limit(app_config: AppConfig, fixed_theta: FixedTheta) -> None:
    """Test that no completed CAV crosses the control zone faster than at the maximum speed."""

    config = app_config.with_scenario(arrival_rate=0.5, max_cavs=3, time_cap=40.0)

    report, _ = run_episode(config, fixed_theta, seed=5)

    completed = [cav for cav in report.per_cav if cav.completed]
    assert completed
    lower_bound = config.scenario.cz_length / config.vehicle.bounds.v_max
    assert all(cav.travel_time >= lower_bound for cav in completed)
    assert report.avg_travel_time >= lower_bound


def test_zero_arrivals_give_empty_report(app_config: AppConfig, fixed_theta: FixedTheta) -> None:
    """Test that an episode without arrivals ends immediately with zero counts."""

    report, log = run_episode(app_config.with_scenario(arrival_rate=0.0), fixed_theta, seed=1)

    assert report.completed == 0
    assert report.total_infeasible_count == 0
    assert report.avg_travel_time == 0.0
    assert log.rows.empty


def test_episode_is_deterministic(app_config: AppConfig, fixed_theta: FixedTheta) -> None:
    """Test that a fixed seed and fixed parameters reproduce the same report and log."""

    config = app_config.with_scenario(arrival_rate=0.5, max_cavs=2, time_cap=6.0)

    first_report, first_log = run_episode(config, fixed_theta, seed=17)
    second_report, second_log = run_episode(config, fixed_theta, seed=17)

    assert first_report == second_report
    assert first_log.rows.equals(second_log.rows)


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(10))
def test_barriers_hold_with_ten_cavs(seed: int, desk_config: AppConfig, fixed_theta: FixedTheta) -> None:
    """Test that every logged barrier stays non-negative until the first infeasible solve of a ten-CAV episode."""

    config = desk_config.with_scenario(max_cavs=10, time_cap=120.0)

    report, log = run_episode(config, fixed_theta, seed=seed)

    rows = log.rows
    infeasible_steps = rows.loc[rows['feasible'] == 0, 'step']
    if not infeasible_steps.empty:
        rows = rows[rows['step'] <= infeasible_steps.min()]
    barriers = rows[list(LOGGED_BARRIERS)].to_numpy(dtype=float)
    assert len(log.cavs) == 10
    assert log.safety_violations == []
    assert np.nanmin(barriers) >= -1e-6
    assert report.completed + len(report.incomplete_cavs) == len(log.cavs)
