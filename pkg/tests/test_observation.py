# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import math

import numpy as np
import pytest

from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.config import ObservationRanges
from adaptive_mpc_cbf.config import RewardWeights
from adaptive_mpc_cbf.config import ThetaBounds
from adaptive_mpc_cbf.controller import NeighborView
from adaptive_mpc_cbf.geometry import Lane
from adaptive_mpc_cbf.geometry import MergeGeometry
from adaptive_mpc_cbf.rl.networks import GaussianPolicy
from adaptive_mpc_cbf.rl.observation import ACTION_SIZE
from adaptive_mpc_cbf.rl.observation import OBSERVATION_SIZE
from adaptive_mpc_cbf.rl.observation import PolicyTheta
from adaptive_mpc_cbf.rl.observation import build_observation
from adaptive_mpc_cbf.rl.observation import map_action_to_theta
from adaptive_mpc_cbf.rl.observation import normalize
from adaptive_mpc_cbf.rl.observation import virtual_far_vehicle
from adaptive_mpc_cbf.rl.reward import StepRecord
from adaptive_mpc_cbf.rl.reward import reward
from adaptive_mpc_cbf.rl.reward import step_cost
from tests.fixtures.simulation import WorldFactory
from tests.fixtures.simulation import agent_by_id


def record(**changes: float | bool) -> StepRecord:
    values: dict[str, float | bool] = {
        'u': 0.0,
        'phi': 0.0,
        'v': 15.0,
        'psi': 0.0,
        'v_des': 15.0,
        'psi_des': 0.0,
        'fuel_rate': 0.5,
        'feasible': True,
    }
    return StepRecord(**{**values, **changes})


@pytest.mark.parametrize(
    'value,expected',
    [
        (20.0, 1.0),
        (10.0, 0.0),
        (0.0, -1.0),
        (25.0, 1.0),
        (-3.0, -1.0),
    ],
)
def test_normalize_maps_range_onto_unit_interval(value: float, expected: float) -> None:
    """Test that the speed range [0, 20] maps onto [-1, 1] with clipping outside."""

    assert normalize(value, (0.0, 20.0)) == pytest.approx(expected)


def test_missing_neighbors_use_virtual_vehicles(geometry: MergeGeometry) -> None:
    """Test that absent neighbours are replaced by the far sentinels and the observation keeps fourteen entries."""

    ranges = ObservationRanges()
    sentinels = (virtual_far_vehicle(geometry, Lane.MAIN, 15.0), virtual_far_vehicle(geometry, Lane.RAMP, 15.0))

    observation = build_observation([-80.0, 0.0, 0.0, 10.0], [0.0, 0.0], None, None, ranges, sentinels)

    assert observation.shape == (OBSERVATION_SIZE,)
    assert observation[6:10] == pytest.approx([1.0, normalize(0.0, ranges.y), 0.0, 0.5])
    assert observation[3] == pytest.approx(0.0)
    assert np.all(np.abs(observation) <= 1.0)


def test_present_neighbors_are_observed(geometry: MergeGeometry) -> None:
    """Test that a present preceding CAV replaces its sentinel in the observation."""

    ranges = ObservationRanges()
    sentinels = (virtual_far_vehicle(geometry, Lane.MAIN, 15.0), virtual_far_vehicle(geometry, Lane.RAMP, 15.0))

    observation = build_observation(
        [-80.0, 0.0, 0.0, 10.0], [4.0, 0.0], [-50.0, 0.0, 0.0, 20.0], None, ranges, sentinels
    )

    assert observation[4] == pytest.approx(1.0)
    assert observation[6] == pytest.approx(0.0)
    assert observation[9] == pytest.approx(1.0)


def test_virtual_vehicle_sits_at_control_zone_exit(geometry: MergeGeometry) -> None:
    """Test that the sentinel is parked at the merging point with the road heading."""

    ramp = geometry.route(Lane.RAMP)

    sentinel = virtual_far_vehicle(geometry, Lane.RAMP, 15.0)

    assert sentinel.x == pytest.approx(0.0, abs=1e-9)
    assert sentinel.y == pytest.approx(0.0, abs=1e-9)
    assert sentinel.psi == ramp.heading
    assert sentinel.v == 15.0


def test_action_endpoints_map_to_bounds() -> None:
    """Test that raw -1, 0 and 1 give the lower bound, the geometric mean and the upper bound."""

    bounds = ThetaBounds()
    lower, upper = bounds.as_vectors()

    low = map_action_to_theta(-np.ones(ACTION_SIZE), bounds).to_vector()
    middle = map_action_to_theta(np.zeros(ACTION_SIZE), bounds).to_vector()
    high = map_action_to_theta(np.ones(ACTION_SIZE), bounds).to_vector()

    assert low == pytest.approx(lower)
    assert middle == pytest.approx(np.sqrt(np.array(lower) * np.array(upper)))
    assert high == pytest.approx(upper)


def test_action_outside_box_is_clipped() -> None:
    """Test that raw values beyond the action box stay inside the parameter bounds."""

    bounds = ThetaBounds()
    _, upper = bounds.as_vectors()

    theta = map_action_to_theta(np.full(ACTION_SIZE, 3.0), bounds)

    assert theta.to_vector() == pytest.approx(upper)


def test_action_of_wrong_size_is_rejected() -> None:
    """Test that the action has one component per controller parameter."""

    with pytest.raises(ValueError):
        map_action_to_theta(np.zeros(ACTION_SIZE + 1), ThetaBounds())


def test_policy_theta_stays_within_bounds(app_config: AppConfig, make_world: WorldFactory) -> None:
    """Test that a policy-driven parameter source yields parameters inside the configured bounds."""

    world = make_world([(Lane.MAIN, 10.0, 10.0)])
    policy = GaussianPolicy.create(OBSERVATION_SIZE, ACTION_SIZE, (8,), np.random.default_rng(0))
    source = PolicyTheta(policy, app_config, world.geometry)

    theta = source.theta_for(agent_by_id(world, 0), NeighborView()).to_vector()

    lower, upper = app_config.theta.bounds.as_vectors()
    assert np.all(theta >= np.array(lower) - 1e-12)
    assert np.all(theta <= np.array(upper) + 1e-12)


def test_reward_at_target_is_fuel_only() -> None:
    """Test that with every tracking error at zero only the fuel term remains."""

    weights = RewardWeights()

    assert reward(record(), weights) == pytest.approx(-weights.betas[4] * 0.5)


def test_reward_with_zero_weights_is_zero() -> None:
    """Test that zero weights give zero reward for a feasible step."""

    weights = RewardWeights(betas=(0.0, 0.0, 0.0, 0.0, 0.0))

    assert reward(record(u=3.0, phi=0.2, v=5.0), weights) == 0.0


def test_infeasible_step_adds_penalty() -> None:
    """Test that an infeasible step costs the configured penalty on top of the regular terms."""

    weights = RewardWeights()

    feasible = reward(record(u=1.0), weights)
    infeasible = reward(record(u=1.0, feasible=False), weights)

    assert infeasible == pytest.approx(feasible - 1e3)


def test_step_cost_scales_with_weights() -> None:
    """Test that doubling every weight doubles the cost."""

    step = record(u=1.0, phi=0.1, v=12.0, psi=0.05)
    base = RewardWeights(betas=(0.2, 0.1, 0.3, 0.1, 0.1))
    doubled = RewardWeights(betas=(0.4, 0.2, 0.6, 0.2, 0.2))

    assert step_cost(step, doubled) == pytest.approx(2 * step_cost(step, base))
    assert step_cost(step, base) == pytest.approx(0.2 + 0.1 * 0.01 + 0.3 * 9.0 + 0.1 * 0.0025 + 0.1 * 0.5)
    assert math.isfinite(reward(step, base))
