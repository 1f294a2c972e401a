# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Fourteen-value normalised observation and the log-space map from actions to controller parameters."""

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.config import ObservationRanges
from adaptive_mpc_cbf.config import ThetaBounds
from adaptive_mpc_cbf.controller import NeighborView
from adaptive_mpc_cbf.dynamics import VehicleState
from adaptive_mpc_cbf.geometry import Lane
from adaptive_mpc_cbf.geometry import MergeGeometry
from adaptive_mpc_cbf.rl.networks import GaussianPolicy
from adaptive_mpc_cbf.simulation import CavAgent
from adaptive_mpc_cbf.theta import THETA_SIZE
from adaptive_mpc_cbf.theta import ControllerTheta

OBSERVATION_SIZE = 14
ACTION_SIZE = THETA_SIZE
STATE_FIELDS = ('x', 'y', 'psi', 'v')
CONTROL_FIELDS = ('u', 'phi')


def normalize(value: float, bounds: tuple[float, float]) -> float:
    """Affine map of ``[low, high]`` onto ``[-1, 1]``; values outside the range are clipped."""

    low, high = bounds
    return float(np.clip(2.0 * (value - low) / (high - low) - 1.0, -1.0, 1.0))


def virtual_far_vehicle(geometry: MergeGeometry, lane: Lane, v_des: float) -> VehicleState:
    """Stand-in for an absent neighbour: parked at the control-zone exit, cruising at the desired speed."""

    route = geometry.route(lane)
    x, y = route.position(route.length)
    return VehicleState(float(x), float(y), route.heading, v_des)


def _state_features(state: npt.ArrayLike, ranges: ObservationRanges) -> list[float]:
    values = np.asarray(state, dtype=float)
    return [normalize(float(value), getattr(ranges, name)) for name, value in zip(STATE_FIELDS, values, strict=True)]


def build_observation(
    ego: npt.ArrayLike,
    prev_control: npt.ArrayLike,
    i_p: npt.ArrayLike | None,
    i_c: npt.ArrayLike | None,
    ranges: ObservationRanges,
    sentinels: tuple[VehicleState, VehicleState],
) -> FloatArray:
    """Ego state, ego previous control, ``i_p`` state and ``i_c`` state, each scaled into ``[-1, 1]``.

    ``sentinels`` replace a missing ``i_p`` and ``i_c`` respectively.
    """

    control = np.asarray(prev_control, dtype=float)
    features = [
        *_state_features(ego, ranges),
        *(normalize(float(value), getattr(ranges, name)) for name, value in zip(CONTROL_FIELDS, control, strict=True)),
        *_state_features(sentinels[0] if i_p is None else i_p, ranges),
        *_state_features(sentinels[1] if i_c is None else i_c, ranges),
    ]
    return np.array(features)


def map_action_to_theta(raw: npt.ArrayLike, bounds: ThetaBounds) -> ControllerTheta:
    """``theta = exp(log lo + (raw + 1) / 2 * (log hi - log lo))`` per component; raw is clipped to ``[-1, 1]``."""

    action = np.clip(np.asarray(raw, dtype=float).ravel(), -1.0, 1.0)
    if action.shape != (ACTION_SIZE,):
        raise ValueError(f'Expected {ACTION_SIZE} action components, got {action.shape}.')
    lower, upper = (np.log(np.asarray(vector)) for vector in bounds.as_vectors())
    theta = np.exp(lower + 0.5 * (action + 1.0) * (upper - lower))
    theta = np.clip(theta, np.exp(lower), np.exp(upper))
    return ControllerTheta.from_vector(theta)


@dataclass
class PolicyTheta:
    """Deterministic mean action of a trained policy, shared by every CAV."""

    policy: GaussianPolicy
    config: AppConfig
    geometry: MergeGeometry

    def sentinels(self, lane: Lane) -> tuple[VehicleState, VehicleState]:
        v_des = self.config.scenario.v_des
        return virtual_far_vehicle(self.geometry, lane, v_des), virtual_far_vehicle(self.geometry, lane.other, v_des)

    def observe(self, agent: CavAgent, view: NeighborView) -> FloatArray:
        return build_observation(
            agent.state, agent.control, view.i_p, view.i_c, self.config.observation, self.sentinels(agent.lane)
        )

    def theta_for(self, agent: CavAgent, view: NeighborView) -> ControllerTheta:
        raw = self.policy.mean_action(self.observe(agent, view))[0]
        return map_action_to_theta(raw, self.config.theta.bounds)
