# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

from typing import NamedTuple

from adaptive_mpc_cbf.config import RewardWeights


class StepRecord(NamedTuple):
    u: float
    phi: float
    v: float
    psi: float
    v_des: float
    psi_des: float
    fuel_rate: float
    feasible: bool


def step_cost(record: StepRecord, weights: RewardWeights) -> float:
    """Weighted tracking, effort and fuel cost of one step, without the infeasibility penalty."""

    beta1, beta2, beta3, beta4, beta5 = weights.betas
    return (
        beta1 * record.u**2
        + beta2 * record.phi**2
        + beta3 * (record.v - record.v_des) ** 2
        + beta4 * (record.psi - record.psi_des) ** 2
        + beta5 * record.fuel_rate
    )


def reward(record: StepRecord, weights: RewardWeights) -> float:
    penalty = 0.0 if record.feasible else weights.infeasibility_penalty
    return -(step_cost(record, weights) + penalty)
