# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import math

import numpy as np
import pandas as pd
import pytest

from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.config import SacHyperparams
from adaptive_mpc_cbf.geometry import Lane
from adaptive_mpc_cbf.rl.observation import ACTION_SIZE
from adaptive_mpc_cbf.rl.observation import OBSERVATION_SIZE
from adaptive_mpc_cbf.rl.sac import SacAgent
from adaptive_mpc_cbf.rl.training import CURVE_COLUMNS
from adaptive_mpc_cbf.rl.training import MergeTrainingEnv
from adaptive_mpc_cbf.rl.training import ToyBanditEnv
from adaptive_mpc_cbf.rl.training import train
from adaptive_mpc_cbf.rl.training import window_means


def bandit_hyper(**changes: object) -> SacHyperparams:
    defaults: dict[str, object] = {
        'hidden_sizes': (16, 16),
        'batch_size': 16,
        'warmup_steps': 50,
        'lr_actor': 3e-3,
        'lr_critic': 3e-3,
        'temperature': 0.05,
        'checkpoint_every': 100,
    }
    return SacHyperparams.model_validate({**defaults, **changes})


def test_bandit_training_records_one_row_per_episode() -> None:
    """Test that one-step episodes give one learning-curve row per environment step."""

    hyper = bandit_hyper()
    agent = SacAgent(1, 1, hyper, seed=0)

    result = train(ToyBanditEnv(), agent, hyper, seed=0, steps=200)

    assert list(result.curve.columns) == list(CURVE_COLUMNS)
    assert len(result.curve) == 200
    assert result.episodes == 200
    assert result.curve['step'].tolist() == list(range(1, 201))
    assert (result.curve['reward'] <= 0.0).all()


def test_checkpoint_callback_fires_on_schedule() -> None:
    """Test that the checkpoint callback runs every checkpoint_every steps."""

    hyper = bandit_hyper()
    seen: list[int] = []

    agent = SacAgent(1, 1, hyper, seed=1)

    train(ToyBanditEnv(), agent, hyper, seed=1, steps=250, on_checkpoint=lambda _, step: seen.append(step))

    assert seen == [100, 200]


def test_training_is_deterministic() -> None:
    """Test that one seed reproduces the same learning curve."""

    hyper = bandit_hyper()

    first = train(ToyBanditEnv(), SacAgent(1, 1, hyper, seed=2), hyper, seed=2, steps=150)
    second = train(ToyBanditEnv(), SacAgent(1, 1, hyper, seed=2), hyper, seed=2, steps=150)

    pd.testing.assert_frame_equal(first.curve, second.curve)


def test_zero_learning_rates_keep_weights_through_training() -> None:
    """Test that training with zero learning rates leaves the policy weights bit-identical."""

    hyper = bandit_hyper(lr_actor=0.0, lr_critic=0.0, lr_temperature=0.0, tau=1.0)
    agent = SacAgent(1, 1, hyper, seed=3)
    before = [array.copy() for array in agent.policy.net.parameters()]

    train(ToyBanditEnv(), agent, hyper, seed=3, steps=150)

    assert all(np.array_equal(b, a) for b, a in zip(before, agent.policy.net.parameters(), strict=True))


def test_window_means() -> None:
    """Test the first and last window averages of the episode rewards."""

    curve = pd.DataFrame({'reward': [-4.0, -2.0, -1.0, -1.0]})

    assert window_means(curve, window=2) == (-3.0, -1.0)


def test_merge_environment_produces_finite_transitions(desk_config: AppConfig) -> None:
    """Test that the merging environment yields fourteen-value observations and finite rewards."""

    env = MergeTrainingEnv(desk_config, seed=4)

    observation = env.reset()
    result = env.step(np.zeros(ACTION_SIZE))

    assert observation.shape == (OBSERVATION_SIZE,)
    assert result.observation.shape == (OBSERVATION_SIZE,)
    assert math.isfinite(result.reward)
    assert result.reward < 0.0
    assert env.thetas is not None and env.thetas.ego_id == 2


def test_merge_environment_places_three_cavs(desk_config: AppConfig) -> None:
    """Test that an episode starts with i_p ahead of the learner and i_c on the other road."""

    env = MergeTrainingEnv(desk_config, seed=5)
    env.reset()

    assert env.world is not None
    agents = {agent.cav_id: agent for agent in env.world.agents}
    if len(agents) == 3:
        geometry = env.world.geometry
        assert agents[0].lane == agents[2].lane
        assert agents[1].lane == agents[2].lane.other
        assert agents[0].progress(geometry) > agents[2].progress(geometry)
    else:
        assert list(agents) == [2]
    assert {agent.lane for agent in env.world.agents} <= set(Lane)


def test_merge_environment_requires_reset(desk_config: AppConfig) -> None:
    """Test that stepping before the first reset fails."""

    with pytest.raises(RuntimeError):
        MergeTrainingEnv(desk_config, seed=6).step(np.zeros(ACTION_SIZE))


@pytest.mark.slow
def test_bandit_policy_finds_optimal_action() -> None:
    """Test that SAC learns the bandit optimum 0.5 to within 0.1 in 20000 steps."""

    hyper = bandit_hyper(hidden_sizes=(32, 32), batch_size=64, warmup_steps=500)
    agent = SacAgent(1, 1, hyper, seed=7)

    result = train(ToyBanditEnv(target=0.5), agent, hyper, seed=7, steps=20_000)

    assert float(agent.act(np.zeros(1), deterministic=True)[0]) == pytest.approx(0.5, abs=0.1)
    first, last = window_means(result.curve, window=500)
    assert last > first


@pytest.mark.slow
def test_desk_scale_merge_training_raises_episode_reward(desk_config: AppConfig) -> None:
    """Test that desk-scale SAC on the merging environment ends with better episode rewards than it starts."""

    hyper = desk_config.sac.desk_scale()
    env = MergeTrainingEnv(desk_config, seed=8)
    agent = SacAgent(env.observation_size, env.action_size, hyper, seed=8)

    result = train(env, agent, hyper, seed=8)

    first, last = window_means(result.curve, window=50)
    assert result.steps == hyper.total_steps
    assert last > first
