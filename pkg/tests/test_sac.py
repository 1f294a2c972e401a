# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import numpy as np
import pytest

from adaptive_mpc_cbf.config import SacHyperparams
from adaptive_mpc_cbf.rl.replay import TransitionBatch
from adaptive_mpc_cbf.rl.sac import SacAgent
from tests.fixtures.numerics import relative_error

FD_STEP = 1e-6


def small_hyper(**changes: object) -> SacHyperparams:
    defaults: dict[str, object] = {'hidden_sizes': (16, 16), 'batch_size': 8, 'lr_actor': 1e-3, 'lr_critic': 1e-3}
    return SacHyperparams.model_validate({**defaults, **changes})


def fixed_batch(size: int = 8, observation_size: int = 3, action_size: int = 2) -> TransitionBatch:
    rng = np.random.default_rng(99)
    return TransitionBatch(
        observations=rng.normal(size=(size, observation_size)),
        actions=rng.uniform(-1.0, 1.0, size=(size, action_size)),
        rewards=rng.normal(size=size),
        next_observations=rng.normal(size=(size, observation_size)),
        dones=np.zeros(size),
    )


def all_parameters(agent: SacAgent) -> list[np.ndarray]:
    networks = [agent.policy.net, *(critic.net for critic in agent.critics), *(target.net for target in agent.targets)]
    return [array.copy() for net in networks for array in net.parameters()]


def test_full_soft_update_copies_critics() -> None:
    """Test that tau = 1 leaves the target critics equal to the online critics after an update."""

    agent = SacAgent(3, 2, small_hyper(tau=1.0), seed=0)

    agent.update(fixed_batch())

    for target, critic in zip(agent.targets, agent.critics, strict=True):
        assert all(np.array_equal(t, c) for t, c in zip(target.net.parameters(), critic.net.parameters(), strict=True))


def test_undiscounted_target_is_the_reward() -> None:
    """Test that with gamma = 0 the critic target is the immediate reward."""

    agent = SacAgent(3, 2, small_hyper(gamma=0.0), seed=1)
    batch = fixed_batch()

    assert np.array_equal(agent.critic_targets(batch), batch.rewards)


def test_critic_loss_decreases_on_fixed_batch() -> None:
    """Test that repeated updates on one batch regress the critics toward the rewards."""

    agent = SacAgent(3, 2, small_hyper(gamma=0.0), seed=2)
    batch = fixed_batch()
    before, _ = agent.critic_loss_and_gradients(batch, batch.rewards)

    for _ in range(200):
        agent.update(batch)

    after, _ = agent.critic_loss_and_gradients(batch, batch.rewards)
    assert after < before


def test_done_transitions_do_not_bootstrap() -> None:
    """Test that terminal transitions use the reward alone whatever the discount."""

    agent = SacAgent(3, 2, small_hyper(gamma=0.9), seed=3)
    batch = fixed_batch()._replace(dones=np.ones(8))

    assert np.array_equal(agent.critic_targets(batch), batch.rewards)


def test_actor_gradient_matches_finite_differences() -> None:
    """Test that the reparameterised actor gradient at fixed noise agrees with central differences to 1e-3."""

    agent = SacAgent(3, 2, small_hyper(hidden_sizes=(8, 8)), seed=4)
    rng = np.random.default_rng(5)
    observations = rng.normal(size=(6, 3))
    noise = rng.standard_normal((6, 2))

    _, gradients, _ = agent.actor_loss_and_gradient(observations, noise)

    for analytic, array in zip(gradients, agent.policy.net.parameters(), strict=True):
        numeric = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + FD_STEP
            upper = agent.actor_loss_and_gradient(observations, noise)[0]
            array[index] = original - FD_STEP
            lower = agent.actor_loss_and_gradient(observations, noise)[0]
            array[index] = original
            numeric[index] = (upper - lower) / (2 * FD_STEP)
        assert relative_error(analytic, numeric, floor=1e-3) < 1e-3


def test_zero_learning_rates_freeze_every_network() -> None:
    """Test that with zero learning rates every weight stays bit-identical over many updates."""

    frozen = small_hyper(lr_actor=0.0, lr_critic=0.0, lr_temperature=0.0, auto_temperature=True, tau=1.0)
    agent = SacAgent(3, 2, frozen, seed=6)
    before = all_parameters(agent)

    for _ in range(20):
        agent.update(fixed_batch())

    after = all_parameters(agent)
    assert all(np.array_equal(b, a) for b, a in zip(before, after, strict=True))
    assert agent.temperature == pytest.approx(0.2)


def test_automatic_temperature_moves() -> None:
    """Test that temperature tuning changes the temperature when enabled."""

    agent = SacAgent(3, 2, small_hyper(auto_temperature=True, lr_temperature=1e-2), seed=7)

    for _ in range(10):
        agent.update(fixed_batch())

    assert agent.temperature != pytest.approx(0.2)


def test_actions_are_squashed_and_reproducible() -> None:
    """Test that two agents with one seed act identically and stay inside (-1, 1)."""

    observation = np.array([0.3, -0.2, 0.9])
    first = SacAgent(3, 2, small_hyper(), seed=8)
    second = SacAgent(3, 2, small_hyper(), seed=8)

    actions = [first.act(observation) for _ in range(5)]
    again = [second.act(observation) for _ in range(5)]

    assert all(np.array_equal(a, b) for a, b in zip(actions, again, strict=True))
    assert all(np.all(np.abs(action) < 1.0) for action in actions)
    assert np.array_equal(first.act(observation, deterministic=True), second.act(observation, deterministic=True))
