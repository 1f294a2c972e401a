# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Soft actor-critic with twin critics, Polyak-averaged targets and optional temperature tuning."""

import logging
import math
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.config import SacHyperparams
from adaptive_mpc_cbf.rl.networks import Adam
from adaptive_mpc_cbf.rl.networks import GaussianPolicy
from adaptive_mpc_cbf.rl.networks import QNetwork
from adaptive_mpc_cbf.rl.networks import soft_update
from adaptive_mpc_cbf.rl.replay import TransitionBatch
from adaptive_mpc_cbf.rng import stream

logger = logging.getLogger(__name__)


class UpdateDiagnostics(NamedTuple):
    critic_loss: float
    actor_loss: float
    entropy: float
    temperature: float


class SacAgent:
    def __init__(self, observation_size: int, action_size: int, hyper: SacHyperparams, seed: int) -> None:
        self.hyper = hyper
        self.observation_size = observation_size
        self.action_size = action_size
        init = stream(seed, 'network-init')
        self.noise = stream(seed, 'policy')

        hidden = hyper.hidden_sizes
        self.policy = GaussianPolicy.create(observation_size, action_size, hidden, init)
        self.critics = [QNetwork.create(observation_size, action_size, hidden, init) for _ in range(2)]
        self.targets = [critic.copy() for critic in self.critics]

        self.log_temperature = np.array([math.log(hyper.temperature)])
        self.target_entropy = -float(action_size)
        self.actor_optimizer = Adam(self.policy.net.parameters(), hyper.lr_actor)
        self.critic_optimizers = [Adam(critic.net.parameters(), hyper.lr_critic) for critic in self.critics]
        self.temperature_optimizer = Adam([self.log_temperature], hyper.lr_temperature)
        self.updates = 0

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature[0]))

    def act(self, observation: npt.ArrayLike, deterministic: bool = False) -> FloatArray:
        """Squashed action in (-1, 1); exploration noise comes from the ``policy`` stream."""

        if deterministic:
            return self.policy.mean_action(observation)[0]
        noise = self.noise.standard_normal(self.action_size)
        return self.policy.sample(observation, noise).action[0]

    def critic_targets(self, batch: TransitionBatch) -> FloatArray:
        noise = self.noise.standard_normal((batch.size, self.action_size))
        following = self.policy.sample(batch.next_observations, noise)
        next_q = np.minimum(*(target(batch.next_observations, following.action) for target in self.targets))
        soft_value = next_q - self.temperature * following.log_prob
        return batch.rewards + self.hyper.gamma * (1.0 - batch.dones) * soft_value

    def critic_loss_and_gradients(
        self, batch: TransitionBatch, targets: FloatArray
    ) -> tuple[float, list[list[FloatArray]]]:
        """Mean of ``1/2 (Q - y)^2`` summed over both critics."""

        loss, gradients = 0.0, []
        for critic in self.critics:
            values, cache = critic.forward(batch.observations, batch.actions)
            error = values - targets
            loss += 0.5 * float(np.mean(error**2))
            grads, _ = critic.backward(cache, error / batch.size)
            gradients.append(grads)
        return loss, gradients

    def actor_loss_and_gradient(
        self, observations: FloatArray, noise: FloatArray
    ) -> tuple[float, list[FloatArray], FloatArray]:
        """Reparameterised objective ``mean(alpha log_prob - min Q)`` at fixed noise, with its gradient."""

        batch_size = observations.shape[0]
        sample = self.policy.sample(observations, noise)
        evaluations = [critic.forward(observations, sample.action) for critic in self.critics]
        first, second = (values for values, _ in evaluations)
        use_first = first <= second
        q_min = np.where(use_first, first, second)
        loss = float(np.mean(self.temperature * sample.log_prob - q_min))

        upstream = -np.ones(batch_size) / batch_size
        action_gradient = np.zeros_like(sample.action)
        for (critic, (_, cache)), mask in zip(
            zip(self.critics, evaluations, strict=True), (use_first, ~use_first), strict=True
        ):
            _, grad = critic.backward(cache, upstream * mask)
            action_gradient += grad
        log_prob_gradient = np.full(batch_size, self.temperature / batch_size)
        gradients = self.policy.backward(sample, action_gradient, log_prob_gradient)
        return loss, gradients, sample.log_prob

    def update(self, batch: TransitionBatch) -> UpdateDiagnostics:
        targets = self.critic_targets(batch)
        critic_loss, critic_gradients = self.critic_loss_and_gradients(batch, targets)
        for optimizer, gradients in zip(self.critic_optimizers, critic_gradients, strict=True):
            optimizer.step(gradients)

        noise = self.noise.standard_normal((batch.size, self.action_size))
        actor_loss, actor_gradients, log_prob = self.actor_loss_and_gradient(batch.observations, noise)
        self.actor_optimizer.step(actor_gradients)

        if self.hyper.auto_temperature:
            gradient = -float(np.mean(log_prob + self.target_entropy))
            self.temperature_optimizer.step([np.array([gradient])])

        for target, critic in zip(self.targets, self.critics, strict=True):
            soft_update(target.net, critic.net, self.hyper.tau)
        self.updates += 1

        entropy = -float(np.mean(log_prob))
        logger.debug(
            f'SAC update {self.updates}: critic {critic_loss:.4f}, actor {actor_loss:.4f}, entropy {entropy:.3f}.'
        )
        return UpdateDiagnostics(critic_loss, actor_loss, entropy, self.temperature)
