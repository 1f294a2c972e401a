# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import math
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.errors import ShapeMismatch


class Transition(NamedTuple):
    observation: FloatArray
    action: FloatArray
    reward: float
    next_observation: FloatArray
    done: bool


class TransitionBatch(NamedTuple):
    observations: FloatArray
    actions: FloatArray
    rewards: FloatArray
    next_observations: FloatArray
    dones: FloatArray

    @property
    def size(self) -> int:
        return int(self.rewards.shape[0])


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is overwritten first and sampling is uniform."""

    def __init__(self, capacity: int, observation_size: int, action_size: int, rng: np.random.Generator) -> None:
        if capacity < 1:
            raise ValueError('Replay capacity must be positive.')
        self.capacity = capacity
        self.rng = rng
        self.observations = np.zeros((capacity, observation_size))
        self.actions = np.zeros((capacity, action_size))
        self.rewards = np.zeros(capacity)
        self.next_observations = np.zeros((capacity, observation_size))
        self.dones = np.zeros(capacity)
        self.position = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def add(self, transition: Transition) -> None:
        if not math.isfinite(transition.reward):
            raise ValueError(f'Reward must be finite, got {transition.reward}.')
        observation = np.asarray(transition.observation, dtype=float)
        action = np.asarray(transition.action, dtype=float)
        if observation.shape != self.observations.shape[1:] or action.shape != self.actions.shape[1:]:
            raise ShapeMismatch(f'Transition shapes {observation.shape}, {action.shape} do not fit the buffer.')

        index = self.position
        self.observations[index] = observation
        self.actions[index] = action
        self.rewards[index] = transition.reward
        self.next_observations[index] = transition.next_observation
        self.dones[index] = float(transition.done)
        self.position = (self.position + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def transitions(self) -> list[Transition]:
        """Stored transitions from oldest to newest."""

        start = self.position if self.count == self.capacity else 0
        order = [(start + offset) % self.capacity for offset in range(self.count)]
        return [
            Transition(
                self.observations[index].copy(),
                self.actions[index].copy(),
                float(self.rewards[index]),
                self.next_observations[index].copy(),
                bool(self.dones[index]),
            )
            for index in order
        ]

    def sample(self, batch_size: int) -> TransitionBatch:
        if not self.count:
            raise ValueError('Cannot sample from an empty replay buffer.')
        indices: npt.NDArray[np.int64] = self.rng.integers(0, self.count, size=batch_size)
        return TransitionBatch(
            self.observations[indices],
            self.actions[indices],
            self.rewards[indices],
            self.next_observations[indices],
            self.dones[indices],
        )
