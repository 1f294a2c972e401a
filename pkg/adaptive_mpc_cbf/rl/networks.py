# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Dense tanh networks with hand-written reverse mode, the squashed Gaussian actor, twin critics and Adam."""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple
from typing import Self

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.errors import ShapeMismatch

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class Mlp:
    """Fully connected network: tanh on every hidden layer, linear output layer."""

    weights: list[FloatArray]
    biases: list[FloatArray]

    @classmethod
    def create(cls, sizes: Sequence[int], rng: np.random.Generator) -> Self:
        if len(sizes) < 2 or any(size < 1 for size in sizes):
            raise ShapeMismatch(f'Invalid layer sizes {tuple(sizes)}.')
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:], strict=True):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(weight.shape[1] for weight in self.weights))

    @property
    def input_size(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def output_size(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def parameter_count(self) -> int:
        return sum(weight.size + bias.size for weight, bias in zip(self.weights, self.biases, strict=True))

    def parameters(self) -> list[FloatArray]:
        """Parameters in declared order: W1, b1, W2, b2, ..."""

        return [array for pair in zip(self.weights, self.biases, strict=True) for array in pair]

    def copy(self) -> Self:
        return type(self)([weight.copy() for weight in self.weights], [bias.copy() for bias in self.biases])

    def _check_input(self, inputs: npt.ArrayLike) -> FloatArray:
        x = np.asarray(inputs, dtype=float)
        if x.ndim == 1:
            x = x[np.newaxis, :]
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ShapeMismatch(f'Network expects inputs of width {self.input_size}, got shape {x.shape}.')
        return x

    def forward(self, inputs: npt.ArrayLike) -> tuple[FloatArray, list[FloatArray]]:
        """Batched forward pass; the cache holds the input of every layer."""

        x = self._check_input(inputs)
        cache = [x]
        last = len(self.weights) - 1
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases, strict=True)):
            x = x @ weight + bias
            if index < last:
                x = np.tanh(x)
            cache.append(x)
        return x, cache

    def __call__(self, inputs: npt.ArrayLike) -> FloatArray:
        return self.forward(inputs)[0]

    def backward(self, cache: list[FloatArray], upstream: npt.ArrayLike) -> tuple[list[FloatArray], FloatArray]:
        """Gradients of ``sum(upstream * output)`` with respect to the parameters and the input."""

        grad = np.asarray(upstream, dtype=float)
        if grad.ndim == 1:
            grad = grad[np.newaxis, :]
        if grad.shape != cache[-1].shape:
            raise ShapeMismatch(f'Upstream gradient {grad.shape} does not match output {cache[-1].shape}.')

        gradients: list[FloatArray] = []
        for index in reversed(range(len(self.weights))):
            if index < len(self.weights) - 1:
                grad = grad * (1.0 - cache[index + 1] ** 2)
            gradients.append(grad.sum(axis=0))
            gradients.append(cache[index].T @ grad)
            grad = grad @ self.weights[index].T
        gradients.reverse()
        return gradients, grad


def mlp_forward_backward(
    net: Mlp, inputs: npt.ArrayLike, upstream: npt.ArrayLike
) -> tuple[FloatArray, list[FloatArray], FloatArray]:
    output, cache = net.forward(inputs)
    gradients, input_gradient = net.backward(cache, upstream)
    return output, gradients, input_gradient


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    """Polyak blend ``target <- (1 - tau) target + tau source``; ``tau = 1`` copies exactly."""

    for target_array, source_array in zip(target.parameters(), source.parameters(), strict=True):
        if tau >= 1.0:
            target_array[...] = source_array
        else:
            target_array *= 1.0 - tau
            target_array += tau * source_array


class Adam:
    def __init__(
        self,
        parameters: list[FloatArray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.parameters = parameters
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(array) for array in parameters]
        self.v = [np.zeros_like(array) for array in parameters]

    def step(self, gradients: list[FloatArray]) -> None:
        """Update the parameters in place; a zero learning rate leaves them untouched."""

        if self.lr == 0.0:
            return
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for array, grad, m, v in zip(self.parameters, gradients, self.m, self.v, strict=True):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad**2
            array -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def log_one_minus_tanh_sq(pre: FloatArray) -> FloatArray:
    """``log(1 - tanh(x)^2)`` without cancellation for large ``|x|``."""

    return 2.0 * (math.log(2.0) - pre - np.logaddexp(0.0, -2.0 * pre))


class PolicySample(NamedTuple):
    action: FloatArray
    log_prob: FloatArray
    mean: FloatArray
    log_std: FloatArray
    noise: FloatArray
    cache: list[FloatArray]
    raw_log_std: FloatArray


class GaussianPolicy:
    """Tanh-squashed diagonal Gaussian; the trunk emits the mean and an unconstrained log-std head."""

    def __init__(self, net: Mlp, action_size: int) -> None:
        if net.output_size != 2 * action_size:
            raise ShapeMismatch(f'Policy trunk must emit {2 * action_size} values, got {net.output_size}.')
        self.net = net
        self.action_size = action_size

    @classmethod
    def create(
        cls, observation_size: int, action_size: int, hidden: Sequence[int], rng: np.random.Generator
    ) -> Self:
        return cls(Mlp.create([observation_size, *hidden, 2 * action_size], rng), action_size)

    def _heads(self, output: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        mean = output[:, : self.action_size]
        raw = output[:, self.action_size :]
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)
        return mean, log_std, raw

    def sample(self, observations: npt.ArrayLike, noise: npt.ArrayLike) -> PolicySample:
        output, cache = self.net.forward(observations)
        mean, log_std, raw = self._heads(output)
        eps = np.asarray(noise, dtype=float).reshape(mean.shape)
        pre = mean + np.exp(log_std) * eps
        action = np.tanh(pre)
        log_prob = (-0.5 * eps**2 - log_std - HALF_LOG_TWO_PI - log_one_minus_tanh_sq(pre)).sum(axis=1)
        return PolicySample(action, log_prob, mean, log_std, eps, cache, raw)

    def mean_action(self, observations: npt.ArrayLike) -> FloatArray:
        output, _ = self.net.forward(observations)
        return np.tanh(self._heads(output)[0])

    def backward(
        self, sample: PolicySample, action_gradient: FloatArray, log_prob_gradient: FloatArray
    ) -> list[FloatArray]:
        """Parameter gradients of ``sum(action_gradient * a) + sum(log_prob_gradient * log_prob)`` at fixed noise."""

        std = np.exp(sample.log_std)
        weight = log_prob_gradient[:, np.newaxis]
        # d a / d pre = 1 - a^2 and d log_prob / d pre = 2 a
        d_pre = action_gradient * (1.0 - sample.action**2) + weight * 2.0 * sample.action
        d_mean = d_pre
        d_log_std = d_pre * std * sample.noise - weight
        d_raw = d_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - np.tanh(sample.raw_log_std) ** 2)
        gradients, _ = self.net.backward(sample.cache, np.hstack([d_mean, d_raw]))
        return gradients


class QNetwork:
    """Critic over the concatenated observation and squashed action."""

    def __init__(self, net: Mlp, action_size: int) -> None:
        if net.output_size != 1:
            raise ShapeMismatch(f'Critic must emit one value, got {net.output_size}.')
        self.net = net
        self.action_size = action_size

    @classmethod
    def create(
        cls, observation_size: int, action_size: int, hidden: Sequence[int], rng: np.random.Generator
    ) -> Self:
        return cls(Mlp.create([observation_size + action_size, *hidden, 1], rng), action_size)

    def forward(self, observations: FloatArray, actions: FloatArray) -> tuple[FloatArray, list[FloatArray]]:
        output, cache = self.net.forward(np.hstack([observations, actions]))
        return output[:, 0], cache

    def __call__(self, observations: FloatArray, actions: FloatArray) -> FloatArray:
        return self.forward(observations, actions)[0]

    def backward(self, cache: list[FloatArray], upstream: FloatArray) -> tuple[list[FloatArray], FloatArray]:
        """Parameter gradients and the gradient with respect to the action columns."""

        gradients, input_gradient = self.net.backward(cache, upstream[:, np.newaxis])
        return gradients, input_gradient[:, -self.action_size :]

    def copy(self) -> Self:
        return type(self)(self.net.copy(), self.action_size)
