# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Kinematic bicycle model in control-affine form, RK4 integration and RK4 sensitivities.

State vectors are ordered ``(x, y, psi, v)`` and control vectors ``(u, phi)``. Inputs are held constant
over a step (zero-order hold); heading is never wrapped.
"""

from typing import NamedTuple
from typing import Self

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.config import VehicleParams

STATE_SIZE = 4
CONTROL_SIZE = 2


class VehicleState(NamedTuple):
    x: float
    y: float
    psi: float
    v: float

    def to_array(self) -> FloatArray:
        return np.array(self, dtype=float)

    @classmethod
    def from_array(cls, values: npt.ArrayLike) -> Self:
        x, y, psi, v = (float(value) for value in np.asarray(values, dtype=float))
        return cls(x, y, psi, v)


class ControlInput(NamedTuple):
    u: float
    phi: float

    def to_array(self) -> FloatArray:
        return np.array(self, dtype=float)

    @classmethod
    def from_array(cls, values: npt.ArrayLike) -> Self:
        u, phi = (float(value) for value in np.asarray(values, dtype=float))
        return cls(u, phi)

    def clamped(self, params: VehicleParams) -> Self:
        bounds = params.bounds
        return type(self)(
            float(np.clip(self.u, bounds.u_min, bounds.u_max)),
            float(np.clip(self.phi, bounds.phi_min, bounds.phi_max)),
        )


def drift(state: npt.ArrayLike) -> FloatArray:
    """f(x): the zero-input part of the dynamics."""

    _, _, psi, v = np.asarray(state, dtype=float)
    return np.array([v * np.cos(psi), v * np.sin(psi), 0.0, 0.0])


def input_matrix(state: npt.ArrayLike, params: VehicleParams) -> FloatArray:
    """g(x): columns multiply acceleration and steering respectively."""

    v = float(np.asarray(state, dtype=float)[3])
    return np.array([[0.0, 0.0], [0.0, 0.0], [0.0, v / params.wheelbase], [1.0, 0.0]])


def eval_derivative(state: npt.ArrayLike, control: npt.ArrayLike, params: VehicleParams) -> FloatArray:
    u, phi = np.asarray(control, dtype=float)
    _, _, psi, v = np.asarray(state, dtype=float)
    return np.array([v * np.cos(psi), v * np.sin(psi), phi * v / params.wheelbase, u])


def _state_jacobian(state: FloatArray, control: FloatArray, params: VehicleParams) -> FloatArray:
    _, _, psi, v = state
    phi = control[1]
    cos_psi, sin_psi = np.cos(psi), np.sin(psi)
    return np.array(
        [
            [0.0, 0.0, -v * sin_psi, cos_psi],
            [0.0, 0.0, v * cos_psi, sin_psi],
            [0.0, 0.0, 0.0, phi / params.wheelbase],
            [0.0, 0.0, 0.0, 0.0],
        ]
    )


def step_rk4(state: npt.ArrayLike, control: npt.ArrayLike, params: VehicleParams, dt: float) -> FloatArray:
    x = np.asarray(state, dtype=float)
    w = np.asarray(control, dtype=float)

    k1 = eval_derivative(x, w, params)
    k2 = eval_derivative(x + 0.5 * dt * k1, w, params)
    k3 = eval_derivative(x + 0.5 * dt * k2, w, params)
    k4 = eval_derivative(x + dt * k3, w, params)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout(state: npt.ArrayLike, controls: npt.ArrayLike, params: VehicleParams, dt: float) -> FloatArray:
    """States x_0..x_N for the control sequence u_0..u_{N-1}; row 0 is the given state."""

    inputs = np.atleast_2d(np.asarray(controls, dtype=float))
    if inputs.shape[0] < 1 or inputs.shape[1] != CONTROL_SIZE:
        raise ValueError(f'Expected an (N, {CONTROL_SIZE}) control sequence with N >= 1, got {inputs.shape}.')

    states = np.empty((inputs.shape[0] + 1, STATE_SIZE))
    states[0] = np.asarray(state, dtype=float)
    for h, control in enumerate(inputs):
        states[h + 1] = step_rk4(states[h], control, params, dt)
    return states


def jacobians(
    state: npt.ArrayLike, control: npt.ArrayLike, params: VehicleParams, dt: float
) -> tuple[FloatArray, FloatArray]:
    """Exact derivatives of one RK4 step, propagated analytically through the four stages.

    Returns ``A = d step / d state`` (4x4) and ``B = d step / d control`` (4x2).
    """

    x = np.asarray(state, dtype=float)
    w = np.asarray(control, dtype=float)
    identity = np.eye(STATE_SIZE)

    stage_state = x
    stage_dx = identity
    stage_du = np.zeros((STATE_SIZE, CONTROL_SIZE))
    weights = (1.0, 2.0, 2.0, 1.0)
    offsets = (0.5, 0.5, 1.0)

    sum_k = np.zeros(STATE_SIZE)
    sum_dx = np.zeros((STATE_SIZE, STATE_SIZE))
    sum_du = np.zeros((STATE_SIZE, CONTROL_SIZE))
    for stage, weight in enumerate(weights):
        fx = _state_jacobian(stage_state, w, params)
        k = eval_derivative(stage_state, w, params)
        k_dx = fx @ stage_dx
        k_du = fx @ stage_du + input_matrix(stage_state, params)

        sum_k += weight * k
        sum_dx += weight * k_dx
        sum_du += weight * k_du

        if stage < len(offsets):
            offset = offsets[stage] * dt
            stage_state = x + offset * k
            stage_dx = identity + offset * k_dx
            stage_du = offset * k_du

    a = identity + dt / 6.0 * sum_dx
    b = dt / 6.0 * sum_du
    return a, b
