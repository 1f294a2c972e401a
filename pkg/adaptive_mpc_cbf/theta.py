# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

from enum import StrEnum
from typing import Annotated
from typing import Self

import numpy as np
from annotated_types import Gt
from annotated_types import Len
from pydantic import BaseModel
from pydantic import ConfigDict

from adaptive_mpc_cbf.arrays import FloatArray

Positive = Annotated[float, Gt(0)]
PositivePair = Annotated[tuple[Positive, Positive], Len(min_length=2, max_length=2)]
PositiveQuad = Annotated[tuple[Positive, Positive, Positive, Positive], Len(min_length=4, max_length=4)]

THETA_SIZE = 16

THETA_COMPONENTS = (
    'objective.speed',
    'objective.lane',
    'objective.accel',
    'objective.steer',
    'class_k.ellipse',
    'class_k.merging',
    'class_k.road_left_1',
    'class_k.road_left_2',
    'class_k.road_right_1',
    'class_k.road_right_2',
    'class_k.speed_max',
    'class_k.speed_min',
    'clf_rate.speed',
    'clf_rate.lane',
    'slack.speed',
    'slack.lane',
)


class PresetName(StrEnum):
    CONSERVATIVE = 'conservative'
    MODERATELY_CONSERVATIVE = 'moderately_conservative'
    MODERATELY_AGGRESSIVE = 'moderately_aggressive'
    AGGRESSIVE = 'aggressive'

    @property
    def title(self) -> str:
        return self.value.replace('_', ' ').capitalize()


class ClassKSlopes(BaseModel):
    """Linear class-K slopes; degree-2 barriers carry one slope per order."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    ellipse: Positive = 1.0
    merging: Positive = 1.0
    road_left: PositivePair = (1.0, 1.0)
    road_right: PositivePair = (1.0, 1.0)
    speed_max: Positive = 1.0
    speed_min: Positive = 1.0

    def to_list(self) -> list[float]:
        return [
            self.ellipse,
            self.merging,
            *self.road_left,
            *self.road_right,
            self.speed_max,
            self.speed_min,
        ]

    @classmethod
    def uniform(cls, slope: float) -> Self:
        return cls(
            ellipse=slope,
            merging=slope,
            road_left=(slope, slope),
            road_right=(slope, slope),
            speed_max=slope,
            speed_min=slope,
        )


class ControllerTheta(BaseModel):
    """Learnable parameters of the MPC-CBF problem, held constant over one horizon."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    objective: PositiveQuad = (1.0, 1.0, 1.0, 1.0)
    class_k: ClassKSlopes = ClassKSlopes()
    clf_rate: PositivePair = (1.0, 1.0)
    slack: PositivePair = (10.0, 10.0)

    def to_vector(self) -> FloatArray:
        return np.array(
            [*self.objective, *self.class_k.to_list(), *self.clf_rate, *self.slack],
            dtype=float,
        )

    @classmethod
    def from_vector(cls, vector: FloatArray) -> Self:
        values = [float(value) for value in np.asarray(vector, dtype=float).ravel()]
        if len(values) != THETA_SIZE:
            raise ValueError(f'Expected {THETA_SIZE} parameters, got {len(values)}.')

        class_k = ClassKSlopes(
            ellipse=values[4],
            merging=values[5],
            road_left=(values[6], values[7]),
            road_right=(values[8], values[9]),
            speed_max=values[10],
            speed_min=values[11],
        )
        return cls(
            objective=(values[0], values[1], values[2], values[3]),
            class_k=class_k,
            clf_rate=(values[12], values[13]),
            slack=(values[14], values[15]),
        )

    def with_class_k(self, class_k: ClassKSlopes) -> Self:
        return self.model_copy(update={'class_k': class_k})
