# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import math
from dataclasses import dataclass
from enum import StrEnum
from typing import Self

import numpy as np

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.config import ScenarioConfig
from adaptive_mpc_cbf.errors import GeometryError


class Lane(StrEnum):
    MAIN = 'main'
    RAMP = 'ramp'

    @property
    def other(self) -> 'Lane':
        return Lane.RAMP if self is Lane.MAIN else Lane.MAIN


@dataclass(frozen=True, slots=True)
class Route:
    """Straight single-lane road from its control-zone entry to the merging point."""

    start: tuple[float, float]
    heading: float
    length: float

    @property
    def tangent(self) -> FloatArray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    @property
    def normal(self) -> FloatArray:
        """Unit vector pointing to the left of the direction of travel."""

        return np.array([-math.sin(self.heading), math.cos(self.heading)])

    def position(self, progress: float) -> FloatArray:
        return np.asarray(self.start) + progress * self.tangent

    def progress(self, x: float, y: float) -> float:
        """Arc-length progress from the control-zone entry, projected onto the centerline."""

        return float((np.array([x, y]) - np.asarray(self.start)) @ self.tangent)

    def lateral_offset(self, x: float, y: float) -> float:
        """Signed distance to the centerline, positive to the left."""

        return float((np.array([x, y]) - np.asarray(self.start)) @ self.normal)

    def distance_to_merge(self, x: float, y: float) -> float:
        return self.length - self.progress(x, y)

    def check_inside(self, x: float, y: float, tolerance: float = 1e-9) -> float:
        progress = self.progress(x, y)
        if not -tolerance <= progress <= self.length + tolerance:
            raise GeometryError(f'Position ({x:.3f}, {y:.3f}) is outside the control zone (progress {progress:.3f}).')
        return progress


@dataclass(frozen=True, slots=True)
class BoundaryCircle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True, slots=True)
class MergeGeometry:
    """Two single-lane roads meeting at the merging point, placed at the origin."""

    routes: dict[Lane, Route]
    lane_width: float
    boundary_radius: float

    @classmethod
    def from_scenario(cls, scenario: ScenarioConfig) -> Self:
        length = scenario.cz_length
        angle = math.radians(scenario.merge_angle_deg)
        routes = {
            Lane.MAIN: Route(start=(-length, 0.0), heading=0.0, length=length),
            Lane.RAMP: Route(
                start=(-length * math.cos(angle), -length * math.sin(angle)), heading=angle, length=length
            ),
        }
        return cls(routes=routes, lane_width=scenario.lane_width, boundary_radius=scenario.boundary_radius)

    @property
    def length(self) -> float:
        return self.routes[Lane.MAIN].length

    def route(self, lane: Lane) -> Route:
        return self.routes[lane]

    def boundaries(self, lane: Lane) -> tuple[BoundaryCircle, BoundaryCircle]:
        """Large circles whose arcs approximate the left and right lane edges of a straight road.

        The left edge keeps the vehicle outside its circle and the right edge keeps it inside.
        """

        route = self.routes[lane]
        radius = self.boundary_radius
        half_width = self.lane_width / 2
        middle = route.position(route.length / 2)
        left = middle + (half_width + radius) * route.normal
        right = middle + (radius - half_width) * route.normal
        return (
            BoundaryCircle(center=(float(left[0]), float(left[1])), radius=radius),
            BoundaryCircle(center=(float(right[0]), float(right[1])), radius=radius),
        )

    def merge_point(self) -> FloatArray:
        return np.zeros(2)

