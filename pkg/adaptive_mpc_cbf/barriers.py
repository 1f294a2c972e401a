# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Barrier families of the merging scenario, their Lie derivatives and compiled HOCBF / CLF rows.

Every barrier is oriented so that ``b >= 0`` is safe. Rows are affine in the control ``(u, phi)``:
an HOCBF row encodes ``grad_u @ control + constant >= 0`` and a CLF row ``grad_u @ control + constant <= e``.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import NamedTuple
from typing import Self

import numpy as np
import numpy.typing as npt

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.config import VehicleParams
from adaptive_mpc_cbf.dynamics import drift
from adaptive_mpc_cbf.errors import DegenerateState
from adaptive_mpc_cbf.geometry import BoundaryCircle
from adaptive_mpc_cbf.geometry import Route


class BarrierKind(StrEnum):
    REAR_END_ELLIPSE = 'rear_end_ellipse'
    SAFE_MERGING = 'safe_merging'
    ROAD_LEFT = 'road_left'
    ROAD_RIGHT = 'road_right'
    SPEED_MAX = 'speed_max'
    SPEED_MIN = 'speed_min'


TWO_VEHICLE_KINDS = frozenset({BarrierKind.REAR_END_ELLIPSE, BarrierKind.SAFE_MERGING})
ROAD_KINDS = frozenset({BarrierKind.ROAD_LEFT, BarrierKind.ROAD_RIGHT})


@dataclass(frozen=True, slots=True)
class SafetyEllipseParams:
    a: float
    b: float
    v_floor: float = 0.1
    frame_heading: float = 0.0

    def __post_init__(self) -> None:
        if self.a <= 0 or self.b <= 0 or self.v_floor <= 0:
            raise ValueError('Ellipse weights and speed floor must be positive.')


@dataclass(frozen=True, slots=True)
class MergingParams:
    varphi: float
    delta: float
    ego_route: Route
    other_route: Route

    @property
    def gain(self) -> float:
        """Slope of the progress map: reaction time reached exactly at the merging point."""

        return self.varphi / self.ego_route.length


@dataclass(frozen=True, slots=True)
class RoadBoundaryParams:
    circle: BoundaryCircle

    def __post_init__(self) -> None:
        if self.circle.radius <= 0:
            raise ValueError('Boundary radius must be positive.')


@dataclass(frozen=True, slots=True)
class SpeedLimitParams:
    limit: float


BarrierParams = SafetyEllipseParams | MergingParams | RoadBoundaryParams | SpeedLimitParams


@dataclass(frozen=True, slots=True)
class BarrierSpec:
    kind: BarrierKind
    params: BarrierParams
    scale: float = 1.0

    @property
    def relative_degree(self) -> int:
        return relative_degree(self)

    @property
    def needs_other(self) -> bool:
        return self.kind in TWO_VEHICLE_KINDS

    @classmethod
    def rear_end_ellipse(cls, params: SafetyEllipseParams) -> Self:
        return cls(BarrierKind.REAR_END_ELLIPSE, params)

    @classmethod
    def safe_merging(cls, params: MergingParams) -> Self:
        return cls(BarrierKind.SAFE_MERGING, params)

    @classmethod
    def road(cls, kind: BarrierKind, circle: BoundaryCircle) -> Self:
        if kind not in ROAD_KINDS:
            raise ValueError(f'{kind} is not a road boundary.')
        return cls(kind, RoadBoundaryParams(circle), scale=1.0 / (2.0 * circle.radius))

    @classmethod
    def speed_max(cls, limit: float) -> Self:
        return cls(BarrierKind.SPEED_MAX, SpeedLimitParams(limit))

    @classmethod
    def speed_min(cls, limit: float) -> Self:
        return cls(BarrierKind.SPEED_MIN, SpeedLimitParams(limit))


class LieDerivatives(NamedTuple):
    lf: float
    lg: FloatArray
    lf2: float | None = None
    lglf: FloatArray | None = None


@dataclass(frozen=True, slots=True)
class HocbfRow:
    grad_u: FloatArray
    constant: float
    lf_m: float
    lglf: FloatArray
    s_term: float
    alpha_term: float

    def residual(self, control: npt.ArrayLike) -> float:
        return float(self.grad_u @ np.asarray(control, dtype=float) + self.constant)


class ClfKind(StrEnum):
    SPEED_TRACKING = 'speed_tracking'
    LANE_KEEPING = 'lane_keeping'


@dataclass(frozen=True, slots=True)
class ClfSpec:
    kind: ClfKind
    v_des: float = 0.0
    route: Route | None = None
    slack_index: int = 0

    @classmethod
    def speed_tracking(cls, v_des: float, slack_index: int = 0) -> Self:
        return cls(ClfKind.SPEED_TRACKING, v_des=v_des, slack_index=slack_index)

    @classmethod
    def lane_keeping(cls, route: Route, slack_index: int = 1) -> Self:
        return cls(ClfKind.LANE_KEEPING, route=route, slack_index=slack_index)

    def value(self, ego: npt.ArrayLike) -> float:
        x, y, _, v = np.asarray(ego, dtype=float)
        if self.kind is ClfKind.SPEED_TRACKING:
            return float((v - self.v_des) ** 2)
        assert self.route is not None
        return self.route.lateral_offset(x, y) ** 2


@dataclass(frozen=True, slots=True)
class ClfRow:
    grad_u: FloatArray
    constant: float
    slack_index: int

    def residual(self, control: npt.ArrayLike) -> float:
        """Value the slack has to cover; the row holds when it is <= e."""

        return float(self.grad_u @ np.asarray(control, dtype=float) + self.constant)


def relative_degree(spec: BarrierSpec) -> int:
    return 2 if spec.kind in ROAD_KINDS else 1


def _require_other(spec: BarrierSpec, other: npt.ArrayLike | None) -> FloatArray:
    if other is None:
        raise ValueError(f'{spec.kind} needs the state of the other vehicle.')
    return np.asarray(other, dtype=float)


def _ellipse_speed(v: float, params: SafetyEllipseParams) -> float:
    if not math.isfinite(v) or v < 0:
        raise DegenerateState(f'Ellipse barrier is undefined at speed {v}.')
    return max(v, params.v_floor)


def _ellipse_terms(ego: FloatArray, other: FloatArray, params: SafetyEllipseParams) -> tuple[float, float, float]:
    cos_h, sin_h = math.cos(params.frame_heading), math.sin(params.frame_heading)
    dx, dy = other[0] - ego[0], other[1] - ego[1]
    along = cos_h * dx + sin_h * dy
    across = -sin_h * dx + cos_h * dy
    return along, across, _ellipse_speed(float(ego[3]), params)


def eval_barrier(spec: BarrierSpec, ego: npt.ArrayLike, other: npt.ArrayLike | None = None) -> float:
    state = np.asarray(ego, dtype=float)
    x, y, _, v = state

    match spec.params:
        case SafetyEllipseParams() as params:
            along, across, speed = _ellipse_terms(state, _require_other(spec, other), params)
            return float(along**2 / (params.a * speed) ** 2 + across**2 / (params.b * speed) ** 2 - 1.0)
        case MergingParams() as params:
            neighbour = _require_other(spec, other)
            s_ego = params.ego_route.progress(x, y)
            s_other = params.other_route.progress(neighbour[0], neighbour[1])
            return float(s_other - s_ego - params.gain * s_ego * v - params.delta)
        case RoadBoundaryParams(circle=circle):
            outside = (x - circle.center[0]) ** 2 + (y - circle.center[1]) ** 2 - circle.radius**2
            return float(outside if spec.kind is BarrierKind.ROAD_LEFT else -outside)
        case SpeedLimitParams(limit=limit):
            return float(limit - v if spec.kind is BarrierKind.SPEED_MAX else v - limit)
    raise TypeError(f'Unsupported barrier parameters {spec.params!r}')


def _ellipse_lie(ego: FloatArray, other: FloatArray, params: SafetyEllipseParams) -> LieDerivatives:
    along, across, speed = _ellipse_terms(ego, other, params)
    cos_h, sin_h = math.cos(params.frame_heading), math.sin(params.frame_heading)
    weight_along = 2 * along / (params.a * speed) ** 2
    weight_across = 2 * across / (params.b * speed) ** 2
    grad_other = weight_along * np.array([cos_h, sin_h]) + weight_across * np.array([-sin_h, cos_h])

    relative_velocity = drift(other)[:2] - drift(ego)[:2]
    lf = float(grad_other @ relative_velocity)

    if ego[3] > params.v_floor:
        d_speed = -2.0 * (along**2 / params.a**2 + across**2 / params.b**2) / speed**3
    else:
        d_speed = 0.0
    return LieDerivatives(lf=lf, lg=np.array([d_speed, 0.0]))


def _merging_lie(ego: FloatArray, other: FloatArray, params: MergingParams) -> LieDerivatives:
    gain = params.gain
    s_ego = params.ego_route.progress(ego[0], ego[1])
    ego_rate = float(params.ego_route.tangent @ drift(ego)[:2])
    other_rate = float(params.other_route.tangent @ drift(other)[:2])
    lf = other_rate - (1.0 + gain * ego[3]) * ego_rate
    return LieDerivatives(lf=lf, lg=np.array([-gain * s_ego, 0.0]))


def _road_lie(spec: BarrierSpec, ego: FloatArray, circle: BoundaryCircle, params: VehicleParams) -> LieDerivatives:
    x, y, psi, v = ego
    dx, dy = x - circle.center[0], y - circle.center[1]
    cos_psi, sin_psi = math.cos(psi), math.sin(psi)
    sign = 1.0 if spec.kind is BarrierKind.ROAD_LEFT else -1.0

    lf = 2.0 * v * (dx * cos_psi + dy * sin_psi)
    lf2 = 2.0 * v**2
    lglf = np.array(
        [
            2.0 * (dx * cos_psi + dy * sin_psi),
            2.0 * v**2 * (-dx * sin_psi + dy * cos_psi) / params.wheelbase,
        ]
    )
    return LieDerivatives(lf=sign * lf, lg=np.zeros(2), lf2=sign * lf2, lglf=sign * lglf)


def lie_derivatives(
    spec: BarrierSpec, ego: npt.ArrayLike, other: npt.ArrayLike | None, params: VehicleParams
) -> LieDerivatives:
    """Analytic Lie derivatives along the bicycle model; second order is filled for degree-2 barriers.

    Two-vehicle barriers include the other vehicle's zero-input drift in ``lf``.
    """

    state = np.asarray(ego, dtype=float)
    match spec.params:
        case SafetyEllipseParams() as ellipse:
            return _ellipse_lie(state, _require_other(spec, other), ellipse)
        case MergingParams() as merging:
            return _merging_lie(state, _require_other(spec, other), merging)
        case RoadBoundaryParams(circle=circle):
            return _road_lie(spec, state, circle, params)
        case SpeedLimitParams():
            sign = -1.0 if spec.kind is BarrierKind.SPEED_MAX else 1.0
            return LieDerivatives(lf=0.0, lg=np.array([sign, 0.0]))
    raise TypeError(f'Unsupported barrier parameters {spec.params!r}')


def build_hocbf_row(
    spec: BarrierSpec,
    ego: npt.ArrayLike,
    other: npt.ArrayLike | None,
    theta_c: Sequence[float],
    params: VehicleParams,
) -> HocbfRow:
    """Compile the parameterized HOCBF condition with linear class-K functions into an affine control row.

    Rows are returned unscaled; ``spec.scale`` is applied where rows are stacked into a program.
    """

    degree = relative_degree(spec)
    if len(theta_c) != degree:
        raise ValueError(f'{spec.kind} has relative degree {degree} but got {len(theta_c)} class-K parameters.')
    if any(theta <= 0 for theta in theta_c):
        raise ValueError('Class-K parameters must be positive.')

    value = eval_barrier(spec, ego, other)
    lie = lie_derivatives(spec, ego, other, params)

    if degree == 1:
        alpha_term = theta_c[0] * value
        return HocbfRow(
            grad_u=lie.lg,
            constant=lie.lf + alpha_term,
            lf_m=lie.lf,
            lglf=lie.lg,
            s_term=0.0,
            alpha_term=alpha_term,
        )

    assert lie.lf2 is not None and lie.lglf is not None
    zeta = lie.lf + theta_c[0] * value
    s_term = theta_c[0] * lie.lf
    alpha_term = theta_c[1] * zeta
    return HocbfRow(
        grad_u=lie.lglf,
        constant=lie.lf2 + s_term + alpha_term,
        lf_m=lie.lf2,
        lglf=lie.lglf,
        s_term=s_term,
        alpha_term=alpha_term,
    )


def build_clf_row(clf: ClfSpec, ego: npt.ArrayLike, theta: float, params: VehicleParams) -> ClfRow:
    """Speed tracking uses the first-order decrease condition.

    Lane keeping has relative degree two, so it uses the critically damped form
    ``V'' + 2 theta V' + theta^2 V <= e``.
    """

    if theta <= 0:
        raise ValueError('CLF rate must be positive.')

    x, y, psi, v = np.asarray(ego, dtype=float)
    if clf.kind is ClfKind.SPEED_TRACKING:
        error = v - clf.v_des
        return ClfRow(grad_u=np.array([2.0 * error, 0.0]), constant=theta * error**2, slack_index=clf.slack_index)

    assert clf.route is not None
    offset = clf.route.lateral_offset(x, y)
    misalignment = psi - clf.route.heading
    lateral_rate = v * math.sin(misalignment)
    grad_u = np.array(
        [
            2.0 * offset * math.sin(misalignment),
            2.0 * offset * v**2 * math.cos(misalignment) / params.wheelbase,
        ]
    )
    constant = 2.0 * lateral_rate**2 + 4.0 * theta * offset * lateral_rate + theta**2 * offset**2
    return ClfRow(grad_u=grad_u, constant=constant, slack_index=clf.slack_index)
