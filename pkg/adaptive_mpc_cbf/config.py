# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import hashlib
import json
import math
from enum import StrEnum
from pathlib import Path
from typing import Annotated
from typing import Any
from typing import Self

import yaml
from annotated_types import Ge
from annotated_types import Gt
from annotated_types import Lt
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from pydantic import model_validator

from adaptive_mpc_cbf.errors import ParseError
from adaptive_mpc_cbf.theta import THETA_SIZE
from adaptive_mpc_cbf.theta import ClassKSlopes
from adaptive_mpc_cbf.theta import ControllerTheta
from adaptive_mpc_cbf.theta import PresetName

Positive = Annotated[float, Gt(0)]
NonNegative = Annotated[float, Ge(0)]
UnitInterval = Annotated[float, Ge(0), Lt(1)]


class Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')


class ControlBounds(Section):
    u_min: float = -5.0
    u_max: float = 4.0
    phi_min: float = -math.pi / 4
    phi_max: float = math.pi / 4
    v_min: NonNegative = 0.0
    v_max: Positive = 20.0

    @model_validator(mode='after')
    def check_ordering(self) -> Self:
        if not self.u_min < 0 < self.u_max:
            raise ValueError('u_min < 0 < u_max required')
        if not self.phi_min < 0 < self.phi_max:
            raise ValueError('phi_min < 0 < phi_max required')
        if not self.v_min < self.v_max:
            raise ValueError('0 <= v_min < v_max required')
        return self


class VehicleParams(Section):
    l_f: NonNegative = 1.0
    l_r: NonNegative = 1.0
    bounds: ControlBounds = ControlBounds()

    @model_validator(mode='after')
    def check_wheelbase(self) -> Self:
        if self.l_f + self.l_r <= 0:
            raise ValueError('l_f + l_r > 0 required')
        return self

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r


class SequencingPolicy(StrEnum):
    FIFO = 'fifo'
    SDF = 'sdf'


class ScenarioConfig(Section):
    cz_length: Positive = 100.0
    merge_angle_deg: Annotated[float, Gt(0), Lt(90)] = 15.0
    lane_width: Positive = 4.0
    arrival_rate: NonNegative = 0.25
    initial_speed_range: tuple[NonNegative, NonNegative] = (5.0, 15.0)
    v_des: Positive = 15.0
    varphi: Positive = 1.2
    delta: NonNegative = 3.74
    horizon: Annotated[int, Ge(2)] = 5
    dt: Positive = 0.2
    sequencing: SequencingPolicy = SequencingPolicy.FIFO
    seed: Annotated[int, Ge(0), Lt(2**64)] = 0
    max_cavs: Annotated[int, Ge(1)] = 50
    time_cap: Positive = 300.0
    ellipse_a: Positive = 1.8
    ellipse_b: Positive = 0.6
    ellipse_v_floor: Positive = 0.1
    boundary_radius: Positive = 1.0e4

    @model_validator(mode='after')
    def check_speed_range(self) -> Self:
        low, high = self.initial_speed_range
        if low > high:
            raise ValueError('initial_speed_range must be ordered (low <= high)')
        return self


class SolverSettings(Section):
    kkt_tolerance: Positive = 1.0e-6
    feasibility_tolerance: Positive = 1.0e-6
    equality_tolerance: Positive = 1.0e-8
    max_iterations: Annotated[int, Ge(1)] = 50
    merit_penalty_floor: Positive = 10.0
    merit_penalty_factor: Positive = 10.0
    armijo: Annotated[float, Gt(0), Lt(0.5)] = 1.0e-4
    min_step: Positive = 1.0e-10
    finite_difference_step: Positive = 1.0e-6
    qp_tolerance: Positive = 1.0e-9
    qp_max_iterations: Annotated[int, Ge(1)] = 5000


def default_presets() -> dict[PresetName, ControllerTheta]:
    slopes = {
        PresetName.CONSERVATIVE: 0.5,
        PresetName.MODERATELY_CONSERVATIVE: 1.0,
        PresetName.MODERATELY_AGGRESSIVE: 2.0,
        PresetName.AGGRESSIVE: 4.0,
    }
    base = ControllerTheta(objective=(1.0, 2.0, 1.0, 10.0), clf_rate=(1.0, 1.0), slack=(10.0, 10.0))
    return {name: base.with_class_k(ClassKSlopes.uniform(slope)) for name, slope in slopes.items()}


class ThetaBounds(Section):
    objective: tuple[Positive, Positive] = (0.05, 20.0)
    class_k: tuple[Positive, Positive] = (0.1, 4.5)
    clf_rate: tuple[Positive, Positive] = (0.1, 5.0)
    slack: tuple[Positive, Positive] = (0.5, 100.0)

    @model_validator(mode='after')
    def check_ordering(self) -> Self:
        for name in ('objective', 'class_k', 'clf_rate', 'slack'):
            low, high = getattr(self, name)
            if not low < high:
                raise ValueError(f'{name}: 0 < theta_min < theta_max required')
        return self

    def as_vectors(self) -> tuple[list[float], list[float]]:
        groups = [(self.objective, 4), (self.class_k, 8), (self.clf_rate, 2), (self.slack, 2)]
        lower = [bounds[0] for bounds, count in groups for _ in range(count)]
        upper = [bounds[1] for bounds, count in groups for _ in range(count)]
        assert len(lower) == THETA_SIZE
        return lower, upper


class ThetaConfig(Section):
    bounds: ThetaBounds = ThetaBounds()
    presets: dict[PresetName, ControllerTheta] = Field(default_factory=default_presets)

    @model_validator(mode='after')
    def check_presets(self) -> Self:
        missing = set(PresetName) - set(self.presets)
        if missing:
            raise ValueError(f'missing baseline presets: {sorted(missing)}')
        return self


class SacHyperparams(Section):
    lr_actor: NonNegative = 1.0e-5
    lr_critic: NonNegative = 1.0e-4
    lr_temperature: NonNegative = 3.0e-4
    gamma: UnitInterval = 0.99
    tau: Positive = 0.005
    batch_size: Annotated[int, Ge(1)] = 256
    replay_capacity: Annotated[int, Ge(1)] = 100_000
    temperature: Positive = 0.2
    auto_temperature: bool = False
    total_steps: Annotated[int, Ge(0)] = 300_000
    warmup_steps: Annotated[int, Ge(0)] = 1_000
    update_every: Annotated[int, Ge(1)] = 1
    checkpoint_every: Annotated[int, Ge(1)] = 10_000
    hidden_sizes: tuple[int, ...] = (512, 512)
    episode_time_cap: Positive = 30.0

    @model_validator(mode='after')
    def check_tau(self) -> Self:
        if not 0 < self.tau <= 1:
            raise ValueError('tau must lie in (0, 1]')
        if any(size < 1 for size in self.hidden_sizes):
            raise ValueError('hidden layer sizes must be positive')
        return self

    def desk_scale(self) -> Self:
        return self.model_copy(update={'hidden_sizes': (64, 64), 'total_steps': 50_000})


class RewardWeights(Section):
    betas: tuple[float, float, float, float, float] = (0.25, 0.25, 0.25, 0.1, 0.15)
    infeasibility_penalty: Positive = 1.0e3

    @model_validator(mode='after')
    def check_betas(self) -> Self:
        if any(not 0 <= beta <= 1 for beta in self.betas):
            raise ValueError('every beta must lie in [0, 1]')
        return self


class FuelModelParams(Section):
    w0: float = 0.1569
    w1: float = 2.45e-2
    w2: float = -7.415e-4
    w3: float = 5.975e-5
    r0: float = 0.07224
    r1: float = 9.681e-2
    r2: float = 1.075e-3


class ObservationRanges(Section):
    x: tuple[float, float] = (-100.0, 0.0)
    y: tuple[float, float] = (-30.0, 5.0)
    psi: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    v: tuple[float, float] = (0.0, 20.0)
    u: tuple[float, float] = (-5.0, 4.0)
    phi: tuple[float, float] = (-math.pi / 4, math.pi / 4)

    @model_validator(mode='after')
    def check_ordering(self) -> Self:
        for name in ('x', 'y', 'psi', 'v', 'u', 'phi'):
            low, high = getattr(self, name)
            if not low < high:
                raise ValueError(f'observation range {name} must satisfy low < high')
        return self


class AppConfig(Section):
    vehicle: VehicleParams = VehicleParams()
    scenario: ScenarioConfig = ScenarioConfig()
    solver: SolverSettings = SolverSettings()
    theta: ThetaConfig = ThetaConfig()
    sac: SacHyperparams = SacHyperparams()
    reward: RewardWeights = RewardWeights()
    fuel: FuelModelParams = FuelModelParams()
    observation: ObservationRanges = ObservationRanges()

    @model_validator(mode='after')
    def check_speed_range_within_limits(self) -> Self:
        low, high = self.scenario.initial_speed_range
        bounds = self.vehicle.bounds
        if low < bounds.v_min or high > bounds.v_max:
            raise ValueError('initial_speed_range must lie within [v_min, v_max]')
        if not bounds.v_min <= self.scenario.v_des <= bounds.v_max:
            raise ValueError('v_des must lie within [v_min, v_max]')
        return self

    def with_scenario(self, **changes: Any) -> Self:
        data = self.model_dump()
        data['scenario'] = {**data['scenario'], **changes}
        return self.model_validate(data)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode()).hexdigest()


def parse_config(text: str) -> AppConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        line = mark.line + 1 if mark is not None else None
        column = mark.column + 1 if mark is not None else None
        raise ParseError(f'Invalid config: {e.problem}', line, column) from e

    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ParseError('Config root must be a mapping', 1, 1)

    return AppConfig.model_validate(raw)


def load_config(path: Path) -> AppConfig:
    return parse_config(path.read_text())


def dump_config(config: AppConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode='json'), sort_keys=False)


def save_config(config: AppConfig, path: Path) -> Path:
    path.write_text(dump_config(config))
    return path
