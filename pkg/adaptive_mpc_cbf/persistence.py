# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""On-disk artifacts: the run manifest, versioned policy checkpoints, metrics and table files."""

import json
import logging
from collections.abc import Mapping
from collections.abc import Sequence
from pathlib import Path
from typing import Self

import numpy as np
import pandas as pd
from pydantic import BaseModel
from pydantic import ValidationError

from adaptive_mpc_cbf import __version__
from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.config import ObservationRanges
from adaptive_mpc_cbf.config import ThetaBounds
from adaptive_mpc_cbf.errors import CheckpointVersionError
from adaptive_mpc_cbf.errors import ParseError
from adaptive_mpc_cbf.metrics import MetricsReport
from adaptive_mpc_cbf.metrics import reports_frame
from adaptive_mpc_cbf.rl.networks import GaussianPolicy
from adaptive_mpc_cbf.rl.networks import Mlp

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class OutputLayout(BaseModel):
    out_dir: Path

    @property
    def manifest(self) -> Path:
        return self.out_dir / 'manifest.json'

    @property
    def metrics_json(self) -> Path:
        return self.out_dir / 'metrics.json'

    @property
    def metrics_csv(self) -> Path:
        return self.out_dir / 'metrics.csv'

    @property
    def learning_curve(self) -> Path:
        return self.out_dir / 'learning_curve.csv'

    @property
    def policy(self) -> Path:
        return self.out_dir / 'policy.json'

    @property
    def table_txt(self) -> Path:
        return self.out_dir / 'table.txt'

    @property
    def table_csv(self) -> Path:
        return self.out_dir / 'table.csv'

    def rollout(self, seed: int) -> Path:
        return self.out_dir / f'rollout-seed{seed}.csv'

    def relative(self, path: Path) -> str:
        return path.relative_to(self.out_dir).as_posix()


class RunManifest(BaseModel):
    """Everything needed to reproduce a command; lists every file the command writes."""

    command: str
    argv: list[str]
    version: str = __version__
    config_hash: str
    config: AppConfig
    seed: int
    seeds: list[int] = []
    theta_sources: list[str] = []
    outputs: list[str] = []

    def write(self, layout: OutputLayout) -> Path:
        layout.out_dir.mkdir(parents=True, exist_ok=True)
        layout.manifest.write_text(self.model_dump_json(indent=2) + '\n')
        logger.info(f'Wrote run manifest to {layout.manifest}.')
        return layout.manifest

    @classmethod
    def read(cls, path: Path) -> Self:
        return cls.model_validate_json(path.read_text())


class PolicyCheckpoint(BaseModel):
    """Actor weights in declared order (``W1, b1, W2, b2, ...``) together with the ranges they were trained on."""

    version: int = CHECKPOINT_VERSION
    layer_sizes: list[int]
    action_size: int
    weights: list[list[list[float]]]
    biases: list[list[float]]
    observation: ObservationRanges
    theta_bounds: ThetaBounds
    config_hash: str
    steps: int = 0

    @classmethod
    def from_policy(cls, policy: GaussianPolicy, config: AppConfig, steps: int = 0) -> Self:
        return cls(
            layer_sizes=list(policy.net.sizes),
            action_size=policy.action_size,
            weights=[weight.tolist() for weight in policy.net.weights],
            biases=[bias.tolist() for bias in policy.net.biases],
            observation=config.observation,
            theta_bounds=config.theta.bounds,
            config_hash=config.config_hash,
            steps=steps,
        )

    def to_policy(self) -> GaussianPolicy:
        net = Mlp(
            weights=[np.array(weight, dtype=float) for weight in self.weights],
            biases=[np.array(bias, dtype=float) for bias in self.biases],
        )
        if list(net.sizes) != self.layer_sizes:
            raise ParseError(f'Checkpoint weights {net.sizes} do not match the declared layers {self.layer_sizes}.')
        return GaussianPolicy(net, self.action_size)

    def deployment_config(self, config: AppConfig) -> AppConfig:
        """``config`` with the observation ranges and theta bounds the policy was trained with."""

        if self.config_hash != config.config_hash:
            logger.info('Policy was trained under a different configuration; using its recorded ranges.')
        data = config.model_dump()
        data['observation'] = self.observation.model_dump()
        data['theta'] = {**data['theta'], 'bounds': self.theta_bounds.model_dump()}
        return AppConfig.model_validate(data)


def save_checkpoint(checkpoint: PolicyCheckpoint, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(checkpoint.model_dump_json() + '\n')
    return path


def load_checkpoint(path: Path) -> PolicyCheckpoint:
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f'Checkpoint {path} is not valid JSON: {e.msg}', e.lineno, e.colno) from e

    version = payload.get('version') if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f'Checkpoint {path} has version {version}, expected {CHECKPOINT_VERSION}.')
    try:
        return PolicyCheckpoint.model_validate(payload)
    except ValidationError as e:
        raise ParseError(f'Checkpoint {path} is malformed: {e.error_count()} invalid fields') from e


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def write_metrics(reports: Mapping[str, Sequence[MetricsReport]], seeds: Sequence[int], layout: OutputLayout) -> None:
    """Per-seed reports keyed by theta source (JSON) and the long per-seed frame (CSV)."""

    payload = {
        label: {str(seed): report.model_dump(mode='json') for seed, report in zip(seeds, column, strict=True)}
        for label, column in reports.items()
    }
    layout.metrics_json.write_text(json.dumps(payload, indent=2) + '\n')
    write_csv(reports_frame(reports, seeds), layout.metrics_csv)


def read_metrics_frame(path: Path, label: str = 'evaluated') -> pd.DataFrame:
    frame = pd.read_csv(path)
    if 'theta' not in frame.columns:
        frame.insert(0, 'theta', label)
    return frame
