# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

import logging
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel

from adaptive_mpc_cbf.config import FuelModelParams
from adaptive_mpc_cbf.errors import IncompleteLog

logger = logging.getLogger(__name__)

LOG_COLUMNS = (
    'step',
    'time',
    'cav_id',
    'lane',
    'x',
    'y',
    'psi',
    'v',
    'u',
    'phi',
    'feasible',
    'b_ellipse',
    'b_merge',
    'b_road_l',
    'b_road_r',
    'fuel_rate',
)
CAV_COLUMNS = ('cav_id', 'lane', 'arrival_time', 'exit_time')
TABLE_ROWS = {
    'Ave. travel time': 'avg_travel_time',
    'Ave. ½u²': 'avg_half_u_sq',
    'Ave. fuel consumption': 'avg_fuel',
    'Total infeasibility': 'total_infeasible_count',
}


def fuel_rate(v: float, u: float, params: FuelModelParams) -> float:
    """Cruise polynomial plus an acceleration term; braking burns nothing extra and the rate never goes negative."""

    cruise = params.w0 + params.w1 * v + params.w2 * v**2 + params.w3 * v**3
    accel = max(u, 0.0) * (params.r0 + params.r1 * v + params.r2 * v**2)
    return max(0.0, cruise + accel)


@dataclass
class RolloutLog:
    """Per-step rows of one episode plus the spawn/exit record of every CAV."""

    rows: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=list(LOG_COLUMNS)))
    cavs: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=list(CAV_COLUMNS)))
    safety_violations: list[dict[str, float | int | str]] = field(default_factory=list)

    def to_csv(self, path: Path) -> Path:
        self.rows.to_csv(path, index=False, columns=list(LOG_COLUMNS), lineterminator='\n')
        return path


class CavMetrics(BaseModel):
    cav_id: int
    lane: str
    arrival_time: float
    exit_time: float | None
    travel_time: float | None
    half_u_sq: float
    fuel: float
    steps: int
    infeasible_count: int

    @property
    def completed(self) -> bool:
        return self.exit_time is not None


class MetricsReport(BaseModel):
    avg_travel_time: float = 0.0
    avg_half_u_sq: float = 0.0
    avg_fuel: float = 0.0
    total_infeasible_count: int = 0
    completed: int = 0
    incomplete_cavs: list[int] = []
    per_cav: list[CavMetrics] = []

    def raise_for_incomplete(self) -> None:
        if self.incomplete_cavs:
            raise IncompleteLog(self.incomplete_cavs)

    def table_values(self) -> dict[str, float]:
        return {label: float(getattr(self, name)) for label, name in TABLE_ROWS.items()}


def _cav_metrics(cav: pd.Series, rows: pd.DataFrame) -> CavMetrics:
    own = rows[rows['cav_id'] == cav['cav_id']].sort_values('step')
    exit_time = None if pd.isna(cav['exit_time']) else float(cav['exit_time'])
    arrival_time = float(cav['arrival_time'])
    times = own['time'].to_numpy(dtype=float)
    fuel = float(np.trapezoid(own['fuel_rate'].to_numpy(dtype=float), times)) if len(own) > 1 else 0.0
    return CavMetrics(
        cav_id=int(cav['cav_id']),
        lane=str(cav['lane']),
        arrival_time=arrival_time,
        exit_time=exit_time,
        travel_time=None if exit_time is None else exit_time - arrival_time,
        half_u_sq=float((0.5 * own['u'].to_numpy(dtype=float) ** 2).mean()) if len(own) else 0.0,
        fuel=fuel,
        steps=len(own),
        infeasible_count=int((own['feasible'] == 0).sum()),
    )


def compute_metrics(log: RolloutLog) -> MetricsReport:
    """Table-I style aggregates: averages run over completed CAVs, infeasibility over every solver call."""

    per_cav = [_cav_metrics(cav, log.rows) for _, cav in log.cavs.iterrows()]
    completed = [cav for cav in per_cav if cav.completed]
    incomplete = [cav.cav_id for cav in per_cav if not cav.completed]
    if incomplete:
        logger.warning(f'CAVs {incomplete} did not exit before the time cap and are excluded from the averages.')

    def average(values: list[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    return MetricsReport(
        avg_travel_time=average([cav.travel_time for cav in completed if cav.travel_time is not None]),
        avg_half_u_sq=average([cav.half_u_sq for cav in completed]),
        avg_fuel=average([cav.fuel for cav in completed]),
        total_infeasible_count=int((log.rows['feasible'] == 0).sum()) if len(log.rows) else 0,
        completed=len(completed),
        incomplete_cavs=incomplete,
        per_cav=per_cav,
    )


def reports_frame(reports: Mapping[str, Sequence[MetricsReport]], seeds: Sequence[int]) -> pd.DataFrame:
    """Long table with one row per (theta source, seed)."""

    records = [
        {'theta': label, 'seed': seed, **report.model_dump(exclude={'per_cav', 'incomplete_cavs'})}
        for label, column in reports.items()
        for seed, report in zip(seeds, column, strict=True)
    ]
    return pd.DataFrame.from_records(records)


def comparison_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Metric rows by theta-source columns, each cell ``mean ± std`` over the seeds."""

    labels = list(dict.fromkeys(frame['theta']))
    grouped = frame.groupby('theta', sort=False)
    means = grouped.mean(numeric_only=True)
    stds = grouped.std(ddof=0, numeric_only=True)

    table = pd.DataFrame(index=list(TABLE_ROWS), columns=labels, dtype=object)
    for row, name in TABLE_ROWS.items():
        for label in labels:
            table.loc[row, label] = f'{means.loc[label, name]:.2f} ± {stds.loc[label, name]:.2f}'
    table.index.name = 'metric'
    return table


def render_table(table: pd.DataFrame) -> str:
    return table.to_string() + '\n'
