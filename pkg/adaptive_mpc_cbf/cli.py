# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Command-line entry points: simulate, train, evaluate, sweep and export-table."""

import argparse
import logging
import sys
from collections.abc import Callable
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import NamedTuple

import pandas as pd
from pydantic import ValidationError
from tqdm import tqdm

from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.config import load_config
from adaptive_mpc_cbf.errors import AdaptiveMpcCbfError
from adaptive_mpc_cbf.geometry import MergeGeometry
from adaptive_mpc_cbf.metrics import MetricsReport
from adaptive_mpc_cbf.metrics import RolloutLog
from adaptive_mpc_cbf.metrics import comparison_table
from adaptive_mpc_cbf.metrics import render_table
from adaptive_mpc_cbf.persistence import OutputLayout
from adaptive_mpc_cbf.persistence import PolicyCheckpoint
from adaptive_mpc_cbf.persistence import RunManifest
from adaptive_mpc_cbf.persistence import load_checkpoint
from adaptive_mpc_cbf.persistence import read_metrics_frame
from adaptive_mpc_cbf.persistence import save_checkpoint
from adaptive_mpc_cbf.persistence import write_csv
from adaptive_mpc_cbf.persistence import write_metrics
from adaptive_mpc_cbf.rl.observation import PolicyTheta
from adaptive_mpc_cbf.rl.sac import SacAgent
from adaptive_mpc_cbf.rl.training import MergeTrainingEnv
from adaptive_mpc_cbf.rl.training import train
from adaptive_mpc_cbf.rng import SEED_MODULUS
from adaptive_mpc_cbf.rng import episode_seeds
from adaptive_mpc_cbf.simulation import FixedTheta
from adaptive_mpc_cbf.simulation import ThetaSource
from adaptive_mpc_cbf.simulation import run_episode
from adaptive_mpc_cbf.theta import PresetName

logger = logging.getLogger(__name__)

LEARNED_LABEL = 'MPC-CBF w/ RL'
LOG_FORMAT = '%(levelname)s [%(name)s]: %(message)s'


class ThetaChoice(NamedTuple):
    kind: str
    value: str

    def __str__(self) -> str:
        return f'{self.kind}:{self.value}'


def theta_choice(text: str) -> ThetaChoice:
    kind, _, value = text.partition(':')
    if kind == 'baseline':
        if value not in set(PresetName):
            raise argparse.ArgumentTypeError(f'unknown preset {value!r}; choose from {", ".join(PresetName)}')
    elif kind != 'checkpoint' or not value:
        raise argparse.ArgumentTypeError('expected baseline:<preset> or checkpoint:<path>')
    return ThetaChoice(kind, value)


def seed_value(text: str) -> int:
    seed = int(text)
    if not 0 <= seed < SEED_MODULUS:
        raise argparse.ArgumentTypeError('seed must be an unsigned 64-bit integer')
    return seed


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError('must be a positive integer')
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='YAML configuration file; defaults apply when omitted')
    common.add_argument('--seed', type=seed_value, default=None, help='base seed (overrides scenario.seed)')
    common.add_argument('--out', type=Path, default=None, help='output directory (default runs/<command>)')
    common.add_argument('--cavs', type=positive_int, default=None, help='number of CAVs per episode')
    common.add_argument('--time-cap', type=float, default=None, help='episode time cap in seconds')
    common.add_argument('--log-level', default='WARNING', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--no-progress', action='store_true', help='hide progress bars')

    parser = argparse.ArgumentParser(prog='adaptive-mpc-cbf', description=__doc__)
    commands = parser.add_subparsers(dest='command', required=True)

    simulate = commands.add_parser('simulate', parents=[common], help='run one seeded merging episode')
    simulate.add_argument('--theta', type=theta_choice, default=ThetaChoice('baseline', PresetName.CONSERVATIVE))

    training = commands.add_parser('train', parents=[common], help='learn the controller parameter policy')
    training.add_argument('--steps', type=positive_int, default=None)
    training.add_argument('--desk-scale', action='store_true', help='2x64 networks and 50k steps')

    evaluate = commands.add_parser('evaluate', parents=[common], help='run seeded episodes for one theta source')
    evaluate.add_argument('--theta', type=theta_choice, default=ThetaChoice('baseline', PresetName.CONSERVATIVE))

    sweep = commands.add_parser('sweep', parents=[common], help='compare the baseline presets with a policy')
    sweep.add_argument('--checkpoint', type=Path, required=True)

    for command in (evaluate, sweep):
        command.add_argument('--seeds', type=positive_int, default=10)
        command.add_argument('--workers', type=positive_int, default=1)

    export = commands.add_parser('export-table', parents=[common], help='render a metrics CSV as a table')
    export.add_argument('--report', type=Path, required=True, help='metrics.csv written by evaluate or sweep')
    return parser


def resolve_config(args: argparse.Namespace) -> AppConfig:
    config = load_config(args.config) if args.config else AppConfig()
    changes: dict[str, float | int] = {}
    if args.seed is not None:
        changes['seed'] = args.seed
    if args.cavs is not None:
        changes['max_cavs'] = args.cavs
    if args.time_cap is not None:
        changes['time_cap'] = args.time_cap
    return config.with_scenario(**changes) if changes else config


def resolve_theta(choice: ThetaChoice, config: AppConfig) -> tuple[str, ThetaSource]:
    if choice.kind == 'baseline':
        preset = PresetName(choice.value)
        return preset.title, FixedTheta(config.theta.presets[preset])
    checkpoint = load_checkpoint(Path(choice.value))
    deployed = checkpoint.deployment_config(config)
    geometry = MergeGeometry.from_scenario(config.scenario)
    return LEARNED_LABEL, PolicyTheta(checkpoint.to_policy(), deployed, geometry)


def run_seeds(
    config: AppConfig, source: ThetaSource, seeds: Sequence[int], workers: int, progress: bool
) -> list[tuple[MetricsReport, RolloutLog]]:
    """Episodes fan out over threads; results come back in seed order."""

    def run(seed: int) -> tuple[MetricsReport, RolloutLog]:
        return run_episode(config, source, seed)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = executor.map(run, seeds)
        return list(tqdm(results, total=len(seeds), disable=not progress, desc='episodes', unit='episode'))


class Context(NamedTuple):
    args: argparse.Namespace
    argv: list[str]
    config: AppConfig
    layout: OutputLayout

    @property
    def progress(self) -> bool:
        return not self.args.no_progress

    def manifest(self, outputs: list[Path], **fields: list[int] | list[str]) -> None:
        RunManifest(
            command=self.args.command,
            argv=self.argv,
            config_hash=self.config.config_hash,
            config=self.config,
            seed=self.config.scenario.seed,
            outputs=[self.layout.relative(path) for path in outputs],
            **fields,
        ).write(self.layout)


def write_table(frame: pd.DataFrame, layout: OutputLayout) -> str:
    table = comparison_table(frame)
    text = render_table(table)
    layout.table_txt.write_text(text)
    table.to_csv(layout.table_csv, lineterminator='\n')
    return text


def simulate_command(ctx: Context) -> None:
    layout, seed = ctx.layout, ctx.config.scenario.seed
    label, source = resolve_theta(ctx.args.theta, ctx.config)
    ctx.manifest(
        [layout.metrics_json, layout.metrics_csv, layout.rollout(seed)], seeds=[seed], theta_sources=[label]
    )
    report, log = run_episode(ctx.config, source, seed, progress=ctx.progress)
    write_metrics({label: [report]}, [seed], layout)
    log.to_csv(layout.rollout(seed))


def evaluate_command(ctx: Context) -> None:
    layout = ctx.layout
    seeds = episode_seeds(ctx.config.scenario.seed, ctx.args.seeds)
    label, source = resolve_theta(ctx.args.theta, ctx.config)
    outputs = [layout.metrics_json, layout.metrics_csv, *map(layout.rollout, seeds), layout.table_txt, layout.table_csv]
    ctx.manifest(outputs, seeds=seeds, theta_sources=[label])

    results = run_seeds(ctx.config, source, seeds, ctx.args.workers, ctx.progress)
    reports = {label: [report for report, _ in results]}
    write_metrics(reports, seeds, layout)
    for seed, (_, log) in zip(seeds, results, strict=True):
        log.to_csv(layout.rollout(seed))
    write_table(read_metrics_frame(layout.metrics_csv), layout)


def sweep_command(ctx: Context) -> None:
    layout = ctx.layout
    seeds = episode_seeds(ctx.config.scenario.seed, ctx.args.seeds)
    choices = [ThetaChoice('baseline', preset) for preset in PresetName]
    choices.append(ThetaChoice('checkpoint', str(ctx.args.checkpoint)))
    sources = dict(resolve_theta(choice, ctx.config) for choice in choices)
    ctx.manifest(
        [layout.metrics_json, layout.metrics_csv, layout.table_txt, layout.table_csv],
        seeds=seeds,
        theta_sources=list(sources),
    )

    reports = {}
    for label, source in sources.items():
        logger.info(f'Evaluating {label} over {len(seeds)} seeds.')
        results = run_seeds(ctx.config, source, seeds, ctx.args.workers, ctx.progress)
        reports[label] = [report for report, _ in results]
    write_metrics(reports, seeds, layout)
    sys.stdout.write(write_table(read_metrics_frame(layout.metrics_csv), layout))


def train_command(ctx: Context) -> None:
    layout, config = ctx.layout, ctx.config
    hyper = config.sac.desk_scale() if ctx.args.desk_scale else config.sac
    if ctx.args.steps is not None:
        hyper = hyper.model_copy(update={'total_steps': ctx.args.steps})
    config = config.model_validate({**config.model_dump(), 'sac': hyper.model_dump()})
    ctx = ctx._replace(config=config)
    ctx.manifest([layout.learning_curve, layout.policy], seeds=[config.scenario.seed])

    seed = config.scenario.seed
    env = MergeTrainingEnv(config, seed)
    agent = SacAgent(env.observation_size, env.action_size, hyper, seed)

    def checkpoint(trained: SacAgent, step: int) -> None:
        save_checkpoint(PolicyCheckpoint.from_policy(trained.policy, config, step), layout.policy)
        logger.info(f'Saved policy checkpoint at step {step}.')

    result = train(env, agent, hyper, seed, progress=ctx.progress, on_checkpoint=checkpoint)
    write_csv(result.curve, layout.learning_curve)
    checkpoint(agent, result.steps)


def export_table_command(ctx: Context) -> None:
    layout = ctx.layout
    ctx.manifest([layout.table_txt, layout.table_csv])
    sys.stdout.write(write_table(read_metrics_frame(ctx.args.report), layout))


COMMANDS: dict[str, Callable[[Context], None]] = {
    'simulate': simulate_command,
    'train': train_command,
    'evaluate': evaluate_command,
    'sweep': sweep_command,
    'export-table': export_table_command,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    """Exit code 0 on success, 1 on a runtime failure, 2 on a usage error."""

    arguments = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(arguments)
    except SystemExit as e:
        return 0 if e.code == 0 else 2

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, force=True)
    try:
        config = resolve_config(args)
        layout = OutputLayout(out_dir=args.out or Path('runs') / args.command)
        COMMANDS[args.command](Context(args, arguments, config, layout))
    except (AdaptiveMpcCbfError, ValidationError, OSError, ValueError) as e:
        message = str(e).splitlines()[0] if str(e) else type(e).__name__
        sys.stderr.write(f'{args.command}: {type(e).__name__}: {message}\n')
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())
