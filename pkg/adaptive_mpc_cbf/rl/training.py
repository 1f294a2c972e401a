# Copyright (C) 2022-Present Indoc Systems
#
# Licensed under the GNU AFFERO GENERAL PUBLIC LICENSE,
# Version 3.0 (the "License") available at https://www.gnu.org/licenses/agpl-3.0.en.html.
# You may not use this file except in compliance with the License.

"""Training loop of the parameter policy: the merging episode of one learner among two scripted neighbours."""

import logging
from collections.abc import Callable
from dataclasses import dataclass
from dataclasses import field
from typing import NamedTuple
from typing import Protocol

import numpy as np
import pandas as pd
from tqdm import tqdm

from adaptive_mpc_cbf.arrays import FloatArray
from adaptive_mpc_cbf.config import AppConfig
from adaptive_mpc_cbf.config import SacHyperparams
from adaptive_mpc_cbf.controller import NeighborView
from adaptive_mpc_cbf.geometry import Lane
from adaptive_mpc_cbf.metrics import fuel_rate
from adaptive_mpc_cbf.rl.observation import ACTION_SIZE
from adaptive_mpc_cbf.rl.observation import OBSERVATION_SIZE
from adaptive_mpc_cbf.rl.observation import build_observation
from adaptive_mpc_cbf.rl.observation import map_action_to_theta
from adaptive_mpc_cbf.rl.observation import virtual_far_vehicle
from adaptive_mpc_cbf.rl.replay import ReplayBuffer
from adaptive_mpc_cbf.rl.replay import Transition
from adaptive_mpc_cbf.rl.reward import StepRecord
from adaptive_mpc_cbf.rl.reward import reward
from adaptive_mpc_cbf.rl.sac import SacAgent
from adaptive_mpc_cbf.rng import stream
from adaptive_mpc_cbf.simulation import CavAgent
from adaptive_mpc_cbf.simulation import MergeWorld
from adaptive_mpc_cbf.simulation import assign_conflicts
from adaptive_mpc_cbf.theta import ControllerTheta
from adaptive_mpc_cbf.theta import PresetName

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ('step', 'episode', 'reward', 'critic_loss', 'actor_loss', 'infeasible_count')
PLACEMENT_ATTEMPTS = 100


class StepResult(NamedTuple):
    observation: FloatArray
    reward: float
    done: bool
    feasible: bool


class Environment(Protocol):
    observation_size: int
    action_size: int

    def reset(self) -> FloatArray: ...

    def step(self, action: FloatArray) -> StepResult: ...


class ToyBanditEnv:
    """One-step episodes with reward ``-(a - target)^2``; the optimal action is known in closed form."""

    observation_size = 1
    action_size = 1

    def __init__(self, target: float = 0.5) -> None:
        self.target = target

    def reset(self) -> FloatArray:
        return np.zeros(self.observation_size)

    def step(self, action: FloatArray) -> StepResult:
        value = float(np.asarray(action).ravel()[0])
        return StepResult(np.zeros(self.observation_size), -((value - self.target) ** 2), True, True)


@dataclass
class EpisodeThetas:
    """Learner parameters for the ego CAV, a behaviour preset for each neighbour."""

    ego_id: int
    ego_theta: ControllerTheta
    neighbours: dict[int, ControllerTheta] = field(default_factory=dict)

    def theta_for(self, agent: CavAgent, view: NeighborView) -> ControllerTheta:
        if agent.cav_id == self.ego_id:
            return self.ego_theta
        return self.neighbours[agent.cav_id]


class MergeTrainingEnv:
    """The learner starts behind ``i_p`` on its own road with ``i_c`` ahead of it on the other road."""

    observation_size = OBSERVATION_SIZE
    action_size = ACTION_SIZE

    def __init__(self, config: AppConfig, seed: int) -> None:
        self.config = config.with_scenario(time_cap=config.sac.episode_time_cap)
        self.seed = seed
        self.behaviour = stream(seed, 'behaviour')
        self.episode = -1
        self.world: MergeWorld | None = None
        self.thetas: EpisodeThetas | None = None
        self._observation = np.zeros(self.observation_size)

    def _speed(self) -> float:
        low, high = self.config.scenario.initial_speed_range
        return float(self.behaviour.uniform(low, high))

    def _placement(self, lane: Lane) -> list[tuple[Lane, float, float]]:
        length = self.config.scenario.cz_length
        ego = float(self.behaviour.uniform(0.0, 0.1 * length))
        crossing = ego + float(self.behaviour.uniform(0.1 * length, 0.3 * length))
        ahead = crossing + float(self.behaviour.uniform(0.1 * length, 0.3 * length))
        # i_p, i_c, ego in arrival order so that FIFO pairs the learner with i_c
        return [
            (lane, ahead, self._speed()),
            (lane.other, crossing, self._speed()),
            (lane, ego, self._speed()),
        ]

    def _initially_safe(self, world: MergeWorld) -> bool:
        views = assign_conflicts(world.snapshots(), self.config.scenario.sequencing)
        for agent in world.agents:
            view = views[agent.cav_id]
            values = world.barriers[agent.lane].evaluate(agent.state, view.i_p, view.i_c)
            if min(values.values()) < 0.0:
                return False
        return True

    def _new_world(self, thetas: EpisodeThetas) -> MergeWorld:
        lane = Lane.MAIN if self.behaviour.random() < 0.5 else Lane.RAMP
        for _ in range(PLACEMENT_ATTEMPTS):
            world = MergeWorld(self.config, thetas, self.seed + self.episode, spawning=False)
            for origin, progress, speed in self._placement(lane):
                world.place_agent(origin, world.entry_state(origin, speed, progress))
            if self._initially_safe(world):
                return world
        logger.warning(f'No safe placement found in {PLACEMENT_ATTEMPTS} attempts; starting the learner alone.')
        world = MergeWorld(self.config, thetas, self.seed + self.episode, spawning=False)
        world.spawned = 2
        world.place_agent(lane, world.entry_state(lane, self._speed()))
        return world

    def _ego(self) -> CavAgent | None:
        assert self.world is not None and self.thetas is not None
        return next((agent for agent in self.world.agents if agent.cav_id == self.thetas.ego_id), None)

    def _observe(self, ego: CavAgent) -> FloatArray:
        assert self.world is not None
        view = assign_conflicts(self.world.snapshots(), self.config.scenario.sequencing)[ego.cav_id]
        v_des = self.config.scenario.v_des
        sentinels = (
            virtual_far_vehicle(self.world.geometry, ego.lane, v_des),
            virtual_far_vehicle(self.world.geometry, ego.lane.other, v_des),
        )
        return build_observation(ego.state, ego.control, view.i_p, view.i_c, self.config.observation, sentinels)

    def reset(self) -> FloatArray:
        self.episode += 1
        presets = self.config.theta.presets
        names = list(PresetName)
        neighbours = {cav_id: presets[names[int(self.behaviour.integers(len(names)))]] for cav_id in (0, 1)}
        start = presets[PresetName.MODERATELY_CONSERVATIVE]
        self.thetas = EpisodeThetas(ego_id=2, ego_theta=start, neighbours=neighbours)
        self.world = self._new_world(self.thetas)
        ego = self._ego()
        assert ego is not None
        self._observation = self._observe(ego)
        return self._observation

    def step(self, action: FloatArray) -> StepResult:
        if self.world is None or self.thetas is None:
            raise RuntimeError('reset() must be called before step().')
        ego = self._ego()
        assert ego is not None
        state = ego.state.copy()
        self.thetas.ego_theta = map_action_to_theta(action, self.config.theta.bounds)

        self.world.advance()
        result = self.world.last_results[ego.cav_id]
        scenario = self.config.scenario
        record = StepRecord(
            u=result.control.u,
            phi=result.control.phi,
            v=float(state[3]),
            psi=float(state[2]),
            v_des=scenario.v_des,
            psi_des=self.world.geometry.route(ego.lane).heading,
            fuel_rate=fuel_rate(float(state[3]), result.control.u, self.config.fuel),
            feasible=result.feasible,
        )
        value = reward(record, self.config.reward)

        still_driving = self._ego()
        done = still_driving is None or self.world.finished
        if still_driving is not None:
            self._observation = self._observe(still_driving)
        return StepResult(self._observation, value, done, result.feasible)


class TrainingResult(NamedTuple):
    curve: pd.DataFrame
    steps: int
    episodes: int


CheckpointCallback = Callable[[SacAgent, int], None]


def _random_action(agent: SacAgent) -> FloatArray:
    return agent.noise.uniform(-1.0, 1.0, size=agent.action_size)


def train(
    env: Environment,
    agent: SacAgent,
    hyper: SacHyperparams,
    seed: int,
    steps: int | None = None,
    progress: bool = False,
    on_checkpoint: CheckpointCallback | None = None,
) -> TrainingResult:
    """Alternate environment steps and SAC updates; one learning-curve row per finished episode."""

    total = hyper.total_steps if steps is None else steps
    buffer = ReplayBuffer(hyper.replay_capacity, env.observation_size, env.action_size, stream(seed, 'replay'))
    rows: list[dict[str, float | int]] = []
    critic_loss = actor_loss = float('nan')
    episode, episode_reward, episode_infeasible = 0, 0.0, 0

    observation = env.reset()
    for step in tqdm(range(1, total + 1), disable=not progress, desc='training', unit='step'):
        action = _random_action(agent) if step <= hyper.warmup_steps else agent.act(observation)
        result = env.step(action)
        buffer.add(Transition(observation, action, result.reward, result.observation, result.done))
        episode_reward += result.reward
        episode_infeasible += int(not result.feasible)
        observation = result.observation

        if step > hyper.warmup_steps and len(buffer) >= hyper.batch_size and step % hyper.update_every == 0:
            diagnostics = agent.update(buffer.sample(hyper.batch_size))
            critic_loss, actor_loss = diagnostics.critic_loss, diagnostics.actor_loss

        if result.done:
            rows.append(
                {
                    'step': step,
                    'episode': episode,
                    'reward': episode_reward,
                    'critic_loss': critic_loss,
                    'actor_loss': actor_loss,
                    'infeasible_count': episode_infeasible,
                }
            )
            logger.info(f'Episode {episode} ended at step {step} with reward {episode_reward:.3f}.')
            episode, episode_reward, episode_infeasible = episode + 1, 0.0, 0
            observation = env.reset()

        if on_checkpoint is not None and step % hyper.checkpoint_every == 0:
            on_checkpoint(agent, step)

    curve = pd.DataFrame.from_records(rows, columns=list(CURVE_COLUMNS))
    return TrainingResult(curve, total, episode)


def window_means(curve: pd.DataFrame, window: int = 10) -> tuple[float, float]:
    """Mean episode reward over the first and the last ``window`` episodes."""

    rewards = curve['reward'].to_numpy(dtype=float)
    return float(rewards[:window].mean()), float(rewards[-window:].mean())

