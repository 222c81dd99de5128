"""Training the causal feature-selection policy against a frozen expert.

Each step pairs two reward observations: the expert's reward on the real
state (pushed to the observed window ``R``) and the expert's reward for the
same action on the state produced by the causal agent's intervention
(pushed to the intervened window ``R_hat``). The causal agent is paid
``exp(-lambda * W1(R_hat, R))``.

Because that reward summarises a whole window, one intervention moves it by
roughly ``1/window`` of a sample's displacement while the window level drifts
much more. By default the critic therefore regresses the step-to-step change
of the reward, scaled by its running root mean square. The previous reward
does not depend on the current action, so it acts as a baseline and the
actor's gradient direction is unchanged in expectation. The replay buffer
still stores the raw reward.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .agents import ActorCritic, AgentConfig, Batch, ReplayBuffer, select_action, update
from .envs import Transition
from .nn import Mlp
from .wasserstein import CausalRewardConfig, EmpiricalSamples, causal_reward, w1_empirical


class ExpertPolicy:
    """Frozen deterministic policy; parameters never change after construction."""

    def __init__(self, actor: Mlp, provenance: dict | None = None):
        self._actor = actor.copy()
        for p in self._actor.params:
            p.setflags(write=False)
        self.provenance = dict(provenance or {})

    @classmethod
    def from_agent(cls, agent: ActorCritic, **provenance) -> "ExpertPolicy":
        return cls(agent.actor, provenance)

    @property
    def actor(self) -> Mlp:
        return self._actor

    def act(self, state) -> np.ndarray:
        return self._actor(state)

    __call__ = act

    def checksum(self) -> str:
        return self._actor.checksum()


class ScriptedPolicy:
    """Wraps a plain function ``state -> action`` behind the expert interface."""

    def __init__(self, fn, name: str = "scripted"):
        self.fn = fn
        self.provenance = {"scripted": name}

    def act(self, state) -> np.ndarray:
        return np.asarray(self.fn(state), dtype=float)

    __call__ = act

    def checksum(self) -> str:
        return self.provenance["scripted"]


CRITIC_TARGETS = ("difference", "reward")


@dataclass(frozen=True)
class CausalConfig:
    """Settings for causal-agent training.

    ``critic_target="reward"`` regresses the raw stored reward;
    ``"difference"`` regresses its change since the previous step, scaled
    by the running root mean square of those changes.
    """

    agent: AgentConfig = field(default_factory=lambda: AgentConfig(gamma=0.0, warmup=64))
    reward: CausalRewardConfig = field(default_factory=CausalRewardConfig)
    kind: str = "ddpg"
    min_fill: int = 16
    episodes: int = 300
    horizon: int = 20
    critic_target: str = "difference"

    def __post_init__(self):
        if self.critic_target not in CRITIC_TARGETS:
            raise ValueError(f"critic_target must be one of {CRITIC_TARGETS}")
        if self.kind not in ("ddpg", "td3"):
            raise ValueError("kind must be ddpg or td3")
        if self.min_fill < 1 or self.episodes < 1 or self.horizon < 1:
            raise ValueError("min_fill, episodes and horizon must be positive")


@dataclass
class RewardBuffers:
    observed: EmpiricalSamples
    intervened: EmpiricalSamples

    @classmethod
    def empty(cls, window: int) -> "RewardBuffers":
        return cls(EmpiricalSamples(window), EmpiricalSamples(window))


@dataclass
class CausalAgent:
    actor_critic: ActorCritic
    config: CausalConfig

    @property
    def reward_cfg(self) -> CausalRewardConfig:
        return self.config.reward

    def intervention(self, state, rng=None, explore: bool = False) -> np.ndarray:
        return select_action(self.actor_critic, state, explore, rng)

    @classmethod
    def create(cls, env, config: CausalConfig | None = None, seed: int = 0) -> "CausalAgent":
        config = config or CausalConfig()
        ac = ActorCritic(env.state_dim, env.action_dim, config.agent, config.kind, seed)
        return cls(ac, config)


@dataclass
class StepInfo:
    reward: float
    w1: float
    observed_reward: float
    intervened_reward: float
    expert_action: np.ndarray
    done: bool


def collect_step(
    expert,
    causal_agent: CausalAgent,
    env,
    state,
    buffers: RewardBuffers,
    rng: np.random.Generator,
    t: int = 0,
    explore: bool = True,
    episode_id: int = 0,
) -> tuple[Transition, np.ndarray, StepInfo]:
    """One pass of the paired-reward loop.

    Returns the causal transition ``(s, a_I, r, s_I)`` for the replay buffer,
    the next real state, and diagnostics. Until both windows hold
    ``min_fill`` samples the reward is fixed at 1.0.
    """
    state = np.asarray(state, dtype=float)
    a_t = expert.act(state)
    next_state, r_t, done = env.step(state, a_t, rng, t)
    buffers.observed.push(r_t)

    a_int = causal_agent.intervention(state, rng, explore)
    s_int = env.apply_intervention(state, a_int, rng)
    # the expert replays the realised action a_t, not a fresh choice on s_int
    _, r_hat, _ = env.step(s_int, a_t, rng, t)
    buffers.intervened.push(r_hat)

    min_fill = causal_agent.config.min_fill
    if min(len(buffers.observed), len(buffers.intervened)) >= min_fill:
        w1 = w1_empirical(buffers.intervened, buffers.observed)
        reward = causal_reward(w1, causal_agent.reward_cfg)
    else:
        w1, reward = math.nan, 1.0
    tr = Transition(state, a_int, reward, s_int, False, episode_id, t)
    return tr, next_state, StepInfo(reward, w1, r_t, r_hat, a_t, done)


@dataclass
class CausalTrace:
    steps: list = field(default_factory=list)

    def add(self, step: int, w1: float, reward: float) -> None:
        self.steps.append((step, w1, reward))

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r for _, _, r in self.steps])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "w1", "reward"])
            for step, w1, reward in self.steps:
                w.writerow([step, repr(float(w1)), repr(float(reward))])


def train_causal_policy(
    env,
    expert,
    episodes: int | None = None,
    horizon: int | None = None,
    config: CausalConfig | None = None,
    seed: int = 0,
) -> tuple[CausalAgent, CausalTrace]:
    """Run ``episodes * horizon`` collection steps with interleaved updates.

    Reward windows persist across episodes. Updates start once the causal
    replay holds ``config.agent.warmup`` transitions (and at least one batch),
    one update per step after that.
    """
    config = config or CausalConfig()
    episodes = config.episodes if episodes is None else episodes
    horizon = config.horizon if horizon is None else horizon
    if episodes < 1 or horizon < 1:
        raise ValueError("episodes and horizon must be at least 1")
    agent = CausalAgent.create(env, config, seed)
    ac = agent.actor_critic
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCA05]))
    cap = min(config.agent.buffer_capacity, episodes * horizon)
    replay = ReplayBuffer(cap, env.state_dim, env.action_dim)
    targets = np.zeros(cap)
    buffers = RewardBuffers.empty(config.reward.window)
    trace = CausalTrace()
    start = max(config.agent.warmup, 1)
    difference = config.critic_target == "difference"
    prev_reward, sq_sum, stored = None, 0.0, 0
    step = 0
    for ep in range(episodes):
        s = env.reset(rng)
        env_t = 0
        for t in range(horizon):
            tr, s_next, info = collect_step(expert, agent, env, s, buffers, rng, env_t, True, ep)
            slot = replay.add(tr.state, tr.action, tr.reward, tr.next_state, tr.done)
            if difference:
                targets[slot] = 0.0 if prev_reward is None else tr.reward - prev_reward
                prev_reward = tr.reward
                sq_sum += targets[slot] ** 2
                stored += 1
            trace.add(step, info.w1, info.reward)
            if len(replay) >= start:
                idx = replay.sample_indices(config.agent.batch, ac.rng)
                batch = replay.take(idx)
                if difference:
                    rms = math.sqrt(sq_sum / stored)
                    y = targets[idx] / rms if rms > 0 else targets[idx]
                    batch = Batch(batch.states, batch.actions, y, batch.next_states, batch.dones)
                update(ac, batch)
            step += 1
            if info.done:
                s, env_t = env.reset(rng), 0
            else:
                s, env_t = s_next, env_t + 1
    return agent, trace
