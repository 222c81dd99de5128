"""End-to-end runs on the synthetic environment: expert, offline data, causal agent, PGCR.

Every stage draws its randomness from a seed derived from the run seed and a
fixed stage tag, so stages can be rerun independently and a whole run is a
deterministic function of ``(PipelineConfig, seed)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import ActorCritic, AgentConfig, train_offline, train_online
from .causal_policy import CausalAgent, CausalConfig, CausalTrace, ExpertPolicy, train_causal_policy
from .envs import EnvConfig, OfflineDataset, SynthRecEnv, generate_offline_dataset
from .pgcr import PgcrConfig, PgcrResult, train_pgcr
from .wasserstein import CausalRewardConfig

STAGE_TAGS = {"expert": 1, "dataset": 2, "causal": 3, "pgcr": 4, "baseline": 5, "eval": 6}


def derive_seed(seed: int, stage: str) -> int:
    """Stable 32-bit seed for one pipeline stage."""
    ss = np.random.SeedSequence([int(seed), STAGE_TAGS[stage]])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    causal: CausalConfig = field(default_factory=CausalConfig)
    pgcr: PgcrConfig = field(default_factory=PgcrConfig)
    expert_steps: int = 5000
    expert_eval_every: int = 1000
    dataset_episodes: int = 200
    behavior_sigma: float = 0.3
    behavior_epsilon: float = 0.5
    eval_episodes: int = 20

    def with_lambda(self, lam: float) -> "PipelineConfig":
        reward = CausalRewardConfig(lam=lam, window=self.causal.reward.window)
        return replace(self, causal=replace(self.causal, reward=reward))

    def baseline_steps(self, n_transitions: int) -> int:
        """Gradient steps matching a PGCR run over ``n_transitions``."""
        per_epoch = math.ceil(n_transitions / self.pgcr.encoder_batch)
        return self.pgcr.epochs * per_epoch * self.pgcr.rl_gradient_steps


def make_env(cfg: PipelineConfig) -> SynthRecEnv:
    return SynthRecEnv(cfg.env)


def train_expert(env, cfg: PipelineConfig, seed: int) -> tuple[ExpertPolicy, list]:
    s = derive_seed(seed, "expert")
    agent = ActorCritic(env.state_dim, env.action_dim, cfg.agent, "ddpg", s)
    agent, curve = train_online(agent, env, cfg.expert_steps, s, eval_every=cfg.expert_eval_every)
    return ExpertPolicy.from_agent(agent, seed=int(seed), steps=cfg.expert_steps), curve


def noisy_behavior(expert, sigma: float, epsilon: float = 0.0):
    """With probability ``epsilon`` a uniform action, otherwise the expert
    action plus clipped Gaussian noise."""

    def act(state, rng):
        a = expert.act(state)
        noisy = np.clip(a + rng.normal(0.0, sigma, size=a.shape), -1.0, 1.0)
        uniform = rng.uniform(-1.0, 1.0, size=a.shape)
        return uniform if rng.random() < epsilon else noisy

    return act


def make_dataset(env, expert, cfg: PipelineConfig, seed: int) -> OfflineDataset:
    behavior = noisy_behavior(expert, cfg.behavior_sigma, cfg.behavior_epsilon)
    tag = f"eps={cfg.behavior_epsilon}:uniform|expert+N(0,{cfg.behavior_sigma})"
    return generate_offline_dataset(env, behavior, cfg.dataset_episodes, derive_seed(seed, "dataset"), tag)


def train_causal(env, expert, cfg: PipelineConfig, seed: int) -> tuple[CausalAgent, CausalTrace]:
    c = cfg.causal
    return train_causal_policy(env, expert, c.episodes, c.horizon, c, derive_seed(seed, "causal"))


def train_recommender(
    dataset, causal_agent, env, kind: str, cfg: PipelineConfig, seed: int, variant: str = "pgcr"
) -> PgcrResult:
    pcfg = replace(cfg.pgcr, seed=derive_seed(seed, "pgcr"))
    return train_pgcr(dataset, causal_agent, env, kind, pcfg, cfg.agent, variant)


def train_baseline(dataset: OfflineDataset, kind: str, cfg: PipelineConfig, seed: int) -> ActorCritic:
    """Plain offline agent on raw states with the PGCR gradient-step budget."""
    s = derive_seed(seed, "baseline")
    agent = ActorCritic(dataset.state_dim, dataset.action_dim, cfg.agent, kind, s)
    return train_offline(agent, dataset, cfg.baseline_steps(len(dataset)), s)


@dataclass
class SeedRun:
    """Everything one seed of the full pipeline produces, with stage timings in seconds."""

    seed: int
    expert: ExpertPolicy
    dataset: OfflineDataset
    causal: CausalAgent
    causal_trace: CausalTrace
    pgcr: dict = field(default_factory=dict)
    pgcr_c: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def run_seed(cfg: PipelineConfig, seed: int, kinds=("ddpg", "td3"), ablation_kinds=("ddpg",)) -> SeedRun:
    """Expert, dataset, causal agent, then PGCR, PGCR-C and plain baselines per agent kind."""
    clock = time.perf_counter
    env = make_env(cfg)
    t = {}
    t0 = clock()
    expert, _ = train_expert(env, cfg, seed)
    t["expert"] = clock() - t0
    t0 = clock()
    dataset = make_dataset(env, expert, cfg, seed)
    t["dataset"] = clock() - t0
    t0 = clock()
    causal, trace = train_causal(env, expert, cfg, seed)
    t["causal"] = clock() - t0
    run = SeedRun(seed, expert, dataset, causal, trace, timings=t)
    for kind in kinds:
        t0 = clock()
        run.pgcr[kind] = train_recommender(dataset, causal, env, kind, cfg, seed)
        t[f"pgcr_{kind}"] = clock() - t0
        t0 = clock()
        run.baselines[kind] = train_baseline(dataset, kind, cfg, seed)
        t[f"base_{kind}"] = clock() - t0
    for kind in ablation_kinds:
        t0 = clock()
        run.pgcr_c[kind] = train_recommender(dataset, None, env, kind, cfg, seed, variant="pgcr_c")
        t[f"pgcr_c_{kind}"] = clock() - t0
    return run
