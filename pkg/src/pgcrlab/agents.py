"""DDPG and TD3 learners over :mod:`pgcrlab.nn` networks.

Actors are ``state -> tanh`` networks so actions live in ``[-1, 1]^d``;
critics read the concatenation ``[state, action]``. The update functions
take plain arrays, which lets the PGCR pipeline feed latent states and pull
the critic-loss gradient with respect to those states back into its
encoder.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from .envs import OfflineDataset, episode_rng
from .errors import NumericError
from .nn import Adam, Mlp, soft_update

AGENT_KINDS = ("ddpg", "td3")


@dataclass(frozen=True)
class AgentConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.95
    tau: float = 0.001
    batch: int = 64
    hidden: int = 128
    hidden_layers: int = 2
    buffer_capacity: int = 1_000_000
    exploration_sigma: float = 0.1
    td3_policy_delay: int = 2
    td3_target_noise: float = 0.2
    td3_noise_clip: float = 0.5
    warmup: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        for name in ("batch", "hidden", "hidden_layers", "buffer_capacity", "td3_policy_delay"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if min(self.actor_lr, self.critic_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.exploration_sigma, self.td3_target_noise, self.td3_noise_clip) < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.warmup < 0:
            raise ValueError("warmup must be nonnegative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]


class ReplayBuffer:
    """Ring buffer with oldest-first eviction and without-replacement batches."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, next_dim: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim, self.action_dim = state_dim, action_dim
        self.next_dim = state_dim if next_dim is None else next_dim
        self._alloc = min(self.capacity, 1024)
        self._s = np.zeros((self._alloc, state_dim))
        self._a = np.zeros((self._alloc, action_dim))
        self._r = np.zeros(self._alloc)
        self._s2 = np.zeros((self._alloc, self.next_dim))
        self._d = np.zeros(self._alloc)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _grow(self):
        new = min(self.capacity, 2 * self._alloc)
        for name in ("_s", "_a", "_r", "_s2", "_d"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:])
            arr[: self._alloc] = old
            setattr(self, name, arr)
        self._alloc = new

    def add(self, state, action, reward, next_state, done) -> int:
        """Store one transition and return the slot it occupies."""
        if self._next >= self._alloc and self._alloc < self.capacity:
            self._grow()
        i = self._next
        self._s[i] = state
        self._a[i] = action
        self._r[i] = reward
        self._s2[i] = next_state
        self._d[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return i

    def extend(self, dataset: OfflineDataset) -> None:
        for t in dataset.transitions:
            self.add(t.state, t.action, t.reward, t.next_state, t.done)

    def _ordered_index(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self._size) + self._next) % self.capacity

    def contents(self) -> Batch:
        """Everything stored, oldest first."""
        return self.take(self._ordered_index())

    def take(self, idx) -> Batch:
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx])

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """Slots of a without-replacement minibatch."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.choice(self._size, size=min(batch, self._size), replace=False)

    def sample(self, batch: int, rng: np.random.Generator) -> Batch:
        return self.take(self.sample_indices(batch, rng))


class ActorCritic:
    """Actor, critic(s) and their target copies with Adam optimisers."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        config: AgentConfig | None = None,
        kind: str = "ddpg",
        seed: int = 0,
    ):
        if kind not in AGENT_KINDS:
            raise ValueError(f"kind must be one of {AGENT_KINDS}")
        self.config = config or AgentConfig()
        self.kind = kind
        self.state_dim, self.action_dim = int(state_dim), int(action_dim)
        init_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAC]))
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAC, 1]))
        hid = [self.config.hidden] * self.config.hidden_layers
        n_hidden = self.config.hidden_layers
        self.actor = Mlp(
            [self.state_dim, *hid, self.action_dim], ["relu"] * n_hidden + ["tanh"], init_rng
        )
        n_critics = 2 if kind == "td3" else 1
        self.critics = [
            Mlp([self.state_dim + self.action_dim, *hid, 1], None, init_rng)
            for _ in range(n_critics)
        ]
        self.actor_target = self.actor.copy()
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opt = Adam([self.actor], self.config.actor_lr)
        self.critic_opts = [Adam([c], self.config.critic_lr) for c in self.critics]
        self.updates = 0

    @property
    def critic(self) -> Mlp:
        return self.critics[0]

    def networks(self) -> dict[str, Mlp]:
        nets = {"actor": self.actor, "actor_target": self.actor_target}
        for i, (c, t) in enumerate(zip(self.critics, self.critic_targets), start=1):
            nets[f"critic{i}"] = c
            nets[f"critic{i}_target"] = t
        return nets

    def load_networks(self, nets: dict[str, Mlp]) -> None:
        for name, net in self.networks().items():
            net.set_params(nets[name].params)

    def act(self, states) -> np.ndarray:
        return self.actor(states)

    def check_finite(self, report: dict) -> None:
        if not all(net.all_finite() for net in self.networks().values()):
            raise NumericError("non-finite parameters after update", report)
        if not all(math.isfinite(v) for v in report.values() if isinstance(v, float)):
            raise NumericError("non-finite loss", report)


def select_action(agent: ActorCritic, state, explore: bool, rng: np.random.Generator):
    """Deterministic actor output, plus clipped Gaussian noise when exploring."""
    state = np.asarray(state, dtype=float)
    if state.shape != (agent.state_dim,):
        raise ValueError(f"state must have shape ({agent.state_dim},)")
    action = agent.actor(state)
    if explore:
        noise = rng.normal(0.0, agent.config.exploration_sigma, size=agent.action_dim)
        action = np.clip(action + noise, -1.0, 1.0)
    return action


def _critic_regression(agent, critic, opt, s, a, y, want_state_grad):
    q, cache = critic.forward(np.hstack([s, a]))
    err = q[:, 0] - y
    loss = float(np.mean(err**2))
    upstream = (2.0 / len(y)) * err[:, None]
    grads, dx = critic.backward(cache, upstream)
    opt.step(grads)
    return loss, (dx[:, : agent.state_dim] if want_state_grad else None), q[:, 0]


def _actor_ascent(agent: ActorCritic, s) -> float:
    a, a_cache = agent.actor.forward(s)
    q, c_cache = agent.critic.forward(np.hstack([s, a]))
    n = s.shape[0]
    _, dx = agent.critic.backward(c_cache, np.full((n, 1), -1.0 / n))
    grads, _ = agent.actor.backward(a_cache, dx[:, agent.state_dim :])
    agent.actor_opt.step(grads)
    return float(q.mean())


def ddpg_target(agent: ActorCritic, batch: Batch) -> np.ndarray:
    a2 = agent.actor_target(batch.next_states)
    q2 = agent.critic_targets[0](np.hstack([batch.next_states, a2]))[:, 0]
    return batch.rewards + agent.config.gamma * (1.0 - batch.dones) * q2


def td3_target(agent: ActorCritic, batch: Batch, rng: np.random.Generator) -> tuple:
    """Clipped-noise target; returns ``(y, per-twin target values)``."""
    cfg = agent.config
    a2 = agent.actor_target(batch.next_states)
    if cfg.td3_target_noise > 0:
        noise = rng.normal(0.0, cfg.td3_target_noise, size=a2.shape)
        a2 = a2 + np.clip(noise, -cfg.td3_noise_clip, cfg.td3_noise_clip)
    a2 = np.clip(a2, -1.0, 1.0)
    x2 = np.hstack([batch.next_states, a2])
    twins = np.stack([t(x2)[:, 0] for t in agent.critic_targets])
    q2 = twins.min(axis=0)
    return batch.rewards + cfg.gamma * (1.0 - batch.dones) * q2, twins


def ddpg_update(agent: ActorCritic, batch: Batch, want_state_grad: bool = False) -> dict:
    """One DDPG step: critic regression, actor ascent, Polyak targets.

    With ``want_state_grad`` the report carries ``state_grad``, the gradient
    of the critic loss with respect to ``batch.states``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = ddpg_target(agent, batch)
    loss, sgrad, _ = _critic_regression(
        agent, agent.critic, agent.critic_opts[0], batch.states, batch.actions, y, want_state_grad
    )
    obj = _actor_ascent(agent, batch.states)
    soft_update(agent.actor_target, agent.actor, agent.config.tau)
    soft_update(agent.critic_targets[0], agent.critic, agent.config.tau)
    agent.updates += 1
    report = {"critic_loss": loss, "actor_obj": obj}
    agent.check_finite(report)
    if want_state_grad:
        report["state_grad"] = sgrad
    return report


def td3_update(
    agent: ActorCritic, batch: Batch, step_index: int, want_state_grad: bool = False
) -> dict:
    """One TD3 step; the actor and all targets move only on delayed steps."""
    if agent.kind != "td3":
        raise ValueError("td3_update needs an agent with twin critics")
    if len(batch) == 0:
        raise ValueError("empty batch")
    y, _ = td3_target(agent, batch, agent.rng)
    losses, sgrad = [], None
    for critic, opt in zip(agent.critics, agent.critic_opts):
        loss, g, _ = _critic_regression(
            agent, critic, opt, batch.states, batch.actions, y, want_state_grad
        )
        losses.append(loss)
        if want_state_grad:
            sgrad = g if sgrad is None else sgrad + g
    report = {"critic_loss": float(sum(losses)), "actor_obj": float("nan")}
    if step_index % agent.config.td3_policy_delay == 0:
        report["actor_obj"] = _actor_ascent(agent, batch.states)
        soft_update(agent.actor_target, agent.actor, agent.config.tau)
        for t, c in zip(agent.critic_targets, agent.critics):
            soft_update(t, c, agent.config.tau)
    agent.updates += 1
    agent.check_finite({"critic_loss": report["critic_loss"]})
    if want_state_grad:
        report["state_grad"] = sgrad
    return report


def update(agent: ActorCritic, batch: Batch, want_state_grad: bool = False) -> dict:
    """Dispatch to the agent's own update rule."""
    if agent.kind == "td3":
        return td3_update(agent, batch, agent.updates, want_state_grad)
    return ddpg_update(agent, batch, want_state_grad)


def evaluate_return(agent_or_policy, env, n_episodes: int, seed: int) -> float:
    """Mean undiscounted return of the deterministic policy."""
    act = agent_or_policy.act if isinstance(agent_or_policy, ActorCritic) else agent_or_policy
    total = 0.0
    for ep in range(n_episodes):
        rng = episode_rng(seed, ep)
        s = env.reset(rng)
        for t in range(env.horizon):
            s, r, done = env.step(s, act(s), rng, t)
            total += r
            if done:
                break
    return total / n_episodes


def train_online(
    agent: ActorCritic,
    env,
    total_steps: int,
    seed: int,
    eval_every: int = 0,
    eval_episodes: int = 10,
) -> tuple[ActorCritic, list[tuple[int, float, int]]]:
    """Interact, store, sample and update for ``total_steps`` steps.

    The first ``config.warmup`` steps use uniform random actions and no
    updates. With ``eval_every > 0`` the deterministic policy is evaluated
    periodically and the best-scoring actor is restored at the end.
    Returns the agent and the learning curve as ``(episode, return, length)``.
    """
    cfg = agent.config
    if total_steps == 0:
        return agent, []
    if total_steps < cfg.warmup:
        raise ValueError("total_steps must cover the warmup phase")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0111]))
    buffer = ReplayBuffer(cfg.buffer_capacity, agent.state_dim, agent.action_dim)
    curve: list[tuple[int, float, int]] = []
    best_score, best_actor = -math.inf, None
    episode, ep_ret, ep_len = 0, 0.0, 0
    s = env.reset(rng)
    for step in range(total_steps):
        if step < cfg.warmup:
            a = rng.uniform(-1.0, 1.0, size=agent.action_dim)
        else:
            a = select_action(agent, s, True, rng)
        s2, r, done = env.step(s, a, rng, ep_len)
        buffer.add(s, a, r, s2, done)
        ep_ret += r
        ep_len += 1
        s = s2
        if step >= cfg.warmup:
            update(agent, buffer.sample(cfg.batch, agent.rng))
        if done:
            curve.append((episode, ep_ret, ep_len))
            episode, ep_ret, ep_len = episode + 1, 0.0, 0
            s = env.reset(rng)
        if eval_every and step >= cfg.warmup and (step + 1) % eval_every == 0:
            score = evaluate_return(agent, env, eval_episodes, seed + 7919)
            if score > best_score:
                best_score, best_actor = score, agent.actor.copy()
    if best_actor is not None:
        final = evaluate_return(agent, env, eval_episodes, seed + 7919)
        if best_score > final:
            agent.actor.set_params(best_actor.params)
    return agent, curve


def train_offline(
    agent: ActorCritic, dataset: OfflineDataset, gradient_steps: int, seed: int
) -> ActorCritic:
    """Fit the agent to a fixed dataset without touching any environment."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if gradient_steps == 0:
        return agent
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0FF]))
    buffer = ReplayBuffer(max(len(dataset), 1), agent.state_dim, agent.action_dim)
    buffer.extend(dataset)
    for _ in range(gradient_steps):
        update(agent, buffer.sample(agent.config.batch, rng))
    return agent


def with_overrides(config: AgentConfig, **kw) -> AgentConfig:
    return replace(config, **kw)


def write_learning_curve(path, curve: Sequence[tuple[int, float, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "return", "length"])
        for ep, ret, length in curve:
            w.writerow([ep, repr(float(ret)), length])


def config_dict(config: AgentConfig) -> dict:
    return asdict(config)
