"""Encoder training on original/modified state pairs and latent-space policy learning.

Each batch of offline transitions is paired with modified states produced by
the causal agent (its intervention action realised by the environment). The
encoder is pulled towards equal codes for each pair while the critic loss of
the recommendation agent, computed on the codes, is backpropagated into the
encoder as well. The second term keeps reward-predictive content in the code;
the pairing loss alone is minimised by a constant encoder.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .agents import ActorCritic, AgentConfig, Batch, update
from .causal_policy import CausalAgent
from .envs import OfflineDataset
from .errors import NumericError
from .nn import Adam, Mlp

VARIANTS = ("pgcr", "pgcr_c")
LATENT_EPS = 1e-6
TRACE_COLUMNS = ("epoch", "batch", "mse_loss", "critic_loss", "actor_obj", "latent_variance")


@dataclass(frozen=True)
class PgcrConfig:
    """Encoder and pipeline settings.

    ``rl_gradient_steps`` is the number of actor-critic updates per batch;
    the first one also drives the encoder step.
    """

    latent_dim: int = 8
    encoder_lr: float = 1e-3
    encoder_batch: int = 64
    encoder_hidden: int = 64
    joint_rl_weight: float = 0.1
    standardize_latent: bool = True
    encoder_normalize: bool = True
    epochs: int = 20
    rl_gradient_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.encoder_batch < 1 or self.encoder_hidden < 1:
            raise ValueError("latent_dim, encoder_batch and encoder_hidden must be positive")
        if self.encoder_lr <= 0:
            raise ValueError("encoder_lr must be positive")
        if not self.joint_rl_weight >= 0:
            raise ValueError("joint_rl_weight must be nonnegative")
        if self.epochs < 0 or self.rl_gradient_steps < 1:
            raise ValueError("epochs must be nonnegative and rl_gradient_steps positive")


class Encoder:
    """State-to-latent network: one ReLU hidden layer, a linear layer, then
    per-sample standardisation across latent dims.

    The standardisation fixes the scale of every code, so the pairing loss
    cannot be reduced by shrinking all codes towards zero. With
    ``normalize=False`` the linear output is the code.
    """

    def __init__(
        self,
        state_dim: int,
        latent_dim: int = 8,
        hidden: int = 64,
        seed: int = 0,
        normalize: bool = True,
    ):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE2C]))
        self.net = Mlp([state_dim, hidden, latent_dim], ["relu", "identity"], rng)
        self.normalize = bool(normalize) and latent_dim > 1

    @classmethod
    def from_net(cls, net: Mlp, normalize: bool = True) -> "Encoder":
        enc = cls.__new__(cls)
        enc.net = net
        enc.normalize = bool(normalize) and net.output_size > 1
        return enc

    @property
    def state_dim(self) -> int:
        return self.net.input_size

    @property
    def latent_dim(self) -> int:
        return self.net.output_size

    def forward(self, states):
        """Codes and a cache for :meth:`backward`."""
        h, cache = self.net.forward(states)
        if not self.normalize:
            return h, (cache, None, None)
        centred = h - h.mean(axis=-1, keepdims=True)
        scale = np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + LATENT_EPS)
        z = centred / scale
        return z, (cache, z, scale)

    def backward(self, cache, upstream) -> list[np.ndarray]:
        """Parameter gradients for a summed objective with ``d objective / d z = upstream``."""
        net_cache, z, scale = cache
        g = np.asarray(upstream, dtype=float)
        if z is not None:
            g = (
                g
                - g.mean(axis=-1, keepdims=True)
                - z * (g * z).mean(axis=-1, keepdims=True)
            ) / scale
        grads, _ = self.net.backward(net_cache, g)
        return grads

    def __call__(self, states) -> np.ndarray:
        return self.forward(states)[0]


def modified_state(causal_agent: CausalAgent, env, state, rng: np.random.Generator) -> np.ndarray:
    """``s_I``: the state the environment realises under the causal agent's action."""
    state = np.asarray(state, dtype=float)
    if state.shape != (env.state_dim,) or causal_agent.actor_critic.state_dim != env.state_dim:
        raise ValueError("state, environment and causal agent dimensions must agree")
    return env.apply_intervention(state, causal_agent.intervention(state), rng)


def _modified_batch(causal_agent, env, states, rng) -> np.ndarray:
    actions = causal_agent.actor_critic.act(states)
    return np.array([env.apply_intervention(s, a, rng) for s, a in zip(states, actions)])


def encoder_loss(phi, s, s_i) -> float:
    """Squared latent distance, summed over latent dims and averaged over the batch."""
    s, s_i = np.asarray(s, dtype=float), np.asarray(s_i, dtype=float)
    if s.shape != s_i.shape:
        raise ValueError("paired states must have equal shapes")
    diff = np.atleast_2d(phi(s) - phi(s_i))
    return float(np.mean(np.sum(diff * diff, axis=1)))


def encoder_loss_grads(phi: Encoder, s, s_i) -> tuple[float, list[np.ndarray]]:
    """Loss value and its gradient with respect to the encoder parameters."""
    z, cache = phi.forward(np.atleast_2d(s))
    zi, cache_i = phi.forward(np.atleast_2d(s_i))
    diff = z - zi
    n = diff.shape[0]
    g = phi.backward(cache, 2.0 * diff / n)
    gi = phi.backward(cache_i, -2.0 * diff / n)
    return float(np.mean(np.sum(diff * diff, axis=1))), [a + b for a, b in zip(g, gi)]


@dataclass
class LatentScaler:
    """Fixed per-dim affine map applied to codes before the agent sees them."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "LatentScaler":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, codes: np.ndarray, floor: float = 1e-6) -> "LatentScaler":
        return cls(codes.mean(axis=0), np.maximum(codes.std(axis=0), floor))

    def __call__(self, z) -> np.ndarray:
        return (np.asarray(z, dtype=float) - self.shift) / self.scale


class RecPolicy:
    """Recommendation policy acting on encoded states (or raw states without an encoder)."""

    def __init__(self, agent: ActorCritic, encoder: Encoder | None = None, scaler: LatentScaler | None = None):
        self.agent = agent
        self.encoder = encoder
        if scaler is None and encoder is not None:
            scaler = LatentScaler.identity(encoder.latent_dim)
        self.scaler = scaler

    def act(self, state) -> np.ndarray:
        if self.encoder is None:
            return self.agent.act(state)
        return act_latent(self, self.encoder, state)

    __call__ = act


def act_latent(policy: RecPolicy, encoder: Encoder, state) -> np.ndarray:
    """Action computed from the latent code only."""
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != encoder.state_dim:
        raise ValueError(f"state must have {encoder.state_dim} entries")
    if policy.agent.state_dim != encoder.latent_dim:
        raise ValueError("policy input size differs from the encoder's latent size")
    return policy.agent.act(policy.scaler(encoder(state)))


@dataclass
class PgcrTrace:
    rows: list = field(default_factory=list)

    def add(self, epoch, batch, mse_loss, critic_loss, actor_obj, latent_variance) -> None:
        self.rows.append((epoch, batch, mse_loss, critic_loss, actor_obj, latent_variance))

    def column(self, name: str) -> np.ndarray:
        k = TRACE_COLUMNS.index(name)
        return np.array([row[k] for row in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in self.rows:
                w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])


@dataclass
class PgcrResult:
    encoder: Encoder | None
    policy: RecPolicy
    trace: PgcrTrace
    metadata: dict


def latent_variance(encoder: Encoder, states) -> float:
    """Total variance of the codes of ``states`` (sum over latent dims)."""
    return float(np.var(encoder(states), axis=0).sum())


def train_pgcr(
    dataset: OfflineDataset,
    causal_agent: CausalAgent | None,
    env,
    kind: str = "ddpg",
    cfg: PgcrConfig | None = None,
    agent_config: AgentConfig | None = None,
    variant: str = "pgcr",
) -> PgcrResult:
    """Joint encoder and offline actor-critic training.

    ``variant="pgcr_c"`` replaces each modified state with a state drawn
    uniformly from the dataset. Passing ``env=None`` (a dataset without a
    simulator, e.g. ingested ratings) skips the encoder and trains the
    policy on raw states; the returned metadata says so.
    """
    cfg = cfg or PgcrConfig()
    agent_config = agent_config or AgentConfig()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    states, actions, rewards, next_states, dones = dataset.arrays()
    n = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x9C12]))
    trace = PgcrTrace()
    meta = {"kind": kind, "variant": variant, "seed": int(cfg.seed), "encoder": "trained"}

    if env is None:
        agent = ActorCritic(dataset.state_dim, dataset.action_dim, agent_config, kind, cfg.seed)
        meta["encoder"] = "skipped: no simulator to realise modified states"
        for epoch in range(cfg.epochs):
            for b, idx in enumerate(_batches(n, cfg.encoder_batch, rng)):
                batch = Batch(states[idx], actions[idx], rewards[idx], next_states[idx], dones[idx])
                for _ in range(cfg.rl_gradient_steps):
                    rep = update(agent, batch)
                trace.add(epoch, b, math.nan, rep["critic_loss"], rep["actor_obj"], math.nan)
        return PgcrResult(None, RecPolicy(agent), trace, meta)

    if variant == "pgcr" and causal_agent is None:
        raise ValueError("the pgcr variant needs a trained causal agent")
    if dataset.state_dim != env.state_dim:
        raise ValueError("dataset and environment state dimensions differ")
    encoder = Encoder(env.state_dim, cfg.latent_dim, cfg.encoder_hidden, cfg.seed, cfg.encoder_normalize)
    agent = ActorCritic(cfg.latent_dim, dataset.action_dim, agent_config, kind, cfg.seed)
    enc_opt = Adam([encoder.net], cfg.encoder_lr)
    probe_idx = rng.choice(n, size=min(n, 256), replace=False)
    probe = states[probe_idx]
    scaler = LatentScaler.identity(cfg.latent_dim)

    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(n, cfg.encoder_batch, rng)):
            s = states[idx]
            if cfg.standardize_latent:
                scaler = LatentScaler.fit(encoder(probe))
            if variant == "pgcr":
                s_i = _modified_batch(causal_agent, env, s, rng)
            else:
                s_i = states[rng.integers(0, n, size=len(idx))]
            z, cache = encoder.forward(s)
            zi, cache_i = encoder.forward(s_i)
            z_next = encoder(next_states[idx])
            diff = z - zi
            m = len(idx)
            mse = float(np.mean(np.sum(diff * diff, axis=1)))
            batch = Batch(scaler(z), actions[idx], rewards[idx], scaler(z_next), dones[idx])
            rep = update(agent, batch, want_state_grad=True)
            up = 2.0 * diff / m + cfg.joint_rl_weight * rep["state_grad"] / scaler.scale
            g = encoder.backward(cache, up)
            gi = encoder.backward(cache_i, -2.0 * diff / m)
            enc_opt.step([a + c for a, c in zip(g, gi)])
            if not encoder.net.all_finite():
                raise NumericError(
                    "encoder diverged",
                    {"epoch": epoch, "batch": b, "mse_loss": mse, "critic_loss": rep["critic_loss"]},
                )
            if cfg.rl_gradient_steps > 1:
                z, z_next = scaler(encoder(s)), scaler(encoder(next_states[idx]))
                batch = Batch(z, actions[idx], rewards[idx], z_next, dones[idx])
                for _ in range(cfg.rl_gradient_steps - 1):
                    rep = update(agent, batch)
            trace.add(epoch, b, mse, rep["critic_loss"], rep["actor_obj"], latent_variance(encoder, probe))
    if cfg.standardize_latent and cfg.epochs > 0:
        scaler = LatentScaler.fit(encoder(probe))
    return PgcrResult(encoder, RecPolicy(agent, encoder, scaler), trace, meta)


def _batches(n: int, size: int, rng: np.random.Generator):
    """Shuffled minibatch index arrays covering ``range(n)`` once."""
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]
