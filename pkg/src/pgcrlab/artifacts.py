"""Checkpoint files for experts, causal agents and recommendation policies.

Every file uses the network checkpoint format from :mod:`pgcrlab.nn`; the
JSON header carries what is needed to rebuild the wrapper object (agent
kind, configs, latent scaler). Float values are written with ``repr``
precision, so a save/load round trip is exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict

import numpy as np

from .agents import ActorCritic, AgentConfig
from .causal_policy import CausalAgent, CausalConfig, ExpertPolicy
from .nn import load_checkpoint, save_checkpoint
from .pgcr import Encoder, LatentScaler, RecPolicy
from .wasserstein import CausalRewardConfig

ROLES = ("expert", "causal", "pgcr", "base")


def git_blob_sha1(data: bytes) -> str:
    """Content fingerprint computed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_fingerprint(path) -> str:
    with open(path, "rb") as fh:
        return git_blob_sha1(fh.read())


def _agent_meta(ac: ActorCritic) -> dict:
    return {
        "kind": ac.kind,
        "state_dim": ac.state_dim,
        "action_dim": ac.action_dim,
        "agent_config": asdict(ac.config),
        "updates": ac.updates,
    }


def _rebuild_agent(nets: dict, meta: dict) -> ActorCritic:
    ac = ActorCritic(meta["state_dim"], meta["action_dim"], AgentConfig(**meta["agent_config"]), meta["kind"])
    ac.load_networks(nets)
    ac.updates = int(meta["updates"])
    return ac


def save_expert(path, expert: ExpertPolicy) -> None:
    save_checkpoint(path, {"actor": expert.actor}, {"role": "expert", "provenance": expert.provenance})


def load_expert(path) -> ExpertPolicy:
    nets, meta = _load_role(path, "expert")
    return ExpertPolicy(nets["actor"], meta.get("provenance"))


def save_causal(path, agent: CausalAgent, extra: dict | None = None) -> None:
    cfg = agent.config
    meta = {
        "role": "causal",
        **_agent_meta(agent.actor_critic),
        "causal": {
            "kind": cfg.kind,
            "min_fill": cfg.min_fill,
            "episodes": cfg.episodes,
            "horizon": cfg.horizon,
            "critic_target": cfg.critic_target,
            "lam": cfg.reward.lam,
            "window": cfg.reward.window,
        },
        **(extra or {}),
    }
    save_checkpoint(path, agent.actor_critic.networks(), meta)


def load_causal(path) -> CausalAgent:
    nets, meta = _load_role(path, "causal")
    c = dict(meta["causal"])
    reward = CausalRewardConfig(lam=c.pop("lam"), window=c.pop("window"))
    ac = _rebuild_agent(nets, meta)
    return CausalAgent(ac, CausalConfig(agent=ac.config, reward=reward, **c))


def save_policy(path, policy: RecPolicy, extra: dict | None = None) -> None:
    """Recommendation policy; role ``pgcr`` with an encoder, ``base`` without."""
    nets = dict(policy.agent.networks())
    meta = {"role": "base", **_agent_meta(policy.agent), **(extra or {})}
    if policy.encoder is not None:
        nets["encoder"] = policy.encoder.net
        meta["role"] = "pgcr"
        meta["encoder_normalize"] = policy.encoder.normalize
        meta["scaler_shift"] = [float(x) for x in policy.scaler.shift]
        meta["scaler_scale"] = [float(x) for x in policy.scaler.scale]
    save_checkpoint(path, nets, meta)


def load_policy(path) -> tuple[RecPolicy, dict]:
    nets, meta = load_checkpoint(path)
    if meta.get("role") not in ("pgcr", "base"):
        raise ValueError(f"{path}: not a recommendation policy checkpoint")
    agent = _rebuild_agent(nets, meta)
    if meta["role"] == "base":
        return RecPolicy(agent), meta
    encoder = Encoder.from_net(nets["encoder"], meta["encoder_normalize"])
    scaler = LatentScaler(np.array(meta["scaler_shift"]), np.array(meta["scaler_scale"]))
    return RecPolicy(agent, encoder, scaler), meta


def _load_role(path, role: str):
    nets, meta = load_checkpoint(path)
    if meta.get("role") != role:
        raise ValueError(f"{path}: expected a {role} checkpoint, found {meta.get('role')!r}")
    return nets, meta
