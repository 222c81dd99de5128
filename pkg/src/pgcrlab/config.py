"""INI run configuration mapped onto the dataclass configs.

Sections and keys::

    [env]     EnvConfig fields (d_crc, d_circ, horizon, ...)
    [agent]   AgentConfig fields for the expert, baselines and PGCR agents
    [causal]  kind, min_fill, episodes, horizon, critic_target, lam, window,
              plus agent_<field> to override the causal agent's AgentConfig
    [pgcr]    PgcrConfig fields except seed
    [eval]    episodes, probes, delta
    [run]     seed, expert_steps, expert_eval_every, dataset_episodes,
              behavior_sigma, behavior_epsilon, lambdas, seeds

Unknown sections or keys are rejected. Values are parsed according to the
type of the field's default.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, replace

from .agents import AgentConfig
from .causal_policy import CausalConfig
from .envs import EnvConfig
from .pgcr import PgcrConfig
from .pipeline import PipelineConfig
from .wasserstein import CausalRewardConfig

CAUSAL_KEYS = ("kind", "min_fill", "episodes", "horizon", "critic_target")
EVAL_DEFAULTS = {"episodes": 20, "probes": 200, "delta": 0.1}
RUN_DEFAULTS = {
    "seed": 0,
    "expert_steps": 5000,
    "expert_eval_every": 1000,
    "dataset_episodes": 200,
    "behavior_sigma": 0.3,
    "behavior_epsilon": 0.5,
    "lambdas": "0.05,0.1,0.2,0.5,1.0",
    "seeds": "0,1,2,3,4",
}
SECTIONS = ("env", "agent", "causal", "pgcr", "eval", "run")


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig
    seed: int = 0
    eval_probes: int = 200
    eval_delta: float = 0.1
    lambdas: tuple = (0.05, 0.1, 0.2, 0.5, 1.0)
    seeds: tuple = (0, 1, 2, 3, 4)
    raw: dict = field(default_factory=dict, compare=False)

    def canonical(self) -> dict:
        """Every resolved setting, defaults included."""
        p = self.pipeline
        return {
            "env": asdict(p.env),
            "agent": asdict(p.agent),
            "causal": {
                **{k: getattr(p.causal, k) for k in CAUSAL_KEYS},
                "lam": p.causal.reward.lam,
                "window": p.causal.reward.window,
                "agent": asdict(p.causal.agent),
            },
            "pgcr": {k: v for k, v in asdict(p.pgcr).items() if k != "seed"},
            "eval": {"episodes": p.eval_episodes, "probes": self.eval_probes, "delta": self.eval_delta},
            "run": {
                "seed": self.seed,
                "expert_steps": p.expert_steps,
                "expert_eval_every": p.expert_eval_every,
                "dataset_episodes": p.dataset_episodes,
                "behavior_sigma": p.behavior_sigma,
                "behavior_epsilon": p.behavior_epsilon,
                "lambdas": list(self.lambdas),
                "seeds": list(self.seeds),
            },
        }

    def hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _convert(section: str, key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not MISSING:
            out[f.name] = f.default
    return out


def _build(cls, base, section: str, entries: dict, allowed: dict):
    kw = {}
    for key, text in entries.items():
        if key not in allowed:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kw[key] = _convert(section, key, text, allowed[key])
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _float_list(section: str, key: str, text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected comma-separated numbers") from None


def _int_list(section: str, key: str, text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected comma-separated integers") from None


def parse_overrides(items) -> dict:
    """``section.key=value`` strings to a nested dict."""
    out: dict = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = value
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__")
    parser.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for section, entries in parse_overrides(overrides).items():
        raw.setdefault(section, {}).update(entries)
    for section in raw:
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    env = _build(EnvConfig, EnvConfig(), "env", raw.get("env", {}), _defaults(EnvConfig))
    agent = _build(AgentConfig, AgentConfig(), "agent", raw.get("agent", {}), _defaults(AgentConfig))

    causal_raw = dict(raw.get("causal", {}))
    base_causal = CausalConfig()
    agent_over = {k[len("agent_"):]: causal_raw.pop(k) for k in list(causal_raw) if k.startswith("agent_")}
    causal_agent = _build(AgentConfig, base_causal.agent, "causal", agent_over, _defaults(AgentConfig))
    reward_over = {k: causal_raw.pop(k) for k in ("lam", "window") if k in causal_raw}
    reward = _build(CausalRewardConfig, base_causal.reward, "causal", reward_over, _defaults(CausalRewardConfig))
    allowed = {k: getattr(base_causal, k) for k in CAUSAL_KEYS}
    causal = _build(CausalConfig, replace(base_causal, agent=causal_agent, reward=reward), "causal", causal_raw, allowed)

    pgcr_allowed = {k: v for k, v in _defaults(PgcrConfig).items() if k != "seed"}
    pgcr = _build(PgcrConfig, PgcrConfig(), "pgcr", raw.get("pgcr", {}), pgcr_allowed)

    ev = {}
    for key, text in raw.get("eval", {}).items():
        if key not in EVAL_DEFAULTS:
            raise ConfigError(f"[eval] unknown key {key!r}")
        ev[key] = _convert("eval", key, text, EVAL_DEFAULTS[key])
    ev = {**EVAL_DEFAULTS, **ev}

    run = {}
    for key, text in raw.get("run", {}).items():
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"[run] unknown key {key!r}")
        if key == "lambdas":
            run[key] = _float_list("run", key, text)
        elif key == "seeds":
            run[key] = _int_list("run", key, text)
        else:
            run[key] = _convert("run", key, text, RUN_DEFAULTS[key])
    lambdas = run.pop("lambdas", _float_list("run", "lambdas", RUN_DEFAULTS["lambdas"]))
    seeds = run.pop("seeds", _int_list("run", "seeds", RUN_DEFAULTS["seeds"]))
    seed = run.pop("seed", RUN_DEFAULTS["seed"])

    if ev["episodes"] < 1 or ev["probes"] < 1 or not ev["delta"] > 0:
        raise ConfigError("[eval] episodes and probes must be positive and delta > 0")
    if any(not 0.0 < lam <= 1.0 for lam in lambdas) or not lambdas:
        raise ConfigError("[run] lambdas must be a nonempty list in (0, 1]")
    if not seeds:
        raise ConfigError("[run] seeds must be nonempty")
    try:
        pipeline = PipelineConfig(env, agent, causal, pgcr, eval_episodes=ev["episodes"], **run)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[run] {exc}") from None
    return RunConfig(pipeline, seed, ev["probes"], ev["delta"], lambdas, seeds, raw)
