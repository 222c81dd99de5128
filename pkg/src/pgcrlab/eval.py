"""Evaluation metrics, the random-state ablation, lambda sweeps and encoder probes.

Rollouts are deterministic: policies act without exploration noise and
episode ``k`` of an evaluation uses the generator derived from
``(seed, k)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envs import episode_rng
from .pgcr import PgcrConfig, train_pgcr
from .pipeline import (
    PipelineConfig,
    derive_seed,
    make_dataset,
    make_env,
    train_causal,
    train_expert,
    train_recommender,
)

METRICS_COLUMNS = (
    "run_id",
    "algorithm",
    "variant",
    "lambda",
    "seed",
    "cumulative_mean",
    "cumulative_std",
    "average_mean",
    "average_std",
    "length_mean",
    "length_std",
)
CONSISTENCY_TOL = 1e-9


def _mean_std(x: np.ndarray) -> tuple[float, float]:
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1))


@dataclass(frozen=True)
class Metrics:
    """Per-episode totals aggregated as mean and sample standard deviation."""

    cumulative_mean: float
    cumulative_std: float
    average_mean: float
    average_std: float
    length_mean: float
    length_std: float
    n_episodes: int
    seeds: tuple = ()

    @classmethod
    def from_episodes(cls, returns: Sequence[float], lengths: Sequence[int], seeds=()) -> "Metrics":
        returns = np.asarray(returns, dtype=float)
        lengths = np.asarray(lengths, dtype=float)
        if returns.size == 0 or returns.shape != lengths.shape:
            raise ValueError("need one return and one length per episode")
        if (lengths < 1).any():
            raise ValueError("episode lengths must be positive")
        averages = returns / lengths
        gap = np.abs(averages * lengths - returns)
        if (gap > CONSISTENCY_TOL * np.maximum(1.0, np.abs(returns))).any():
            raise ArithmeticError("average reward times length does not reproduce the return")
        cm, cs = _mean_std(returns)
        am, as_ = _mean_std(averages)
        lm, ls = _mean_std(lengths)
        return cls(cm, cs, am, as_, lm, ls, int(returns.size), tuple(int(s) for s in seeds))

    def row(self, run_id: str, algorithm: str, variant: str, lam, seed) -> dict:
        return {
            "run_id": run_id,
            "algorithm": algorithm,
            "variant": variant,
            "lambda": "" if lam is None else repr(float(lam)),
            "seed": int(seed),
            "cumulative_mean": repr(self.cumulative_mean),
            "cumulative_std": repr(self.cumulative_std),
            "average_mean": repr(self.average_mean),
            "average_std": repr(self.average_std),
            "length_mean": repr(self.length_mean),
            "length_std": repr(self.length_std),
        }


def _policy_fn(policy, encoder):
    act = policy.act if hasattr(policy, "act") else policy
    if encoder is None:
        return act
    return lambda s: act(encoder(s))


def evaluate(policy, encoder, env, n_episodes: int, seed: int) -> Metrics:
    """Roll out the deterministic policy for ``n_episodes`` episodes.

    ``policy`` is a callable or an object with ``act``; with an encoder the
    policy receives ``encoder(state)`` instead of the state.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    act = _policy_fn(policy, encoder)
    returns, lengths = [], []
    for ep in range(n_episodes):
        rng = episode_rng(seed, ep)
        s = env.reset(rng)
        total, steps = 0.0, 0
        for t in range(env.horizon):
            s, r, done = env.step(s, act(s), rng, t)
            total += r
            steps += 1
            if done:
                break
        returns.append(total)
        lengths.append(steps)
    return Metrics.from_episodes(returns, lengths, (seed,))


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["seed"] = int(row["seed"])
        row["lambda"] = float(row["lambda"]) if row["lambda"] else None
        for key in METRICS_COLUMNS[5:]:
            row[key] = float(row[key])
    return rows


def ablate_random_state(dataset, env, kind: str, cfg: PgcrConfig, seed: int, agent_config=None, n_episodes: int = 20):
    """Random-state ablation: modified states are drawn uniformly from the dataset.

    Returns the evaluation metrics and the trained result.
    """
    result = train_pgcr(dataset, None, env, kind, cfg, agent_config, variant="pgcr_c")
    return evaluate(result.policy, None, env, n_episodes, seed), result


@dataclass
class SweepResult:
    lambdas: tuple
    metrics: dict
    traces: dict = field(default_factory=dict)
    winner: float = math.nan

    def rows(self, run_id: str = "sweep", algorithm: str = "ddpg") -> list[dict]:
        out = []
        for lam in self.lambdas:
            for seed, m in self.metrics[lam]:
                out.append(m.row(run_id, algorithm, "pgcr", lam, seed))
        return out


def pick_winner(scores: dict) -> float:
    """Lambda with the best score; ties go to the smaller lambda."""
    best = max(scores.values())
    return min(lam for lam, v in scores.items() if v == best)


def sweep_lambda(lambdas: Sequence[float], cfg: PipelineConfig, seeds: Sequence[int], kind: str = "ddpg") -> SweepResult:
    """Retrain the causal agent and PGCR for every lambda and seed.

    The expert and the offline dataset depend on the seed only and are
    shared across lambdas.
    """
    lams = tuple(sorted(float(x) for x in lambdas))
    if not lams or any(not 0.0 < x <= 1.0 for x in lams):
        raise ValueError("lambdas must lie in (0, 1]")
    if len(set(lams)) != len(lams):
        raise ValueError("lambdas must be distinct")
    env = make_env(cfg)
    metrics = {lam: [] for lam in lams}
    traces = {lam: [] for lam in lams}
    for seed in seeds:
        expert, _ = train_expert(env, cfg, seed)
        dataset = make_dataset(env, expert, cfg, seed)
        for lam in lams:
            run_cfg = cfg.with_lambda(lam)
            causal, trace = train_causal(env, expert, run_cfg, seed)
            result = train_recommender(dataset, causal, env, kind, run_cfg, seed)
            m = evaluate(result.policy, None, env, cfg.eval_episodes, derive_seed(seed, "eval"))
            metrics[lam].append((seed, m))
            traces[lam].append(trace.rewards)
    scores = {lam: float(np.mean([m.cumulative_mean for _, m in metrics[lam]])) for lam in lams}
    return SweepResult(lams, metrics, traces, pick_winner(scores))


def circ_sensitivity(encoder, env, n_probes: int = 200, delta: float = 0.1, seed: int = 0) -> float:
    """Mean latent response to CIRC perturbations over the mean response to CRC ones.

    Each probe state is nudged by ``delta`` along one coordinate at a time.
    Returns ``inf`` (with a warning) when CRC perturbations move nothing.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E75]))
    states = env.sample_states(rng, n_probes)
    base = np.asarray(encoder(states), dtype=float)
    response = np.empty(env.state_dim)
    for j in range(env.state_dim):
        bumped = states.copy()
        bumped[:, j] += delta
        moved = np.asarray(encoder(bumped), dtype=float) - base
        response[j] = np.linalg.norm(moved.reshape(n_probes, -1), axis=1).mean()
    crc = response[env.crc_slice].mean()
    circ = response[env.circ_slice].mean()
    if crc == 0.0:
        warnings.warn("encoder ignores every CRC coordinate; sensitivity ratio is infinite")
        return math.inf
    return float(circ / crc)


def directional(name: str, better: dict, worse: dict, required: int) -> dict:
    """Per-seed ``better >= worse`` comparison with the seed list kept alongside.

    ``better`` and ``worse`` map seed to score. The result records every
    pair, the number of seeds where the ordering holds and whether that
    count reaches ``required``.
    """
    seeds = sorted(better)
    if seeds != sorted(worse):
        raise ValueError("both score maps need the same seeds")
    holds = [s for s in seeds if better[s] >= worse[s]]
    return {
        "comparison": name,
        "seeds": seeds,
        "better": [float(better[s]) for s in seeds],
        "worse": [float(worse[s]) for s in seeds],
        "holds_on": holds,
        "count": len(holds),
        "required": int(required),
        "passed": len(holds) >= required,
    }
