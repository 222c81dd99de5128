"""Command-line entry point: ``pgcrlab <command> [options]``.

Every command writes ``manifest-<command>.json`` next to its outputs with the
resolved config hash, the seed and content fingerprints of inputs and
outputs. Exit codes: 0 success, 1 validation or usage error, 2 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .agents import write_learning_curve
from .artifacts import (
    file_fingerprint,
    load_causal,
    load_expert,
    load_policy,
    save_causal,
    save_expert,
    save_policy,
)
from .config import ConfigError, RunConfig, load_config
from .envs import OfflineDataset, ingest_ratings
from .errors import NumericError
from .eval import (
    SweepResult,
    circ_sensitivity,
    evaluate,
    pick_winner,
    sweep_lambda,
    write_metrics_csv,
)
from .pgcr import RecPolicy
from .pipeline import (
    derive_seed,
    make_dataset,
    make_env,
    train_baseline,
    train_causal,
    train_expert,
    train_recommender,
)
from .verify import model_suite, run_all

OUT_ENV = "PGCRLAB_OUT"
JOBS_ENV = "PGCRLAB_JOBS"
VARIANT_CHOICES = ("pgcr", "pgcr_c", "base")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Run:
    """Output directory plus the manifest being assembled for one command."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.inputs: dict = {}
        self.outputs: list = []
        self.extra: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def input(self, role: str, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"{role}: no such file {path}")
        self.inputs[role] = {"file": path.name, "sha1": file_fingerprint(path)}
        return path

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_manifest(self) -> Path:
        doc = {
            "command": self.command,
            "package_version": __version__,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.canonical(),
            "seed": self.cfg.seed,
            "inputs": self.inputs,
            "outputs": {name: file_fingerprint(self.out / name) for name in sorted(self.outputs)},
            **self.extra,
        }
        path = self.out / f"manifest-{self.command}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _dataset_for_env(dataset: OfflineDataset, env):
    """The simulator when the dataset came from it, otherwise ``None``."""
    return env if dataset.metadata.get("env") == env.fingerprint() else None


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args, run: Run) -> int:
    cfg = run.cfg
    if args.ratings:
        dataset = ingest_ratings(run.input("ratings", args.ratings))
    else:
        env = make_env(cfg.pipeline)
        if args.expert:
            expert = load_expert(run.input("expert", args.expert))
        else:
            expert, _ = train_expert(env, cfg.pipeline, cfg.seed)
        run.extra["behavior_expert_checksum"] = expert.checksum()
        dataset = make_dataset(env, expert, cfg.pipeline, cfg.seed)
    dataset.save(run.output("dataset.jsonl"))
    print(f"wrote {len(dataset)} transitions to {run.out / 'dataset.jsonl'}")
    return 0


def cmd_train_expert(args, run: Run) -> int:
    env = make_env(run.cfg.pipeline)
    expert, curve = train_expert(env, run.cfg.pipeline, run.cfg.seed)
    save_expert(run.output("expert.ckpt"), expert)
    write_learning_curve(run.output("expert_curve.csv"), curve)
    run.extra["expert_checksum"] = expert.checksum()
    print(f"expert checksum {expert.checksum()}")
    return 0


def cmd_train_causal(args, run: Run) -> int:
    env = make_env(run.cfg.pipeline)
    expert = load_expert(run.input("expert", args.expert))
    agent, trace = train_causal(env, expert, run.cfg.pipeline, run.cfg.seed)
    save_causal(run.output("causal.ckpt"), agent, {"seed": run.cfg.seed})
    trace.write_csv(run.output("causal_trace.csv"))
    r = trace.rewards
    k = max(1, r.size // 10)
    run.extra["reward_first_tenth"] = float(r[:k].mean())
    run.extra["reward_last_tenth"] = float(r[-k:].mean())
    print(f"causal reward first 10% {r[:k].mean():.4f}, last 10% {r[-k:].mean():.4f}")
    return 0


def _train_policy(run: Run, dataset, env, causal, kind: str, variant: str):
    cfg = run.cfg
    if variant == "base":
        agent = train_baseline(dataset, kind, cfg.pipeline, cfg.seed)
        return RecPolicy(agent), None
    result = train_recommender(dataset, causal, env, kind, cfg.pipeline, cfg.seed, variant)
    return result.policy, result


def cmd_train_pgcr(args, run: Run) -> int:
    cfg = run.cfg
    env = make_env(cfg.pipeline)
    dataset = OfflineDataset.load(run.input("dataset", args.data))
    sim = _dataset_for_env(dataset, env)
    causal = None
    if args.variant == "pgcr" and sim is not None:
        if not args.causal:
            raise ConfigError("the pgcr variant needs --causal")
        causal = load_causal(run.input("causal", args.causal))
    policy, result = _train_policy(run, dataset, sim, causal, args.kind, args.variant)
    lam = causal.config.reward.lam if causal is not None else None
    name = f"{args.variant}_{args.kind}"
    save_policy(run.output(f"{name}.ckpt"), policy, {"variant": args.variant, "seed": cfg.seed, "lambda": lam})
    if result is not None:
        result.trace.write_csv(run.output(f"{name}_trace.csv"))
        run.extra["pgcr_metadata"] = result.metadata
    print(f"wrote {run.out / (name + '.ckpt')}")
    return 0


def _metrics_row(path: Path, policy, meta: dict, env, cfg: RunConfig):
    seed = int(meta.get("seed", cfg.seed))
    m = evaluate(policy, None, env, cfg.pipeline.eval_episodes, derive_seed(seed, "eval"))
    row = m.row(path.stem, meta["kind"], meta.get("variant", meta["role"]), meta.get("lambda"), seed)
    return m, row


def cmd_eval(args, run: Run) -> int:
    cfg = run.cfg
    env = make_env(cfg.pipeline)
    rows = []
    for i, ckpt in enumerate(args.checkpoint):
        path = run.input(f"checkpoint{i}", ckpt)
        policy, meta = load_policy(path)
        if policy.agent.state_dim != (policy.encoder.latent_dim if policy.encoder else env.state_dim):
            raise ConfigError(f"{path}: policy does not match the configured environment")
        m, row = _metrics_row(path, policy, meta, env, cfg)
        rows.append(row)
        line = f"{path.stem}: cumulative {m.cumulative_mean:.4f} +/- {m.cumulative_std:.4f}"
        if policy.encoder is not None:
            ratio = circ_sensitivity(policy.encoder, env, cfg.eval_probes, cfg.eval_delta, cfg.seed)
            run.extra.setdefault("circ_sensitivity", {})[path.stem] = ratio
            line += f", circ ratio {ratio:.4f}"
        print(line)
    write_metrics_csv(run.output(args.name), rows)
    return 0


def cmd_ablate(args, run: Run) -> int:
    cfg = run.cfg
    env = make_env(cfg.pipeline)
    dataset = OfflineDataset.load(run.input("dataset", args.data))
    if _dataset_for_env(dataset, env) is None:
        raise ConfigError("the ablation needs a dataset generated from the configured environment")
    policy, result = _train_policy(run, dataset, env, None, args.kind, "pgcr_c")
    name = f"pgcr_c_{args.kind}"
    path = run.output(f"{name}.ckpt")
    save_policy(path, policy, {"variant": "pgcr_c", "seed": cfg.seed, "lambda": None})
    result.trace.write_csv(run.output(f"{name}_trace.csv"))
    _, meta = load_policy(path)
    m, row = _metrics_row(path, policy, meta, env, cfg)
    write_metrics_csv(run.output("metrics-ablate.csv"), [row])
    print(f"{name}: cumulative {m.cumulative_mean:.4f} +/- {m.cumulative_std:.4f}")
    return 0


def _sweep_one(payload):
    lambdas, pipeline, seed, kind = payload
    return sweep_lambda(lambdas, pipeline, [seed], kind)


def cmd_sweep_lambda(args, run: Run) -> int:
    cfg = run.cfg
    lambdas = tuple(sorted(cfg.lambdas))
    jobs = args.jobs if args.jobs is not None else int(os.environ.get(JOBS_ENV, "1"))
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    payloads = [(lambdas, cfg.pipeline, s, args.kind) for s in cfg.seeds]
    if jobs == 1 or len(payloads) == 1:
        parts = [_sweep_one(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_sweep_one, payloads))
    metrics = {lam: [pair for part in parts for pair in part.metrics[lam]] for lam in lambdas}
    traces = {lam: [t for part in parts for t in part.traces[lam]] for lam in lambdas}
    scores = {lam: float(np.mean([m.cumulative_mean for _, m in metrics[lam]])) for lam in lambdas}
    result = SweepResult(lambdas, metrics, traces, pick_winner(scores))
    write_metrics_csv(run.output("sweep.csv"), result.rows("sweep", args.kind))
    run.extra["winner_lambda"] = result.winner
    run.extra["mean_cumulative_by_lambda"] = {repr(k): v for k, v in scores.items()}
    for lam in lambdas:
        print(f"lambda {lam:g}: mean cumulative {scores[lam]:.4f}")
    print(f"best lambda {result.winner:g}")
    return 0


def cmd_verify(args, run: Run) -> int:
    results = run_all(run.cfg.seed)
    for i, path in enumerate(args.model or ()):
        results.append(model_suite(run.input(f"model{i}", path)))
    for r in results:
        print(r.line())
    run.extra["suites"] = {r.name: {"passed": r.passed, "cases": r.cases, "worst": r.worst} for r in results}
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-expert": cmd_train_expert,
    "train-causal": cmd_train_causal,
    "train-pgcr": cmd_train_pgcr,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep_lambda,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [env] [agent] [causal] [pgcr] [eval] [run] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="master seed (same as --set run.seed=N)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")

    parser = _Parser(prog="pgcrlab", description="Causal state representations for offline RL recommenders.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate or ingest an offline dataset")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--expert", help="behaviour expert checkpoint (trained from the seed when omitted)")
    src.add_argument("--ratings", help="user,item,rating,timestamp log to sessionise instead")

    sub.add_parser("train-expert", parents=[common], help="train the online DDPG expert")

    p = sub.add_parser("train-causal", parents=[common], help="train the causal feature-selection agent")
    p.add_argument("--expert", required=True)

    p = sub.add_parser("train-pgcr", parents=[common], help="train an offline recommendation policy")
    p.add_argument("--data", required=True)
    p.add_argument("--causal", help="causal agent checkpoint (pgcr variant)")
    p.add_argument("--kind", choices=("ddpg", "td3"), default="ddpg")
    p.add_argument("--variant", choices=VARIANT_CHOICES, default="pgcr")

    p = sub.add_parser("eval", parents=[common], help="evaluate policy checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--name", default="metrics.csv", help="metrics CSV file name")

    p = sub.add_parser("ablate", parents=[common], help="random-state ablation (PGCR-C)")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("ddpg", "td3"), default="ddpg")

    p = sub.add_parser("sweep-lambda", parents=[common], help="retrain causal agent and PGCR per lambda")
    p.add_argument("--kind", choices=("ddpg", "td3"), default="ddpg")
    p.add_argument("--jobs", type=int, help=f"parallel seeds (default ${JOBS_ENV} or 1)")

    p = sub.add_parser("verify", parents=[common], help="run the oracle suites")
    p.add_argument("--model", action="append", help="also check an SCM or MDP JSON model (repeatable)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        run = Run(args.command, cfg, out)
        code = COMMANDS[args.command](args, run)
        run.write_manifest()
        return code
    except UsageError as exc:
        print(f"{exc}\nrun 'pgcrlab --help' for usage", file=sys.stderr)
        return 1
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if isinstance(exc, NumericError) and exc.diagnostics:
            print(json.dumps(exc.diagnostics, sort_keys=True, default=str), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
