"""Oracle suites comparing production routines against independent references.

Each suite draws its cases from a fixed seed, runs both routes and reports
the worst disagreement. The ``verify`` command prints one line per suite and
the acceptance tests assert on the same results.
"""

from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracles
from .errors import PreconditionError
from .nn import Mlp
from .pgcr import Encoder, encoder_loss, encoder_loss_grads
from .scm import (
    TabularMdp,
    TabularScm,
    backdoor_adjusted,
    d_separated,
    greedy_policy,
    intervene,
    load_model,
    marginal,
    satisfies_backdoor,
    value_iteration,
)
from .wasserstein import causal_reward, w1_empirical, w1_quantile, w1_sorted_equal

BACKDOOR_TOL = 1e-12
LATENT_TOL = 1e-8
NEGATIVE_GAP = 0.01
W1_TOL = 1e-9
GRAD_TOL = 1e-4
POLICY_EVAL_TOL = 1e-6


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float
    seconds: float
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, worst={self.worst:.3g}, {self.seconds:.2f}s"


def _timed(fn):
    @functools.wraps(fn)
    def run(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res

    return run


@_timed
def backdoor_suite(n_models: int = 50, seed: int = 0, max_nodes: int = 6) -> SuiteResult:
    """Back-door adjustment versus the mutilated model on random SCMs.

    For each model a treatment/outcome pair and an adjustment set accepted
    by the criterion are drawn; the treatment's mechanism is a bijection of
    its noise so positivity holds. Every treatment value is checked.
    """
    rng = np.random.default_rng(seed)
    worst, done, tried, nonempty, criterion_mismatch = 0.0, 0, 0, 0, 0
    while done < n_models:
        tried += 1
        if tried > 100 * n_models:
            break
        n = int(rng.integers(3, max_nodes + 1))
        dag = oracles.random_dag(rng, n, edge_prob=0.45)
        x, y = (int(v) for v in rng.choice(n, size=2, replace=False))
        others = [v for v in range(n) if v not in (x, y)]
        candidates = [tuple(sorted(dag.parents(x)))] if y not in dag.parents(x) else []
        for _ in range(4):
            k = int(rng.integers(0, len(others) + 1))
            candidates.append(tuple(sorted(int(v) for v in rng.choice(others, size=k, replace=False))))
        z = None
        # nonempty sets first so adjustment is exercised, not just conditioning
        for cand in sorted(candidates, key=lambda c: len(c) == 0):
            ok = satisfies_backdoor(dag, x, y, cand)
            if ok != oracles.backdoor_bruteforce(dag, x, y, cand):
                criterion_mismatch += 1
            if ok:
                z = cand
                break
        if z is None:
            continue
        scm = oracles.random_scm(rng, dag, max_domain=3, permutation_nodes=(x,))
        for x_val in scm.domains[x]:
            adjusted = backdoor_adjusted(scm, x, x_val, y, z)
            truth = marginal(intervene(scm, x, x_val), y)
            gap = max(abs(adjusted.prob(v) - truth.prob(v)) for v in scm.domains[y])
            worst = max(worst, gap)
        nonempty += bool(z)
        done += 1
    passed = done == n_models and worst <= BACKDOOR_TOL and criterion_mismatch == 0
    return SuiteResult(
        "backdoor", passed, done, worst, 0.0,
        {"nonempty_sets": nonempty, "criterion_mismatches": criterion_mismatch},
    )


def _abstract_mdp(mdp: TabularMdp, phi: np.ndarray) -> TabularMdp:
    """MDP over latent values, read off one representative state per latent."""
    latents = np.unique(phi)
    reps = np.array([np.flatnonzero(phi == k)[0] for k in latents])
    onehot = (phi[:, None] == latents[None, :]).astype(float)
    P = mdp.transition[reps] @ onehot
    return TabularMdp(P, mdp.reward[reps], mdp.gamma)


@_timed
def latent_suite(n_models: int = 20, seed: int = 0) -> SuiteResult:
    """Optimal values on latent-structured MDPs depend on the latent only.

    Two routes: the spread of ``Q*`` within each latent class, and the
    distance between ``Q*`` and the lifted optimum of the latent-level MDP.
    The negative control gives the tag a reward and must open a gap.
    """
    rng = np.random.default_rng(seed)
    worst, control = 0.0, math.inf
    for _ in range(n_models):
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        mdp, phi = oracles.latent_mdp(rng, *shape, gamma=0.9)
        gap = oracles.latent_q_gap(mdp, phi)
        q = value_iteration(mdp, tol=1e-12)
        lifted = value_iteration(_abstract_mdp(mdp, phi), tol=1e-12)[phi]
        worst = max(worst, gap, float(np.abs(q - lifted).max()))
        bad, bad_phi = oracles.latent_mdp(rng, *shape, gamma=0.9, tag_reward=1.0)
        control = min(control, oracles.latent_q_gap(bad, bad_phi))
    passed = worst < LATENT_TOL and control > NEGATIVE_GAP
    return SuiteResult("latent_optimality", passed, n_models, worst, 0.0, {"negative_control_min_gap": control})


@_timed
def w1_suite(n_pairs: int = 200, seed: int = 0, max_size: int = 8) -> SuiteResult:
    """Sorted and quantile W1 against the transport LP and permutation search."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_pairs):
        n, m = (int(v) for v in rng.integers(1, max_size + 1, size=2))
        if k % 3 == 0:
            m = n
        if k % 4 == 1:
            a, b = rng.integers(-3, 4, size=n).astype(float), rng.integers(-3, 4, size=m).astype(float)
        else:
            a, b = rng.normal(size=n) * 3.0, rng.normal(1.0, 2.0, size=m)
        ref = oracles.w1_lp(a, b)
        got = [w1_quantile(a, b), w1_empirical(a, b)]
        if n == m:
            got.append(w1_sorted_equal(a, b))
            ref_perm = oracles.w1_exhaustive(a, b)
            worst = max(worst, abs(ref_perm - ref))
        worst = max(worst, *(abs(g - ref) for g in got))
    return SuiteResult("wasserstein", worst <= W1_TOL, n_pairs, worst, 0.0)


@_timed
def gradient_suite(n_architectures: int = 20, seed: int = 0) -> SuiteResult:
    """Backprop against central differences for random networks and the encoder loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    acts = ("relu", "tanh", "identity")
    for _ in range(n_architectures):
        depth = int(rng.integers(1, 4))
        sizes = [int(v) for v in rng.integers(1, 7, size=depth + 1)]
        net = Mlp(sizes, [acts[int(i)] for i in rng.integers(0, 3, size=depth)], rng)
        x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
        up = rng.normal(size=(x.shape[0], sizes[-1]))
        worst = max(worst, oracles.mlp_gradient_error(net, x, up))
    encoders = 0
    for normalize in (True, False):
        for _ in range(3):
            d, h, k = (int(v) for v in rng.integers(2, 7, size=3))
            enc = Encoder(d, k, h, int(rng.integers(1 << 30)), normalize=normalize)
            s, s_i = rng.normal(size=(5, d)), rng.normal(size=(5, d))
            _, grads = encoder_loss_grads(enc, s, s_i)
            numeric = oracles.central_difference(lambda: encoder_loss(enc, s, s_i), enc.net.params)
            enc.net.touch()
            worst = max(worst, oracles.relative_error(grads, numeric))
            encoders += 1
    return SuiteResult("gradients", worst < GRAD_TOL, n_architectures + encoders, worst, 0.0)


@_timed
def dsep_suite(n_dags: int = 200, seed: int = 0, max_nodes: int = 8) -> SuiteResult:
    """Reachability d-separation against explicit path enumeration."""
    rng = np.random.default_rng(seed)
    mismatches, queries, separated = 0, 0, 0
    for _ in range(n_dags):
        n = int(rng.integers(2, max_nodes + 1))
        dag = oracles.random_dag(rng, n, edge_prob=float(rng.uniform(0.15, 0.6)))
        for _ in range(3):
            perm = [int(v) for v in rng.permutation(n)]
            nx = int(rng.integers(1, n))
            ny = int(rng.integers(1, n - nx + 1))
            nz = int(rng.integers(0, n - nx - ny + 1))
            x, y, z = perm[:nx], perm[nx : nx + ny], perm[nx + ny : nx + ny + nz]
            fast = d_separated(dag, x, y, z)
            slow = oracles.d_separated_bruteforce(dag, x, y, z)
            mismatches += fast != slow
            separated += slow
            queries += 1
    return SuiteResult(
        "d_separation", mismatches == 0, n_dags, float(mismatches), 0.0,
        {"queries": queries, "separated": separated},
    )


@_timed
def reward_suite(seed: int = 0) -> SuiteResult:
    """Range, monotonicity and the zero-distance value of the causal reward."""
    rng = np.random.default_rng(seed)
    failures = 0
    lams = [0.05, 0.1, 0.2, 0.5, 1.0, *rng.uniform(1e-3, 1.0, size=20)]
    for lam in lams:
        failures += causal_reward(0.0, lam) != 1.0
        w = np.sort(np.concatenate([rng.exponential(5.0, size=200), [0.0, 1e-12, 1.0, 700.0 / lam]]))
        vals = np.array([causal_reward(x, lam) for x in w])
        failures += int(((vals <= 0.0) | (vals > 1.0)).sum())
        distinct = np.diff(w) > 0
        failures += int((np.diff(vals)[distinct] >= 0.0).sum())
        failures += causal_reward(1e9, lam) <= 0.0
    return SuiteResult("causal_reward", failures == 0, len(lams), float(failures), 0.0)


def _scm_checks(scm: TabularScm) -> tuple[float, int, int]:
    """Adjusting for the treatment's parents against the mutilated model, every ordered pair."""
    worst, checked, skipped = 0.0, 0, 0
    n = scm.dag.node_count
    for x in range(n):
        z = tuple(sorted(scm.dag.parents(x)))
        for y in range(n):
            if y == x or y in z:
                continue
            for x_val in scm.domains[x]:
                try:
                    adjusted = backdoor_adjusted(scm, x, x_val, y, z)
                except PreconditionError:
                    skipped += 1
                    continue
                truth = marginal(intervene(scm, x, x_val), y)
                worst = max(worst, max(abs(adjusted.prob(v) - truth.prob(v)) for v in scm.domains[y]))
                checked += 1
    return worst, checked, skipped


def _mdp_checks(mdp: TabularMdp) -> float:
    """Value iteration against exact evaluation of its greedy policy by a linear solve."""
    q = value_iteration(mdp, tol=1e-12)
    pi = greedy_policy(q)
    states = np.arange(mdp.state_count)
    p_pi = mdp.transition[states, pi]
    v = np.linalg.solve(np.eye(mdp.state_count) - mdp.gamma * p_pi, mdp.reward[states, pi])
    q_pi = mdp.reward + mdp.gamma * mdp.transition @ v
    return float(np.abs(q - q_pi).max())


@_timed
def model_suite(path) -> SuiteResult:
    """Checks on one SCM or MDP read from the JSON model format.

    An SCM is checked pair by pair: adjusting for the treatment's parents
    must reproduce the mutilated model wherever positivity holds. An MDP's
    value-iteration solution must match the exact value of its greedy policy.
    """
    model = load_model(path)
    name = f"model {Path(path).name}"
    if isinstance(model, TabularScm):
        worst, checked, skipped = _scm_checks(model)
        return SuiteResult(
            name, worst <= BACKDOOR_TOL, checked, worst, 0.0, {"kind": "scm", "positivity_skipped": skipped}
        )
    worst = _mdp_checks(model)
    return SuiteResult(name, worst <= POLICY_EVAL_TOL, model.state_count, worst, 0.0, {"kind": "mdp"})


SUITES = {
    "backdoor": backdoor_suite,
    "latent_optimality": latent_suite,
    "wasserstein": w1_suite,
    "gradients": gradient_suite,
    "d_separation": dsep_suite,
    "causal_reward": reward_suite,
}


def run_all(seed: int = 0) -> list[SuiteResult]:
    results = []
    for fn in SUITES.values():
        try:
            results.append(fn(seed=seed))
        except (PreconditionError, ArithmeticError, ValueError) as exc:
            results.append(SuiteResult(fn.__name__, False, 0, math.nan, 0.0, {"error": repr(exc)}))
    return results
