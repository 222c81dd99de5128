"""Independent reference implementations used by the verification suites.

Each function here recomputes a quantity by a deliberately different route
from the production code: explicit path enumeration for d-separation,
a linear program or permutation search for W1, central differences for
gradients, and constructed tabular MDPs with known latent structure.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .scm import Dag, FiniteDist, TabularMdp, TabularScm, value_iteration

# --------------------------------------------------------------------------
# Graphs
# --------------------------------------------------------------------------


def random_dag(rng: np.random.Generator, n: int, edge_prob: float = 0.35) -> Dag:
    """DAG whose edges respect a random node order."""
    order = rng.permutation(n)
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < edge_prob:
                edges.add((int(order[i]), int(order[j])))
    return Dag(n, frozenset(edges))


def _strict_descendants(dag: Dag, v: int) -> set:
    out, frontier = set(), [v]
    while frontier:
        u = frontier.pop()
        for a, b in dag.edges:
            if a == u and b not in out:
                out.add(b)
                frontier.append(b)
    return out


def simple_paths(dag: Dag, a: int, b: int) -> list[list[int]]:
    """All simple paths from ``a`` to ``b`` in the undirected skeleton."""
    nbrs = {v: set() for v in range(dag.node_count)}
    for u, v in dag.edges:
        nbrs[u].add(v)
        nbrs[v].add(u)
    paths, stack = [], [(a, [a])]
    while stack:
        node, path = stack.pop()
        if node == b:
            paths.append(path)
            continue
        for nxt in nbrs[node]:
            if nxt not in path:
                stack.append((nxt, path + [nxt]))
    return paths


def path_blocked(dag: Dag, path: Sequence[int], z) -> bool:
    """Blocking test for one path, applied node by node."""
    z = set(z)
    for k in range(1, len(path) - 1):
        prev, mid, nxt = path[k - 1], path[k], path[k + 1]
        collider = (prev, mid) in dag.edges and (nxt, mid) in dag.edges
        if collider:
            if mid not in z and not (_strict_descendants(dag, mid) & z):
                return True
        elif mid in z:
            return True
    return False


def d_separated_bruteforce(dag: Dag, x, y, z) -> bool:
    return all(
        path_blocked(dag, p, z) for a in x for b in y for p in simple_paths(dag, a, b)
    )


def backdoor_bruteforce(dag: Dag, x: int, y: int, z) -> bool:
    """Both back-door conditions checked directly on enumerated paths."""
    z = set(z)
    if _strict_descendants(dag, x) & z:
        return False
    for p in simple_paths(dag, x, y):
        into_x = (p[1], x) in dag.edges
        if into_x and not path_blocked(dag, p, z):
            return False
    return True


# --------------------------------------------------------------------------
# Random finite SCMs
# --------------------------------------------------------------------------


def random_scm(
    rng: np.random.Generator,
    dag: Dag,
    max_domain: int = 4,
    permutation_nodes: Sequence[int] = (),
) -> TabularScm:
    """Random tabular SCM on ``dag`` with strictly positive noise masses.

    Each node gets a domain ``0..d-1`` (``2 <= d <= max_domain``) and noise
    support of the same size. Nodes in ``permutation_nodes`` use a
    mechanism that is a bijection of the noise for every parent setting, so
    every value of such a node has positive probability in every context.
    """
    n = dag.node_count
    sizes = [int(rng.integers(2, max_domain + 1)) for _ in range(n)]
    domains = [tuple(range(d)) for d in sizes]
    mechanisms, noise = [], []
    for v in range(n):
        d = sizes[v]
        probs = rng.dirichlet(np.ones(d))
        probs = probs / math.fsum(probs)
        probs[-1] = 1.0 - math.fsum(probs[:-1])
        noise.append(FiniteDist(tuple(range(d)), tuple(probs)))
        table = {}
        for pv in itertools.product(*(domains[p] for p in dag.parents(v))):
            if v in permutation_nodes:
                image = rng.permutation(d)
            else:
                image = rng.integers(0, d, size=d)
            for u in range(d):
                table[(pv, u)] = int(image[u])
        mechanisms.append(table)
    return TabularScm(dag, tuple(domains), tuple(mechanisms), tuple(noise))


# --------------------------------------------------------------------------
# Wasserstein
# --------------------------------------------------------------------------


def w1_exhaustive(a: Sequence[float], b: Sequence[float]) -> float:
    """Equal sizes only: best matching over all permutations."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = a.size
    if n != b.size or n == 0:
        raise ValueError("permutation search needs equal, non-empty sizes")
    perms = np.array(list(itertools.permutations(range(n))))
    costs = np.abs(a[None, :] - b[perms]).sum(axis=1)
    best = perms[int(np.argmin(costs))]
    return math.fsum(abs(a[i] - b[best[i]]) for i in range(n)) / n


def w1_lp(a: Sequence[float], b: Sequence[float]) -> float:
    """Optimal transport cost from a linear program over couplings.

    Masses are scaled to integers (``m`` per atom of ``a``, ``n`` per atom of
    ``b``), so the optimal vertex is integral; the plan is rounded and its
    cost summed exactly, which removes the solver tolerance from the result.
    """
    from scipy.optimize import linprog

    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("need non-empty samples")
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    rows = np.zeros((n + m, n * m))
    for i in range(n):
        rows[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        rows[n + j, j::m] = 1.0
    rhs = np.concatenate([np.full(n, float(m)), np.full(m, float(n))])
    res = linprog(cost, A_eq=rows, b_eq=rhs, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.rint(res.x).astype(np.int64).reshape(n, m)
    if (plan < 0).any() or (plan.sum(axis=1) != m).any() or (plan.sum(axis=0) != n).any():
        raise RuntimeError("rounded transport plan is infeasible")
    terms = [plan[i, j] * abs(a[i] - b[j]) for i in range(n) for j in range(m) if plan[i, j]]
    return math.fsum(terms) / (n * m)


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------


def central_difference(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-6):
    """Gradient of ``f`` with respect to every entry of ``arrays`` (modified in place, restored)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = f()
            flat[k] = old - eps
            down = f()
            flat[k] = old
            gflat[k] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """``|g - g_fd| / max(|g|, |g_fd|)`` over the concatenated gradients."""
    g = np.concatenate([np.ravel(x) for x in analytic])
    h = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(g), np.linalg.norm(h))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(g - h) / scale)


def mlp_gradient_error(net, x: np.ndarray, upstream: np.ndarray, eps: float = 1e-6) -> float:
    """Relative error of ``net.backward`` for the objective ``sum(upstream * net(x))``."""
    x = np.array(x, dtype=float)
    out, cache = net.forward(x)
    grads, gx = net.backward(cache, upstream)

    def objective():
        return float(np.sum(upstream * net(x)))

    numeric = central_difference(objective, net.params + [x], eps)
    net.touch()
    return relative_error(grads + [gx], numeric)


# --------------------------------------------------------------------------
# Latent-structured MDPs
# --------------------------------------------------------------------------


def latent_mdp(
    rng: np.random.Generator,
    n_latent: int,
    n_tags: int,
    n_actions: int,
    gamma: float = 0.9,
    tag_reward: float = 0.0,
) -> tuple[TabularMdp, np.ndarray]:
    """MDP on states ``(latent, tag)`` with ``phi(s) = latent``.

    Rewards read the latent only, and the next-latent distribution depends
    on the current latent and action only; how the next tag is drawn may
    depend on everything. A nonzero ``tag_reward`` adds ``tag_reward * tag``
    to the reward, which breaks the reward condition.
    Returns the MDP and the map ``phi`` as an integer array over states.
    """
    n_states = n_latent * n_tags
    phi = np.repeat(np.arange(n_latent), n_tags)
    tags = np.tile(np.arange(n_tags), n_latent)
    latent_reward = rng.normal(size=(n_latent, n_actions))
    latent_next = rng.dirichlet(np.ones(n_latent), size=(n_latent, n_actions))
    P = np.zeros((n_states, n_actions, n_states))
    R = np.zeros((n_states, n_actions))
    for s in range(n_states):
        for a in range(n_actions):
            R[s, a] = latent_reward[phi[s], a] + tag_reward * tags[s]
            for k in range(n_latent):
                split = rng.dirichlet(np.ones(n_tags))
                P[s, a, k * n_tags : (k + 1) * n_tags] = latent_next[phi[s], a, k] * split
            P[s, a] /= P[s, a].sum()
    return TabularMdp(P, R, gamma), phi


def latent_q_gap(mdp: TabularMdp, phi: np.ndarray, tol: float = 1e-12) -> float:
    """``max |Q*(s, a) - Q*(s', a)|`` over state pairs sharing a latent."""
    q = value_iteration(mdp, tol=tol)
    gap = 0.0
    for k in np.unique(phi):
        block = q[phi == k]
        gap = max(gap, float((block.max(axis=0) - block.min(axis=0)).max()))
    return gap
