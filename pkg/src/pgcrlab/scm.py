"""Exact inference on finite structural causal models.

Every distribution is computed by enumerating the exogenous noise
configurations in topological order, so results are exact up to floating
point summation. Graph queries (d-separation, back-door criterion) work on
integer-labelled DAGs.

The one-step MDP graph used throughout the package has four nodes::

    s_t -> a_t,  s_t -> s_next,  a_t -> s_next,  s_t -> r_t,  a_t -> r_t

with ``a_t = policy(s_t, eta)``, ``s_next = transition(s_t, a_t, eps)`` and
``r_t = reward(s_t, a_t)``. :func:`mdp_scm` builds that model from lookup
tables.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, PreconditionError

MAX_NOISE_CONFIGS = 10**7
PROB_ATOL = 1e-12

MDP_NODES = ("s_t", "a_t", "s_next", "r_t")
MDP_EDGES = frozenset({(0, 1), (0, 2), (1, 2), (0, 3), (1, 3)})


# --------------------------------------------------------------------------
# Graphs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph over nodes ``0..node_count-1``."""

    node_count: int
    edges: frozenset

    def __post_init__(self):
        if self.node_count < 0:
            raise ValueError("node_count must be nonnegative")
        edges = list(self.edges)
        if len(set(edges)) != len(edges):
            raise ValueError("duplicate edges")
        for u, v in edges:
            self._check_node(u)
            self._check_node(v)
            if u == v:
                raise ValueError(f"self-loop on node {u}")
        object.__setattr__(self, "edges", frozenset((int(u), int(v)) for u, v in edges))
        parents = [[] for _ in range(self.node_count)]
        children = [[] for _ in range(self.node_count)]
        for u, v in sorted(self.edges):
            parents[v].append(u)
            children[u].append(v)
        object.__setattr__(self, "_parents", tuple(tuple(p) for p in parents))
        object.__setattr__(self, "_children", tuple(tuple(c) for c in children))
        object.__setattr__(self, "_order", self._toposort())

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[tuple[int, int]]) -> "Dag":
        edges = list(edges)
        if len(set(edges)) != len(edges):
            raise ValueError("duplicate edges")
        return cls(node_count, frozenset(edges))

    def _check_node(self, v):
        if not isinstance(v, (int, np.integer)) or not 0 <= v < self.node_count:
            raise ValueError(f"node {v!r} out of range for {self.node_count} nodes")

    def _toposort(self):
        indeg = [len(p) for p in self._parents]
        ready = deque(i for i in range(self.node_count) if indeg[i] == 0)
        order = []
        while ready:
            u = ready.popleft()
            order.append(u)
            for v in self._children[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append(v)
        if len(order) != self.node_count:
            raise ValueError("graph contains a cycle")
        return tuple(order)

    def parents(self, v: int) -> tuple[int, ...]:
        return self._parents[v]

    def children(self, v: int) -> tuple[int, ...]:
        return self._children[v]

    @property
    def topological_order(self) -> tuple[int, ...]:
        return self._order

    def descendants(self, v: int) -> set[int]:
        """Strict descendants of ``v``."""
        seen: set[int] = set()
        stack = list(self._children[v])
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(self._children[u])
        return seen

    def ancestors(self, nodes: Iterable[int]) -> set[int]:
        """Ancestors of ``nodes``, the nodes themselves included."""
        seen = set(nodes)
        stack = list(seen)
        while stack:
            u = stack.pop()
            for p in self._parents[u]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def without_edges(self, drop: Iterable[tuple[int, int]]) -> "Dag":
        return Dag(self.node_count, self.edges - frozenset(drop))


def _node_set(dag: Dag, nodes, name: str) -> frozenset:
    if isinstance(nodes, (int, np.integer)):
        nodes = (nodes,)
    out = frozenset(int(n) for n in nodes)
    for n in out:
        if not 0 <= n < dag.node_count:
            raise ValueError(f"{name}: node {n} out of range")
    return out


def d_separated(dag: Dag, x, y, z) -> bool:
    """True iff ``z`` d-separates every node of ``x`` from every node of ``y``.

    Uses the reachable-set traversal over (node, direction) pairs: a trail may
    pass a non-collider only if it is unobserved, and a collider only if the
    collider or one of its descendants is in ``z``.
    """
    x = _node_set(dag, x, "x")
    y = _node_set(dag, y, "y")
    z = _node_set(dag, z, "z")
    if x & y or x & z or y & z:
        raise ValueError("x, y and z must be pairwise disjoint")
    if not x or not y:
        return True

    z_anc = dag.ancestors(z)
    # "up": entered the node from one of its children; "down": from a parent
    frontier = [(v, "up") for v in x]
    visited = set()
    while frontier:
        v, direction = frontier.pop()
        if (v, direction) in visited:
            continue
        visited.add((v, direction))
        if v not in z and v in y:
            return False
        if direction == "up" and v not in z:
            frontier.extend((p, "up") for p in dag.parents(v))
            frontier.extend((c, "down") for c in dag.children(v))
        elif direction == "down":
            if v not in z:
                frontier.extend((c, "down") for c in dag.children(v))
            if v in z_anc:
                frontier.extend((p, "up") for p in dag.parents(v))
    return True


def satisfies_backdoor(dag: Dag, x: int, y: int, z) -> bool:
    """Back-door criterion for the ordered pair ``(x, y)`` relative to ``z``."""
    (x,) = _node_set(dag, x, "x")
    (y,) = _node_set(dag, y, "y")
    z = _node_set(dag, z, "z")
    if x == y:
        raise ValueError("x and y must differ")
    if x in z or y in z:
        raise ValueError("z must exclude x and y")
    if z & dag.descendants(x):
        return False
    # paths with an arrow into x are exactly the x-paths left once x's
    # outgoing edges are removed
    cut = dag.without_edges((x, c) for c in dag.children(x))
    return d_separated(cut, {x}, {y}, z)


# --------------------------------------------------------------------------
# Distributions and models
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteDist:
    """Probability mass function on a finite support."""

    support: tuple
    probs: tuple

    def __post_init__(self):
        support = tuple(self.support)
        probs = tuple(float(p) for p in self.probs)
        if len(support) != len(probs):
            raise ValueError("support and probs differ in length")
        if len(set(support)) != len(support):
            raise ValueError("support values must be distinct")
        if any(not math.isfinite(p) or p < 0 for p in probs):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(math.fsum(probs) - 1.0) > PROB_ATOL:
            raise ValueError(f"probabilities sum to {math.fsum(probs)!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    def prob(self, value) -> float:
        try:
            return self.probs[self.support.index(value)]
        except ValueError:
            return 0.0

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.probs))

    @classmethod
    def point_mass(cls, value) -> "FiniteDist":
        return cls((value,), (1.0,))

    @classmethod
    def uniform(cls, values: Sequence) -> "FiniteDist":
        n = len(values)
        return cls(tuple(values), (1.0 / n,) * n)


@dataclass(frozen=True)
class TabularScm:
    """Finite SCM: one lookup-table mechanism and one independent noise per node.

    ``mechanisms[i]`` maps ``(parent_values, noise_value)`` to the value of
    node ``i``, where ``parent_values`` is a tuple ordered like
    ``dag.parents(i)``.
    """

    dag: Dag
    domains: tuple
    mechanisms: tuple
    noise: tuple
    names: tuple = field(default=())

    def __post_init__(self):
        n = self.dag.node_count
        domains = tuple(tuple(d) for d in self.domains)
        mechanisms = tuple(dict(m) for m in self.mechanisms)
        noise = tuple(self.noise)
        names = tuple(self.names) or tuple(f"X{i}" for i in range(n))
        if not (len(domains) == len(mechanisms) == len(noise) == len(names) == n):
            raise ValueError("domains, mechanisms, noise and names need one entry per node")
        for i in range(n):
            if not domains[i] or len(set(domains[i])) != len(domains[i]):
                raise ValueError(f"node {i}: domain must be non-empty with distinct values")
            if not isinstance(noise[i], FiniteDist):
                raise ValueError(f"node {i}: noise must be a FiniteDist")
            parent_domains = [domains[p] for p in self.dag.parents(i)]
            expected = {
                (pv, u) for pv in itertools.product(*parent_domains) for u in noise[i].support
            }
            if set(mechanisms[i]) != expected:
                raise ValueError(
                    f"node {i}: mechanism must have exactly one entry per "
                    "(parent values, noise value) pair"
                )
            dom = set(domains[i])
            if any(v not in dom for v in mechanisms[i].values()):
                raise ValueError(f"node {i}: mechanism produces a value outside the domain")
        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "mechanisms", mechanisms)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "names", names)

    def index(self, node) -> int:
        if isinstance(node, str):
            try:
                return self.names.index(node)
            except ValueError:
                raise ValueError(f"unknown node name {node!r}") from None
        if not 0 <= int(node) < self.dag.node_count:
            raise ValueError(f"node {node} out of range")
        return int(node)

    def noise_config_count(self) -> int:
        return math.prod(len(u.support) for u in self.noise)

    def joint(self) -> dict[tuple, float]:
        """Exact joint pmf over all endogenous variables (zero atoms omitted)."""
        if self.noise_config_count() > MAX_NOISE_CONFIGS:
            raise NumericError(
                f"{self.noise_config_count()} noise configurations exceed the "
                f"enumeration cap of {MAX_NOISE_CONFIGS}"
            )
        n = self.dag.node_count
        partial: dict[tuple, float] = {(None,) * n: 1.0}
        for v in self.dag.topological_order:
            parents = self.dag.parents(v)
            table = self.mechanisms[v]
            noise = self.noise[v]
            nxt: dict[tuple, float] = {}
            for assignment, p in partial.items():
                pv = tuple(assignment[q] for q in parents)
                for u, pu in zip(noise.support, noise.probs):
                    if pu == 0.0:
                        continue
                    new = assignment[:v] + (table[(pv, u)],) + assignment[v + 1 :]
                    nxt[new] = nxt.get(new, 0.0) + p * pu
            partial = nxt
        return partial

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` joint samples as an object array of shape (n, nodes)."""
        out = np.empty((n, self.dag.node_count), dtype=object)
        for v in self.dag.topological_order:
            noise = self.noise[v]
            idx = rng.choice(len(noise.support), size=n, p=np.asarray(noise.probs))
            parents = self.dag.parents(v)
            table = self.mechanisms[v]
            for k in range(n):
                pv = tuple(out[k, q] for q in parents)
                out[k, v] = table[(pv, noise.support[idx[k]])]
        return out


def _project(joint: Mapping[tuple, float], nodes: Sequence[int]) -> dict[tuple, float]:
    out: dict[tuple, float] = {}
    for assignment, p in joint.items():
        key = tuple(assignment[i] for i in nodes)
        out[key] = out.get(key, 0.0) + p
    return out


def _dist_over(domain: Sequence, masses: Mapping) -> FiniteDist:
    probs = [masses.get(v, 0.0) for v in domain]
    total = math.fsum(probs)
    if total <= 0:
        raise NumericError("distribution has no mass")
    if abs(total - 1.0) > PROB_ATOL:
        probs = [p / total for p in probs]
    return FiniteDist(tuple(domain), tuple(probs))


def marginal(scm: TabularScm, var) -> FiniteDist:
    """Exact marginal pmf of ``var`` over its whole domain."""
    v = scm.index(var)
    masses = {k[0]: p for k, p in _project(scm.joint(), [v]).items()}
    return _dist_over(scm.domains[v], masses)


def intervene(scm: TabularScm, var, value) -> TabularScm:
    """Return the mutilated model for ``do(var := value)``.

    Incoming edges of ``var`` are removed and its mechanism becomes the
    constant ``value``; the noise term is kept so the noise space, and with
    it every other mechanism, is unchanged.
    """
    v = scm.index(var)
    if value not in scm.domains[v]:
        raise ValueError(f"value {value!r} outside the domain of node {v}")
    dag = scm.dag.without_edges((p, v) for p in scm.dag.parents(v))
    mechanisms = list(scm.mechanisms)
    mechanisms[v] = {((), u): value for u in scm.noise[v].support}
    return TabularScm(dag, scm.domains, tuple(mechanisms), scm.noise, scm.names)


def conditional(scm: TabularScm, y, given: Mapping) -> FiniteDist:
    """Observational ``P(y | given)``; ``given`` maps nodes to values."""
    yv = scm.index(y)
    cond = {scm.index(k): val for k, val in given.items()}
    masses: dict = {}
    total = 0.0
    for assignment, p in scm.joint().items():
        if all(assignment[k] == val for k, val in cond.items()):
            masses[assignment[yv]] = masses.get(assignment[yv], 0.0) + p
            total += p
    if total == 0.0:
        raise PreconditionError("conditioning event has probability zero")
    return _dist_over(scm.domains[yv], {k: m / total for k, m in masses.items()})


def backdoor_adjusted(scm: TabularScm, x, x_val, y, z) -> FiniteDist:
    """``sum_z P(y | x_val, z) P(z)`` computed from the observational joint.

    Raises :class:`PreconditionError` when ``z`` does not satisfy the
    back-door criterion for ``(x, y)`` or when some ``z`` with positive mass
    never co-occurs with ``x_val``.
    """
    xv, yv = scm.index(x), scm.index(y)
    if isinstance(z, (str, int, np.integer)):
        z = (z,)
    zs = sorted(scm.index(n) for n in z)
    if x_val not in scm.domains[xv]:
        raise ValueError(f"value {x_val!r} outside the domain of node {xv}")
    if not satisfies_backdoor(scm.dag, xv, yv, zs):
        raise PreconditionError("adjustment set does not satisfy the back-door criterion")

    joint = scm.joint()
    p_z = _project(joint, zs)
    p_xz = _project(joint, [xv] + zs)
    p_xyz = _project(joint, [xv, yv] + zs)
    result = {}
    for y_val in scm.domains[yv]:
        terms = []
        for zval, pz in p_z.items():
            pxz = p_xz.get((x_val,) + zval, 0.0)
            if pxz == 0.0:
                raise PreconditionError(
                    f"positivity violated: P(x={x_val!r}, z={zval!r}) = 0 while P(z) > 0"
                )
            terms.append(p_xyz.get((x_val, y_val) + zval, 0.0) / pxz * pz)
        result[y_val] = math.fsum(terms)
    return _dist_over(scm.domains[yv], result)


# --------------------------------------------------------------------------
# The one-step MDP model
# --------------------------------------------------------------------------


def mdp_scm(
    states: Sequence,
    actions: Sequence,
    state_dist: FiniteDist,
    policy: Mapping,
    policy_noise: FiniteDist,
    transition: Mapping,
    transition_noise: FiniteDist,
    reward: Mapping,
) -> TabularScm:
    """Build the one-step MDP SCM from lookup tables.

    ``policy[(s, eta)] -> a``, ``transition[(s, a, eps)] -> s'`` and
    ``reward[(s, a)] -> r``. The state root takes its distribution from
    ``state_dist`` through an identity mechanism.
    """
    states, actions = tuple(states), tuple(actions)
    rewards = tuple(sorted(set(reward.values())))
    dag = Dag(4, MDP_EDGES)
    mechs = (
        {((), s): s for s in state_dist.support},
        {((s,), e): policy[(s, e)] for s in states for e in policy_noise.support},
        {
            ((s, a), e): transition[(s, a, e)]
            for s in states
            for a in actions
            for e in transition_noise.support
        },
        {((s, a), 0): reward[(s, a)] for s in states for a in actions},
    )
    if set(state_dist.support) - set(states):
        raise ValueError("state distribution support must lie in the state set")
    return TabularScm(
        dag,
        (states, actions, states, rewards),
        mechs,
        (state_dist, policy_noise, transition_noise, FiniteDist.point_mass(0)),
        MDP_NODES,
    )


def _check_mdp_shape(scm: TabularScm):
    if scm.dag.node_count != 4 or scm.dag.edges != MDP_EDGES or scm.names != MDP_NODES:
        raise ValueError("model does not encode the one-step MDP graph")


def interventional_next_state(scm: TabularScm, a_val) -> FiniteDist:
    """Exact ``P(s_next | do(a_t := a_val))`` as E over s_t and eps.

    Evaluated directly as ``sum_s P(s) sum_eps P(eps) [f_P(s, a_val, eps) = s']``
    from the observational model; no mutilation is performed.
    """
    _check_mdp_shape(scm)
    if a_val not in scm.domains[1]:
        raise ValueError(f"action {a_val!r} outside the action domain")
    p_s = marginal(scm, 0)
    f_p, eps = scm.mechanisms[2], scm.noise[2]
    masses: dict = {}
    for s, ps in zip(p_s.support, p_s.probs):
        for e, pe in zip(eps.support, eps.probs):
            nxt = f_p[((s, a_val), e)]
            masses[nxt] = masses.get(nxt, 0.0) + ps * pe
    return _dist_over(scm.domains[2], masses)


def interventional_reward(scm: TabularScm, s_val) -> FiniteDist:
    """Exact ``P(r_t | do(s_t := s_val))`` as E over a_t and eta."""
    _check_mdp_shape(scm)
    if s_val not in scm.domains[0]:
        raise ValueError(f"state {s_val!r} outside the state domain")
    pi, eta = scm.mechanisms[1], scm.noise[1]
    f_r, u_r = scm.mechanisms[3], scm.noise[3]
    masses: dict = {}
    for e, pe in zip(eta.support, eta.probs):
        a = pi[((s_val,), e)]
        for u, pu in zip(u_r.support, u_r.probs):
            r = f_r[((s_val, a), u)]
            masses[r] = masses.get(r, 0.0) + pe * pu
    return _dist_over(scm.domains[3], masses)


# --------------------------------------------------------------------------
# Tabular MDPs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with ``transition[s, a, s']`` and ``reward[s, a]``."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transition must have shape (S, A, S)")
        if R.shape != P.shape[:2]:
            raise ValueError("reward must have shape (S, A)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if (P < 0).any() or np.abs(P.sum(axis=2) - 1.0).max() > PROB_ATOL:
            raise ValueError("transition rows must be stochastic")
        if not np.isfinite(R).all():
            raise ValueError("reward must be finite")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)

    @property
    def state_count(self) -> int:
        return self.transition.shape[0]

    @property
    def action_count(self) -> int:
        return self.transition.shape[1]


def bellman_backup(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    v = q.max(axis=1)
    return mdp.reward + mdp.gamma * mdp.transition @ v


def value_iteration(
    mdp: TabularMdp,
    tol: float = 1e-10,
    max_sweeps: int = 10**6,
    history: list | None = None,
) -> np.ndarray:
    """Optimal action values by repeated Bellman backups from zero.

    Stops at the first iterate whose sup-norm Bellman residual is below
    ``tol`` and returns that iterate. Residuals are appended to ``history``
    when given.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.state_count, mdp.action_count))
    for _ in range(max_sweeps):
        backed = bellman_backup(mdp, q)
        residual = float(np.abs(backed - q).max())
        if history is not None:
            history.append(residual)
        if not math.isfinite(residual):
            raise NumericError("value iteration diverged")
        if residual < tol:
            return q
        q = backed
    raise NumericError(f"value iteration did not reach tol={tol} in {max_sweeps} sweeps")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Greedy action per state; exact ties go to the lowest action index."""
    return np.argmax(q, axis=1)


# --------------------------------------------------------------------------
# JSON text schema
# --------------------------------------------------------------------------


def _hashable(v) -> Hashable:
    return tuple(_hashable(x) for x in v) if isinstance(v, list) else v


def scm_from_dict(doc: Mapping) -> TabularScm:
    """Load an SCM from the documented JSON document shape (see README)."""
    if doc.get("kind") != "scm":
        raise ValueError("expected a document with kind 'scm'")
    names = list(doc["nodes"])
    n = len(names)

    def idx(v):
        return names.index(v) if isinstance(v, str) else int(v)

    dag = Dag.from_edges(n, ((idx(u), idx(v)) for u, v in doc.get("edges", [])))
    domains = tuple(tuple(_hashable(v) for v in d) for d in doc["domains"])
    noise = tuple(
        FiniteDist(tuple(_hashable(v) for v in nd["support"]), tuple(nd["probs"]))
        for nd in doc["noise"]
    )
    mechanisms = []
    for table in doc["mechanisms"]:
        mechanisms.append(
            {
                (tuple(_hashable(p) for p in row["parents"]), _hashable(row["noise"])): _hashable(
                    row["value"]
                )
                for row in table
            }
        )
    return TabularScm(dag, domains, tuple(mechanisms), noise, tuple(names))


def scm_to_dict(scm: TabularScm) -> dict:
    return {
        "kind": "scm",
        "nodes": list(scm.names),
        "domains": [list(d) for d in scm.domains],
        "edges": sorted([u, v] for u, v in scm.dag.edges),
        "noise": [{"support": list(u.support), "probs": list(u.probs)} for u in scm.noise],
        "mechanisms": [
            [
                {"parents": list(pv), "noise": u, "value": val}
                for (pv, u), val in sorted(m.items(), key=repr)
            ]
            for m in scm.mechanisms
        ],
    }


def mdp_from_dict(doc: Mapping) -> TabularMdp:
    if doc.get("kind") != "mdp":
        raise ValueError("expected a document with kind 'mdp'")
    return TabularMdp(np.asarray(doc["transition"]), np.asarray(doc["reward"]), float(doc["gamma"]))


def load_model(path) -> TabularScm | TabularMdp:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: model document must be a JSON object")
    kind = doc.get("kind")
    if kind not in ("scm", "mdp"):
        raise ValueError(f"unknown model kind {kind!r}")
    try:
        return scm_from_dict(doc) if kind == "scm" else mdp_from_dict(doc)
    except (KeyError, TypeError, IndexError) as exc:
        raise ValueError(f"{path}: malformed {kind} document ({exc!r})") from None
