"""Synthetic recommendation MDPs, offline datasets and ratings ingestion.

:class:`SynthRecEnv` splits the state into causally relevant dimensions
(``crc``, first ``d_crc`` entries) and causally irrelevant ones (``circ``)::

    crc'   = tanh(A crc + B a) + transition_noise * eps
    circ'  = circ_rho * circ + circ_innovation * xi
    reward = crc^T W a - 0.5 |a|^2 + reward_noise * nu

``A`` is a scaled random rotation, ``B`` is proportional to ``W`` (the items
that are rewarded are also the items that shape interest) and the CIRC rows
of the reward matrix are zero, so neither the reward nor the CRC dynamics
read CIRC and the CIRC dynamics ignore the action. The split is a label used
by validation probes only; learners see the full state vector.

Dataset files are JSON Lines: a metadata header object on the first line,
then one transition object per line with fields ``episode_id, t, state,
action, reward, next_state, done``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .scm import FiniteDist, TabularScm, mdp_scm


def episode_rng(seed: int, episode_id: int) -> np.random.Generator:
    """Independent stream for one episode, derived from ``(seed, episode_id)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode_id)]))


def _vec(x, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class EnvConfig:
    d_crc: int = 8
    d_circ: int = 8
    action_dim: int = 4
    horizon: int = 20
    crc_decay: float = 0.6
    action_gain: float = 0.5
    reward_scale: float = 1.0
    circ_rho: float = 0.9
    circ_std: float = 2.0
    transition_noise: float = 0.05
    reward_noise: float = 0.1
    catalog_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.d_crc < 0 or self.d_circ < 0 or self.d_crc + self.d_circ < 1:
            raise ValueError("state needs at least one dimension")
        if self.action_dim < 1 or self.horizon < 1:
            raise ValueError("action_dim and horizon must be positive")
        if not 0.0 <= self.circ_rho < 1.0:
            raise ValueError("circ_rho must lie in [0, 1)")
        if min(self.transition_noise, self.reward_noise, self.circ_std) < 0:
            raise ValueError("noise scales must be nonnegative")


class SynthRecEnv:
    """Recommendation MDP with known CRC/CIRC decomposition."""

    def __init__(self, config: EnvConfig | None = None, **overrides):
        cfg = config or EnvConfig()
        if overrides:
            cfg = EnvConfig(**{**asdict(cfg), **overrides})
        self.config = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EC]))
        q, _ = np.linalg.qr(rng.normal(size=(cfg.d_crc, cfg.d_crc)))
        self.crc_dynamics = cfg.crc_decay * q
        w_crc = rng.normal(size=(cfg.d_crc, cfg.action_dim)) * cfg.reward_scale / math.sqrt(
            max(cfg.d_crc, 1)
        )
        self.reward_params = np.vstack([w_crc, np.zeros((cfg.d_circ, cfg.action_dim))])
        self.action_gain = cfg.action_gain * w_crc
        self.circ_innovation = cfg.circ_std * math.sqrt(1.0 - cfg.circ_rho**2)
        self.item_catalog = (
            rng.uniform(-1.0, 1.0, size=(cfg.catalog_size, cfg.action_dim))
            if cfg.catalog_size
            else None
        )
        for arr in (self.crc_dynamics, self.reward_params, self.action_gain):
            arr.setflags(write=False)

    # -- shape helpers --------------------------------------------------------

    @property
    def d_crc(self) -> int:
        return self.config.d_crc

    @property
    def d_circ(self) -> int:
        return self.config.d_circ

    @property
    def state_dim(self) -> int:
        return self.config.d_crc + self.config.d_circ

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def crc_slice(self) -> slice:
        return slice(0, self.d_crc)

    @property
    def circ_slice(self) -> slice:
        return slice(self.d_crc, self.state_dim)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self.config), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- dynamics ---------------------------------------------------------------

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        crc = rng.uniform(-0.8, 0.8, size=self.d_crc)
        circ = rng.normal(0.0, self.config.circ_std, size=self.d_circ)
        return np.concatenate([crc, circ])

    def to_item(self, action) -> np.ndarray:
        """Nearest catalog item for a continuous action (identity without a catalog)."""
        a = _vec(action, self.action_dim, "action")
        if self.item_catalog is None:
            return np.clip(a, -1.0, 1.0)
        d = ((self.item_catalog - a) ** 2).sum(axis=1)
        return self.item_catalog[int(np.argmin(d))].copy()

    def reward_mean(self, state, action) -> float:
        """Noise-free reward; reads the CRC slice and the action only."""
        s = _vec(state, self.state_dim, "state")
        a = self.to_item(action)
        crc = s[self.crc_slice]
        w = self.reward_params[self.crc_slice]
        return float(crc @ w @ a - 0.5 * a @ a)

    def _transition(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        eps = rng.normal(size=self.d_crc)
        xi = rng.normal(size=self.d_circ)
        crc = np.tanh(self.crc_dynamics @ s[self.crc_slice] + self.action_gain @ a)
        crc = crc + self.config.transition_noise * eps
        circ = self.config.circ_rho * s[self.circ_slice] + self.circ_innovation * xi
        return np.concatenate([crc, circ])

    def step(self, state, action, rng: np.random.Generator, t: int = 0):
        """Advance one step; returns ``(next_state, reward, done)``.

        ``done`` is true once ``t + 1`` reaches the horizon. Noise is drawn
        in a fixed order (CRC, CIRC, reward) so equal generator states give
        equal draws whatever the inputs.
        """
        s = _vec(state, self.state_dim, "state")
        a = self.to_item(action)
        nxt = self._transition(s, a, rng)
        nu = rng.normal()
        reward = self.reward_mean(s, a) + self.config.reward_noise * nu
        return nxt, float(reward), t + 1 >= self.horizon

    def apply_intervention(self, state, a_intervened, rng: np.random.Generator) -> np.ndarray:
        """State realised by ``do(a := a_intervened)``: the transition's next state."""
        s = _vec(state, self.state_dim, "state")
        return self._transition(s, self.to_item(a_intervened), rng)

    # -- reference policies -------------------------------------------------------

    def myopic_action(self, state) -> np.ndarray:
        """Maximiser of the immediate mean reward, clipped to the action box."""
        s = _vec(state, self.state_dim, "state")
        return np.clip(s[self.crc_slice] @ self.reward_params[self.crc_slice], -1.0, 1.0)

    def sample_states(self, rng: np.random.Generator, n: int, burn_in: int = 5) -> np.ndarray:
        """States from short random-action rollouts; used by probes."""
        out = np.empty((n, self.state_dim))
        for i in range(n):
            s = self.reset(rng)
            for _ in range(int(rng.integers(0, burn_in + 1))):
                s = self._transition(s, rng.uniform(-1, 1, self.action_dim), rng)
            out[i] = s
        return out


class DiscreteTwinEnv:
    """Two-state, two-action twin of the synthetic env with tabular mechanisms.

    States and actions are length-1 vectors. A continuous action maps to the
    discrete action ``1`` when nonnegative and ``0`` otherwise. State 1 plays
    the role of high interest: it pays more and is reinforced by action 1.
    """

    states = (0, 1)
    actions = (0, 1)
    d_crc = 1
    d_circ = 0
    state_dim = 1
    action_dim = 1

    def __init__(self, horizon: int = 1, initial=(0.5, 0.5)):
        self.horizon = int(horizon)
        self.initial = FiniteDist(self.states, tuple(initial))
        self.eps = FiniteDist((0, 1, 2), (0.6, 0.3, 0.1))
        # eps=0 follows the action, eps=1 keeps the state, eps=2 flips it
        self.transition = {}
        for s in self.states:
            for a in self.actions:
                self.transition[(s, a, 0)] = a
                self.transition[(s, a, 1)] = s
                self.transition[(s, a, 2)] = 1 - s
        self.reward = {(0, 0): 0.0, (0, 1): 1.0, (1, 0): 2.0, (1, 1): 4.0}
        self.crc_slice = slice(0, 1)
        self.circ_slice = slice(1, 1)

    @staticmethod
    def discretize(action) -> int:
        return int(np.asarray(action, dtype=float).reshape(-1)[0] >= 0.0)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([float(rng.choice(2, p=self.initial.probs))])

    def _draw_next(self, s: int, a: int, rng) -> int:
        e = int(rng.choice(3, p=self.eps.probs))
        return self.transition[(s, a, e)]

    def step(self, state, action, rng: np.random.Generator, t: int = 0):
        s = int(_vec(state, 1, "state")[0])
        a = self.discretize(action)
        nxt = self._draw_next(s, a, rng)
        return np.array([float(nxt)]), self.reward[(s, a)], t + 1 >= self.horizon

    def apply_intervention(self, state, a_intervened, rng: np.random.Generator) -> np.ndarray:
        s = int(_vec(state, 1, "state")[0])
        return np.array([float(self._draw_next(s, self.discretize(a_intervened), rng))])

    def to_scm(self, policy: dict, policy_noise: FiniteDist | None = None) -> TabularScm:
        """One-step MDP model; ``policy[(s, eta)]`` gives the discrete action."""
        policy_noise = policy_noise or FiniteDist.point_mass(0)
        return mdp_scm(
            self.states,
            self.actions,
            self.initial,
            policy,
            policy_noise,
            self.transition,
            self.eps,
            self.reward,
        )


# --------------------------------------------------------------------------
# Offline datasets
# --------------------------------------------------------------------------


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    episode_id: int
    t: int

    def to_json(self) -> dict:
        return {
            "episode_id": int(self.episode_id),
            "t": int(self.t),
            "state": [float(x) for x in self.state],
            "action": [float(x) for x in self.action],
            "reward": float(self.reward),
            "next_state": [float(x) for x in self.next_state],
            "done": bool(self.done),
        }

    @classmethod
    def from_json(cls, row: dict) -> "Transition":
        expected = {"episode_id", "t", "state", "action", "reward", "next_state", "done"}
        if set(row) != expected:
            raise ValueError(f"transition fields must be exactly {sorted(expected)}")
        return cls(
            np.asarray(row["state"], dtype=float),
            np.asarray(row["action"], dtype=float),
            float(row["reward"]),
            np.asarray(row["next_state"], dtype=float),
            bool(row["done"]),
            int(row["episode_id"]),
            int(row["t"]),
        )


@dataclass
class OfflineDataset:
    transitions: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.transitions:
            return
        sd = self.transitions[0].state.shape
        ad = self.transitions[0].action.shape
        finished: set = set()
        current, last_t = None, None
        for tr in self.transitions:
            if tr.state.shape != sd or tr.next_state.shape != sd or tr.action.shape != ad:
                raise ValueError("transition dimensions are not uniform")
            if not math.isfinite(tr.reward):
                raise ValueError("reward must be finite")
            if tr.episode_id != current:
                if tr.episode_id in finished:
                    raise ValueError(f"episode {tr.episode_id} is not contiguous")
                if current is not None:
                    finished.add(current)
                current, last_t = tr.episode_id, None
            if last_t is not None and tr.t <= last_t:
                raise ValueError(f"episode {tr.episode_id}: t must increase strictly")
            last_t = tr.t

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def state_dim(self) -> int:
        return self.transitions[0].state.shape[0]

    @property
    def action_dim(self) -> int:
        return self.transitions[0].action.shape[0]

    def arrays(self):
        """Stacked ``(states, actions, rewards, next_states, dones)``."""
        trs = self.transitions
        return (
            np.array([t.state for t in trs]),
            np.array([t.action for t in trs]),
            np.array([t.reward for t in trs]),
            np.array([t.next_state for t in trs]),
            np.array([float(t.done) for t in trs]),
        )

    def to_jsonl(self) -> str:
        lines = [json.dumps({"metadata": self.metadata}, sort_keys=True)]
        lines += [json.dumps(t.to_json(), sort_keys=True) for t in self.transitions]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "OfflineDataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty dataset file")
        header = json.loads(lines[0])
        if set(header) != {"metadata"}:
            raise ValueError("first line must be the metadata header")
        trs = []
        for no, ln in enumerate(lines[1:], start=2):
            try:
                trs.append(Transition.from_json(json.loads(ln)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"line {no}: {exc}") from exc
        return cls(trs, header["metadata"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        return cls.from_jsonl(Path(path).read_text())


BehaviorPolicy = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def uniform_policy(action_dim: int) -> BehaviorPolicy:
    def act(state, rng):
        return rng.uniform(-1.0, 1.0, size=action_dim)

    return act


def generate_offline_dataset(
    env,
    behavior_policy: BehaviorPolicy,
    n_episodes: int,
    seed: int,
    behavior_id: str = "custom",
) -> OfflineDataset:
    """Roll out ``behavior_policy`` for ``n_episodes`` episodes.

    Episode ``k`` uses its own generator derived from ``(seed, k)``, so the
    dataset is a deterministic function of the seed.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    trs = []
    for ep in range(n_episodes):
        rng = episode_rng(seed, ep)
        s = env.reset(rng)
        for t in range(env.horizon):
            a = np.asarray(behavior_policy(s, rng), dtype=float)
            nxt, r, done = env.step(s, a, rng, t)
            trs.append(Transition(s, a, r, nxt, done, ep, t))
            s = nxt
            if done:
                break
    fingerprint = env.fingerprint() if hasattr(env, "fingerprint") else type(env).__name__
    meta = {"env": fingerprint, "behavior_policy": behavior_id, "seed": int(seed)}
    return OfflineDataset(trs, meta)


# --------------------------------------------------------------------------
# Ratings ingestion
# --------------------------------------------------------------------------

RATING_WINDOW = 5
EMBED_DIM = 16


def item_embedding(item: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit-norm signed feature hash of an item id."""
    digest = hashlib.blake2b(str(item).encode(), digest_size=16).digest()
    vec = np.zeros(dim)
    for k in range(2):
        slot = int.from_bytes(digest[4 * k : 4 * k + 3], "little") % dim
        sign = 1.0 if digest[4 * k + 3] & 1 else -1.0
        vec[slot] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[int(digest[8]) % dim] = 1.0
        norm = 1.0
    return vec / norm


def _detect_delimiter(first_line: str) -> str:
    if "\t" in first_line:
        return "\t"
    if "," in first_line:
        return ","
    raise ValueError("line 1: expected a tab- or comma-separated row")


def ingest_ratings(path, k: int = RATING_WINDOW, dim: int = EMBED_DIM) -> OfflineDataset:
    """Sessionise a ``user,item,rating,timestamp`` log into transitions.

    Each user becomes one episode ordered by timestamp (file order breaks
    ties). The state is the last ``k`` (item embedding, rating) pairs, oldest
    first and zero-padded; the action is the next item's embedding and the
    reward its rating.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not any(ln.strip() for ln in lines):
        raise ValueError(f"{path}: empty ratings file")
    delim = _detect_delimiter(next(ln for ln in lines if ln.strip()))
    users: dict[str, list] = {}
    header_seen = False
    for no, row in enumerate(csv.reader(io.StringIO(text), delimiter=delim), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ValueError(f"line {no}: expected 4 fields, got {len(row)}")
        user, item, rating, ts = (c.strip() for c in row)
        try:
            rating_f, ts_f = float(rating), float(ts)
        except ValueError:
            if no == 1 and not header_seen:
                header_seen = True
                continue
            raise ValueError(f"line {no}: rating and timestamp must be numeric") from None
        if not (math.isfinite(rating_f) and math.isfinite(ts_f)):
            raise ValueError(f"line {no}: rating and timestamp must be finite")
        users.setdefault(user, []).append((ts_f, no, item, rating_f))
    if not users:
        raise ValueError(f"{path}: no rating rows")

    width = dim + 1
    trs = []
    for ep, (user, rows) in enumerate(users.items()):
        rows.sort(key=lambda r: (r[0], r[1]))
        feats = [np.concatenate([item_embedding(it, dim), [rt]]) for _, _, it, rt in rows]

        def window(end):
            out = np.zeros(k * width)
            hist = feats[max(0, end - k) : end]
            for j, f in enumerate(hist):
                out[(k - len(hist) + j) * width : (k - len(hist) + j + 1) * width] = f
            return out

        n = len(rows)
        for i in range(1, n):
            trs.append(
                Transition(
                    window(i),
                    item_embedding(rows[i][2], dim),
                    rows[i][3],
                    window(i + 1),
                    i == n - 1,
                    ep,
                    i - 1,
                )
            )
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    meta = {"source": "ratings", "file": Path(path).name, "sha256": digest, "k": k, "dim": dim}
    return OfflineDataset(trs, meta)
