"""Dense feed-forward networks with hand-written backprop, Adam and Polyak updates.

Arrays are float64 throughout. A network maps a batch ``(n, in)`` to
``(n, out)``; a single vector is treated as a batch of one and returned as a
vector.

Checkpoint layout (one file may hold several named networks)::

    PGCRCKPT1\\n
    {json header}\\n
    raw parameters, little-endian float64, C order

The header lists networks in storage order with their layer sizes and
activations; within a network parameters are stored ``W0, b0, W1, b1, ...``
where ``Wk`` has shape ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .errors import NumericError

ACTIVATIONS = ("relu", "tanh", "identity")
CKPT_MAGIC = b"PGCRCKPT1\n"


def _activate(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "tanh":
        return np.tanh(pre)
    return pre


def _activation_grad(kind: str, pre: np.ndarray, out: np.ndarray, upstream: np.ndarray):
    if kind == "relu":
        return upstream * (pre > 0.0)
    if kind == "tanh":
        return upstream * (1.0 - out * out)
    return upstream


@dataclass
class Cache:
    """Activations saved by :meth:`Mlp.forward` for the matching backward pass."""

    inputs: list
    pre: list
    outputs: list
    version: int
    net_id: int
    squeeze: bool


class Mlp:
    """Fully connected network.

    ``activations`` has one entry per layer; by default hidden layers use
    ReLU and the output layer is linear.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activations: Sequence[str] | None = None,
        rng: np.random.Generator | None = None,
    ):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("layer_sizes needs at least two positive entries")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        activations = list(activations)
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ValueError(f"need {n_layers} activations from {ACTIVATIONS}")
        self.layer_sizes = tuple(sizes)
        self.activations = tuple(activations)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(1.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self._version = 0

    # -- parameters ---------------------------------------------------------

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def touch(self) -> None:
        """Mark parameters as modified, invalidating outstanding caches."""
        self._version += 1

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        mine = self.params
        if len(params) != len(mine) or any(p.shape != q.shape for p, q in zip(params, mine)):
            raise ValueError("parameter shapes do not match the architecture")
        for dst, src in zip(mine, params):
            dst[...] = src
        self.touch()

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.layer_sizes = self.layer_sizes
        clone.activations = self.activations
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone._version = 0
        return clone

    def same_architecture(self, other: "Mlp") -> bool:
        return self.layer_sizes == other.layer_sizes and self.activations == other.activations

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params)

    # -- evaluation ---------------------------------------------------------

    def forward(self, x) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ValueError(f"expected input of size {self.input_size}, got shape {x.shape}")
        inputs, pre, outputs = [], [], []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ w + b
            h = _activate(act, z)
            pre.append(z)
            outputs.append(h)
        cache = Cache(inputs, pre, outputs, self._version, id(self), squeeze)
        return (h[0] if squeeze else h), cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: Cache, upstream) -> tuple[list[np.ndarray], np.ndarray]:
        """Reverse-mode gradients for a summed (not averaged) batch objective.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
        :attr:`params`.
        """
        if cache.net_id != id(self) or cache.version != self._version:
            raise ValueError("stale cache: parameters changed since the forward pass")
        g = np.asarray(upstream, dtype=float)
        if cache.squeeze:
            g = g[None, :]
        if g.shape != cache.outputs[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            g = _activation_grad(self.activations[k], cache.pre[k], cache.outputs[k], g)
            grads[2 * k] = cache.inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return grads, (g[0] if cache.squeeze else g)


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer moments must align")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient passed to Adam")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam bound to a list of networks whose parameters it updates together."""

    def __init__(self, nets: Sequence[Mlp], lr: float):
        self.nets = list(nets)
        self.state = AdamState.for_params(self._params(), lr=lr)

    def _params(self):
        return [p for net in self.nets for p in net.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self._params(), grads, self.state)
        for net in self.nets:
            net.touch()


def soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """Polyak averaging ``target <- tau * online + (1 - tau) * target`` in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if not target.same_architecture(online):
        raise ValueError("target and online networks differ in architecture")
    for t, o in zip(target.params, online.params):
        t[...] = tau * o + (1.0 - tau) * t
    target.touch()
    return target


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def write_checkpoint(fh: BinaryIO, nets: Mapping[str, Mlp], meta: Mapping | None = None) -> None:
    names = list(nets)
    header = {
        "dtype": "<f8",
        "meta": dict(meta or {}),
        "nets": [
            {
                "name": name,
                "layer_sizes": list(nets[name].layer_sizes),
                "activations": list(nets[name].activations),
            }
            for name in names
        ],
    }
    fh.write(CKPT_MAGIC)
    fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
    for name in names:
        for p in nets[name].params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_checkpoint(fh: BinaryIO) -> tuple[dict[str, Mlp], dict]:
    if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    header = json.loads(fh.readline())
    if header.get("dtype") != "<f8":
        raise ValueError("unsupported parameter dtype")
    nets = {}
    for entry in header["nets"]:
        net = Mlp(entry["layer_sizes"], entry["activations"])
        for p in net.params:
            raw = fh.read(p.size * 8)
            if len(raw) != p.size * 8:
                raise ValueError("truncated checkpoint")
            p[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
        net.touch()
        nets[entry["name"]] = net
    if fh.read(1):
        raise ValueError("trailing bytes after checkpoint parameters")
    return nets, header["meta"]


def save_checkpoint(path, nets: Mapping[str, Mlp], meta: Mapping | None = None) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, nets, meta)


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


def checkpoint_bytes(nets: Mapping[str, Mlp], meta: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, nets, meta)
    return buf.getvalue()
