"""First-order Wasserstein distance between empirical reward samples.

For one-dimensional distributions W1 is the area between the two quantile
functions. Both empirical quantile functions are step functions with jumps
at multiples of ``1/n`` and ``1/m``, so the integral is a finite sum over
the merged breakpoints; :func:`w1_quantile` evaluates it with integer
breakpoint arithmetic so no grid is ever rounded.
"""

from __future__ import annotations

import math
import sys
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_LAMBDA = 0.1
DEFAULT_WINDOW = 256


class EmpiricalSamples:
    """Sliding window of reward samples; the oldest sample is evicted first."""

    def __init__(self, capacity: int = DEFAULT_WINDOW, values: Iterable[float] = ()):
        if int(capacity) < 1:
            raise ValueError("capacity must be a positive integer")
        self.capacity = int(capacity)
        self._values: deque = deque(maxlen=self.capacity)
        for v in values:
            self.push(v)

    def push(self, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"reward sample must be finite, got {value!r}")
        self._values.append(value)

    def clear(self) -> None:
        self._values.clear()

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self):
        return iter(self._values)

    def __repr__(self) -> str:
        return f"EmpiricalSamples(capacity={self.capacity}, n={len(self)})"


@dataclass(frozen=True)
class CausalRewardConfig:
    lam: float = DEFAULT_LAMBDA
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam!r}")
        if int(self.window) < 1:
            raise ValueError("window must be a positive integer")


def _sorted_samples(x) -> np.ndarray:
    arr = np.asarray(list(x.values) if isinstance(x, EmpiricalSamples) else x, dtype=float)
    arr = arr.ravel()
    if arr.size == 0:
        raise ValueError("W1 needs non-empty sample sets")
    if not np.isfinite(arr).all():
        raise ValueError("samples must be finite")
    return np.sort(arr)


def w1_sorted_equal(a: Sequence[float], b: Sequence[float]) -> float:
    """Mean absolute difference of sorted samples (equal sizes only)."""
    xa, xb = _sorted_samples(a), _sorted_samples(b)
    if xa.size != xb.size:
        raise ValueError("equal-size path needs samples of the same size")
    return float(np.abs(xa - xb).mean())


def w1_quantile(a: Sequence[float], b: Sequence[float]) -> float:
    """Integral of ``|F_a^-1(u) - F_b^-1(u)|`` over ``u`` in [0, 1].

    Breakpoints are tracked in units of ``1/(n*m)``: sample ``i`` of ``a``
    covers ``(i*m, (i+1)*m]`` and sample ``j`` of ``b`` covers
    ``(j*n, (j+1)*n]``.
    """
    xa, xb = _sorted_samples(a), _sorted_samples(b)
    n, m = xa.size, xb.size
    total = n * m
    pos = i = j = 0
    terms = []
    while pos < total:
        end_a, end_b = (i + 1) * m, (j + 1) * n
        nxt = min(end_a, end_b)
        terms.append((nxt - pos) * abs(xa[i] - xb[j]))
        pos = nxt
        if nxt == end_a:
            i += 1
        if nxt == end_b:
            j += 1
    return math.fsum(terms) / total


def w1_empirical(a, b) -> float:
    """Exact W1 between two empirical distributions.

    Accepts :class:`EmpiricalSamples` or plain sequences. Equal sizes take the
    sorted-difference path, which coincides with the quantile integral.
    """
    xa, xb = _sorted_samples(a), _sorted_samples(b)
    if xa.size == xb.size:
        return float(np.abs(xa - xb).mean())
    return w1_quantile(xa, xb)


def causal_reward(w1: float, cfg: CausalRewardConfig | float = DEFAULT_LAMBDA) -> float:
    """``exp(-lambda * w1)``, floored at the smallest positive normal float.

    The floor keeps the value inside (0, 1] when the exponential would
    underflow.
    """
    lam = cfg.lam if isinstance(cfg, CausalRewardConfig) else float(cfg)
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (0, 1], got {lam!r}")
    w1 = float(w1)
    if not w1 >= 0.0:
        raise ValueError(f"W1 must be nonnegative, got {w1!r}")
    return max(math.exp(-lam * w1), sys.float_info.min)
