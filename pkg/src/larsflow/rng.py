"""Deterministic random streams and shared numeric helpers.

Randomness is organized around :class:`RngStream`, a thin wrapper over
numpy's counter-based Philox generator keyed by a ``(seed, stream_id)``
pair. Identical pairs reproduce the same draw sequence bit-for-bit;
distinct stream ids give statistically independent sequences with no
shared state, so independent streams can be consumed concurrently or in
any interleaving.

All floating point work in this package is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _splitmix64(x: int) -> int:
    """One round of the SplitMix64 mixer; used to derive child stream ids."""
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """A single-owner deterministic random stream.

    Parameters
    ----------
    seed:
        64-bit unsigned experiment seed.
    stream_id:
        64-bit unsigned id distinguishing independent streams under one
        seed.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if not 0 <= int(stream_id) <= _MASK64:
            raise ValueError("stream_id must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._split_count = 0
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def split(self, k: int) -> list["RngStream"]:
        """Derive ``k`` fresh child streams.

        Children are keyed through a SplitMix64 hash of the parent id and a
        running split counter, so repeated splits never reuse a child and
        the parent's own draw sequence is unaffected.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        children = []
        for i in range(k):
            child_id = _splitmix64(self.stream_id ^ _splitmix64(self._split_count + i))
            children.append(RngStream(self.seed, child_id))
        self._split_count += k
        return children

    def uniform(self, n: int) -> np.ndarray:
        return self.generator.random(n, dtype=np.float64)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        return self.generator.integers(low, high, size=n)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# Purpose tags for stream derivation inside training loops. A stream for
# one purpose at one iteration has id (purpose << 32) | iteration, which is
# collision-free for iteration counts below 2**32.
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_PROPOSAL = 3
STREAM_MODEL_SAMPLE = 4
STREAM_EVAL = 5
STREAM_SPLIT = 6
STREAM_DROPOUT = 7
STREAM_ENVELOPE = 8
STREAM_DATASPLIT = 9


def derive_stream(seed: int, purpose: int, index: int = 0) -> RngStream:
    """Stateless per-(purpose, index) stream derivation.

    Training code never carries generator state across iterations; it
    re-derives streams from the experiment seed, which makes checkpoints
    trivially resumable and runs bit-reproducible.
    """
    if index < 0 or index >= (1 << 32):
        raise ValueError("index out of range for stream derivation")
    return RngStream(seed, (purpose << 32) | index)


def draw_standard_normal(rng: RngStream, n: int, d: int) -> np.ndarray:
    """Draw an ``n x d`` matrix of i.i.d. standard normal values."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    return rng.generator.standard_normal((n, d), dtype=np.float64)


def log_sum_exp(values, axis=None) -> np.ndarray | float:
    """Numerically stable log(sum(exp(values))).

    Subtracts the running maximum along ``axis`` before exponentiating, so
    inputs that are uniformly shifted by huge constants neither overflow
    nor collapse to -inf.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    m = np.max(v, axis=axis, keepdims=True)
    # All -inf slices would produce nan from (-inf) - (-inf); pin them.
    m_safe = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(v - m_safe), axis=axis, keepdims=True)) + m_safe
    out = np.where(np.isfinite(m), s, m)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class Grid2D:
    """Midpoint-rule quadrature grid on an axis-aligned 2D box.

    Nodes are cell midpoints; ``cell_area`` is the weight of each node in
    a midpoint-rule integral.
    """

    lo: tuple[float, float]
    hi: tuple[float, float]
    points_per_dim: int
    _nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (2,) or hi.shape != (2,):
            raise ValueError("lo and hi must be length-2 vectors")
        if not np.all(lo < hi):
            raise ValueError("lo must be elementwise smaller than hi")
        if self.points_per_dim < 2:
            raise ValueError("points_per_dim must be >= 2")
        object.__setattr__(self, "lo", (float(lo[0]), float(lo[1])))
        object.__setattr__(self, "hi", (float(hi[0]), float(hi[1])))
        p = self.points_per_dim
        h0 = (hi[0] - lo[0]) / p
        h1 = (hi[1] - lo[1]) / p
        x0 = lo[0] + (np.arange(p) + 0.5) * h0
        x1 = lo[1] + (np.arange(p) + 0.5) * h1
        # Row-major node order: first coordinate varies slowest.
        g0, g1 = np.meshgrid(x0, x1, indexing="ij")
        nodes = np.column_stack([g0.ravel(), g1.ravel()])
        object.__setattr__(self, "_nodes", nodes)

    @property
    def spacing(self) -> tuple[float, float]:
        p = self.points_per_dim
        return ((self.hi[0] - self.lo[0]) / p, (self.hi[1] - self.lo[1]) / p)

    @property
    def cell_area(self) -> float:
        h0, h1 = self.spacing
        return h0 * h1

    def nodes(self) -> np.ndarray:
        """All grid nodes as a ``(points_per_dim**2, 2)`` array."""
        return self._nodes

    def integrate(self, values) -> float:
        """Midpoint-rule integral of per-node values over the box."""
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (self.points_per_dim**2,):
            raise ValueError("values must have one entry per grid node")
        return float(np.sum(v) * self.cell_area)
