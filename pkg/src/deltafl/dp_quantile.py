"""Quantiles of client losses under distributed differential privacy.

Each client one-hot encodes its (clipped) loss into a binary tree of bin
ranges, perturbs the integer-scaled tree with discrete Gaussian noise and
reduces it modulo ``M``; the server only sees the modular sum. Cumulative
counts are then read off a maximal dyadic partition of ``[1, j]``.

Indices follow the 1-based convention: node ``(r, j)`` at level ``r`` covers
bins ``(j-1) 2^r + 1 .. j 2^r`` which is the half-open interval
``[edges[2^r (j-1)], edges[2^r j])``. The root is not stored because its
count is the public number of contributors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dp_core import ModRing, centered, discrete_gaussian, secure_sum


@dataclass(frozen=True)
class BinEdges:
    edges: np.ndarray

    def __init__(self, edges):
        edges = np.asarray(edges, dtype=float).ravel()
        b = edges.size - 1
        if b < 2 or b & (b - 1):
            raise ValueError("number of bins must be a power of two >= 2")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def uniform(cls, upper: float, b: int, lower: float = 0.0) -> "BinEdges":
        return cls(np.linspace(lower, upper, b + 1))

    @property
    def b(self) -> int:
        return self.edges.size - 1

    @property
    def depth(self) -> int:
        return self.b.bit_length() - 1

    def bin_of(self, loss: float) -> int:
        """0-based leaf index; values outside the range are clipped."""
        k = int(np.searchsorted(self.edges, loss, side="right")) - 1
        return min(max(k, 0), self.b - 1)


@dataclass
class HierHistogram:
    """Counts per tree node, stored level by level.

    ``levels[r][j - 1]`` is the count of node ``(r, j)``.
    """

    levels: List[np.ndarray]
    bin_edges: BinEdges
    n_contributors: int

    @property
    def b(self) -> int:
        return self.bin_edges.b

    def node(self, r: int, j: int) -> float:
        return float(self.levels[r][j - 1])

    def flat(self) -> np.ndarray:
        return np.concatenate(self.levels)

    @property
    def size(self) -> int:
        return sum(level.size for level in self.levels)

    @classmethod
    def from_flat(cls, vec, edges: BinEdges, n_contributors: int) -> "HierHistogram":
        vec = np.asarray(vec)
        levels, start = [], 0
        for r in range(edges.depth):
            width = edges.b >> r
            levels.append(vec[start:start + width])
            start += width
        if start != vec.size:
            raise ValueError("flat vector does not match the tree size")
        return cls(levels, edges, n_contributors)

    def __add__(self, other: "HierHistogram") -> "HierHistogram":
        return HierHistogram([a + b for a, b in zip(self.levels, other.levels)],
                             self.bin_edges, self.n_contributors + other.n_contributors)


@dataclass(frozen=True)
class QuantileEstimate:
    value: float
    index: int
    achieved_mass: float


def encode_client(loss: float, edges: BinEdges) -> HierHistogram:
    """One-hot tree for a single loss: exactly one unit count per level."""
    leaf = edges.bin_of(loss)
    levels = []
    for r in range(edges.depth):
        level = np.zeros(edges.b >> r, dtype=np.int64)
        level[leaf >> r] = 1
        levels.append(level)
    return HierHistogram(levels, edges, 1)


def exact_histogram(losses: Sequence[float], edges: BinEdges) -> HierHistogram:
    """Noiseless sum of the client encodings."""
    losses = np.asarray(losses, dtype=float)
    leaves = np.clip(np.searchsorted(edges.edges, losses, side="right") - 1, 0, edges.b - 1)
    levels = [np.bincount(leaves >> r, minlength=edges.b >> r).astype(np.int64)
              for r in range(edges.depth)]
    return HierHistogram(levels, edges, losses.size)


def min_modulus(sigma2: float, c: int, n: int, b: int, delta: float) -> float:
    """Smallest ring size for which wraparound has probability below ``delta``."""
    return 2.0 + 2.0 * c * n + 2.0 * n * math.sqrt(2.0 * sigma2 * math.log(16.0 * n * b / delta))


def dp_aggregate(histograms: Sequence[HierHistogram], sigma2: float, c: int, ring: ModRing,
                 rng: np.random.Generator, delta: float = 1e-5,
                 strict: bool = True) -> HierHistogram:
    """Noisy modular aggregation of client trees.

    Each client submits ``(c x + xi) mod M`` with ``xi ~ N_Z(0, sigma2)`` per
    node; the modular sum is decoded to its centered representative and
    divided by ``c``. ``sigma2 == 0`` disables the noise (tests only).
    With ``strict`` a ring smaller than :func:`min_modulus` raises; otherwise
    the run proceeds and may wrap around.
    """
    histograms = list(histograms)
    if not histograms:
        raise ValueError("no client histograms")
    if int(c) != c or c < 1:
        raise ValueError("scale c must be a positive integer")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    edges = histograms[0].bin_edges
    n = len(histograms)
    M = int(ring.M)
    if strict and M < min_modulus(sigma2, c, n, edges.b, delta):
        raise ValueError("modulus underspecified")

    size = histograms[0].size
    noise = (discrete_gaussian(sigma2, n * size, rng).reshape(n, size) if sigma2 > 0
             else np.zeros((n, size), dtype=np.int64))

    def contributions():
        # client i perturbs its own scaled tree with its row of noise
        for h, xi in zip(histograms, noise):
            yield np.mod(h.flat().astype(np.int64) * int(c) + xi, M)

    s = secure_sum(contributions(), ring)
    counts = centered(s, M) / float(c)
    return HierHistogram.from_flat(counts, edges, sum(h.n_contributors for h in histograms))


def dyadic_partition(j: int, b: int) -> List[Tuple[int, int]]:
    """Tree nodes ``(level, index)`` tiling bins ``[1, j]``, largest block first."""
    if b < 2 or b & (b - 1):
        raise ValueError("b must be a power of two >= 2")
    if not 1 <= j <= b:
        raise ValueError(f"index {j} outside [1, {b}]")
    top = b.bit_length() - 2  # root level is not stored
    nodes = []
    start = 1
    while start <= j:
        r = top
        while (start - 1) % (1 << r) or start - 1 + (1 << r) > j:
            r -= 1
        nodes.append((r, (start - 1) // (1 << r) + 1))
        start += 1 << r
    return nodes


def node_range(r: int, index: int) -> Tuple[int, int]:
    """1-based inclusive bin range covered by a node."""
    return (index - 1) * (1 << r) + 1, index * (1 << r)


def cumulative(hist: HierHistogram, j: int) -> float:
    return float(sum(hist.node(r, o) for r, o in dyadic_partition(j, hist.b)))


def cumulative_all(hist: HierHistogram) -> np.ndarray:
    return np.array([cumulative(hist, j) for j in range(1, hist.b + 1)])


def quantile_from_histogram(hist: HierHistogram, theta: float) -> QuantileEstimate:
    """Edge ``l_j`` whose cumulative count is closest to ``(1 - theta) m``.

    Ties go to the smaller index.
    """
    target = (1.0 - theta) * hist.n_contributors
    H = cumulative_all(hist)
    j = int(np.argmin(np.abs(H - target))) + 1
    return QuantileEstimate(float(hist.bin_edges.edges[j]), j, float(H[j - 1]))


def _psi(sigma2: float, n: int) -> float:
    i = np.arange(1, n, dtype=float)
    return 10.0 * math.fsum(np.exp(-2.0 * math.pi**2 * sigma2 * i / (i + 1.0)))


def privacy_epsilon(sigma2: float, c: float, n: int, b: int) -> Tuple[float, float]:
    """zCDP level of the tree protocol, returned as ``(epsilon, rho = epsilon^2 / 2)``."""
    if sigma2 < 0.25:
        raise ValueError("privacy bound precondition violated: need sigma >= 1/2")
    log_b = math.log2(b)
    psi = _psi(sigma2, n)
    first = math.sqrt(c**2 * log_b**2 / (n * sigma2) + psi * b)
    second = c * log_b / (math.sqrt(n) * math.sqrt(sigma2)) + psi * math.sqrt(2.0 * b)
    eps = min(first, second)
    return eps, 0.5 * eps * eps


def utility_bound(sigma2: float, c: float, n: int, b: int, delta: float) -> float:
    """High-probability excess quantile error of the noisy cumulative counts."""
    return math.sqrt(4.0 * sigma2 / (c**2 * n) * math.log2(b) * math.log(4.0 * b / delta))


def quantile_error(index: int, exact_hist: HierHistogram, theta: float) -> float:
    """``|H(index)/n - (1 - theta)|`` on the noiseless histogram."""
    n = exact_hist.n_contributors
    return abs(cumulative(exact_hist, index) / n - (1.0 - theta))


def best_quantile_error(exact_hist: HierHistogram, theta: float) -> float:
    n = exact_hist.n_contributors
    return float(np.min(np.abs(cumulative_all(exact_hist) / n - (1.0 - theta))))


def calibrate_sigma(epsilon: float, c: int, n: int, b: int) -> float:
    """Smallest sigma^2 (>= 1/4) at which the protocol is epsilon-zCDP-accounted.

    Uses bisection; epsilon is decreasing in sigma.
    """
    lo = 0.5
    if privacy_epsilon(lo * lo, c, n, b)[0] <= epsilon:
        return lo * lo
    hi = 1.0
    while privacy_epsilon(hi * hi, c, n, b)[0] > epsilon:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if privacy_epsilon(mid * mid, c, n, b)[0] > epsilon:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return hi * hi


@dataclass(frozen=True)
class NoiseCalibration:
    sigma2: float
    c: int
    modulus: int
    epsilon: float
    rho: float
    wraparound_safe: bool


def default_scale(epsilon: float, n: int, b: int, target_sigma: float = 4.0) -> int:
    """Integer scale putting sigma near ``target_sigma`` for noise ratio log2(b)/(eps sqrt n)."""
    return max(1, math.ceil(target_sigma * epsilon * math.sqrt(n) / math.log2(b)))


def calibrate(epsilon: float, n: int, b: int, delta: float = 1e-5,
              bit_width: Optional[int] = None) -> NoiseCalibration:
    """Pick ``(sigma2, c, M)`` meeting a zCDP ``epsilon`` for ``n`` clients.

    Without ``bit_width`` the scale comes from :func:`default_scale` and ``M``
    is the next power of two that satisfies the wraparound premise. With a
    fixed ``bit_width`` the largest feasible scale is used; if even ``c = 1``
    is infeasible the calibration is flagged as not wraparound-safe.
    """
    if bit_width is None:
        c = default_scale(epsilon, n, b)
        sigma2 = calibrate_sigma(epsilon, c, n, b)
        bits = math.ceil(math.log2(min_modulus(sigma2, c, n, b, delta)))
        M = 1 << bits
        eps, rho = privacy_epsilon(sigma2, c, n, b)
        return NoiseCalibration(sigma2, c, M, eps, rho, True)

    M = 1 << int(bit_width)

    def fits(c):
        s2 = calibrate_sigma(epsilon, c, n, b)
        return M >= min_modulus(s2, c, n, b, delta), s2

    ok, s2 = fits(1)
    if not ok:
        eps, rho = privacy_epsilon(s2, 1, n, b)
        return NoiseCalibration(s2, 1, M, eps, rho, False)
    lo, hi = 1, 2
    while fits(hi)[0]:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid)[0]:
            lo = mid
        else:
            hi = mid
    s2 = calibrate_sigma(epsilon, lo, n, b)
    eps, rho = privacy_epsilon(s2, lo, n, b)
    return NoiseCalibration(s2, lo, M, eps, rho, True)


def dp_quantile(losses: Sequence[float], theta: float, edges: BinEdges, sigma2: float, c: int,
                ring: ModRing, rng: np.random.Generator, delta: float = 1e-5,
                strict: bool = True) -> QuantileEstimate:
    """End-to-end protocol: clip, encode, noisy modular aggregation, read off the quantile."""
    clipped = np.clip(np.asarray(losses, dtype=float), edges.edges[0], edges.edges[-1])
    hist = dp_aggregate((encode_client(x, edges) for x in clipped), sigma2, c, ring, rng,
                        delta=delta, strict=strict)
    return quantile_from_histogram(hist, theta)
