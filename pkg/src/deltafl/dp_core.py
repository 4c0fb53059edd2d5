"""Discrete Gaussian noise, a simulated secure-summation oracle and zCDP accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Tuple

import numpy as np

MAX_SAMPLER_TRIALS = 10**6


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *stream)``.

    Distinct stream keys give statistically independent generators, so every
    client/round/purpose can own its own stream regardless of execution order.
    """
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class DiscreteGaussianParams:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("discrete Gaussian needs sigma2 > 0")


def _discrete_laplace(t: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Integers with pmf proportional to exp(-|y|/t)."""
    p = -math.expm1(-1.0 / t)
    out = np.empty(size, dtype=np.int64)
    filled = 0
    while filled < size:
        k = size - filled
        mag = rng.geometric(p, size=k) - 1
        neg = rng.random(k) < 0.5
        keep = ~(neg & (mag == 0))  # -0 would double the mass at zero
        y = np.where(neg, -mag, mag)[keep]
        out[filled:filled + y.size] = y
        filled += y.size
    return out


def discrete_gaussian(sigma2: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` i.i.d. draws from the discrete Gaussian N_Z(0, sigma2).

    Rejection sampling from a discrete Laplace proposal with scale
    ``floor(sigma) + 1`` (Canonne, Kamath and Steinke, 2020). Acceptance
    probability is bounded below, so the expected number of rounds is O(1).
    """
    if not sigma2 > 0:
        raise ValueError("discrete Gaussian needs sigma2 > 0")
    size = int(size)
    sigma = math.sqrt(sigma2)
    t = math.floor(sigma) + 1
    out = np.empty(size, dtype=np.int64)
    filled = 0
    trials = 0
    while filled < size:
        k = size - filled
        y = _discrete_laplace(t, k, rng)
        accept_p = np.exp(-((np.abs(y) - sigma2 / t) ** 2) / (2.0 * sigma2))
        acc = y[rng.random(k) < accept_p]
        out[filled:filled + acc.size] = acc
        filled += acc.size
        trials += k
        if trials > MAX_SAMPLER_TRIALS * max(1, size) and filled < size:
            raise RuntimeError("sampler stuck")
    return out


def sample_discrete_gaussian(params: DiscreteGaussianParams, rng: np.random.Generator) -> int:
    """A single draw from N_Z(0, sigma2)."""
    return int(discrete_gaussian(params.sigma2, 1, rng)[0])


@dataclass(frozen=True)
class ModRing:
    M: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            raise ValueError("modulus must be an integer >= 2")
        if self.M > 2**62:
            raise ValueError("modulus above 2**62 is not supported")


def secure_sum(contributions: Iterable, ring: ModRing) -> np.ndarray:
    """Componentwise ``sum(contributions) mod M``.

    Stands in for a secure aggregation protocol: contributions are consumed
    one at a time and only the running modular sum is kept, so callers never
    get access to an individual vector through this function.
    """
    M = int(ring.M)
    total = None
    for vec in contributions:
        vec = np.asarray(vec, dtype=np.int64)
        if total is None:
            total = np.mod(vec, M)
            continue
        if vec.shape != total.shape:
            raise ValueError("contribution length mismatch")
        total = np.mod(total + np.mod(vec, M), M)
    if total is None:
        raise ValueError("no contributions")
    return total


def centered(values: np.ndarray, M: int) -> np.ndarray:
    """Map residues in [0, M) to representatives in (-M/2, M/2]."""
    values = np.mod(np.asarray(values, dtype=np.int64), M)
    return np.where(values > M // 2, values - M, values)


def gaussian_update_rho(clip_norm: float, noise_sigma: float) -> float:
    """zCDP of the Gaussian mechanism with L2 sensitivity ``clip_norm``."""
    if not clip_norm > 0 or not noise_sigma > 0:
        raise ValueError("clip norm and noise scale must be positive")
    return clip_norm**2 / (2.0 * noise_sigma**2)


def zcdp_to_dp(rho: float, delta: float) -> float:
    """(epsilon, delta)-DP implied by rho-zCDP: rho + 2 sqrt(rho log(1/delta))."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def dp_to_zcdp(epsilon: float, delta: float) -> float:
    """Largest rho whose conversion gives at most ``epsilon`` at ``delta``."""
    if epsilon < 0 or not 0 < delta < 1:
        raise ValueError("need epsilon >= 0 and delta in (0, 1)")
    log_term = math.log(1.0 / delta)
    root = math.sqrt(log_term + epsilon) - math.sqrt(log_term)
    return root * root


@dataclass
class PrivacyLedger:
    """Additive zCDP composition across labelled mechanism invocations."""

    entries: List[Tuple[str, float]] = field(default_factory=list)

    def add(self, label: str, rho: float) -> None:
        rho = float(rho)
        if math.isnan(rho) or rho < 0:
            raise ValueError("rho must be nonnegative")
        self.entries.append((label, rho))

    @property
    def rho_total(self) -> float:
        return math.fsum(rho for _, rho in self.entries)

    def epsilon_delta(self, delta: float) -> Tuple[float, float]:
        return zcdp_to_dp(self.rho_total, delta), delta

    def to_dict(self) -> dict:
        return {"rho_total": self.rho_total,
                "entries": [{"label": l, "rho": r} for l, r in self.entries]}
