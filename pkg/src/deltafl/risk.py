"""Tail-risk functionals over empirical (weighted) loss distributions.

Every function takes a vector of per-client losses and optional client
weights that sum to one (uniform when omitted). The superquantile at tail
threshold ``theta`` is the mean of the worst ``theta`` fraction of the mass;
``theta = 1`` recovers the weighted mean.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

_MASS_TOL = 1e-12


@dataclass(frozen=True)
class LossVector:
    """Per-client losses with client weights (uniform by default)."""

    values: np.ndarray
    weights: np.ndarray

    def __init__(self, values, weights=None):
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            raise ValueError("empty distribution")
        if not np.all(np.isfinite(values)):
            raise ValueError("losses must be finite")
        if weights is None:
            weights = np.full(values.size, 1.0 / values.size)
        else:
            weights = np.asarray(weights, dtype=float).ravel()
            if weights.shape != values.shape:
                raise ValueError("weights and values differ in length")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
                raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(self.weights @ self.values)


def as_losses(losses, weights=None) -> LossVector:
    if isinstance(losses, LossVector):
        if weights is not None:
            return LossVector(losses.values, weights)
        return losses
    return LossVector(losses, weights)


def _check_theta(theta: float) -> float:
    theta = float(theta)
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"tail threshold must lie in (0, 1], got {theta}")
    return theta


def quantile(losses, theta: float, weights=None) -> float:
    """Smallest atom ``eta`` with ``P(Z > eta) <= theta``.

    No interpolation between atoms: the result is always one of the losses.
    """
    lv = as_losses(losses, weights)
    theta = _check_theta(theta)
    order = np.argsort(lv.values, kind="stable")
    v = lv.values[order]
    w = lv.weights[order]
    # mass strictly above v[k]: everything after the last copy of v[k]
    above = np.concatenate([np.cumsum(w[::-1])[::-1][1:], [0.0]])
    last_of_run = np.r_[v[1:] != v[:-1], True]
    ok = last_of_run & (above <= theta + _MASS_TOL)
    return float(v[np.argmax(ok)])


def _cap_fill(values: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Greedy mass filling from the largest value down.

    Each coordinate gets at most its cap until total mass one is placed.
    Equal values form one group; a partially filled group shares the residual
    in proportion to the caps, which keeps the result permutation-equivariant.
    """
    order = np.argsort(-values, kind="stable")
    pi = np.zeros_like(values)
    remaining = 1.0
    start = 0
    n = values.size
    while start < n and remaining > 0.0:
        stop = start + 1
        while stop < n and values[order[stop]] == values[order[start]]:
            stop += 1
        group = order[start:stop]
        group_cap = caps[group].sum()
        if group_cap <= remaining:
            pi[group] = caps[group]
            remaining -= group_cap
        else:
            pi[group] = remaining * caps[group] / group_cap
            remaining = 0.0
        start = stop
    if remaining > 0.0:
        # rounding leftovers when the caps sum to exactly one
        pi *= 1.0 / pi.sum()
    return pi


def dual_weights(losses, theta: float, weights=None) -> np.ndarray:
    """Maximizer of ``pi @ losses`` over the capped simplex.

    The cap of client ``i`` is ``weights[i] / theta`` (``1 / (theta n)`` when
    uniform).
    """
    lv = as_losses(losses, weights)
    theta = _check_theta(theta)
    return _cap_fill(lv.values, lv.weights / theta)


def superquantile(losses, theta: float, weights=None) -> float:
    """Mean of the worst ``theta`` fraction of the loss distribution."""
    lv = as_losses(losses, weights)
    pi = dual_weights(lv, theta)
    value = float(pi @ lv.values)
    # rounding must not push the tail mean outside [mean, max]
    return float(np.clip(value, lv.mean(), lv.values.max()))


def _kl_to_weights(pi: np.ndarray, weights: np.ndarray) -> float:
    mask = pi > 0
    return float(np.sum(pi[mask] * np.log(pi[mask] / weights[mask])))


def smoothed_weights(losses, theta: float, nu: float, weights=None) -> np.ndarray:
    """Entropy-regularized tail weights.

    Solves ``max_pi  pi @ F - nu * KL(pi || weights)`` over the capped
    simplex. The solution is a capped softmax: the capped coordinates are a
    prefix of the descending-loss order and the rest are proportional to
    ``weights * exp(F / nu)``. The split point is found by a single scan in
    log space, so no iteration tolerance is involved.
    """
    if nu is None or nu <= 0:
        raise ValueError("smoothing parameter must be positive; use dual_weights")
    lv = as_losses(losses, weights)
    theta = _check_theta(theta)
    values, alpha = lv.values, lv.weights
    caps = alpha / theta
    order = np.argsort(-values, kind="stable")
    f = values[order]
    a = alpha[order]
    c = caps[order]
    with np.errstate(divide="ignore"):
        logits = np.log(a) + f / nu
    # log of suffix sums of alpha_j exp(F_j / nu)
    log_suffix = np.logaddexp.accumulate(logits[::-1])[::-1]
    capped_mass = np.concatenate([[0.0], np.cumsum(c)])
    n = f.size
    pi_sorted = None
    for k in range(n):
        residual = 1.0 - capped_mass[k]
        if residual <= 0.0:
            break
        if a[k] == 0.0:
            continue
        # ratio of the largest uncapped coordinate to its cap
        log_ratio = np.log(residual) + np.log(theta) + f[k] / nu - log_suffix[k]
        if log_ratio <= 1e-12:
            pi_sorted = np.concatenate(
                [c[:k], residual * np.exp(logits[k:] - log_suffix[k])]
            )
            break
    if pi_sorted is None:
        # every coordinate at its cap (theta == 1 or zero residual)
        pi_sorted = c / c.sum()
    pi = np.empty(n)
    pi[order] = pi_sorted
    return pi


def smoothed_superquantile(losses, theta: float, nu: float, weights=None) -> float:
    """Value of the entropy-smoothed superquantile at its optimal weights."""
    lv = as_losses(losses, weights)
    pi = smoothed_weights(lv, theta, nu)
    return float(pi @ lv.values) - nu * _kl_to_weights(pi, lv.weights)


def smoothed_objective(pi, losses, nu: float, weights=None) -> float:
    """``pi @ F - nu * KL(pi || weights)`` for an arbitrary feasible ``pi``."""
    lv = as_losses(losses, weights)
    pi = np.asarray(pi, dtype=float)
    return float(pi @ lv.values) - nu * _kl_to_weights(pi, lv.weights)


def entropic_risk(losses, nu: float, weights=None) -> float:
    """``(1/nu) log sum_i w_i exp(nu F_i)``, evaluated without overflow."""
    if nu is None or nu <= 0:
        raise ValueError("entropic risk needs nu > 0")
    lv = as_losses(losses, weights)
    value = float(logsumexp(nu * lv.values, b=lv.weights) / nu)
    return min(max(value, lv.mean()), float(lv.values.max()))


def tilted_weights(losses, nu: float, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Gradient weights of the entropic risk: ``w_i exp(nu F_i)`` normalized."""
    if nu <= 0:
        raise ValueError("tilt must be positive")
    lv = as_losses(losses, weights)
    with np.errstate(divide="ignore"):
        z = np.log(lv.weights) + nu * lv.values
    return np.exp(z - logsumexp(z))
