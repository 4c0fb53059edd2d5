"""Per-client misclassification error and its distributional summary."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import risk
from .fed_sim import _logits

PERCENTILES = (10, 50, 90, 95)
TAIL_LEVELS = (90, 95)


@dataclass
class ErrorDistribution:
    per_client_error: np.ndarray
    client_ids: List[int]
    split: str = "test"

    def __post_init__(self):
        self.per_client_error = np.asarray(self.per_client_error, dtype=float)
        if self.per_client_error.size != len(self.client_ids):
            raise ValueError("one error per client id expected")
        if np.any(self.per_client_error < 0) or np.any(self.per_client_error > 100):
            raise ValueError("errors are percentages in [0, 100]")


def predict(w: np.ndarray, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest class index on ties
    return np.argmax(_logits(w, features.astype(np.float64)), axis=1)


def evaluate(w: np.ndarray, clients: Sequence, split: str = "test") -> ErrorDistribution:
    errors, ids = [], []
    for c in clients:
        if c.n_samples == 0:
            raise ValueError(f"client {c.client_id} has no samples")
        acc = float(np.mean(predict(w, c.features) == c.labels))
        errors.append(100.0 * (1.0 - acc))
        ids.append(int(c.client_id))
    return ErrorDistribution(np.array(errors), ids, split)


def summarize(dist: ErrorDistribution) -> dict:
    """Mean, std, percentiles and tail means of the per-client errors.

    Percentiles use the same atom-based quantile as the training code: the
    ``tau``-th percentile is the ``(1 - tau/100)`` tail quantile.
    """
    e = np.sort(dist.per_client_error)  # sorted so float sums ignore client order
    stats = {"split": dist.split, "n_clients": int(e.size),
             "mean": float(e.mean()), "std": float(e.std())}
    for tau in PERCENTILES:
        stats[f"p{tau}"] = risk.quantile(e, 1.0 - tau / 100.0)
    for tau in TAIL_LEVELS:
        stats[f"superquantile_{tau}"] = risk.superquantile(e, 1.0 - tau / 100.0)
    return stats


def write_errors_csv(dist: ErrorDistribution, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "client_id", "error"])
        for cid, err in zip(dist.client_ids, dist.per_client_error):
            writer.writerow([dist.split, cid, f"{err:.6f}"])
