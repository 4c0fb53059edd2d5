"""Federated training loop: Delta-FL variants, FedAvg and Tilted-ERM.

The model is multinomial logistic regression with an intercept, stored as a
``(K, d + 1)`` matrix whose last column is the bias. Every source of
randomness is a stream derived from ``(seed, round, purpose, client_id)``, so
a run is a pure function of its config and dataset.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from . import risk
from .data_synth import ClientDataset, FederatedDataset
from .dp_core import ModRing, PrivacyLedger, gaussian_update_rho, make_rng
from .dp_quantile import BinEdges, dp_quantile, min_modulus, privacy_epsilon

ALGORITHMS = ("delta_fl", "delta_fl_dual", "delta_fl_smoothed", "delta_fl_dp",
              "fedavg", "fedavg_sub", "fedavg_dp", "tilted_erm")

DELTA_FL_MODES = {"delta_fl": "exact_quantile", "delta_fl_dual": "dual_weights",
                  "delta_fl_smoothed": "smoothed", "delta_fl_dp": "dp"}

# RNG stream tags
_SAMPLE, _LOCAL, _QUANTILE, _SERVER_NOISE = 0, 1, 2, 3


@dataclass
class FedConfig:
    algorithm: str = "delta_fl"
    theta: float = 0.5
    nu: float = 0.1
    lam: float = 0.0
    rounds: int = 100
    clients_per_round: int = 10
    local_steps: int = 1
    batch_size: Optional[int] = None
    learning_rate: float = 0.1
    lr_decay: float = 1.0
    lr_decay_period: int = 0
    client_weighting: str = "samples"
    clip_norm: float = math.inf
    noise_sigma_w: float = 0.0
    n_bins: int = 32
    loss_bound: float = 1.5
    quantile_sigma2: float = 1.0
    quantile_scale: int = 1
    modulus_bits: Optional[int] = None
    dp_delta: float = 1e-5
    eval_every: int = 0
    seed: int = 0

    def validate(self) -> "FedConfig":
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.learning_rate <= 0 or self.local_steps < 1 or self.rounds < 0:
            raise ValueError("need learning_rate > 0, local_steps >= 1, rounds >= 0")
        if self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if self.client_weighting not in ("samples", "uniform"):
            raise ValueError("client_weighting is 'samples' or 'uniform'")
        if self.algorithm in ("delta_fl_smoothed", "tilted_erm") and self.nu <= 0:
            raise ValueError("nu must be positive for smoothing or tilting")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or null")
        if self.algorithm in ("delta_fl_dp", "fedavg_dp"):
            if self.clip_norm <= 0 or self.noise_sigma_w < 0:
                raise ValueError("DP needs clip_norm > 0 and noise_sigma_w >= 0")
        if self.algorithm == "delta_fl_dp":
            b = self.n_bins
            if b < 2 or b & (b - 1):
                raise ValueError("n_bins must be a power of two")
            if self.loss_bound <= 0 or self.quantile_scale < 1 or self.quantile_sigma2 < 0:
                raise ValueError("bad quantile parameters")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        for key in ("clip_norm",):
            if d.get(key) is None and key in d:
                d[key] = math.inf
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        if math.isinf(d["clip_norm"]):
            d["clip_norm"] = None
        return d

    def lr_at(self, t: int) -> float:
        if self.lr_decay_period > 0 and self.lr_decay != 1.0:
            return self.learning_rate * self.lr_decay ** (-(t // self.lr_decay_period))
        return self.learning_rate


@dataclass
class FunctionClient:
    """A client defined by an explicit objective instead of data."""

    client_id: int
    loss_fn: Callable[[np.ndarray], float]
    grad_fn: Callable[[np.ndarray], np.ndarray]
    weight: float = 1.0
    n_samples: int = 1


@dataclass
class FedState:
    model: np.ndarray
    round: int = 0
    ledger: PrivacyLedger = field(default_factory=PrivacyLedger)
    history: List[dict] = field(default_factory=list)
    events: List[str] = field(default_factory=list)


def init_model(n_classes: int, input_dim: int) -> np.ndarray:
    return np.zeros((n_classes, input_dim + 1))


def _xy(client: ClientDataset):
    return client.features.astype(np.float64), client.labels


def _logits(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    if w.shape[1] != x.shape[1] + 1:
        raise ValueError(f"model expects {w.shape[1] - 1} features, data has {x.shape[1]}")
    return x @ w[:, :-1].T + w[:, -1]


def client_loss(client, w: np.ndarray, lam: float = 0.0) -> float:
    """Mean cross-entropy on the client's data plus ``(lam/2) ||w||^2``."""
    reg = 0.5 * lam * float(np.sum(w * w))
    if isinstance(client, FunctionClient):
        return float(client.loss_fn(w)) + reg
    x, y = _xy(client)
    if y.size == 0:
        raise ValueError("client has no samples")
    logp = log_softmax(_logits(w, x), axis=1)
    return float(-logp[np.arange(y.size), y].mean()) + reg


def client_gradient(client, w: np.ndarray, batch: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of the unregularized mean loss over ``batch`` (all rows if None)."""
    if isinstance(client, FunctionClient):
        return np.asarray(client.grad_fn(w), dtype=float).reshape(w.shape)
    x, y = _xy(client)
    if batch is not None:
        x, y = x[batch], y[batch]
    p = softmax(_logits(w, x), axis=1)
    p[np.arange(y.size), y] -= 1.0
    p /= y.size
    grad = np.empty_like(w)
    grad[:, :-1] = p.T @ x
    grad[:, -1] = p.sum(axis=0)
    return grad


def local_update(client, w: np.ndarray, lr: float, lam: float, steps: int,
                 batch_size: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``steps`` iterations of ``w <- (1 - lr*lam) w - lr * grad``."""
    w = w.copy()
    n = client.n_samples
    for _ in range(steps):
        batch = None
        if batch_size is not None and batch_size < n and not isinstance(client, FunctionClient):
            batch = rng.choice(n, size=batch_size, replace=False)
        w = (1.0 - lr * lam) * w - lr * client_gradient(client, w, batch)
    return w


def _sample_cohort(config: FedConfig, n: int, t: int, size: Optional[int] = None) -> np.ndarray:
    m = min(size or config.clients_per_round, n)
    rng = make_rng(config.seed, t, _SAMPLE)
    return np.sort(rng.choice(n, size=m, replace=False))


def _cohort_weights(config: FedConfig, clients: Sequence) -> np.ndarray:
    if config.client_weighting == "uniform":
        return np.full(len(clients), 1.0 / len(clients))
    w = np.array([c.n_samples for c in clients], dtype=float)
    return w / w.sum()


def _local_models(state: FedState, config: FedConfig, cohort: Sequence, active) -> Dict[int, np.ndarray]:
    lr = config.lr_at(state.round)
    out = {}
    for pos in active:
        client = cohort[pos]
        rng = make_rng(config.seed, state.round, _LOCAL, client.client_id)
        out[pos] = local_update(client, state.model, lr, config.lam, config.local_steps,
                                config.batch_size, rng)
    return out


def _aggregate(local: Dict[int, np.ndarray], weights: np.ndarray) -> np.ndarray:
    # fixed summation order (cohort position == client id order)
    total = None
    for pos in sorted(local):
        term = weights[pos] * local[pos]
        total = term if total is None else total + term
    return total


def _record(state: FedState, config: FedConfig, cohort, losses, quantile, kept) -> None:
    alpha = _cohort_weights(config, cohort)
    state.history.append({
        "round": state.round,
        "selected_ids": [int(c.client_id) for c in cohort],
        "quantile": None if quantile is None else float(quantile),
        "cohort_after_filter": int(kept),
        "mean_train_loss": float(alpha @ losses),
        "superquantile_train_loss": risk.superquantile(losses, config.theta, alpha),
        "rho_spent": state.ledger.rho_total,
    })


def _finish(state: FedState, new_model: np.ndarray) -> FedState:
    state.model = new_model
    state.round += 1
    return state


def tail_threshold(losses: np.ndarray, theta: float) -> float:
    """The ``ceil(theta m)``-th largest loss of the cohort."""
    k = max(1, math.ceil(theta * len(losses) - 1e-9))
    return float(np.sort(losses)[::-1][k - 1])


def _clip(update: np.ndarray, clip_norm: float) -> np.ndarray:
    if math.isinf(clip_norm):
        return update
    norm = float(np.linalg.norm(update))
    return update * (clip_norm / max(clip_norm, norm))


def _quantile_modulus(config: FedConfig, m: int) -> int:
    if config.modulus_bits is not None:
        return 1 << int(config.modulus_bits)
    need = min_modulus(config.quantile_sigma2, config.quantile_scale, m, config.n_bins,
                       config.dp_delta)
    return 1 << math.ceil(math.log2(need))


def quantile_rho(config: FedConfig, m: int) -> float:
    """Per-round zCDP of the private quantile on a cohort of ``m`` clients."""
    if config.quantile_sigma2 == 0:
        return math.inf
    return privacy_epsilon(config.quantile_sigma2, config.quantile_scale, m, config.n_bins)[1]


def update_rho(config: FedConfig) -> float:
    if config.noise_sigma_w == 0:
        return math.inf
    return gaussian_update_rho(config.clip_norm, config.noise_sigma_w)


def run_round_delta_fl(state: FedState, config: FedConfig, clients: Sequence,
                       mode: str = "exact_quantile") -> FedState:
    """One communication round of Delta-FL.

    ``mode`` selects how tail weights are formed: ``exact_quantile`` keeps
    clients at or above the exact cohort quantile, ``dual_weights`` uses the
    capped-simplex maximizer, ``smoothed`` its entropic smoothing, and ``dp``
    estimates the quantile privately and adds clipping plus Gaussian noise to
    the aggregation.
    """
    t = state.round
    ids = _sample_cohort(config, len(clients), t)
    cohort = [clients[i] for i in ids]
    m = len(cohort)
    w = state.model
    losses = np.array([client_loss(c, w) for c in cohort])
    alpha = _cohort_weights(config, cohort)
    quantile = None

    if mode == "exact_quantile":
        quantile = tail_threshold(losses, config.theta)
        keep = losses >= quantile
        weights = np.where(keep, alpha, 0.0)
        weights /= weights.sum()
    elif mode == "dual_weights":
        weights = risk.dual_weights(losses, config.theta, alpha)
    elif mode == "smoothed":
        weights = risk.smoothed_weights(losses, config.theta, config.nu, alpha)
    elif mode == "dp":
        return _dp_round(state, config, cohort, losses)
    else:
        raise ValueError(f"unknown Delta-FL mode {mode!r}")

    active = np.flatnonzero(weights > 0)
    local = _local_models(state, config, cohort, active)
    _record(state, config, cohort, losses, quantile, active.size)
    return _finish(state, _aggregate(local, weights))


def _dp_round(state: FedState, config: FedConfig, cohort, losses) -> FedState:
    t, m, w = state.round, len(cohort), state.model
    edges = BinEdges.uniform(config.loss_bound, config.n_bins)
    ring = ModRing(_quantile_modulus(config, m))
    est = dp_quantile(losses, config.theta, edges, config.quantile_sigma2, config.quantile_scale,
                      ring, make_rng(config.seed, t, _QUANTILE), delta=config.dp_delta,
                      strict=False)
    keep = losses >= est.value
    if not keep.any():
        state.events.append(f"round {t}: empty tail after private quantile; used full cohort")
        keep = np.ones(m, dtype=bool)
    active = np.flatnonzero(keep)
    local = _local_models(state, config, cohort, active)
    total = np.zeros_like(w)
    for pos in sorted(local):
        total += _clip(local[pos] - w, config.clip_norm)
    new = w + total / active.size
    if config.noise_sigma_w > 0:
        new = new + make_rng(config.seed, t, _SERVER_NOISE).normal(0.0, config.noise_sigma_w, w.shape)
    state.ledger.add(f"round {t}: quantile", quantile_rho(config, m))
    state.ledger.add(f"round {t}: update", update_rho(config))
    _record(state, config, cohort, losses, est.value, active.size)
    return _finish(state, new)


def run_round_fedavg(state: FedState, config: FedConfig, clients: Sequence,
                     subsample_fraction: float = 1.0) -> FedState:
    """FedAvg round on ``ceil(subsample_fraction * m)`` clients.

    With ``fedavg_dp`` the updates are clipped, averaged uniformly and
    perturbed with Gaussian noise, and the ledger is charged.
    """
    size = max(1, math.ceil(subsample_fraction * config.clients_per_round - 1e-9))
    ids = _sample_cohort(config, len(clients), state.round, size)
    cohort = [clients[i] for i in ids]
    w = state.model
    losses = np.array([client_loss(c, w) for c in cohort])
    local = _local_models(state, config, cohort, range(len(cohort)))
    if config.algorithm == "fedavg_dp":
        total = np.zeros_like(w)
        for pos in sorted(local):
            total += _clip(local[pos] - w, config.clip_norm)
        new = w + total / len(cohort)
        if config.noise_sigma_w > 0:
            rng = make_rng(config.seed, state.round, _SERVER_NOISE)
            new = new + rng.normal(0.0, config.noise_sigma_w, w.shape)
        state.ledger.add(f"round {state.round}: update", update_rho(config))
    else:
        new = _aggregate(local, _cohort_weights(config, cohort))
    _record(state, config, cohort, losses, None, len(cohort))
    return _finish(state, new)


def run_round_tilted(state: FedState, config: FedConfig, clients: Sequence,
                     nu: Optional[float] = None) -> FedState:
    """Tilted-ERM round: aggregate with weights proportional to ``exp(nu F_i)``."""
    nu = config.nu if nu is None else nu
    ids = _sample_cohort(config, len(clients), state.round)
    cohort = [clients[i] for i in ids]
    losses = np.array([client_loss(c, state.model) for c in cohort])
    weights = risk.tilted_weights(losses, nu, _cohort_weights(config, cohort))
    local = _local_models(state, config, cohort, np.flatnonzero(weights > 0))
    _record(state, config, cohort, losses, None, len(local))
    return _finish(state, _aggregate(local, weights))


def run_round(state: FedState, config: FedConfig, clients: Sequence) -> FedState:
    algo = config.algorithm
    if algo in DELTA_FL_MODES:
        return run_round_delta_fl(state, config, clients, DELTA_FL_MODES[algo])
    if algo == "fedavg" or algo == "fedavg_dp":
        return run_round_fedavg(state, config, clients)
    if algo == "fedavg_sub":
        return run_round_fedavg(state, config, clients, subsample_fraction=config.theta)
    if algo == "tilted_erm":
        return run_round_tilted(state, config, clients)
    raise ValueError(f"unknown algorithm {algo!r}")


def train(config: FedConfig, dataset: FederatedDataset,
          model: Optional[np.ndarray] = None, callback=None):
    """Run ``config.rounds`` rounds; returns ``(state, report)``.

    The validation split is evaluated every ``eval_every`` rounds when
    positive; the report holds final train/val/test summaries.
    """
    from .evaluation import evaluate, summarize  # local import avoids a cycle

    config.validate()
    clients = dataset.train
    if config.clients_per_round > len(clients):
        raise ValueError("clients_per_round exceeds the number of training clients")
    cfg = dataset.config
    if model is None:
        model = init_model(cfg.n_classes, cfg.input_dim)
    state = FedState(model=np.array(model, dtype=float))
    evals = []
    for _ in range(config.rounds):
        run_round(state, config, clients)
        if callback is not None:
            callback(state)
        if config.eval_every and state.round % config.eval_every == 0 and dataset.val:
            evals.append({"round": state.round,
                          "val": summarize(evaluate(state.model, dataset.val, "val"))})
    report = {
        "algorithm": config.algorithm,
        "rounds": state.round,
        "config": config.to_dict(),
        "dataset": dataclasses.asdict(cfg),
        "train_loss": train_loss_stats(state.model, clients, config.theta),
        "evaluations": evals,
        "events": list(state.events),
        "privacy": state.ledger.to_dict(),
    }
    for split in ("val", "test"):
        if dataset.split(split):
            report[split] = summarize(evaluate(state.model, dataset.split(split), split))
    return state, report


def train_loss_stats(w: np.ndarray, clients: Sequence, theta: float) -> dict:
    """Sample-weighted train-loss mean and superquantile."""
    losses = np.array([client_loss(c, w) for c in clients])
    alpha = np.array([c.n_samples for c in clients], dtype=float)
    alpha /= alpha.sum()
    return {"mean": float(alpha @ losses),
            "superquantile": risk.superquantile(losses, theta, alpha),
            "max": float(losses.max())}


# Direct (non-federated) access to the objective, used as reference.

def superquantile_objective(w: np.ndarray, clients: Sequence, theta: float, lam: float = 0.0,
                            weights=None) -> float:
    """``F_theta(w)``: superquantile of client losses plus ``(lam/2)||w||^2``."""
    losses = np.array([client_loss(c, w) for c in clients])
    return risk.superquantile(losses, theta, weights) + 0.5 * lam * float(np.sum(w * w))


def superquantile_subgradient(w: np.ndarray, clients: Sequence, theta: float, lam: float = 0.0,
                              weights=None) -> np.ndarray:
    """``sum_i pi*_i grad F_i(w) + lam w`` with ``pi*`` the dual maximizer."""
    losses = np.array([client_loss(c, w) for c in clients])
    pi = risk.dual_weights(losses, theta, weights)
    g = lam * w
    for p, c in zip(pi, clients):
        if p > 0:
            g = g + p * client_gradient(c, w)
    return g


def smoothed_objective_grad(w: np.ndarray, clients: Sequence, theta: float, nu: float,
                            lam: float = 0.0, weights=None):
    """Value and gradient of the entropy-smoothed superquantile objective."""
    losses = np.array([client_loss(c, w) for c in clients])
    pi = risk.smoothed_weights(losses, theta, nu, weights)
    value = risk.smoothed_objective(pi, losses, nu, weights) + 0.5 * lam * float(np.sum(w * w))
    g = lam * w
    for p, c in zip(pi, clients):
        if p > 0:
            g = g + p * client_gradient(c, w)
    return value, g


def reference_minimum(clients: Sequence, theta: float, lam: float, shape,
                      nus=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)):
    """Minimizer of ``F_theta`` by L-BFGS on a smoothing continuation.

    The smoothed objective differs from ``F_theta`` by at most
    ``nu log n`` (``nu log(1/theta)`` in fact), so the last stage bounds the
    suboptimality well below 1e-4 for the problem sizes used here.
    """
    from scipy.optimize import minimize

    w = np.zeros(shape)
    for nu in nus:
        def fg(v, nu=nu):
            val, g = smoothed_objective_grad(v.reshape(shape), clients, theta, nu, lam)
            return val, g.ravel()
        res = minimize(fg, w.ravel(), jac=True, method="L-BFGS-B",
                       options={"maxiter": 5000, "gtol": 1e-10, "ftol": 1e-15})
        w = res.x.reshape(shape)
    return w, superquantile_objective(w, clients, theta, lam)
