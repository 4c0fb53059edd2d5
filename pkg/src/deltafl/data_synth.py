"""Synthetic federated classification data with label shift across clients.

All clients share the class-conditional law ``N(mu_k, I)`` on the informative
features; only the label mix differs, drawn per client from a symmetric
Dirichlet. Datasets are stored as a directory::

    meta.json
    clients/<split>/<id>.feat   float32 little-endian, row-major (n, d)
    clients/<split>/<id>.lab    int32 little-endian, (n,)
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .dp_core import make_rng

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1


@dataclass
class SynthConfig:
    n_classes: int = 10
    input_dim: int = 20
    n_informative: int = 15
    n_redundant: int = 2
    class_sep: float = 5.0
    n_train: int = 2500
    n_val: int = 500
    n_test: int = 500
    samples_per_client: int = 100
    dirichlet_alpha_train: float = 0.5
    dirichlet_alpha_eval: float = 0.01
    seed: int = 2345

    def validate(self) -> "SynthConfig":
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.n_informative < 1 or self.input_dim < self.n_informative + self.n_redundant:
            raise ValueError("input_dim must cover informative and redundant features")
        if self.samples_per_client < 1:
            raise ValueError("samples_per_client must be >= 1")
        if self.dirichlet_alpha_train <= 0 or self.dirichlet_alpha_eval <= 0:
            raise ValueError("Dirichlet parameters must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train < 1:
            raise ValueError("need at least one training client")
        if self.class_sep <= 0:
            raise ValueError("class_sep must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray  # (n, d) float32
    labels: np.ndarray    # (n,) int32
    weight: float = 1.0

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree in length")

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class FederatedDataset:
    train: List[ClientDataset]
    val: List[ClientDataset]
    test: List[ClientDataset]
    config: SynthConfig = field(default_factory=SynthConfig)

    def split(self, name: str) -> List[ClientDataset]:
        return getattr(self, name)


def _set_weights(clients: List[ClientDataset]) -> None:
    total = sum(c.n_samples for c in clients)
    for c in clients:
        c.weight = c.n_samples / total if total else 0.0


def class_means(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Hypercube corners at +-``class_sep``, shrunk by random per-class and per-feature factors.

    The factors are uniform on [0, 1], as in the non-hypercube mode of the
    usual ``make_classification`` generator, so classes differ in difficulty.
    """
    K, p, sep = config.n_classes, config.n_informative, config.class_sep
    corners = rng.choice([-1.0, 1.0], size=(K, p))
    return sep * corners * rng.uniform(size=(K, 1)) * rng.uniform(size=(1, p))


def generate(config: SynthConfig, rng: Optional[np.random.Generator] = None) -> FederatedDataset:
    """Draw a federated dataset; the RNG stream order fixes the result."""
    config.validate()
    if rng is None:
        rng = make_rng(config.seed)
    K, d = config.n_classes, config.input_dim
    p, r = config.n_informative, config.n_redundant
    means = class_means(config, rng)
    mixing = rng.uniform(-1.0, 1.0, size=(p, r))

    def make_client(cid: int, alpha: float) -> ClientDataset:
        q = rng.dirichlet(np.full(K, alpha))
        q = q / q.sum()
        y = rng.choice(K, size=config.samples_per_client, p=q)
        informative = means[y] + rng.standard_normal((y.size, p))
        noise = rng.standard_normal((y.size, d - p - r))
        x = np.hstack([informative, informative @ mixing, noise])
        return ClientDataset(cid, x.astype(np.float32), y.astype(np.int32))

    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    alphas = {"train": config.dirichlet_alpha_train, "val": config.dirichlet_alpha_eval,
              "test": config.dirichlet_alpha_eval}
    splits: Dict[str, List[ClientDataset]] = {}
    next_id = 0
    for name in SPLITS:
        clients = [make_client(next_id + i, alphas[name]) for i in range(counts[name])]
        next_id += counts[name]
        _set_weights(clients)
        splits[name] = clients
    return FederatedDataset(splits["train"], splits["val"], splits["test"], config)


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; ``offset`` is the failing byte."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path}: byte {self.offset}: {message}")


def save(dataset: FederatedDataset, path) -> None:
    root = Path(path)
    meta = {"format_version": FORMAT_VERSION,
            "config": dataclasses.asdict(dataset.config),
            "splits": {}}
    for name in SPLITS:
        folder = root / "clients" / name
        folder.mkdir(parents=True, exist_ok=True)
        entries = []
        for c in dataset.split(name):
            c.features.astype("<f4", copy=False).tofile(folder / f"{c.client_id}.feat")
            c.labels.astype("<i4", copy=False).tofile(folder / f"{c.client_id}.lab")
            entries.append({"id": c.client_id, "n_samples": c.n_samples,
                            "n_features": int(c.features.shape[1])})
        meta["splits"][name] = entries
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def _read_array(path: Path, dtype: str, count: int) -> np.ndarray:
    raw = path.read_bytes()
    width = np.dtype(dtype).itemsize
    if len(raw) != count * width:
        offset = min(len(raw), count * width)
        raise DatasetFormatError(path, offset,
                                 f"expected {count * width} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).copy()


def load(path) -> FederatedDataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset at {root} (missing meta.json)")
    text = meta_path.read_bytes()
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(meta_path, exc.pos, exc.msg) from None
    try:
        config = SynthConfig.from_dict(meta["config"])
        split_meta = meta["splits"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(meta_path, 0, f"bad metadata: {exc}") from None
    splits = {}
    for name in SPLITS:
        clients = []
        for entry in split_meta.get(name, []):
            cid, n, d = int(entry["id"]), int(entry["n_samples"]), int(entry["n_features"])
            folder = root / "clients" / name
            x = _read_array(folder / f"{cid}.feat", "<f4", n * d).reshape(n, d)
            y = _read_array(folder / f"{cid}.lab", "<i4", n)
            if n and (y.min() < 0 or y.max() >= config.n_classes):
                bad = int(np.argmax((y < 0) | (y >= config.n_classes)))
                raise DatasetFormatError(folder / f"{cid}.lab", 4 * bad, "label out of range")
            clients.append(ClientDataset(cid, x.astype(np.float32), y.astype(np.int32)))
        _set_weights(clients)
        splits[name] = clients
    return FederatedDataset(splits["train"], splits["val"], splits["test"], config)
