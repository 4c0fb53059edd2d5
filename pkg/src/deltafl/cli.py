"""Command-line experiment runner.

Usage::

    deltafl generate --config exp.json --out data/
    deltafl train --config exp.json --data data/ --out runs/
    deltafl quantile-bench --config exp.json --out bench/
    deltafl compare --config exp.json --data data/ --out cmp/

The config is one JSON document with optional sections ``dataset``,
``training``, ``seeds``, ``compare`` and ``quantile_bench``. Missing keys take
their defaults, and the fully resolved document is written next to every
output so a run can be reproduced from its own output directory.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data_synth
from .data_synth import SynthConfig
from .dp_core import ModRing, dp_to_zcdp, make_rng, zcdp_to_dp
from .dp_quantile import (BinEdges, best_quantile_error, calibrate, dp_aggregate, encode_client,
                          exact_histogram, quantile_error, quantile_from_histogram)
from .evaluation import evaluate, write_errors_csv
from .fed_sim import FedConfig, train

log = logging.getLogger("deltafl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

BENCH_COLUMNS = ("distribution", "n", "b", "bit_width", "epsilon", "mean_quantile_error", "std")
THETA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


class ConfigError(ValueError):
    pass


@dataclass
class BenchSpec:
    distribution: List[str] = field(default_factory=lambda: ["uniform", "chi2"])
    n: List[int] = field(default_factory=lambda: [256])
    b: List[int] = field(default_factory=lambda: [64])
    bit_width: List[Optional[int]] = field(default_factory=lambda: [None])
    epsilon: List[float] = field(default_factory=lambda: [1.0, 5.0])
    # "approx_dp": epsilon is an (epsilon, delta)-DP target converted to zCDP;
    # "zcdp": epsilon is used directly as the protocol's epsilon = sqrt(2 rho)
    epsilon_convention: str = "approx_dp"
    delta: float = 1e-5
    thetas: List[float] = field(default_factory=lambda: list(THETA_GRID))
    runs: int = 10
    upper: float = 10.0
    noiseless: bool = False
    seed: int = 0

    def validate(self) -> "BenchSpec":
        if not all([self.distribution, self.n, self.b, self.bit_width, self.epsilon, self.thetas]):
            raise ConfigError("quantile_bench sweep axes must be non-empty")
        if set(self.distribution) - {"uniform", "chi2"}:
            raise ConfigError("distribution must be 'uniform' or 'chi2'")
        if self.epsilon_convention not in ("approx_dp", "zcdp"):
            raise ConfigError("epsilon_convention is 'approx_dp' or 'zcdp'")
        if any(e <= 0 for e in self.epsilon) or self.runs < 1 or self.upper <= 0:
            raise ConfigError("need positive epsilons, runs and upper bound")
        if any(b < 2 or b & (b - 1) for b in self.b):
            raise ConfigError("bin counts must be powers of two")
        if any(bw is not None and not 2 <= bw <= 62 for bw in self.bit_width):
            raise ConfigError("bit widths must lie in [2, 62] or be null")
        return self


@dataclass
class CompareSpec:
    thetas: List[float] = field(default_factory=lambda: [0.1, 0.5, 0.8])
    tilt_nu: float = 1.0
    private: bool = True

    def validate(self) -> "CompareSpec":
        if not self.thetas or any(not 0 < t <= 1 for t in self.thetas):
            raise ConfigError("compare.thetas must be a non-empty list in (0, 1]")
        if self.tilt_nu <= 0:
            raise ConfigError("compare.tilt_nu must be positive")
        return self


@dataclass
class ExperimentSpec:
    dataset: SynthConfig = field(default_factory=SynthConfig)
    training: FedConfig = field(default_factory=FedConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    compare: CompareSpec = field(default_factory=CompareSpec)
    quantile_bench: BenchSpec = field(default_factory=BenchSpec)

    def to_dict(self) -> dict:
        return {"dataset": dataclasses.asdict(self.dataset),
                "training": self.training.to_dict(),
                "seeds": list(self.seeds),
                "compare": dataclasses.asdict(self.compare),
                "quantile_bench": dataclasses.asdict(self.quantile_bench)}


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**raw).validate()


def parse_spec(raw: dict, seed_offset: int = 0) -> ExperimentSpec:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"dataset", "training", "seeds", "compare", "quantile_bench"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        dataset = SynthConfig.from_dict(raw.get("dataset") or {})
        training = FedConfig.from_dict(raw.get("training") or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    try:
        compare = _section(CompareSpec, raw.get("compare"), "compare")
        bench = _section(BenchSpec, raw.get("quantile_bench"), "quantile_bench")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if seed_offset:
        dataset = dataclasses.replace(dataset, seed=dataset.seed + seed_offset)
        seeds = [s + seed_offset for s in seeds]
        bench = dataclasses.replace(bench, seed=bench.seed + seed_offset)
    return ExperimentSpec(dataset, training, seeds, compare, bench)


def load_spec(path: Optional[str], seed_offset: int = 0) -> ExperimentSpec:
    if path is None:
        return parse_spec({}, seed_offset)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from None
    return parse_spec(raw, seed_offset)


def worker_count() -> int:
    raw = os.environ.get("SFL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SFL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SFL_THREADS must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn, jobs):
    """Map over jobs in up to SFL_THREADS processes; results keep job order."""
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=True)
        fh.write("\n")


def _dataset(data_dir: Optional[str], cfg_dict: dict):
    if data_dir is not None:
        return data_synth.load(data_dir)
    return data_synth.generate(SynthConfig(**cfg_dict))


def _check_data_dir(data_dir: Optional[str]) -> None:
    if data_dir is not None and not (Path(data_dir) / "meta.json").exists():
        raise ConfigError(f"no dataset at {data_dir} (expected meta.json)")


# generate

def cmd_generate(spec: ExperimentSpec, out: Path) -> None:
    dataset = data_synth.generate(spec.dataset)
    data_synth.save(dataset, out)
    log.info("wrote %d/%d/%d clients to %s", len(dataset.train), len(dataset.val),
             len(dataset.test), out)


# train

def _train_job(job) -> dict:
    cfg_dict, data_dir, dataset_cfg, out_dir = job
    config = FedConfig.from_dict(cfg_dict)
    dataset = _dataset(data_dir, dataset_cfg)
    start = time.perf_counter()
    state, report = train(config, dataset)
    report["seconds"] = time.perf_counter() - start
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "history.jsonl", "w") as fh:
        for record in state.history:
            fh.write(json.dumps(record) + "\n")
    for split in ("val", "test"):
        clients = dataset.split(split)
        if clients:
            write_errors_csv(evaluate(state.model, clients, split), out / f"errors_{split}.csv")
    np.save(out / "model.npy", state.model)
    _write_json(out / "report.json", report)
    return report


def aggregate_reports(reports: List[dict]) -> dict:
    """Mean and std across seeds of every numeric stat per split."""
    out = {}
    for split in ("val", "test"):
        rows = [r[split] for r in reports if split in r]
        if not rows:
            continue
        keys = [k for k, v in rows[0].items() if isinstance(v, (int, float)) and k != "n_clients"]
        out[split] = {k: {"mean": float(np.mean([r[k] for r in rows])),
                          "std": float(np.std([r[k] for r in rows]))} for k in keys}
    out["train_loss"] = {k: {"mean": float(np.mean([r["train_loss"][k] for r in reports])),
                             "std": float(np.std([r["train_loss"][k] for r in reports]))}
                         for k in reports[0]["train_loss"]}
    return out


def cmd_train(spec: ExperimentSpec, data_dir: Optional[str], out: Path) -> dict:
    _check_data_dir(data_dir)
    base = spec.training.to_dict()
    ds_cfg = dataclasses.asdict(spec.dataset)
    jobs = [({**base, "seed": s}, data_dir, ds_cfg, str(out / f"seed_{s}")) for s in spec.seeds]
    reports = parallel_map(_train_job, jobs)
    summary = {"config": spec.to_dict(), "seeds": spec.seeds,
               "aggregate": aggregate_reports(reports)}
    _write_json(out / "summary.json", summary)
    test = summary["aggregate"].get("test", {})
    if test:
        log.info("test mean error %.2f +- %.2f, p90 %.2f +- %.2f",
                 test["mean"]["mean"], test["mean"]["std"], test["p90"]["mean"], test["p90"]["std"])
    return summary


# quantile-bench

def bench_losses(distribution: str, n: int, upper: float, rng: np.random.Generator) -> np.ndarray:
    if distribution == "uniform":
        return rng.uniform(0.0, upper, size=n)
    return np.clip(rng.chisquare(4.0, size=n), 0.0, upper)


def protocol_epsilon(epsilon: float, convention: str, delta: float) -> float:
    """The protocol's own epsilon (= sqrt(2 rho)) for a benchmark target."""
    if convention == "zcdp":
        return epsilon
    return math.sqrt(2.0 * dp_to_zcdp(epsilon, delta))


def bench_point(dist: str, n: int, b: int, bit_width: Optional[int], eps: float,
                spec: BenchSpec) -> dict:
    """Mean quantile error over ``spec.runs`` datasets and the theta grid."""
    edges = BinEdges.uniform(spec.upper, b)
    if spec.noiseless:
        sigma2, c, bits, rho = 0.0, 1, bit_width or 62, math.inf
    else:
        cal = calibrate(protocol_epsilon(eps, spec.epsilon_convention, spec.delta), n, b,
                        spec.delta, bit_width)
        sigma2, c, bits, rho = cal.sigma2, cal.c, int(math.log2(cal.modulus)), cal.rho
    ring = ModRing(1 << bits)
    run_errors, run_excess = [], []
    for run in range(spec.runs):
        # data depends only on (seed, distribution, n, run) so sweep points are paired
        losses = bench_losses(dist, n, spec.upper,
                              make_rng(spec.seed, 0, ("uniform", "chi2").index(dist), n, run))
        noise_key = (spec.seed, 1, n, b, bits, int(round(eps * 1e6)), run)
        exact = exact_histogram(losses, edges)
        encoded = [encode_client(x, edges) for x in losses]
        errs, excess = [], []
        for k, theta in enumerate(spec.thetas):
            noisy = dp_aggregate(encoded, sigma2, c, ring, make_rng(*noise_key, k),
                                 delta=spec.delta, strict=False)
            err = quantile_error(quantile_from_histogram(noisy, theta).index, exact, theta)
            errs.append(err)
            excess.append(err - best_quantile_error(exact, theta))
        run_errors.append(np.mean(errs))
        run_excess.append(np.mean(excess))
    return {"distribution": dist, "n": n, "b": b, "bit_width": bits, "epsilon": eps,
            "mean_quantile_error": float(np.mean(run_errors)), "std": float(np.std(run_errors)),
            "mean_excess_error": float(np.mean(run_excess)),
            "excess_std": float(np.std(run_excess)),
            "sigma2": sigma2, "scale_c": c, "rho": rho,
            "dp_epsilon": zcdp_to_dp(rho, spec.delta) if math.isfinite(rho) else math.inf}


def _bench_job(job) -> dict:
    *point, raw = job
    return bench_point(*point, BenchSpec(**raw))


def cmd_quantile_bench(spec: ExperimentSpec, out: Path) -> List[dict]:
    bench = spec.quantile_bench
    raw = dataclasses.asdict(bench)
    jobs = [(dist, n, b, bw, eps, raw) for dist in bench.distribution for n in bench.n
            for b in bench.b for bw in bench.bit_width for eps in bench.epsilon]
    rows = parallel_map(_bench_job, jobs)
    fields = list(BENCH_COLUMNS) + [k for k in rows[0] if k not in BENCH_COLUMNS]
    with open(out / "quantile_bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return rows


# compare

def compare_runs(spec: ExperimentSpec) -> List[dict]:
    """Config overrides for each arm of the comparison."""
    runs = [{"algorithm": "delta_fl", "theta": t} for t in spec.compare.thetas]
    runs += [{"algorithm": "fedavg", "theta": 1.0},
             {"algorithm": "tilted_erm", "theta": 1.0, "nu": spec.compare.tilt_nu}]
    if spec.compare.private:
        runs += [{"algorithm": "delta_fl_dp", "theta": t} for t in spec.compare.thetas]
        runs += [{"algorithm": "fedavg_dp", "theta": 1.0}]
    return runs


def _compare_job(job) -> dict:
    cfg_dict, data_dir, dataset_cfg, out_dir = job
    report = _train_job(job)
    led = report["privacy"]
    return {"algorithm": cfg_dict["algorithm"], "theta": cfg_dict["theta"],
            "seed": cfg_dict["seed"], "test": report.get("test"), "rho": led["rho_total"]}


def cmd_compare(spec: ExperimentSpec, data_dir: Optional[str], out: Path) -> List[dict]:
    _check_data_dir(data_dir)
    runs = compare_runs(spec)
    private = any(r["algorithm"].endswith("_dp") for r in runs)
    if private and math.isinf(spec.training.clip_norm):
        raise ConfigError("private comparison needs a finite training.clip_norm")
    base = spec.training.to_dict()
    ds_cfg = dataclasses.asdict(spec.dataset)
    jobs = []
    for r in runs:
        label = f"{r['algorithm']}_theta{r['theta']}"
        for s in spec.seeds:
            jobs.append(({**base, **r, "seed": s}, data_dir, ds_cfg,
                         str(out / "runs" / label / f"seed_{s}")))
    results = parallel_map(_compare_job, jobs)
    table = []
    for r in runs:
        hits = [x for x in results if x["algorithm"] == r["algorithm"] and x["theta"] == r["theta"]]
        means = [h["test"]["mean"] for h in hits]
        p90s = [h["test"]["p90"] for h in hits]
        rho = hits[0]["rho"]
        table.append({"algorithm": r["algorithm"], "theta": r["theta"],
                      "private": r["algorithm"].endswith("_dp"), "seeds": len(hits),
                      "mean_error": float(np.mean(means)), "mean_error_std": float(np.std(means)),
                      "p90_error": float(np.mean(p90s)), "p90_error_std": float(np.std(p90s)),
                      "rho": rho,
                      "epsilon": zcdp_to_dp(rho, spec.training.dp_delta) if 0 < rho < math.inf
                      else (0.0 if rho == 0 else math.inf)})
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)
    _write_json(out / "compare.json", {"config": spec.to_dict(), "table": table})
    return table


# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltafl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, data=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed-offset", type=int, default=0,
                       help="added to every seed in the config")
        if data:
            p.add_argument("--data", help="dataset directory (generated in memory if omitted)")
        return p

    add("generate", "write a synthetic federated dataset")
    add("train", "train over the configured seeds and report", data=True)
    add("quantile-bench", "benchmark the private quantile protocol")
    add("compare", "compare Delta-FL, FedAvg and Tilted-ERM", data=True)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        spec = load_spec(args.config, args.seed_offset)
        worker_count()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved_config.json", spec.to_dict())
        if args.command == "generate":
            cmd_generate(spec, out)
        elif args.command == "train":
            cmd_train(spec, args.data, out)
        elif args.command == "quantile-bench":
            cmd_quantile_bench(spec, out)
        else:
            cmd_compare(spec, args.data, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        log.debug("runtime failure", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
