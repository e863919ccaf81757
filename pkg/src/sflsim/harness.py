"""Experiment runner: validated JSON configs, seeded multi-mode runs, JSONL
metrics, CSV per-mode summaries, and a cross-mode comparison report.

All timing uses the analytic simulated clock, so results are identical on any
host.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import streams
from .controller import ControllerParams, GaParams, build_plan
from .data import (
    Shard,
    generate_dataset,
    iid_reference,
    label_distribution,
    partition_dirichlet,
    train_test_split,
)
from .env import (
    BandwidthProcess,
    ModeSchedule,
    WorkerProfile,
    make_profiles,
    observe_capabilities,
)
from .errors import ConfigError, ValidationError
from .estimator import WorkerEstimate, estimate_bandwidth, update_estimate
from .metrics import MODES, RoundMetrics, validate_metrics_row
from .tensor import SplitModel, Tensor
from .training import TrainingState, run_round, uniform_plan

UNREACHED = None  # JSON null marks "target accuracy never reached"


@dataclass(frozen=True)
class EnvConfig:
    cost_base: float = 1e-3
    spread: float = 10.0
    noise_sigma: float = 0.1
    mode_period: int = 20
    mode_low: float = 0.5
    mode_high: float = 2.0
    bandwidth_mean: float = 250.0
    bandwidth_jitter: float = 0.2
    cost_per_sample: float = 1.0


@dataclass(frozen=True)
class EstimatorConfig:
    alpha: float = 0.8
    window: int = 20
    quantile: float = 0.25


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    rounds: int = 80
    workers: int = 20
    tau: int = 10
    d_max: int = 64
    epsilon: float = 0.05
    classes: int = 10
    dim: int = 16
    per_class: int = 200
    delta: float = math.inf  # Dirichlet concentration; inf means IID
    lr: float = 0.05
    lr_decay: float = 1.0
    hidden: tuple[int, ...] = (32,)
    cluster_scale: float = 4.0
    test_fraction: float = 0.1
    fixed_batch: int = 32
    target_accuracy: float = 0.7
    modes: tuple[str, ...] = ("mergesfl", "sfl_t", "fixed_batch")
    env: EnvConfig = field(default_factory=EnvConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    ga: GaParams = field(default_factory=GaParams)

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_POSITIVE_FIELDS = (
    "workers", "tau", "d_max", "classes", "dim", "per_class", "lr",
    "fixed_batch",
)


def _fail(key: str, message: str, raw_text: str | None = None) -> ConfigError:
    hint = ""
    if raw_text is not None:
        base = key.split(".")[-1]
        for lineno, line in enumerate(raw_text.splitlines(), start=1):
            if f'"{base}"' in line:
                hint = f" (line {lineno})"
                break
    return ConfigError(f"config key '{key}'{hint}: {message}")


def parse_config(payload: Mapping, raw_text: str | None = None) -> ExperimentConfig:
    data = dict(payload)
    if "p" in data and "delta" in data:
        raise _fail("p", "give either p or delta, not both", raw_text)
    if "p" in data:
        p = data.pop("p")
        if p < 0:
            raise _fail("p", "non-IID level must be >= 0", raw_text)
        data["delta"] = math.inf if p == 0 else 1.0 / p

    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise _fail(sorted(unknown)[0], "unknown config key", raw_text)

    try:
        if "env" in data:
            data["env"] = EnvConfig(**data["env"])
        if "estimator" in data:
            data["estimator"] = EstimatorConfig(**data["estimator"])
        if "ga" in data:
            data["ga"] = GaParams(**data["ga"])
        if "hidden" in data:
            data["hidden"] = tuple(int(h) for h in data["hidden"])
        if "modes" in data:
            data["modes"] = tuple(data["modes"])
        cfg = ExperimentConfig(**data)
    except TypeError as err:
        raise ConfigError(f"config structure invalid: {err}") from err
    except (ValidationError, ValueError) as err:
        raise ConfigError(f"config value invalid: {err}") from err

    for name in _POSITIVE_FIELDS:
        if getattr(cfg, name) <= 0:
            raise _fail(name, "must be positive", raw_text)
    if cfg.rounds < 0:
        raise _fail("rounds", "must be >= 0", raw_text)
    if not 0 <= cfg.epsilon:
        raise _fail("epsilon", "must be >= 0", raw_text)
    if not 0 <= cfg.estimator.alpha <= 1:
        raise _fail("estimator.alpha", "must lie in [0, 1]", raw_text)
    if not cfg.delta > 0:
        raise _fail("delta", "must be positive (or p = 0 for IID)", raw_text)
    if cfg.dim < cfg.classes:
        raise _fail("dim", "must be >= classes for simplex cluster means", raw_text)
    if not cfg.modes:
        raise _fail("modes", "need at least one mode", raw_text)
    for mode in cfg.modes:
        if mode not in MODES:
            raise _fail("modes", f"unknown mode {mode!r}", raw_text)
    if len(set(cfg.modes)) != len(cfg.modes):
        raise _fail("modes", "modes must be unique", raw_text)
    for name in ("cost_base", "spread", "bandwidth_mean", "cost_per_sample"):
        if getattr(cfg.env, name) <= 0:
            raise _fail(f"env.{name}", "must be positive", raw_text)
    if cfg.env.noise_sigma < 0 or cfg.env.bandwidth_jitter < 0:
        raise _fail("env.noise_sigma", "noise terms must be >= 0", raw_text)
    return cfg


def load_config(path) -> ExperimentConfig:
    raw = Path(path).read_text()
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"{path}: invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}"
        ) from err
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top-level config must be a JSON object")
    return parse_config(payload, raw_text=raw)


@dataclass
class ExperimentBundle:
    """Derived, mode-independent experiment material."""

    config: ExperimentConfig
    shards: dict[int, Shard]
    profiles: dict[int, WorkerProfile]
    bandwidth: BandwidthProcess
    reference: np.ndarray
    label_dists: dict[int, np.ndarray]
    eval_batch: Tensor
    eval_labels: np.ndarray


def prepare_experiment(cfg: ExperimentConfig) -> ExperimentBundle:
    samples, labels = generate_dataset(
        cfg.seed, cfg.classes, cfg.per_class, cfg.dim, cfg.cluster_scale
    )
    (train_x, train_y), (test_x, test_y) = train_test_split(
        samples, labels, cfg.test_fraction, cfg.seed
    )
    shard_list = partition_dirichlet(train_x, train_y, cfg.workers, cfg.delta, cfg.seed)
    schedule = ModeSchedule(
        seed=cfg.seed,
        period=cfg.env.mode_period,
        low=cfg.env.mode_low,
        high=cfg.env.mode_high,
    )
    profiles = make_profiles(
        shard_list, cfg.seed, cfg.env.spread, cfg.env.cost_base, schedule
    )
    label_dists = {
        s.owner: label_distribution(s.labels, cfg.classes) for s in shard_list
    }
    reference = iid_reference([label_dists[w] for w in sorted(label_dists)])
    return ExperimentBundle(
        config=cfg,
        shards={s.owner: s for s in shard_list},
        profiles={p.worker_id: p for p in profiles},
        bandwidth=BandwidthProcess(
            mean=cfg.env.bandwidth_mean, jitter=cfg.env.bandwidth_jitter, seed=cfg.seed
        ),
        reference=reference,
        label_dists=label_dists,
        eval_batch=test_x,
        eval_labels=test_y,
    )


def _initial_estimates(bundle: ExperimentBundle) -> dict[int, WorkerEstimate]:
    # Cold start: one noise-free observation at round zero.
    out = {}
    for wid, profile in bundle.profiles.items():
        compute, transmit = observe_capabilities(profile, 0, bundle.config.seed, 0.0)
        out[wid] = WorkerEstimate(
            compute_s=compute,
            transmit_s=transmit,
            participations=0,
            label_dist=bundle.label_dists[wid],
        )
    return out


def run_mode(bundle: ExperimentBundle, mode: str) -> list[RoundMetrics]:
    cfg = bundle.config
    model = SplitModel.create(
        cfg.dim, cfg.classes, cfg.hidden, seed=(cfg.seed, streams.MODEL_INIT)
    )
    state = TrainingState.create(model, bundle.shards, cfg.seed, mode)
    estimates = _initial_estimates(bundle)
    controller_params = ControllerParams(
        d_max=cfg.d_max,
        epsilon=cfg.epsilon,
        cost_per_sample=cfg.env.cost_per_sample,
        ga=cfg.ga,
    )
    history: list[float] = []
    rows: list[RoundMetrics] = []
    cum_time = 0.0

    for h in range(cfg.rounds):
        budget = estimate_bandwidth(
            history,
            fallback_mean=cfg.env.bandwidth_mean,
            window=cfg.estimator.window,
            quantile=cfg.estimator.quantile,
        )
        if mode == "mergesfl":
            plan = build_plan(estimates, budget, controller_params, cfg.seed, h)
        else:
            plan = uniform_plan(
                sorted(bundle.shards),
                cfg.fixed_batch,
                bundle.label_dists,
                bundle.reference,
                cfg.env.cost_per_sample,
            )
        realized = bundle.bandwidth.draw(h)
        true_costs = {
            wid: bundle.profiles[wid].capabilities(h) for wid in plan.workers
        }
        lr_h = cfg.lr * (cfg.lr_decay**h)
        state, metrics = run_round(
            mode=mode,
            state=state,
            plan=plan,
            tau=cfg.tau,
            true_costs=true_costs,
            reference=bundle.reference,
            eval_batch=bundle.eval_batch,
            eval_labels=bundle.eval_labels,
            lr=lr_h,
            d_max=cfg.d_max,
            round_index=h,
            total_workers=cfg.workers,
            bandwidth_budget=budget,
            bandwidth_realized=realized,
        )
        cum_time += metrics.completion_s
        metrics = dataclasses.replace(metrics, cum_time_s=cum_time)
        rows.append(metrics)
        history.append(realized)
        if mode == "mergesfl":
            for wid in plan.workers:
                obs = observe_capabilities(
                    bundle.profiles[wid], h, cfg.seed, cfg.env.noise_sigma
                )
                estimates[wid] = update_estimate(
                    estimates[wid], *obs, cfg.estimator.alpha
                )
    return rows


def compare_report(
    metrics_by_mode: Mapping[str, Sequence[Mapping]],
    target_accuracy: float,
    base_mode: str | None = None,
) -> dict:
    """Per-mode time-to-target, final accuracy, mean waiting time, and speedup
    ratios relative to the first-listed (or given) base mode."""
    if not metrics_by_mode:
        raise ValidationError("nothing to compare")
    modes = list(metrics_by_mode)
    lengths = {m: len(metrics_by_mode[m]) for m in modes}
    if len(set(lengths.values())) != 1:
        raise ValidationError(f"mode runs have different round counts: {lengths}")
    base = base_mode if base_mode is not None else modes[0]
    if base not in metrics_by_mode:
        raise ValidationError(f"base mode {base!r} not among the runs")

    summary: dict = {
        "target_accuracy": target_accuracy,
        "base_mode": base,
        "modes": {},
        "speedup_vs_base": {},
    }
    times: dict[str, float | None] = {}
    for mode in modes:
        rows = list(metrics_by_mode[mode])
        cum = 0.0
        reached_at = UNREACHED
        for row in rows:
            cum += row["completion_s"]
            if reached_at is UNREACHED and row["test_accuracy"] >= target_accuracy:
                reached_at = cum
        waits = [row["avg_wait_s"] for row in rows]
        summary["modes"][mode] = {
            "rounds": len(rows),
            "final_accuracy": rows[-1]["test_accuracy"] if rows else None,
            "time_to_accuracy_s": reached_at,
            "reached": reached_at is not UNREACHED,
            "mean_avg_wait_s": float(np.mean(waits)) if waits else 0.0,
            "total_time_s": cum,
        }
        times[mode] = reached_at
    for mode in modes:
        if times[base] is UNREACHED or times[mode] is UNREACHED:
            summary["speedup_vs_base"][mode] = None
        else:
            summary["speedup_vs_base"][mode] = times[base] / times[mode]
    return summary


_CSV_COLUMNS = (
    "round", "completion_s", "cum_time_s", "avg_wait_s", "avg_wait_all_s",
    "plan_kl", "realized_kl", "utilization", "overload", "train_loss",
    "test_accuracy", "selected_count", "total_batch",
)


def _write_outputs(
    out_dir: Path,
    cfg: ExperimentConfig,
    results: Mapping[str, Sequence[RoundMetrics]],
) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "modes": list(results),
    }
    manifest["config"]["delta"] = (
        "inf" if math.isinf(cfg.delta) else cfg.delta
    )
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str)
    )
    decoded: dict[str, list[dict]] = {}
    for mode, rows in results.items():
        json_rows = [r.to_json_dict() for r in rows]
        for row in json_rows:
            validate_metrics_row(row)
        decoded[mode] = json_rows
        with open(out_dir / f"metrics_{mode}.jsonl", "w") as fh:
            for row in json_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        with open(out_dir / f"summary_{mode}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_COLUMNS)
            for row in json_rows:
                writer.writerow(
                    [
                        row["round"], row["completion_s"], row["cum_time_s"],
                        row["avg_wait_s"], row["avg_wait_all_s"], row["plan_kl"],
                        row["realized_kl"], row["utilization"], row["overload"],
                        row["train_loss"], row["test_accuracy"],
                        len(row["selected"]),
                        sum(row["batches"].values()),
                    ]
                )
    comparison = compare_report(decoded, cfg.target_accuracy)
    (out_dir / "comparison.json").write_text(
        json.dumps(comparison, indent=2, sort_keys=True)
    )
    return comparison


def run_experiment(config_path, out_dir) -> dict:
    """Load the config, run every requested mode, and write all artifacts."""
    cfg = load_config(config_path)
    bundle = prepare_experiment(cfg)
    results = {mode: run_mode(bundle, mode) for mode in cfg.modes}
    return _write_outputs(Path(out_dir), cfg, results)


def run_config(cfg: ExperimentConfig, out_dir) -> dict:
    """Same as run_experiment but from an in-memory config."""
    bundle = prepare_experiment(cfg)
    results = {mode: run_mode(bundle, mode) for mode in cfg.modes}
    return _write_outputs(Path(out_dir), cfg, results)


def load_metrics_dir(directory) -> tuple[dict, dict[str, list[dict]]]:
    """Read a run directory back: (manifest, per-mode decoded JSONL rows)."""
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"{directory} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    out: dict[str, list[dict]] = {}
    for mode in manifest.get("modes", []):
        path = root / f"metrics_{mode}.jsonl"
        rows = []
        if path.exists():
            for line in path.read_text().splitlines():
                if line.strip():
                    row = json.loads(line)
                    validate_metrics_row(row)
                    rows.append(row)
        out[mode] = rows
    return manifest, out
