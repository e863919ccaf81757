"""Simulated heterogeneous execution environment: ground-truth per-worker
costs with periodically re-drawn mode multipliers, noisy capability
observations, a stochastic shared bandwidth budget, and analytic round timing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import streams
from .data import Shard
from .errors import ValidationError


@dataclass(frozen=True)
class ModeSchedule:
    """Deterministic round -> (compute, transmit) multipliers.

    Multipliers are re-drawn per worker every `period` rounds, log-uniform in
    [low, high]. period=0 disables mode changes.
    """

    seed: int
    period: int = 20
    low: float = 0.5
    high: float = 2.0

    def __post_init__(self) -> None:
        if self.period < 0:
            raise ValidationError("period must be >= 0")
        if not (0 < self.low <= self.high):
            raise ValidationError("multiplier range must satisfy 0 < low <= high")

    def multipliers(self, worker_id: int, round_index: int) -> tuple[float, float]:
        if self.period == 0:
            return 1.0, 1.0
        epoch = round_index // self.period
        rng = np.random.default_rng(
            (self.seed, streams.MODE_SCHEDULE, worker_id, epoch)
        )
        lo, hi = np.log(self.low), np.log(self.high)
        return float(np.exp(rng.uniform(lo, hi))), float(np.exp(rng.uniform(lo, hi)))


@dataclass(frozen=True)
class WorkerProfile:
    """Ground truth the simulator knows but the server can only estimate."""

    worker_id: int
    compute_s: float  # seconds to process one sample
    transmit_s: float  # seconds to ship one sample's features
    schedule: ModeSchedule
    shard: Shard

    def __post_init__(self) -> None:
        if self.compute_s <= 0 or self.transmit_s <= 0:
            raise ValidationError("per-sample costs must be positive")

    def capabilities(self, round_index: int) -> tuple[float, float]:
        mc, mt = self.schedule.multipliers(self.worker_id, round_index)
        return self.compute_s * mc, self.transmit_s * mt


def observe_capabilities(
    profile: WorkerProfile, round_index: int, noise_seed, sigma: float = 0.1
) -> tuple[float, float]:
    """What the worker reports: truth times multiplicative lognormal noise."""
    if round_index < 0:
        raise ValidationError("round index must be >= 0")
    compute, transmit = profile.capabilities(round_index)
    if sigma == 0:
        return compute, transmit
    rng = np.random.default_rng(
        (noise_seed, streams.OBSERVATION, profile.worker_id, round_index)
    )
    return (
        compute * float(np.exp(sigma * rng.standard_normal())),
        transmit * float(np.exp(sigma * rng.standard_normal())),
    )


def duration(tau: int, batch_size: int, compute_s: float, transmit_s: float) -> float:
    """Round duration of one worker: tau * d * (compute + transmit)."""
    if tau < 0 or batch_size < 0:
        raise ValidationError("tau and batch size must be >= 0")
    if compute_s <= 0 or transmit_s <= 0:
        raise ValidationError("per-sample costs must be positive")
    return tau * batch_size * (compute_s + transmit_s)


def round_times(durations: Sequence[float]) -> tuple[float, float]:
    """Completion (the slowest worker) and mean idle wait of the given set."""
    vals = np.asarray(list(durations), dtype=np.float64)
    if vals.size == 0:
        raise ValidationError("round_times needs at least one duration")
    completion = float(vals.max())
    return completion, float((completion - vals).mean())


@dataclass(frozen=True)
class BandwidthProcess:
    """Per-round ingress budget draws: lognormal with mean `mean`, strictly
    positive, deterministic per (seed, round)."""

    mean: float
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mean <= 0:
            raise ValidationError("bandwidth mean must be positive")
        if self.jitter < 0:
            raise ValidationError("jitter must be >= 0")

    def draw(self, round_index: int) -> float:
        if self.jitter == 0:
            return self.mean
        rng = np.random.default_rng((self.seed, streams.BANDWIDTH, round_index))
        z = rng.standard_normal()
        # mean-preserving lognormal, floored away from zero
        value = self.mean * float(np.exp(self.jitter * z - 0.5 * self.jitter**2))
        return max(value, self.mean * 1e-9)


def make_profiles(
    shards: Sequence[Shard],
    seed: int,
    spread: float = 10.0,
    cost_base: float = 1e-3,
    schedule: ModeSchedule | None = None,
) -> list[WorkerProfile]:
    """Draw per-worker costs log-uniform across a `spread`x range and split
    each total cost into compute and transmit shares."""
    if spread < 1:
        raise ValidationError("spread must be >= 1")
    if cost_base <= 0:
        raise ValidationError("cost_base must be positive")
    rng = np.random.default_rng((seed, streams.PROFILES))
    sched = schedule if schedule is not None else ModeSchedule(seed=seed)
    profiles = []
    for shard in shards:
        total = cost_base * spread ** rng.uniform(0.0, 1.0)
        share = rng.uniform(0.3, 0.7)
        profiles.append(
            WorkerProfile(
                worker_id=shard.owner,
                compute_s=total * share,
                transmit_s=total * (1.0 - share),
                schedule=sched,
                shard=shard,
            )
        )
    return profiles
