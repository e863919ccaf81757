"""Server-side state estimation: exponential moving averages of per-worker
costs and a conservative quantile estimate of the ingress bandwidth budget."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ValidationError


@dataclass
class WorkerEstimate:
    """What the server believes about one worker. The participation count is
    bumped in place by the controller when a plan selects the worker."""

    compute_s: float  # estimated seconds per sample, compute
    transmit_s: float  # estimated seconds per sample, feature upload
    participations: int  # rounds this worker was selected so far
    label_dist: np.ndarray  # shard-level label distribution

    def __post_init__(self) -> None:
        if self.compute_s <= 0 or self.transmit_s <= 0:
            raise ValidationError("estimates must stay positive")
        if self.participations < 0:
            raise ValidationError("participation count must be >= 0")

    @property
    def cost(self) -> float:
        """Seconds to push one sample end to end."""
        return self.compute_s + self.transmit_s


def update_estimate(
    prev: WorkerEstimate,
    observed_compute: float,
    observed_transmit: float,
    alpha: float,
) -> WorkerEstimate:
    """Moving average: new = alpha * old + (1 - alpha) * observation."""
    if not 0 <= alpha <= 1:
        raise ValidationError("alpha must lie in [0, 1]")
    if observed_compute <= 0 or observed_transmit <= 0:
        raise ValidationError("observations must be positive")
    return replace(
        prev,
        compute_s=alpha * prev.compute_s + (1 - alpha) * observed_compute,
        transmit_s=alpha * prev.transmit_s + (1 - alpha) * observed_transmit,
    )


def estimate_bandwidth(
    history: Sequence[float],
    fallback_mean: float,
    window: int = 20,
    quantile: float = 0.25,
) -> float:
    """Conservative budget estimate: a low quantile of the recent realized
    draws, so planned spend rarely exceeds what the round actually offers."""
    if not 0 <= quantile <= 1:
        raise ValidationError("quantile must lie in [0, 1]")
    if window < 1:
        raise ValidationError("window must be >= 1")
    recent = list(history)[-window:]
    if not recent:
        if fallback_mean <= 0:
            raise ValidationError("fallback mean must be positive")
        return float(fallback_mean)
    return float(np.quantile(np.asarray(recent, dtype=np.float64), quantile))
