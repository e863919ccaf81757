"""Round execution for split training under a merge plan: worker-side forward
passes, feature merging on the server, one top-model update per iteration,
gradient dispatch back to the workers, and batch-weighted bottom aggregation.

Baseline modes share the same plumbing: `sfl_t` routes each worker's features
through the top model separately (accumulating the weighted gradient before a
single step) and `fixed_batch` is the merged pipeline with uniform batches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import streams
from .controller import MergePlan, kl_divergence, merged_label_mixture
from .data import Shard, label_distribution
from .errors import ProtocolError, ShapeError, StaleCacheError, ValidationError
from .metrics import RoundMetrics
from .env import duration, round_times
from .tensor import (
    BottomCache,
    Params,
    SplitModel,
    Stack,
    Tensor,
    accuracy,
    add_grads,
    backward_top,
    forward_top,
    scale_grads,
    sgd_step,
    stack_backward,
    stack_forward,
)


@dataclass(frozen=True)
class FeatureBatch:
    worker_id: int
    features: Tensor
    labels: np.ndarray


@dataclass(frozen=True)
class MergedSequence:
    features: Tensor
    labels: np.ndarray
    offsets: tuple[tuple[int, int, int], ...]  # (worker_id, start, length)


@dataclass
class TrainingState:
    """Everything that persists across rounds for one mode run."""

    model: SplitModel
    shards: dict[int, Shard]
    rngs: dict[int, np.random.Generator]

    @classmethod
    def create(
        cls, model: SplitModel, shards: Mapping[int, Shard], seed: int, mode: str
    ) -> "TrainingState":
        mode_id = streams.MODE_IDS[mode]
        rngs = {
            wid: np.random.default_rng(
                (seed, streams.WORKER_SAMPLING, mode_id, wid)
            )
            for wid in shards
        }
        return cls(model=model, shards=dict(shards), rngs=rngs)


def sample_minibatch(
    shard: Shard, batch_size: int, rng: np.random.Generator
) -> tuple[Tensor, np.ndarray]:
    """Draw batch_size rows from the shard; with replacement only when the
    shard is smaller than the batch."""
    if batch_size < 1:
        raise ValidationError("batch size must be >= 1")
    replace_draw = shard.size < batch_size
    idx = rng.choice(shard.size, size=batch_size, replace=replace_draw)
    return Tensor(shard.samples.array[idx]), shard.labels[idx]


def local_iteration_forward(
    bottom: Stack, shard: Shard, batch_size: int, rng: np.random.Generator,
    worker_id: int,
) -> tuple[FeatureBatch, BottomCache]:
    """One worker-side forward pass over a freshly sampled mini-batch."""
    x, y = sample_minibatch(shard, batch_size, rng)
    features, saved = stack_forward(bottom, x.array)
    cache = BottomCache(saved=saved, params=bottom.params, rows=batch_size)
    return FeatureBatch(worker_id=worker_id, features=Tensor(features), labels=y), cache


def merge(batches: Mapping[int, FeatureBatch], plan: MergePlan) -> MergedSequence:
    """Concatenate the selected workers' features in plan order."""
    missing = set(plan.workers) - set(batches)
    if missing:
        raise ProtocolError(f"missing feature batches from workers {sorted(missing)}")
    rows, labels, offsets = [], [], []
    start = 0
    for wid in plan.workers:
        fb = batches[wid]
        if fb.features.shape[0] != plan.batches[wid]:
            raise ProtocolError(
                f"worker {wid} sent {fb.features.shape[0]} rows, plan says "
                f"{plan.batches[wid]}"
            )
        rows.append(fb.features.array)
        labels.append(fb.labels)
        offsets.append((wid, start, fb.features.shape[0]))
        start += fb.features.shape[0]
    return MergedSequence(
        features=Tensor(np.concatenate(rows, axis=0)),
        labels=np.concatenate(labels),
        offsets=tuple(offsets),
    )


def top_update(
    model: SplitModel, merged: MergedSequence, lr_top: float
) -> tuple[SplitModel, Tensor, float]:
    """One forward/backward of the top model over the merged sequence.

    Returns the stepped model, the feature gradients of the *pre-step* model
    (mean loss over all merged rows), and the loss itself.
    """
    loss, cache = forward_top(model, merged.features, merged.labels)
    grads, feature_grads = backward_top(model, cache)
    stepped = model.with_top_params(sgd_step(model.top.params, grads, lr_top))
    return stepped, feature_grads, loss


def dispatch(feature_grads: Tensor, merged: MergedSequence) -> dict[int, Tensor]:
    """Slice the merged feature gradient back into per-worker segments."""
    total = sum(length for _, _, length in merged.offsets)
    if feature_grads.shape[0] != total:
        raise ShapeError("gradient rows do not cover the merged sequence")
    ends = [start + length for _, start, length in merged.offsets]
    starts = [start for _, start, _ in merged.offsets]
    if starts[0] != 0 or any(e != s for e, s in zip(ends, starts[1:])):
        raise ProtocolError("offsets do not partition the merged sequence")
    return {
        wid: Tensor(feature_grads.array[start : start + length])
        for wid, start, length in merged.offsets
    }


def bottom_update(
    bottom: Stack, cache: BottomCache, grad: Tensor, lr: float
) -> Stack:
    """Backpropagate a dispatched gradient slice and step the bottom stack."""
    if cache.params is not bottom.params:
        raise StaleCacheError("cache does not belong to this bottom stack")
    if grad.shape[0] != cache.rows:
        raise ShapeError("dispatched gradient rows do not match the forward pass")
    param_grads, _ = stack_backward(bottom, cache.saved, grad.array)
    return Stack(bottom.specs, sgd_step(bottom.params, param_grads, lr))


def aggregate_bottoms(
    bottoms: Mapping[int, Params], batches: Mapping[int, int]
) -> Params:
    """Batch-size-weighted convex combination of the workers' bottom params."""
    ids = sorted(bottoms)
    if not ids:
        raise ValidationError("nothing to aggregate")
    if set(ids) != set(batches):
        raise ValidationError("batch weights must cover exactly the aggregated workers")
    total = float(sum(batches[w] for w in ids))
    result: Params | None = None
    for wid in ids:
        contribution = scale_grads(bottoms[wid], batches[wid] / total)
        result = contribution if result is None else add_grads(result, contribution)
    return result


def proportional_lr(lr_base: float, batch_size: int, d_max: int) -> float:
    """Worker learning rate grows with its batch share; d_max anchors lr_base."""
    return lr_base * batch_size / d_max


def run_round(
    mode: str,
    state: TrainingState,
    plan: MergePlan,
    tau: int,
    true_costs: Mapping[int, tuple[float, float]],
    reference: np.ndarray,
    eval_batch: Tensor,
    eval_labels: np.ndarray,
    lr: float,
    d_max: int,
    round_index: int,
    total_workers: int,
    bandwidth_budget: float,
    bandwidth_realized: float,
) -> tuple[TrainingState, RoundMetrics]:
    """Execute tau iterations of the given mode, aggregate the bottoms, and
    report metrics. Timing comes from the simulated ground truth."""
    if mode not in streams.MODE_IDS:
        raise ValidationError(f"unknown mode {mode!r}")
    if tau < 0:
        raise ValidationError("tau must be >= 0")

    model = state.model
    bottoms: dict[int, Stack] = {wid: model.bottom for wid in plan.workers}
    classes = model.num_classes
    losses: list[float] = []
    kls: list[float] = []

    for _ in range(tau):
        feature_batches: dict[int, FeatureBatch] = {}
        caches: dict[int, BottomCache] = {}
        for wid in plan.workers:
            fb, cache = local_iteration_forward(
                bottoms[wid], state.shards[wid], plan.batches[wid],
                state.rngs[wid], wid,
            )
            feature_batches[wid] = fb
            caches[wid] = cache

        all_labels = np.concatenate([feature_batches[w].labels for w in plan.workers])
        kls.append(kl_divergence(label_distribution(all_labels, classes), reference))

        if mode in ("mergesfl", "fixed_batch"):
            merged = merge(feature_batches, plan)
            model, feature_grads, loss = top_update(model, merged, lr)
            slices = dispatch(feature_grads, merged)
            losses.append(loss)
            for wid in plan.workers:
                bottoms[wid] = bottom_update(
                    bottoms[wid], caches[wid], slices[wid],
                    proportional_lr(lr, plan.batches[wid], d_max),
                )
        else:  # sfl_t: per-worker top passes, one accumulated step
            total = plan.total_batch
            acc_grads = None
            weighted_loss = 0.0
            for wid in plan.workers:
                fb = feature_batches[wid]
                loss_i, cache = forward_top(model, fb.features, fb.labels)
                grads_i, feature_grads_i = backward_top(model, cache)
                weight = plan.batches[wid] / total
                weighted = scale_grads(grads_i, weight)
                acc_grads = weighted if acc_grads is None else add_grads(acc_grads, weighted)
                weighted_loss += weight * loss_i
                bottoms[wid] = bottom_update(
                    bottoms[wid], caches[wid], feature_grads_i,
                    proportional_lr(lr, plan.batches[wid], d_max),
                )
            model = model.with_top_params(
                sgd_step(model.top.params, acc_grads, lr)
            )
            losses.append(weighted_loss)

    aggregated = aggregate_bottoms(
        {wid: bottoms[wid].params for wid in plan.workers}, plan.batches
    )
    model = model.with_bottom_params(aggregated)
    new_state = replace(state, model=model)

    durations = [
        duration(tau, plan.batches[wid], *true_costs[wid]) for wid in plan.workers
    ]
    completion, avg_wait = round_times(durations)
    total_wait = sum(completion - t for t in durations)
    overload = plan.planned_spend > bandwidth_realized
    metrics = RoundMetrics(
        round=round_index,
        mode=mode,
        completion_s=completion,
        avg_wait_s=avg_wait,
        avg_wait_all_s=total_wait / total_workers,
        plan_kl=plan.kl,
        realized_kl=float(np.mean(kls)) if kls else plan.kl,
        bandwidth_budget=bandwidth_budget,
        bandwidth_realized=bandwidth_realized,
        planned_spend=plan.planned_spend,
        utilization=plan.planned_spend / bandwidth_realized,
        overload=overload,
        kl_unreachable=plan.kl_unreachable,
        train_loss=float(np.mean(losses)) if losses else None,
        test_accuracy=accuracy(model, eval_batch, eval_labels),
        selected=plan.workers,
        batches=dict(plan.batches),
    )
    return new_state, metrics


def uniform_plan(
    worker_ids,
    batch_size: int,
    label_dists: Mapping[int, np.ndarray],
    reference: np.ndarray,
    cost_per_sample: float,
) -> MergePlan:
    """Degenerate plan for the baselines: everyone, same batch size."""
    ids = tuple(sorted(worker_ids))
    batches = {wid: batch_size for wid in ids}
    mixture = merged_label_mixture(batches, label_dists)
    return MergePlan(
        workers=ids,
        batches=batches,
        planned_spend=batch_size * len(ids) * cost_per_sample,
        budget=None,
        kl=kl_divergence(mixture, reference),
        kl_unreachable=False,
    )
