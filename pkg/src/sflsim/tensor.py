"""Dense float64 tensors and hand-derived forward/backward passes for the
stackable layer kinds (dense, relu) that make up a splittable MLP classifier.

numpy is used for storage and matrix products only; every gradient formula is
written out explicitly so the math stays auditable against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, StaleCacheError, ValidationError

LAYER_KINDS = ("dense", "relu")


class Tensor:
    """Immutable-by-convention dense array, row-major float64.

    Entries are checked finite at every construction, which is to say at every
    operation boundary of the library.
    """

    __slots__ = ("array",)

    def __init__(self, array) -> None:
        arr = np.ascontiguousarray(array, dtype=np.float64)
        if arr.ndim == 0:
            raise ShapeError("tensor needs at least one axis")
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor axes must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("tensor contains non-finite entries")
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self.array.reshape(-1)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape})"


def as_labels(labels, num_classes: int) -> np.ndarray:
    """Validate and coerce an integer label vector into [0, num_classes)."""
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size == 0:
        raise ValidationError("label vector is empty")
    if arr.min() < 0 or arr.max() >= num_classes:
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return arr


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValidationError("layer dims must be positive")
        if self.kind == "relu" and self.in_dim != self.out_dim:
            raise ValidationError("relu layers must preserve width")


@dataclass(frozen=True)
class DenseParams:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)


Params = tuple  # per-layer: DenseParams for dense, None for relu


@dataclass(frozen=True)
class Stack:
    """An ordered list of layers plus their parameters."""

    specs: tuple[LayerSpec, ...]
    params: Params

    def __post_init__(self) -> None:
        if not self.specs:
            raise ValidationError("stack needs at least one layer")
        if len(self.specs) != len(self.params):
            raise ShapeError("one params slot per layer required")
        for prev, nxt in zip(self.specs, self.specs[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer widths disagree: {prev.out_dim} -> {nxt.in_dim}"
                )
        for spec, p in zip(self.specs, self.params):
            if spec.kind == "dense":
                if not isinstance(p, DenseParams):
                    raise ShapeError("dense layer missing parameters")
                if p.weight.shape != (spec.in_dim, spec.out_dim):
                    raise ShapeError("dense weight shape mismatch")
                if p.bias.shape != (spec.out_dim,):
                    raise ShapeError("dense bias shape mismatch")
            elif p is not None:
                raise ShapeError(f"{spec.kind} layer takes no parameters")

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim


def init_stack(specs: Sequence[LayerSpec], rng: np.random.Generator) -> Stack:
    """Initialize dense weights uniform in +-1/sqrt(fan_in), biases zero."""
    params = []
    for spec in specs:
        if spec.kind == "dense":
            bound = 1.0 / np.sqrt(spec.in_dim)
            weight = rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim))
            params.append(DenseParams(weight=weight, bias=np.zeros(spec.out_dim)))
        else:
            params.append(None)
    return Stack(specs=tuple(specs), params=tuple(params))


def stack_forward(stack: Stack, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the stack on a (n, in_dim) batch; returns output and per-layer inputs."""
    if x.ndim != 2:
        raise ShapeError("batch must be 2-d")
    if x.shape[1] != stack.in_dim:
        raise ShapeError(f"batch width {x.shape[1]} != stack input {stack.in_dim}")
    saved: list[np.ndarray] = []
    out = x
    for spec, p in zip(stack.specs, stack.params):
        saved.append(out)
        if spec.kind == "dense":
            out = out @ p.weight + p.bias
        else:  # relu
            out = np.maximum(out, 0.0)
    return out, saved


def stack_backward(
    stack: Stack, saved: list[np.ndarray], grad_out: np.ndarray
) -> tuple[Params, np.ndarray]:
    """Backpropagate grad_out through the stack.

    Returns per-layer parameter gradients (same slot layout as stack.params)
    and the gradient with respect to the stack input.
    """
    if grad_out.shape != (saved[0].shape[0], stack.out_dim):
        raise ShapeError("grad_out shape does not match stack output")
    grads: list = [None] * len(stack.specs)
    g = grad_out
    for idx in range(len(stack.specs) - 1, -1, -1):
        spec, p, inp = stack.specs[idx], stack.params[idx], saved[idx]
        if spec.kind == "dense":
            grads[idx] = DenseParams(weight=inp.T @ g, bias=g.sum(axis=0))
            g = g @ p.weight.T
        else:  # relu: pass-through where the input was positive
            g = g * (inp > 0.0)
    return tuple(grads), g


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """p' = p - lr * g, element-wise over every parameter slot."""
    if lr < 0:
        raise ValidationError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise ShapeError("params/grads slot count mismatch")
    out = []
    for p, g in zip(params, grads):
        if p is None:
            if g is not None:
                raise ShapeError("gradient supplied for parameter-free layer")
            out.append(None)
            continue
        if p.weight.shape != g.weight.shape or p.bias.shape != g.bias.shape:
            raise ShapeError("gradient shape mismatch")
        out.append(
            DenseParams(weight=p.weight - lr * g.weight, bias=p.bias - lr * g.bias)
        )
    return tuple(out)


def scale_grads(grads: Params, factor: float) -> Params:
    out = []
    for g in grads:
        out.append(
            None
            if g is None
            else DenseParams(weight=g.weight * factor, bias=g.bias * factor)
        )
    return tuple(out)


def add_grads(a: Params, b: Params) -> Params:
    out = []
    for ga, gb in zip(a, b):
        if ga is None:
            out.append(None)
        else:
            out.append(DenseParams(weight=ga.weight + gb.weight, bias=ga.bias + gb.bias))
    return tuple(out)


@dataclass(frozen=True)
class SplitModel:
    """A classifier cut in two at the split layer: workers hold `bottom`,
    the server holds `top`. The split width is bottom.out_dim == top.in_dim."""

    bottom: Stack
    top: Stack

    def __post_init__(self) -> None:
        if self.bottom.out_dim != self.top.in_dim:
            raise ShapeError(
                f"split widths disagree: bottom {self.bottom.out_dim}, "
                f"top {self.top.in_dim}"
            )

    @property
    def in_dim(self) -> int:
        return self.bottom.in_dim

    @property
    def split_dim(self) -> int:
        return self.bottom.out_dim

    @property
    def num_classes(self) -> int:
        return self.top.out_dim

    @classmethod
    def create(
        cls,
        in_dim: int,
        num_classes: int,
        hidden: Sequence[int] = (32,),
        seed=0,
    ) -> "SplitModel":
        """Default architecture: every hidden dense+relu block goes to the
        bottom, the final classifier layer is the top."""
        if not hidden:
            raise ValidationError("need at least one hidden width")
        rng = np.random.default_rng(seed)
        bottom_specs: list[LayerSpec] = []
        width = in_dim
        for h in hidden:
            bottom_specs.append(LayerSpec("dense", width, h))
            bottom_specs.append(LayerSpec("relu", h, h))
            width = h
        top_specs = [LayerSpec("dense", width, num_classes)]
        return cls(
            bottom=init_stack(bottom_specs, rng), top=init_stack(top_specs, rng)
        )

    def with_bottom_params(self, params: Params) -> "SplitModel":
        return replace(self, bottom=Stack(self.bottom.specs, params))

    def with_top_params(self, params: Params) -> "SplitModel":
        return replace(self, top=Stack(self.top.specs, params))


def unsplit(model: SplitModel) -> Stack:
    """The equivalent monolithic network (bottom layers then top layers)."""
    return Stack(
        specs=model.bottom.specs + model.top.specs,
        params=model.bottom.params + model.top.params,
    )


@dataclass
class BottomCache:
    saved: list[np.ndarray]
    params: Params  # identity token for staleness checks
    rows: int


@dataclass
class TopCache:
    saved: list[np.ndarray]
    probs: np.ndarray
    labels: np.ndarray
    params: Params


def forward_bottom(model: SplitModel, batch: Tensor) -> tuple[Tensor, BottomCache]:
    out, saved = stack_forward(model.bottom, batch.array)
    return Tensor(out), BottomCache(saved=saved, params=model.bottom.params, rows=out.shape[0])


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows plus the softmax probabilities."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    log_probs = shifted - np.log(expv.sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    return loss, probs


def forward_top(
    model: SplitModel, features: Tensor, labels
) -> tuple[float, TopCache]:
    y = as_labels(labels, model.num_classes)
    if features.shape[0] != y.shape[0]:
        raise ShapeError("one label per feature row required")
    logits, saved = stack_forward(model.top, features.array)
    loss, probs = softmax_cross_entropy(logits, y)
    return loss, TopCache(saved=saved, probs=probs, labels=y, params=model.top.params)


def backward_top(model: SplitModel, cache: TopCache) -> tuple[Params, Tensor]:
    """Gradients of the mean cross-entropy: per-layer top parameter grads and
    the per-row gradient with respect to the incoming features."""
    if cache.params is not model.top.params:
        raise StaleCacheError("top cache was built against different parameters")
    n = cache.probs.shape[0]
    dlogits = cache.probs.copy()
    dlogits[np.arange(n), cache.labels] -= 1.0
    dlogits /= n
    grads, dfeatures = stack_backward(model.top, cache.saved, dlogits)
    return grads, Tensor(dfeatures)


def backward_bottom(
    model: SplitModel, cache: BottomCache, feature_grads: Tensor
) -> Params:
    if cache.params is not model.bottom.params:
        raise StaleCacheError("bottom cache was built against different parameters")
    if feature_grads.shape != (cache.rows, model.split_dim):
        raise ShapeError("feature gradient shape does not match cached forward")
    grads, _ = stack_backward(model.bottom, cache.saved, feature_grads.array)
    return grads


def predict_logits(model: SplitModel, batch: Tensor) -> np.ndarray:
    feats, _ = stack_forward(model.bottom, batch.array)
    logits, _ = stack_forward(model.top, feats)
    return logits


def accuracy(model: SplitModel, batch: Tensor, labels) -> float:
    y = as_labels(labels, model.num_classes)
    pred = predict_logits(model, batch).argmax(axis=1)
    return float((pred == y).mean())
