"""Per-round metrics record, its JSON wire form, and schema validation."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ValidationError

MODES = ("mergesfl", "sfl_t", "fixed_batch")

# field name -> allowed types (floats may arrive as ints from JSON)
_SCHEMA: dict[str, tuple] = {
    "round": (int,),
    "mode": (str,),
    "completion_s": (float, int),
    "avg_wait_s": (float, int),
    "avg_wait_all_s": (float, int),
    "plan_kl": (float, int),
    "realized_kl": (float, int),
    "bandwidth_budget": (float, int),
    "bandwidth_realized": (float, int),
    "planned_spend": (float, int),
    "utilization": (float, int),
    "overload": (bool,),
    "kl_unreachable": (bool,),
    "train_loss": (float, int, type(None)),
    "test_accuracy": (float, int),
    "selected": (list,),
    "batches": (dict,),
    "cum_time_s": (float, int),
}


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    mode: str
    completion_s: float
    avg_wait_s: float  # mean idle time over the selected set
    avg_wait_all_s: float  # same total wait spread over all workers
    plan_kl: float
    realized_kl: float
    bandwidth_budget: float
    bandwidth_realized: float
    planned_spend: float
    utilization: float
    overload: bool
    kl_unreachable: bool
    train_loss: float | None
    test_accuracy: float
    selected: tuple[int, ...]
    batches: dict[int, int]
    cum_time_s: float = field(default=0.0)

    def to_json_dict(self) -> dict:
        out = {name: getattr(self, name) for name in _SCHEMA}
        out["selected"] = list(self.selected)
        out["batches"] = {str(k): int(v) for k, v in sorted(self.batches.items())}
        return out


def validate_metrics_row(row: dict) -> None:
    """Raise if a decoded JSONL row does not match the documented schema."""
    missing = set(_SCHEMA) - set(row)
    if missing:
        raise ValidationError(f"metrics row missing fields: {sorted(missing)}")
    extra = set(row) - set(_SCHEMA)
    if extra:
        raise ValidationError(f"metrics row has unknown fields: {sorted(extra)}")
    for name, kinds in _SCHEMA.items():
        value = row[name]
        if not isinstance(value, kinds) or (
            isinstance(value, bool) and bool not in kinds
        ):
            raise ValidationError(f"metrics field {name!r} has wrong type")
    if row["mode"] not in MODES:
        raise ValidationError(f"unknown mode {row['mode']!r}")
    if not row["overload"] and not 0 <= row["utilization"] <= 1 + 1e-12:
        raise ValidationError("utilization out of [0, 1] without overload")
