"""Per-round planning on the server: batch-size regulation against the fastest
worker, selection-priority bookkeeping, KL-guided genetic subset selection
under the bandwidth budget, dual-ascent batch fine-tuning toward the IID
label mixture, and proportional scaling to fill the budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from . import streams
from .data import iid_reference
from .errors import InfeasiblePlanError, ValidationError
from .estimator import WorkerEstimate

MISSING_SUPPORT_PENALTY = 1e9  # per mixture class unsupported by the target
OVERSPEND_PENALTY = 1e6
EMPTY_SET_FITNESS = 1e15


@dataclass(frozen=True)
class GaParams:
    population: int = 32
    generations: int = 60
    tournament: int = 3
    crossover: float = 0.7
    mutation: float | None = None  # per-gene flip probability, default 1/N
    elitism: int = 2
    init_fraction: float = 0.5  # chromosome seeds select ~N/2 workers

    def __post_init__(self) -> None:
        if self.population < 2 or self.generations < 1:
            raise ValidationError("population >= 2 and generations >= 1 required")
        if not 0 <= self.crossover <= 1:
            raise ValidationError("crossover probability out of range")
        if self.mutation is not None and not 0 <= self.mutation <= 1:
            raise ValidationError("mutation probability out of range")
        if not 0 < self.init_fraction <= 1:
            raise ValidationError("init_fraction must be in (0, 1]")
        if self.elitism < 1 or self.elitism >= self.population:
            raise ValidationError("elitism must be in [1, population)")
        if self.tournament < 1:
            raise ValidationError("tournament size must be >= 1")


@dataclass(frozen=True)
class ControllerParams:
    d_max: int = 64
    epsilon: float = 0.05
    cost_per_sample: float = 1.0  # bandwidth units spent per transmitted sample
    ga: GaParams = field(default_factory=GaParams)
    max_retries: int = 6

    def __post_init__(self) -> None:
        if self.d_max < 1:
            raise ValidationError("d_max must be >= 1")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be >= 0")
        if self.cost_per_sample <= 0:
            raise ValidationError("cost_per_sample must be positive")


@dataclass(frozen=True)
class MergePlan:
    """One round's decision. Merge order is ascending worker id."""

    workers: tuple[int, ...]
    batches: dict[int, int]
    planned_spend: float
    budget: float | None  # None for budget-oblivious baseline plans
    kl: float
    kl_unreachable: bool = False

    def __post_init__(self) -> None:
        if not self.workers:
            raise ValidationError("plan selects no workers")
        if tuple(sorted(self.workers)) != self.workers:
            raise ValidationError("plan workers must be in ascending id order")
        if set(self.workers) != set(self.batches):
            raise ValidationError("one batch size per selected worker required")
        if any(d < 1 for d in self.batches.values()):
            raise ValidationError("batch sizes must be >= 1")
        if self.kl < 0:
            raise ValidationError("plan KL must be >= 0")
        if self.budget is not None and self.planned_spend > self.budget:
            raise ValidationError("planned spend exceeds the budget")

    @property
    def total_batch(self) -> int:
        return sum(self.batches.values())


def regulate_batches(
    estimates: Mapping[int, WorkerEstimate], d_max: int
) -> dict[int, int]:
    """Give the fastest worker d_max and everyone else the floored share that
    aligns their duration with it, never below one sample."""
    if not estimates:
        raise ValidationError("no workers to regulate")
    if d_max < 1:
        raise ValidationError("d_max must be >= 1")
    costs = {wid: est.cost for wid, est in estimates.items()}
    fastest = min(costs, key=lambda wid: (costs[wid], wid))
    base = costs[fastest]
    batches = {
        wid: max(1, int(math.floor(d_max * base / cost)))
        for wid, cost in costs.items()
    }
    batches[fastest] = d_max
    return batches


def priorities(participations: Mapping[int, int]) -> dict[int, float]:
    """Selection priority, largest for the least-often-selected workers."""
    if not participations:
        raise ValidationError("no workers")
    total = sum(k + 1 for k in participations.values())
    return {wid: total / (k + 1) for wid, k in participations.items()}


def kl_divergence(mixture, reference) -> float:
    """KL(mixture || reference) over class labels. Zero mixture mass
    contributes nothing; mixture mass on a class the reference lacks adds a
    large sentinel penalty per class."""
    p = np.asarray(mixture, dtype=np.float64)
    q = np.asarray(reference, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError("distributions disagree on class count")
    pos = p > 0
    unsupported = pos & (q <= 0)
    supported = pos & (q > 0)
    total = float(np.sum(p[supported] * np.log(p[supported] / q[supported])))
    total += MISSING_SUPPORT_PENALTY * int(unsupported.sum())
    return total


def merged_label_mixture(
    batches: Mapping[int, int], label_dists: Mapping[int, np.ndarray]
) -> np.ndarray:
    """Batch-size-weighted mixture of the selected workers' distributions."""
    if not batches:
        raise ValidationError("empty selection has no mixture")
    total = sum(batches.values())
    acc = None
    for wid in sorted(batches):
        term = batches[wid] * np.asarray(label_dists[wid], dtype=np.float64)
        acc = term if acc is None else acc + term
    return acc / total


def _kl_rows(mix: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Row-wise KL of a (rows, classes) mixture matrix against reference."""
    q = reference[None, :]
    pos = mix > 0
    supported = pos & (q > 0)
    ratio = np.where(supported, mix / np.maximum(q, 1e-300), 1.0)
    terms = np.where(supported, mix * np.log(ratio), 0.0)
    kl = terms.sum(axis=1)
    kl = kl + MISSING_SUPPORT_PENALTY * (pos & (q <= 0)).sum(axis=1)
    return kl


@dataclass(frozen=True)
class GaSearchResult:
    selected: tuple[int, ...]
    best_fitness: float
    best_per_generation: list[float]  # includes the initial population


def ga_search(
    candidates: Sequence[int],
    batches: Mapping[int, int],
    label_dists: Mapping[int, np.ndarray],
    budget: float,
    cost_per_sample: float,
    priority_weights: Mapping[int, float],
    ga: GaParams,
    rng: np.random.Generator,
) -> GaSearchResult:
    """Elitist bit-string GA minimizing the KL of the merged label mixture
    plus a hard overspend penalty. The initial population samples roughly
    half the workers per chromosome, weighted by selection priority."""
    ids = sorted(candidates)
    n = len(ids)
    if n == 0:
        raise ValidationError("no candidate workers")
    d_vec = np.array([batches[w] for w in ids], dtype=np.float64)
    v_mat = np.stack([np.asarray(label_dists[w], dtype=np.float64) for w in ids])
    reference = iid_reference(v_mat)
    spend_vec = d_vec * cost_per_sample

    cheapest = int(np.lexsort((np.arange(n), spend_vec))[0])
    if spend_vec[cheapest] > budget:
        raise InfeasiblePlanError(
            "even the cheapest single worker exceeds the bandwidth budget"
        )

    weights = np.array([priority_weights[w] for w in ids], dtype=np.float64)
    weights = weights / weights.sum()
    m = max(1, int(round(n * ga.init_fraction)))
    pop = np.zeros((ga.population, n), dtype=bool)
    for row in range(ga.population):
        chosen = rng.choice(n, size=min(m, n), replace=False, p=weights)
        pop[row, chosen] = True

    def evaluate(genes: np.ndarray) -> np.ndarray:
        sel = genes * d_vec
        totals = sel.sum(axis=1)
        fits = np.full(genes.shape[0], EMPTY_SET_FITNESS)
        live = totals > 0
        if live.any():
            mix = (sel[live] @ v_mat) / totals[live, None]
            kl = _kl_rows(mix, reference)
            spend = totals[live] * cost_per_sample
            over = np.maximum(spend - budget, 0.0)
            fits[live] = kl + OVERSPEND_PENALTY * (over / budget)
        return fits

    # Guarantee at least one feasible chromosome from the start.
    spends = (pop * spend_vec).sum(axis=1)
    if not ((spends <= budget) & (spends > 0)).any():
        pop[-1] = False
        pop[-1, cheapest] = True

    mutation = ga.mutation if ga.mutation is not None else 1.0 / n
    fits = evaluate(pop)

    def feasible_mask(genes: np.ndarray) -> np.ndarray:
        spend = (genes * spend_vec).sum(axis=1)
        return (spend > 0) & (spend <= budget)

    best_fit = math.inf
    best_genes: np.ndarray | None = None
    best_feasible_fit = math.inf
    best_feasible: np.ndarray | None = None
    history: list[float] = []

    def consider(genes: np.ndarray, f: np.ndarray) -> None:
        nonlocal best_fit, best_genes, best_feasible_fit, best_feasible
        feas = feasible_mask(genes)
        for idx in range(genes.shape[0]):
            if f[idx] < best_fit:
                best_fit = float(f[idx])
                best_genes = genes[idx].copy()
            if feas[idx] and f[idx] < best_feasible_fit:
                best_feasible_fit = float(f[idx])
                best_feasible = genes[idx].copy()

    consider(pop, fits)
    history.append(best_fit)

    def tournament_pick() -> int:
        contenders = rng.integers(0, ga.population, size=ga.tournament)
        best = contenders[0]
        for c in contenders[1:]:
            if (fits[c], c) < (fits[best], best):
                best = c
        return int(best)

    for _ in range(ga.generations):
        order = np.lexsort((np.arange(ga.population), fits))
        nxt = [pop[order[k]].copy() for k in range(ga.elitism)]
        while len(nxt) < ga.population:
            pa, pb = pop[tournament_pick()], pop[tournament_pick()]
            if rng.random() < ga.crossover:
                mask = rng.random(n) < 0.5
                child_a = np.where(mask, pa, pb)
                child_b = np.where(mask, pb, pa)
            else:
                child_a, child_b = pa.copy(), pb.copy()
            for child in (child_a, child_b):
                flips = rng.random(n) < mutation
                child ^= flips
                nxt.append(child)
                if len(nxt) == ga.population:
                    break
        pop = np.stack(nxt)
        fits = evaluate(pop)
        consider(pop, fits)
        history.append(best_fit)

    if best_feasible is None:
        raise InfeasiblePlanError("genetic search found no feasible worker set")
    selected = tuple(ids[k] for k in np.flatnonzero(best_feasible))
    return GaSearchResult(
        selected=selected,
        best_fitness=best_feasible_fit,
        best_per_generation=history,
    )


def select_workers_ga(
    candidates: Sequence[int],
    batches: Mapping[int, int],
    label_dists: Mapping[int, np.ndarray],
    budget: float,
    cost_per_sample: float,
    priority_weights: Mapping[int, float],
    ga: GaParams,
    seed,
) -> tuple[int, ...]:
    rng = np.random.default_rng(seed)
    return ga_search(
        candidates, batches, label_dists, budget, cost_per_sample,
        priority_weights, ga, rng,
    ).selected


def deviation_cost(
    original: Mapping[int, int],
    adjusted: Mapping[int, int],
    costs: Mapping[int, float],
) -> float:
    """Mean extra per-iteration seconds induced by moving batch sizes away
    from their duration-aligned values: (1/R) * sum |delta d| * cost."""
    ids = sorted(original)
    if set(ids) != set(adjusted):
        raise ValidationError("batch maps disagree on workers")
    return sum(abs(adjusted[w] - original[w]) * costs[w] for w in ids) / len(ids)


def _kl_gradient(
    d: np.ndarray, v_mat: np.ndarray, reference: np.ndarray
) -> tuple[float, np.ndarray]:
    """KL of the relaxed mixture and its analytic gradient in the batch sizes."""
    total = d.sum()
    mix = (d @ v_mat) / total
    log_ratio = np.zeros_like(mix)
    pos = mix > 0
    log_ratio[pos] = np.log(mix[pos] / np.maximum(reference[pos], 1e-300))
    kl = float(np.dot(mix[pos], log_ratio[pos]))
    grad = (v_mat @ log_ratio - kl) / total
    return kl, grad


def _greedy_repair(
    d: np.ndarray,
    d0: np.ndarray,
    v_mat: np.ndarray,
    reference: np.ndarray,
    norm_costs: np.ndarray,
    epsilon: float,
    d_max: int,
    stop_at_epsilon: bool,
) -> np.ndarray:
    """Deterministic unit moves that lower the mixture KL, preferring cheap
    deviation on ties; stops at epsilon (or at a local KL minimum)."""
    d = d.copy()
    r = len(d)
    kl = _kl_rows((d @ v_mat)[None, :] / d.sum(), reference)[0]
    for _ in range(4 * r * d_max):
        if stop_at_epsilon and kl <= epsilon:
            break
        # Evaluate all 2R unit moves in one shot.
        steps = np.concatenate([np.full(r, -1.0), np.full(r, 1.0)])
        idx = np.tile(np.arange(r), 2)
        new_vals = d[idx] + steps
        valid = (new_vals >= 1) & (new_vals <= d_max)
        if not valid.any():
            break
        wsum = d @ v_mat
        trial_mix = (wsum[None, :] + steps[valid, None] * v_mat[idx[valid]]) / (
            d.sum() + steps[valid]
        )
        trial_kl = _kl_rows(trial_mix, reference)
        dev = np.abs(new_vals[valid] - d0[idx[valid]]) * norm_costs[idx[valid]]
        order = np.lexsort((idx[valid], dev, trial_kl))
        pick = order[0]
        if trial_kl[pick] >= kl - 1e-15:
            break
        move = np.flatnonzero(valid)[pick]
        d[idx[move]] += steps[move]
        kl = trial_kl[pick]
    return d


def finetune_batches(
    selected: Sequence[int],
    batches: Mapping[int, int],
    label_dists: Mapping[int, np.ndarray],
    costs: Mapping[int, float],
    reference: np.ndarray,
    epsilon: float,
    d_max: int,
    outer_steps: int = 30,
    inner_steps: int = 100,
) -> tuple[dict[int, int], bool]:
    """Nudge the selected workers' batch sizes until the merged label mixture
    sits within epsilon KL of the reference, adding as little extra waiting
    time as possible.

    Solved as a Lagrangian dual: subgradient ascent on the multiplier of the
    KL constraint, with projected-gradient inner minimization over relaxed
    batch sizes in [1, d_max], followed by integer rounding with greedy
    repair. Among the feasible candidates (untouched plan, dual solution,
    equalized batches) the cheapest deviation wins; if none reaches epsilon
    the KL-minimizing rounding is returned with the unreachable flag set.
    """
    ids = sorted(selected)
    if not ids:
        raise ValidationError("empty selection")
    if epsilon < 0:
        raise ValidationError("epsilon must be >= 0")
    d0 = np.array([batches[w] for w in ids], dtype=np.float64)
    v_mat = np.stack([np.asarray(label_dists[w], dtype=np.float64) for w in ids])
    cost_vec = np.array([costs[w] for w in ids], dtype=np.float64)
    norm_costs = cost_vec / cost_vec.mean()  # solver is cost-scale invariant
    r = len(ids)

    def kl_of(d: np.ndarray) -> float:
        total = d.sum()
        return kl_divergence((d @ v_mat) / total, reference)

    def as_map(d: np.ndarray) -> dict[int, int]:
        return {w: int(d[k]) for k, w in enumerate(ids)}

    def norm_delta(d: np.ndarray) -> float:
        return float(np.abs(d - d0) @ norm_costs) / r

    # Fast path: the plan already satisfies the constraint.
    if kl_of(d0) <= epsilon:
        return as_map(d0), False

    # Dual ascent on lambda >= 0 over the relaxed problem.
    d = d0.copy()
    lam = 0.0
    step = 0.05 * d_max
    for t in range(1, outer_steps + 1):
        for _ in range(inner_steps):
            kl, kl_grad = _kl_gradient(d, v_mat, reference)
            grad = lam * kl_grad + (norm_costs / r) * np.sign(d - d0)
            d = np.clip(d - step * grad, 1.0, float(d_max))
        lam = max(0.0, lam + (0.5 / math.sqrt(t)) * (kl_of(d) - epsilon))

    rounded = np.clip(np.rint(d), 1, d_max).astype(np.int64).astype(np.float64)
    dual = _greedy_repair(
        rounded, d0, v_mat, reference, norm_costs, epsilon, d_max, stop_at_epsilon=True
    )

    equal = np.full(r, float(np.clip(int(round(d0.mean())), 1, d_max)))
    candidates = [dual, equal]

    feasible = [c for c in candidates if kl_of(c) <= epsilon]
    if feasible:
        best = min(feasible, key=lambda c: (norm_delta(c), tuple(c)))
        return as_map(best), False

    # epsilon unreachable: keep driving the KL down and flag the plan.
    fallback = _greedy_repair(
        dual, d0, v_mat, reference, norm_costs, epsilon, d_max, stop_at_epsilon=False
    )
    best = min(candidates + [fallback], key=lambda c: (kl_of(c), norm_delta(c)))
    return as_map(best), True


def scale_to_budget(
    selected: Sequence[int],
    batches: Mapping[int, int],
    budget: float,
    cost_per_sample: float,
    d_max: int,
) -> dict[int, int]:
    """Multiply every batch by the largest rational factor that keeps the
    spend within budget, each batch in [1, d_max]. The floor of the scaled
    value is taken per worker; the >=1 clamp only binds when the budget is too
    tight to honor the ratios."""
    ids = sorted(selected)
    if not ids:
        raise ValidationError("empty selection")
    r = len(ids)
    if r * cost_per_sample > budget:
        raise InfeasiblePlanError(
            f"budget {budget} cannot give {r} workers one sample each"
        )
    d = [batches[w] for w in ids]

    def scaled(s: Fraction) -> list[int]:
        return [
            max(1, min(d_max, (s.numerator * di) // s.denominator)) for di in d
        ]

    def spend(s: Fraction) -> float:
        return sum(scaled(s)) * cost_per_sample

    # Spend is a step function of s; candidate breakpoints are k / d_i.
    points = sorted({Fraction(k, di) for di in set(d) for k in range(1, d_max + 1)})
    lo, hi = 0, len(points) - 1
    if spend(points[0]) > budget:
        best = points[0]  # everyone clamped to the minimum already
    else:
        while lo < hi:  # largest feasible breakpoint, bisection
            mid = (lo + hi + 1) // 2
            if spend(points[mid]) <= budget:
                lo = mid
            else:
                hi = mid - 1
        best = points[lo]
    result = scaled(best)
    if sum(result) * cost_per_sample > budget:
        # minimum-batch fallback when even the smallest breakpoint overspends
        result = [1] * r
    return {w: result[k] for k, w in enumerate(ids)}


def build_plan(
    estimates: Mapping[int, WorkerEstimate],
    budget: float,
    params: ControllerParams,
    seed,
    round_index: int,
) -> MergePlan:
    """Run the full planning pipeline and bump the participation counts of the
    selected workers. Retries with halved d_max when the budget is too tight."""
    if not estimates:
        raise ValidationError("no workers")
    label_dists = {wid: est.label_dist for wid, est in estimates.items()}
    costs = {wid: est.cost for wid, est in estimates.items()}
    reference = iid_reference([label_dists[w] for w in sorted(label_dists)])
    prio = priorities({wid: est.participations for wid, est in estimates.items()})

    last_error: Exception | None = None
    for attempt in range(params.max_retries + 1):
        d_max = max(1, params.d_max >> attempt)
        try:
            batches = regulate_batches(estimates, d_max)
            rng = np.random.default_rng(
                (seed, streams.CONTROLLER, round_index, attempt)
            )
            selected = ga_search(
                sorted(estimates),
                batches,
                label_dists,
                budget,
                params.cost_per_sample,
                prio,
                params.ga,
                rng,
            ).selected
            tuned, unreachable = finetune_batches(
                selected,
                {w: batches[w] for w in selected},
                label_dists,
                costs,
                reference,
                params.epsilon,
                d_max,
            )
            final = scale_to_budget(
                selected, tuned, budget, params.cost_per_sample, d_max
            )
        except InfeasiblePlanError as err:
            last_error = err
            continue
        mixture = merged_label_mixture(final, label_dists)
        plan = MergePlan(
            workers=tuple(sorted(selected)),
            batches=final,
            planned_spend=sum(final.values()) * params.cost_per_sample,
            budget=budget,
            kl=kl_divergence(mixture, reference),
            kl_unreachable=unreachable,
        )
        for wid in plan.workers:
            estimates[wid].participations += 1
        return plan
    raise InfeasiblePlanError(
        f"no feasible plan after {params.max_retries + 1} attempts"
    ) from last_error
