"""Block-forward-pass accounting and iteration allocation across timesteps.

One plan entry costs n_pre + k + n_post block passes; a plan's total is the
exact sum over entries. Planners never exceed the budget. Constant plans
discard floor-division leftovers so every step is identical; ramp plans
consume leftovers at the heavy end instead, landing within n_pre + n_post + 1
of the budget.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .schedule import select_timesteps


@dataclass(frozen=True)
class CostModel:
    n_pre: int = 1
    n_post: int = 1

    def __post_init__(self):
        if self.n_pre < 0 or self.n_post < 0:
            raise UsageError("layer counts must be >= 0")

    @property
    def overhead(self):
        return self.n_pre + self.n_post

    def entry_cost(self, iterations):
        return self.n_pre + iterations + self.n_post


@dataclass(frozen=True)
class BudgetPlan:
    """Ordered (train timestep, iteration count) pairs, reverse diffusion order."""

    timesteps: tuple
    iterations: tuple
    heuristic: str
    cost: CostModel

    def __post_init__(self):
        if len(self.timesteps) != len(self.iterations):
            raise UsageError("timesteps and iterations must align")
        if len(self.timesteps) == 0:
            raise UsageError("a plan needs at least one step")
        if any(k < 1 for k in self.iterations):
            raise UsageError("every step needs at least one iteration")
        diffs = np.diff(np.asarray(self.timesteps))
        if len(diffs) and not np.all(diffs < 0):
            raise UsageError("plan timesteps must be strictly decreasing")

    @property
    def steps(self):
        return len(self.timesteps)

    @property
    def total_cost(self):
        return sum(self.cost.entry_cost(k) for k in self.iterations)


def plan_constant(budget, k, cost: CostModel, train_timesteps=1000):
    """S = floor(budget / (n_pre + k + n_post)) steps of k iterations each."""
    if k < 1:
        raise UsageError("k must be >= 1")
    per_step = cost.entry_cost(k)
    if budget < per_step:
        raise UsageError(
            f"budget {budget} below one step's cost {per_step}")
    steps = budget // per_step
    ts = select_timesteps(train_timesteps, steps)
    return BudgetPlan(timesteps=tuple(int(t) for t in ts),
                      iterations=(k,) * steps,
                      heuristic="constant", cost=cost)


def _ramp_counts(k_mean, steps):
    # Unrounded ramp 2k(s+1)/(S+1) sums to k*S exactly; round half up to
    # keep the sequence monotone, clamp at 1.
    counts = []
    for s in range(steps):
        raw = 2.0 * k_mean * (s + 1) / (steps + 1)
        counts.append(max(1, int(math.floor(raw + 0.5))))
    return counts


def plan_ramp(budget, direction, steps, cost: CostModel, train_timesteps=1000):
    """Linear iteration ramp over ``steps`` timesteps.

    direction="increasing" puts the heavy end at the low-noise timesteps,
    "decreasing" is its exact reverse. Rounding drift is repaired at the
    heavy end: decrements take the leftmost maximum (preserving monotone
    order), increments extend a suffix of the ramp.
    """
    if direction not in ("increasing", "decreasing"):
        raise UsageError(f"unknown ramp direction {direction!r}")
    if steps < 1:
        raise UsageError("steps must be >= 1")
    k_mean = budget // steps - cost.overhead
    if k_mean < 1:
        raise UsageError(
            f"budget {budget} cannot give every one of {steps} steps "
            f"an iteration on top of overhead {cost.overhead}")
    counts = _ramp_counts(k_mean, steps)
    allowance = budget - steps * cost.overhead
    total = sum(counts)
    while total > allowance:
        idx = counts.index(max(counts))
        if counts[idx] == 1:
            raise UsageError("budget too small for the requested ramp")
        counts[idx] -= 1
        total -= 1
    fill = 0
    while total < allowance:
        counts[steps - 1 - (fill % steps)] += 1
        fill += 1
        total += 1
    if direction == "decreasing":
        counts = counts[::-1]        # heavy end moves to the noisy start
    ts = select_timesteps(train_timesteps, steps)
    return BudgetPlan(timesteps=tuple(int(t) for t in ts),
                      iterations=tuple(counts),
                      heuristic=direction, cost=cost)


def plan_adaptive(budget, probe, cost: CostModel, probes=8,
                  theta_lo=1e-6, theta_hi=1e0):
    """Bisect log-spaced thresholds until realized cost fits the budget.

    ``probe(theta)`` runs one batch under the candidate threshold and
    returns its realized (timestep, iterations) pairs. Returns the tightest
    feasible threshold and the plan observed under it.
    """
    if probes < 2:
        raise UsageError("need at least 2 probes")
    entries = probe(theta_hi)
    realized = _observed_plan(entries, cost)
    if realized.total_cost > budget:
        raise UsageError(
            f"even theta={theta_hi:g} costs {realized.total_cost} "
            f"over budget {budget}")
    best_theta, best_plan = theta_hi, realized
    lo, hi = math.log10(theta_lo), math.log10(theta_hi)
    for _ in range(probes - 1):
        mid = 10.0 ** ((lo + hi) / 2.0)
        entries = probe(mid)
        realized = _observed_plan(entries, cost)
        if realized.total_cost <= budget:
            hi = math.log10(mid)
            best_theta, best_plan = mid, realized
        else:
            lo = math.log10(mid)
    return best_theta, best_plan


def _observed_plan(entries, cost):
    ts = tuple(int(t) for t, _ in entries)
    ks = tuple(int(k) for _, k in entries)
    return BudgetPlan(timesteps=ts, iterations=ks,
                      heuristic="adaptive", cost=cost)


@dataclass(frozen=True)
class AuditResult:
    ok: bool
    expected: int
    counted: int
    first_bad_timestep: int | None = None

    def __bool__(self):
        return self.ok


def audit_cost(plan: BudgetPlan, trace):
    """Compare a pass-count trace against the plan, entry by entry.

    ``trace`` is a sequence of (train_timestep, passes) records in
    execution order, one per sampled timestep. Any mismatch reports the
    first offending timestep; totals are compared exactly.
    """
    records = list(trace)
    counted = sum(p for _, p in records)
    expected = plan.total_cost
    if len(records) != plan.steps:
        first = records[plan.steps][0] if len(records) > plan.steps else None
        return AuditResult(False, expected, counted, first)
    for (t_plan, k), (t_seen, passes) in zip(
            zip(plan.timesteps, plan.iterations), records):
        if t_plan != t_seen or plan.cost.entry_cost(k) != passes:
            return AuditResult(False, expected, counted, t_seen)
    return AuditResult(counted == expected, expected, counted, None)


def export_plan_csv(plan: BudgetPlan, path, budget=None):
    """Plan rows plus a comment header carrying tag, budget, cost model."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# heuristic={plan.heuristic}"
                 f" budget={'' if budget is None else budget}"
                 f" n_pre={plan.cost.n_pre} n_post={plan.cost.n_post}"
                 f" total_cost={plan.total_cost}\n")
        wr = csv.writer(fh)
        wr.writerow(["step_index", "train_timestep", "iterations"])
        for i, (t, k) in enumerate(zip(plan.timesteps, plan.iterations)):
            wr.writerow([i, t, k])


def import_plan_csv(path):
    """Inverse of export_plan_csv; validates the recomputed total cost."""
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.startswith("# "):
            raise UsageError("plan file missing metadata header")
        meta = dict(part.split("=", 1) for part in header[2:].split())
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step_index", "train_timestep", "iterations"]:
        raise UsageError("plan file missing column header")
    ts, ks = [], []
    for row in rows[1:]:
        ts.append(int(row[1]))
        ks.append(int(row[2]))
    cost = CostModel(n_pre=int(meta["n_pre"]), n_post=int(meta["n_post"]))
    plan = BudgetPlan(timesteps=tuple(ts), iterations=tuple(ks),
                      heuristic=meta["heuristic"], cost=cost)
    if plan.total_cost != int(meta["total_cost"]):
        raise UsageError("plan file total_cost does not match its rows")
    return plan
