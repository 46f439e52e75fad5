"""Drop/grow evolution of the sparse-delta support.

Every k steps the entries with the smallest update magnitudes are dropped and
the same number of new entries is grown at the coordinates with the largest
accumulated-gradient magnitudes. Growth may reactivate masked (pruned base)
coordinates unless the run is structured or mask-constrained. The per-cycle
turnover follows a cosine decay of the initial drop rate over the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .delta import DeltaOptimState, SparseDelta, TensorDelta, insert_entries, remove_entries
from .pruning import Mask


@dataclass
class EvolutionSchedule:
    drop_rate: float = 0.2
    total_steps: int = 1000
    every: int = 10
    structured: bool = False  # growth restricted to mask support (N:M safety)
    constrained: bool = False  # same restriction as an ablation in unstructured mode
    cosine: bool = True

    def __post_init__(self):
        if not 0.0 < self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must be in (0, 1), got {self.drop_rate}")
        if self.every < 1 or self.total_steps < 1:
            raise ValueError(f"invalid schedule: every={self.every}, total_steps={self.total_steps}")

    @property
    def restrict_growth(self) -> bool:
        return self.structured or self.constrained


def drop_quota(step: int, schedule: EvolutionSchedule, budget: int) -> int:
    """Number of entries to drop (and grow) at this step.

    Cosine decay: round(drop_rate/2 * (1 + cos(pi*step/total)) * budget),
    so the quota starts at drop_rate*budget and reaches zero at the end.
    """
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"drop_quota: step {step} outside [0, {schedule.total_steps}]")
    if schedule.cosine:
        frac = 0.5 * schedule.drop_rate * (1.0 + math.cos(math.pi * step / schedule.total_steps))
    else:
        frac = schedule.drop_rate
    return int(math.floor(frac * budget + 0.5))


class GradAccumulator:
    """Dense sum of gradients per tensor since the last topology update."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], dtype=np.float64):
        self._shapes = dict(shapes)
        self._dtype = dtype
        self.sums: dict[str, np.ndarray] = {n: np.zeros(s, dtype=dtype) for n, s in shapes.items()}
        self.steps = 0

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            acc = self.sums[name]
            if g.shape != acc.shape:
                raise ValueError(f"accumulate: grad shape {g.shape} != {acc.shape} for {name}")
            acc += g
        self.steps += 1

    def take(self) -> dict[str, np.ndarray]:
        """Return the current window and reset to zero."""
        window = self.sums
        self.sums = {n: np.zeros(s, dtype=self._dtype) for n, s in self._shapes.items()}
        self.steps = 0
        return window


def select_drop(td: TensorDelta, count: int) -> np.ndarray:
    """Coordinates of the ``count`` entries with smallest |value|, ties to lower index."""
    if count > len(td):
        raise ValueError(f"select_drop: count {count} exceeds support {len(td)}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(np.abs(td.values), kind="stable")
    return np.sort(td.indices[order[:count]])


def select_grow(
    acc: np.ndarray,
    active_indices: np.ndarray,
    mask_bits: np.ndarray | None,
    count: int,
    restrict_to_mask: bool = False,
) -> tuple[np.ndarray, int]:
    """Coordinates with the largest |accumulated gradient| outside the active set.

    Masked coordinates are eligible (reactivation) unless ``restrict_to_mask``.
    Returns (sorted coordinates, shortfall) where shortfall counts how many of
    the requested entries had no eligible candidate.
    """
    flat = np.abs(acc.reshape(-1))
    eligible = np.ones(flat.size, dtype=bool)
    eligible[active_indices] = False
    if restrict_to_mask:
        if mask_bits is None:
            raise ValueError("select_grow: mask required when growth is restricted")
        eligible &= mask_bits.reshape(-1)
    if count == 0:
        return np.zeros(0, dtype=np.int64), 0
    order = np.argsort(-flat, kind="stable")
    picks = order[eligible[order]][:count]
    shortfall = count - picks.size
    return np.sort(picks.astype(np.int64)), int(shortfall)


@dataclass
class EvolutionReport:
    step: int
    quota: int
    dropped: int
    grown: int
    reactivations: int
    shortfall: int = 0
    per_tensor: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def reactivation_fraction(self) -> float:
        return self.reactivations / self.grown if self.grown else 0.0


def apportion(total: int, sizes: list[int], caps: list[int]) -> list[int]:
    """Split ``total`` proportionally to ``sizes`` under per-slot caps.

    Largest-remainder rounding; deterministic ties by slot order. Excess that
    cannot be placed under the caps is dropped.
    """
    if total < 0:
        raise ValueError("apportion: total must be non-negative")
    weight = sum(sizes)
    if weight == 0 or total == 0:
        return [0] * len(sizes)
    exact = [total * s / weight for s in sizes]
    out = [min(int(math.floor(e)), c) for e, c in zip(exact, caps)]
    remainders = sorted(
        range(len(sizes)),
        key=lambda i: (-(exact[i] - math.floor(exact[i])), i),
    )
    left = total - sum(out)
    while left > 0:
        placed = False
        for i in remainders:
            if out[i] < caps[i]:
                out[i] += 1
                left -= 1
                placed = True
                if left == 0:
                    break
        if not placed:
            break
    return out


def evolve(
    delta: SparseDelta,
    optim: DeltaOptimState | None,
    acc: GradAccumulator,
    masks: dict[str, Mask],
    schedule: EvolutionSchedule,
    step: int,
) -> tuple[EvolutionReport, dict[str, np.ndarray]]:
    """One drop-then-grow cycle; resets the accumulator.

    The global quota is apportioned per tensor proportionally to its current
    support. Dropped coordinates remain eligible for an immediate regrow. The
    accumulated-gradient window is returned so the sparsity-adaptation stage
    can reuse it after the reset.
    """
    if step % schedule.every != 0:
        raise ValueError(f"evolve: step {step} is not a multiple of every={schedule.every}")
    window = acc.take()
    quota = min(drop_quota(step, schedule, delta.budget_total), delta.support_size())
    names = list(delta.slices)
    sizes = [len(delta.slices[n]) for n in names]
    shares = apportion(quota, sizes, caps=sizes)
    report = EvolutionReport(step=step, quota=quota, dropped=0, grown=0, reactivations=0)
    for name, share in sorted(zip(names, shares)):
        td = delta.slices[name]
        bits = masks[name].bits
        dropped = select_drop(td, share)
        remove_entries(delta, name, dropped, optim)
        grown, shortfall = select_grow(window[name], td.indices, bits, share, schedule.restrict_growth)
        insert_entries(delta, name, grown, optim)
        react = int((~bits.reshape(-1)[grown]).sum())
        report.dropped += dropped.size
        report.grown += grown.size
        report.reactivations += react
        report.shortfall += shortfall
        report.per_tensor[name] = (int(dropped.size), int(grown.size))
    return report, window
