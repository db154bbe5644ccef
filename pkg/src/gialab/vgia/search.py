"""Search bookkeeping and hyperplane placement.

Bias convention: a unit with bias ``b`` fires for records with ``w @ x > -b``.
Ascending biases therefore give nested active sets, and the slab between
biases ``b_k < b_{k+1}`` holds the records with ``-b_{k+1} < w @ x <= -b_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .params import CraftedModel
    from .recover import ReconstructionRecord


@dataclass(frozen=True, eq=False)
class SliceRecord:
    b_low: float
    b_high: float
    s: np.ndarray
    beta: float
    round: int = 0
    # noise floor used to call ``s`` empty, and the largest rescaled row entry
    zero_level: float = 0.0
    row_scale: float = 1.0
    beta_scale: float = 1.0
    source: "CraftedModel | None" = field(default=None, repr=False)

    @property
    def width(self) -> float:
        return self.b_high - self.b_low

    @property
    def is_empty(self) -> bool:
        return float(np.max(np.abs(self.s))) <= self.zero_level


@dataclass(frozen=True, eq=False)
class Interval:
    low: float
    high: float
    parent: SliceRecord | None = None

    @property
    def width(self) -> float:
        return self.high - self.low


@dataclass(frozen=True)
class Assignment:
    """Interval probed this round by units ``first..last`` (inclusive)."""

    interval: Interval
    first: int
    last: int

    @property
    def child_range(self) -> range:
        return range(self.first, self.last)


@dataclass
class SearchState:
    intervals: list[Interval]
    certified: list["ReconstructionRecord"] = field(default_factory=list)
    # certified singletons whose coefficient is too small to divide by
    unrecoverable: list[SliceRecord] = field(default_factory=list)
    # intervals too narrow to probe in double precision
    stalled: list[Interval] = field(default_factory=list)
    round: int = 0


@dataclass(frozen=True)
class Placement:
    biases: np.ndarray
    assignments: tuple[Assignment, ...]
    deferred: tuple[Interval, ...]
    stalled: tuple[Interval, ...] = ()

    @property
    def used(self) -> int:
        return int(self.biases.shape[0])


def _probes(iv: Interval, q: int, shared: bool) -> np.ndarray:
    if shared:
        pts = iv.low + np.arange(1, q + 1) * ((iv.high - iv.low) / q)
    else:
        pts = iv.low + np.arange(q) * ((iv.high - iv.low) / (q - 1))
        pts[0] = iv.low
    pts[-1] = iv.high
    return pts


def set_hyperplanes(intervals, n: int, min_probes: int = 3) -> Placement:
    """Place ``n`` attack biases over the live intervals.

    Intervals are taken in ascending order of their low end; at most
    ``n // min_probes`` are probed and the rest are deferred untouched.
    Interval ``k`` gets ``n // M`` probes, one more for the first ``n % M``.
    Both ends are probed, and an end shared with the previous interval is
    placed only once.
    """
    if n < min_probes:
        raise ValueError(f"need at least {min_probes} units, got {n}")
    live = sorted(intervals, key=lambda iv: (iv.low, iv.high))
    if not live:
        raise ValueError("no live intervals to probe")
    stalled: list[Interval] = []
    while True:
        m = min(len(live), n // min_probes)
        active = live[:m]
        extra = n % m
        biases: list[float] = []
        assignments = []
        prev_high = None
        bad = None
        for k, iv in enumerate(active):
            q = n // m + (k < extra)
            shared = prev_high is not None and iv.low == prev_high
            pts = _probes(iv, q, shared)
            ends = np.concatenate([[iv.low], pts]) if shared else pts
            if np.any(np.diff(ends) <= 0):
                bad = iv
                break
            first = len(biases) - 1 if shared else len(biases)
            biases.extend(pts.tolist())
            assignments.append(Assignment(iv, first, len(biases) - 1))
            prev_high = iv.high
        if bad is None:
            break
        stalled.append(bad)
        live.remove(bad)
        if not live:
            return Placement(np.empty(0), (), (), tuple(stalled))
    return Placement(np.array(biases), tuple(assignments), tuple(live[m:]), tuple(stalled))


def pad_biases(placement: Placement, n: int, floor: float, step: float) -> Placement:
    """Fill unused units with biases below ``floor`` (units that never fire)."""
    spare = n - placement.used
    if spare <= 0:
        return placement
    pad = floor - step * np.arange(spare, 0, -1)
    shift = spare
    assignments = tuple(Assignment(a.interval, a.first + shift, a.last + shift) for a in placement.assignments)
    return Placement(np.concatenate([pad, placement.biases]), assignments, placement.deferred, placement.stalled)
