"""Epsilon-stopped bisection baseline (CTP-style), on the same slice machinery.

The baseline detects empty slabs but cannot tell one resident from several,
so it keeps bisecting every non-empty slab until it is narrower than
``epsilon`` and then decodes ``s / beta`` blindly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import projection_gap
from .fl import ClientConfig, RoundMessageDown, client_round, pseudo_gradient
from .nn import Batch, LossKind, SquaredError
from .vgia.config import AttackConfig
from .vgia.params import craft_parameters, initial_interval
from .vgia.recover import EPSILON_STOPPED, ReconstructionRecord, recover_target
from .vgia.run import AttackResult, RoundTrace, attack_direction, attack_rngs, uses_robust_test
from .vgia.search import Assignment, Interval, Placement, SearchState, SliceRecord, pad_biases, set_hyperplanes
from .vgia.slices import compute_slices

VARIANTS = ("eps_lt", "eps_eq", "eps_gt")


@dataclass(frozen=True)
class CtpConfig:
    epsilon: float
    variant: str | None = None
    # also decode slabs still wider than epsilon when the budget runs out
    emit_unfinished: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown CTP variant {self.variant!r}")


def epsilon_w(data: Batch, w: np.ndarray) -> float:
    """Smallest ``|w @ (x1 - x2)|`` over pairs of records; 0 with duplicates."""
    return projection_gap(data, np.asarray(w, dtype=np.float64))


def variant_for(epsilon: float, eps_w: float) -> str:
    if epsilon < eps_w:
        return "eps_lt"
    return "eps_eq" if epsilon == eps_w else "eps_gt"


def bisection_placement(intervals, n: int) -> Placement:
    """Probe both ends and the midpoint of as many slabs as the budget allows."""
    live = sorted(intervals, key=lambda iv: (iv.low, iv.high))
    biases: list[float] = []
    assignments = []
    stalled = []
    prev_high = None
    taken = 0
    for iv in live:
        shared = prev_high is not None and iv.low == prev_high
        mid = iv.low + 0.5 * (iv.high - iv.low)
        if not iv.low < mid < iv.high:
            stalled.append(iv)
            taken += 1
            continue
        pts = [mid, iv.high] if shared else [iv.low, mid, iv.high]
        if len(biases) + len(pts) > n:
            break
        first = len(biases) - 1 if shared else len(biases)
        biases.extend(pts)
        assignments.append(Assignment(iv, first, len(biases) - 1))
        prev_high = iv.high
        taken += 1
    deferred = [iv for iv in live[taken:] if iv not in stalled]
    return Placement(np.array(biases), tuple(assignments), tuple(deferred), tuple(stalled))


def _decode(slice_: SliceRecord, loss, batch_size, beta_floor, target_range) -> ReconstructionRecord | None:
    if abs(slice_.beta) <= beta_floor:
        return None
    x_hat = slice_.s / slice_.beta
    try:
        y_hat = recover_target(x_hat, slice_.beta, slice_.source, loss, batch_size, target_range=target_range)
    except ValueError:
        y_hat = None
    return ReconstructionRecord(x_hat, y_hat, slice_.beta, EPSILON_STOPPED, slice_.round, slice_.b_low, slice_.b_high)


def run_ctp(
    data: Batch,
    cfg: CtpConfig,
    attack_cfg: AttackConfig,
    client_cfg: ClientConfig | None = None,
    loss: LossKind | None = None,
    rounds: int = 25,
    w: np.ndarray | None = None,
) -> AttackResult:
    """Bisect non-empty slabs until all are narrower than ``cfg.epsilon``.

    ``w`` and the per-round redraws come from ``attack_cfg.seed`` exactly as
    in :func:`gialab.vgia.run_vgia`, so paired runs share the direction.
    """
    client_cfg = client_cfg or ClientConfig()
    loss = loss or SquaredError()
    box = attack_cfg.feature_box
    if box is None or box.dim != data.dim:
        raise ValueError("attack config needs a feature box matching the data dimension")
    if w is None:
        w = attack_direction(attack_cfg, data.dim)
    _, rng = attack_rngs(attack_cfg.seed)
    n = attack_cfg.n_neurons
    lo, hi = initial_interval(w, box, attack_cfg.box_margin)
    state = SearchState([Interval(lo, hi, None)])
    emitted: list[ReconstructionRecord] = []
    trace: list[RoundTrace] = []
    verified_at = None

    for t in range(1, rounds + 1):
        if not state.intervals:
            break
        start = time.perf_counter()
        if t == 1:
            placement = set_hyperplanes(state.intervals, n, attack_cfg.min_probes)
        else:
            placement = pad_biases(bisection_placement(state.intervals, n), n, lo, hi - lo)
        state.stalled.extend(placement.stalled)
        if not placement.assignments:
            break
        crafted = craft_parameters(
            attack_cfg, w, placement.biases, rng, data.n_classes, t, drift=uses_robust_test(client_cfg, data.size)
        )
        up = client_round(RoundMessageDown(crafted.model, t), data, client_cfg, loss)
        report = pseudo_gradient(up, client_cfg)
        slices = compute_slices(report, crafted.gains, placement.biases, t, attack_cfg.zero_tolerance, crafted)
        new_live: list[Interval] = []
        empty = 0
        finished = 0
        for a in placement.assignments:
            for k in a.child_range:
                child = slices[k]
                if child.is_empty:
                    empty += 1
                    continue
                # same small-coefficient guard as the attack: re-probe instead of dividing
                weak = abs(child.beta) < attack_cfg.min_relative_beta * child.beta_scale
                if child.width < cfg.epsilon and not weak:
                    rec = _decode(child, loss, data.size, attack_cfg.beta_floor, attack_cfg.target_range)
                    if rec is not None:
                        emitted.append(rec)
                        finished += 1
                    continue
                iv = Interval(child.b_low, child.b_high, child)
                new_live.append(iv)
        state.intervals = list(placement.deferred) + new_live
        state.round = t
        trace.append(
            RoundTrace(
                round=t,
                biases=placement.biases.tolist(),
                probed_intervals=len(placement.assignments),
                deferred_intervals=len(placement.deferred),
                live_intervals=len(state.intervals),
                certified_total=len(emitted),
                certified_new=finished,
                empty_slices=empty,
                budget_used=sum(a.last - a.first + 1 for a in placement.assignments),
                stalled=len(state.stalled),
                wall_ms=1e3 * (time.perf_counter() - start),
            )
        )
        if not state.intervals and not state.stalled:
            verified_at = t
            break

    complete = not state.intervals and not state.stalled
    if not complete and cfg.emit_unfinished:
        for iv in state.intervals + state.stalled:
            if iv.parent is not None:
                rec = _decode(iv.parent, loss, data.size, attack_cfg.beta_floor, attack_cfg.target_range)
                if rec is not None:
                    emitted.append(rec)
    return AttackResult("ctp", emitted, trace, w, state.round, verified_at, complete, state)
