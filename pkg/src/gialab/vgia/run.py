"""The adaptive attack loop."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..fl import ClientConfig, RoundMessageDown, client_round, pseudo_gradient
from ..nn import Batch, LossKind, SquaredError
from .config import AttackConfig
from .isolation import check_isolation
from .params import craft_parameters, draw_direction, initial_interval
from .recover import ReconstructionRecord
from .search import Interval, SearchState, set_hyperplanes
from .slices import compute_slices


@dataclass
class RoundTrace:
    round: int
    biases: list[float]
    probed_intervals: int
    deferred_intervals: int
    live_intervals: int
    certified_total: int
    certified_new: int
    empty_slices: int
    budget_used: int
    stalled: int
    wall_ms: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    method: str
    reconstructions: list[ReconstructionRecord]
    trace: list[RoundTrace]
    direction: np.ndarray
    rounds_run: int
    rounds_to_verifiability: int | None
    complete: bool
    state: SearchState | None = field(default=None, repr=False)

    @property
    def incomplete(self) -> bool:
        return not self.complete


def attack_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Separate streams for the direction ``w`` and the per-round redraws."""
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def attack_direction(cfg: AttackConfig, d: int) -> np.ndarray:
    return draw_direction(cfg, d, attack_rngs(cfg.seed)[0])


def uses_robust_test(client_cfg: ClientConfig, batch_size: int) -> bool:
    # a single full-batch local step yields the exact gradient
    return client_cfg.is_fedavg and client_cfg.steps(batch_size) > 1


def run_vgia(
    data: Batch,
    cfg: AttackConfig,
    client_cfg: ClientConfig | None = None,
    loss: LossKind | None = None,
    rounds: int = 25,
    w: np.ndarray | None = None,
) -> AttackResult:
    """Run up to ``rounds`` attack rounds against one client holding ``data``.

    Stops early once no interval is left to probe.  The returned result is
    flagged incomplete when live or stalled intervals remain.
    """
    client_cfg = client_cfg or ClientConfig()
    loss = loss or SquaredError()
    box = cfg.feature_box
    if box is None or box.dim != data.dim:
        raise ValueError("attack config needs a feature box matching the data dimension")
    if w is None:
        w = attack_direction(cfg, data.dim)
    _, rng = attack_rngs(cfg.seed)
    robust = uses_robust_test(client_cfg, data.size)
    n = cfg.n_neurons
    lo, hi = initial_interval(w, box, cfg.box_margin)
    state = SearchState([Interval(lo, hi, None)])
    trace: list[RoundTrace] = []
    verified_at = None

    for t in range(1, rounds + 1):
        if not state.intervals:
            break
        start = time.perf_counter()
        placement = set_hyperplanes(state.intervals, n, cfg.min_probes)
        state.stalled.extend(placement.stalled)
        if not placement.assignments:
            state.intervals = []
            break
        crafted = craft_parameters(cfg, w, placement.biases, rng, data.n_classes, t, drift=robust)
        up = client_round(RoundMessageDown(crafted.model, t), data, client_cfg, loss)
        report = pseudo_gradient(up, client_cfg)
        slices = compute_slices(report, crafted.gains, placement.biases, t, cfg.zero_tolerance, crafted)
        outcome = check_isolation(placement.assignments, slices, cfg, loss, data.size, robust)
        state.intervals = list(placement.deferred) + outcome.intervals
        state.certified.extend(outcome.certified)
        state.unrecoverable.extend(outcome.unrecoverable)
        state.round = t
        trace.append(
            RoundTrace(
                round=t,
                biases=placement.biases.tolist(),
                probed_intervals=len(placement.assignments),
                deferred_intervals=len(placement.deferred),
                live_intervals=len(state.intervals),
                certified_total=len(state.certified),
                certified_new=len(outcome.certified),
                empty_slices=outcome.empty,
                budget_used=placement.used,
                stalled=len(state.stalled),
                wall_ms=1e3 * (time.perf_counter() - start),
            )
        )
        if not state.intervals and not state.stalled:
            verified_at = t
            break

    complete = not state.intervals and not state.stalled
    return AttackResult(
        "vgia",
        list(state.certified),
        trace,
        w,
        state.round,
        verified_at if complete else None,
        complete,
        state,
    )
