"""Isolation certificates: does the parent slice lie in the span of its children?"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..nn import LossKind
from .config import AttackConfig
from .recover import (
    SPAN_CERTIFIED,
    DegenerateCoefficientError,
    ReconstructionRecord,
    TargetRangeError,
    predicted_beta,
    reconstruct_input,
    recover_target,
)
from .search import Assignment, Interval, SliceRecord

log = logging.getLogger(__name__)


def orthonormal_basis(vectors, rank_tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalisation pass.

    Vectors are normalised first, so ``rank_tol`` is relative.  Vectors that
    fall inside the span of earlier ones are skipped.
    """
    basis: list[np.ndarray] = []
    for v in vectors:
        v = np.asarray(v, dtype=np.float64)
        nv = np.linalg.norm(v)
        if nv == 0:
            continue
        r = v / nv
        for _ in range(2):
            for q in basis:
                r = r - (q @ r) * q
        nr = np.linalg.norm(r)
        if nr > rank_tol:
            basis.append(r / nr)
    if not basis:
        return np.empty((0, 0))
    return np.array(basis)


def span_residual(target: np.ndarray, vectors) -> float:
    """Relative norm of the part of ``target`` orthogonal to ``span(vectors)``."""
    target = np.asarray(target, dtype=np.float64)
    nt = np.linalg.norm(target)
    if nt == 0:
        return 0.0
    r = target / nt
    basis = orthonormal_basis(vectors)
    for _ in range(2):
        for q in basis:
            r = r - (q @ r) * q
    return float(np.linalg.norm(r))


def robust_span_test(parent: np.ndarray, children, threshold: float) -> bool:
    """Span membership with a residual threshold loose enough for local drift."""
    return span_residual(parent, children) < threshold


def span_coefficients(target: np.ndarray, vectors) -> np.ndarray:
    a = np.array(vectors).T
    coef, *_ = np.linalg.lstsq(a, target, rcond=None)
    return coef


@dataclass
class IsolationOutcome:
    intervals: list[Interval] = field(default_factory=list)
    certified: list[ReconstructionRecord] = field(default_factory=list)
    unrecoverable: list[SliceRecord] = field(default_factory=list)
    retired: int = 0
    empty: int = 0
    held: int = 0
    residuals: list[float] = field(default_factory=list)


def _nonzero(slice_: SliceRecord, robust: bool, cfg: AttackConfig) -> bool:
    peak = float(np.max(np.abs(slice_.s)))
    if robust:
        return peak > cfg.fedavg_zero_threshold * slice_.row_scale
    return peak > slice_.zero_level


def check_isolation(
    assignments,
    slices: list[SliceRecord],
    cfg: AttackConfig,
    loss: LossKind,
    batch_size: int,
    robust: bool = False,
) -> IsolationOutcome:
    """Sort this round's children into certified singletons and live intervals.

    For each probed interval, empty children are dropped.  When the parent
    slice lies in the span of the nonzero children every child holds exactly
    one record and is certified; otherwise all nonzero children stay live.
    A certified child must also reproduce its own share of the parent slice
    from its recovered target, which rules out stacked identical records.
    """
    out = IsolationOutcome()
    threshold = cfg.fedavg_residual_threshold if robust else cfg.span_tolerance
    mult_tol = cfg.fedavg_multiplicity_tolerance if robust else cfg.multiplicity_tolerance
    for a in assignments:
        a: Assignment
        kids = [slices[k] for k in a.child_range]
        live = [k for k in kids if _nonzero(k, robust, cfg)]
        out.empty += len(kids) - len(live)
        parent = a.interval.parent
        if not live:
            if parent is not None:
                out.retired += 1
            continue
        d = live[0].s.shape[0]
        certified = False
        if parent is not None and len(live) < d:
            res = span_residual(parent.s, [k.s for k in live])
            out.residuals.append(res)
            certified = res < threshold
            if not certified and res < 10 * threshold:
                # routine under FedAvg drift, unusual on exact gradients
                (log.debug if robust else log.warning)("span residual %.3g within 10x of threshold %.3g", res, threshold)
        if not certified:
            out.intervals.extend(Interval(k.b_low, k.b_high, k) for k in live)
            continue
        out.retired += 1
        coef = span_coefficients(parent.s, [k.s for k in live])
        for child, a_k in zip(live, coef):
            if abs(child.beta) < cfg.min_relative_beta * child.beta_scale:
                out.intervals.append(Interval(child.b_low, child.b_high, child))
                out.held += 1
                continue
            try:
                x_hat = reconstruct_input(child, cfg.beta_floor)
            except DegenerateCoefficientError:
                out.unrecoverable.append(child)
                continue
            try:
                y_hat = recover_target(
                    x_hat, child.beta, child.source, loss, batch_size, target_range=cfg.target_range
                )
            except TargetRangeError:
                out.unrecoverable.append(child)
                continue
            if mult_tol is not None and parent.source is not None:
                # the resident's coefficient in the parent round
                seen = a_k * child.beta
                expect = predicted_beta(x_hat, y_hat, parent.source, loss, batch_size)
                if abs(seen - expect) > mult_tol * (abs(seen) + abs(expect)) + cfg.beta_floor:
                    out.intervals.append(Interval(child.b_low, child.b_high, child))
                    continue
            out.certified.append(
                ReconstructionRecord(x_hat, y_hat, child.beta, SPAN_CERTIFIED, child.round, child.b_low, child.b_high)
            )
    return out
