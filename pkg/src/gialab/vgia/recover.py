"""Input and target recovery from a certified singleton slice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import CrossEntropy, LossKind, SquaredError, forward_rows
from .params import CraftedModel
from .search import SliceRecord

SPAN_CERTIFIED = "span-certified"
EPSILON_STOPPED = "epsilon-stopped"


class DegenerateCoefficientError(ArithmeticError):
    pass


class TargetRangeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ReconstructionRecord:
    x_hat: np.ndarray
    y_hat: float | int | None
    beta: float
    certificate: str
    round_found: int
    b_low: float = float("nan")
    b_high: float = float("nan")


def reconstruct_input(record: SliceRecord, beta_floor: float = 1e-12) -> np.ndarray:
    if abs(record.beta) <= beta_floor:
        raise DegenerateCoefficientError(f"|beta| = {abs(record.beta):.3g} is below the floor")
    return record.s / record.beta


def _scalar_output(crafted: CraftedModel, x_hat: np.ndarray) -> np.ndarray:
    out, _, _ = forward_rows(crafted.model, np.asarray(x_hat)[None, :])
    return out


def bisect_target(residual_of, target: float, lo: float, hi: float, iters: int = 200) -> float:
    """Root of the monotone ``residual_of(y) - target`` on ``[lo, hi]``."""
    f_lo, f_hi = residual_of(lo) - target, residual_of(hi) - target
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise TargetRangeError(f"no sign change of the output gradient over [{lo}, {hi}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        f_mid = residual_of(mid) - target
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def recover_target(
    x_hat: np.ndarray,
    beta: float,
    crafted: CraftedModel,
    loss: LossKind,
    batch_size: int,
    method: str = "auto",
    target_range: tuple[float, float] = (-1e6, 1e6),
):
    """Target whose per-sample output gradient reproduces ``B * beta``.

    Squared error has the closed form ``z(x) - B*beta/2``; ``method="bisect"``
    solves the same scalar equation numerically.  Cross-entropy with a rank-1
    head scores every class and returns the best match.
    """
    out = _scalar_output(crafted, x_hat)
    observed = batch_size * beta
    if isinstance(loss, CrossEntropy):
        if crafted.head is None:
            raise ValueError("classification recovery needs the rank-1 head")
        n_classes = out.shape[1]
        rows = np.repeat(out, n_classes, axis=0)
        grads = loss.output_grad(rows, np.arange(n_classes))
        pseudo = grads @ crafted.head
        return int(np.argmin((pseudo - observed) ** 2))
    if isinstance(loss, SquaredError) and method in ("auto", "closed"):
        return float(out[0, 0] - observed / 2.0)
    lo, hi = target_range
    return bisect_target(lambda y: float(loss.output_grad(out, np.array([y]))[0, 0]), observed, lo, hi)


def predicted_beta(x_hat: np.ndarray, y_hat, crafted: CraftedModel, loss: LossKind, batch_size: int) -> float:
    """Coefficient a lone record ``(x_hat, y_hat)`` would get under ``crafted``."""
    out = _scalar_output(crafted, x_hat)
    grad = loss.output_grad(out, np.array([y_hat]))[0]
    pseudo = float(grad @ crafted.head) if crafted.head is not None else float(grad[0])
    return pseudo / batch_size
