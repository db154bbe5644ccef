"""Slice vectors from rescaled attack-layer gradients."""

from __future__ import annotations

import numpy as np

from ..nn import GradientReport
from .search import SliceRecord


class DegenerateGainError(ArithmeticError):
    pass


def rescaled_rows(report: GradientReport, gains: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``dL/dW_i / g_i`` and ``dL/db_i / g_i`` for every attack unit."""
    gains = np.asarray(gains, dtype=np.float64)
    if np.any(np.abs(gains) < 1e-300):
        raise DegenerateGainError("path gain too close to zero to rescale")
    n = gains.shape[0]
    return report.attack_weight[:n] / gains[:, None], report.attack_bias[:n] / gains


def compute_slices(
    report: GradientReport,
    gains: np.ndarray,
    biases: np.ndarray,
    round_index: int = 0,
    zero_tolerance: float = 1e-12,
    source=None,
) -> list[SliceRecord]:
    """One record per pair of consecutive units (``N - 1`` in total).

    ``s_k`` is the difference of rescaled weight rows ``k+1`` and ``k``;
    ``beta_k`` the matching difference of rescaled bias gradients.
    """
    rows, bias_rows = rescaled_rows(report, gains)
    biases = np.asarray(biases, dtype=np.float64)
    if rows.shape[0] != biases.shape[0]:
        raise ValueError("gradient rows and biases disagree in count")
    s = rows[1:] - rows[:-1]
    beta = bias_rows[1:] - bias_rows[:-1]
    row_scale = float(np.max(np.abs(rows)))
    beta_scale = float(np.max(np.abs(bias_rows)))
    zero_level = zero_tolerance * max(1.0, row_scale)
    return [
        SliceRecord(
            float(biases[k]), float(biases[k + 1]), s[k], float(beta[k]), round_index, zero_level, row_scale, beta_scale, source
        )
        for k in range(biases.shape[0] - 1)
    ]


def observation(report: GradientReport, unit: int) -> np.ndarray:
    """Gradient-ratio observation ``dL/dW_i / dL/db_i`` of one attack unit."""
    db = report.attack_bias[unit]
    if db == 0:
        raise ZeroDivisionError(f"unit {unit} has a zero bias gradient")
    return report.attack_weight[unit] / db
