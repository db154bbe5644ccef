"""Malicious parameter crafting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import DenseModel, GatingNotFixedError, Layer, path_gain, propagate_box
from .config import AttackConfig, FeatureBox


@dataclass(frozen=True)
class CraftedModel:
    """A crafted model plus what the server remembers about it.

    Units ``0..n_attack-1`` of the first layer carry the hyperplanes; any
    further units are always-on mixing units whose gradients are ignored.
    """

    model: DenseModel
    gains: np.ndarray  # path gains of the attack units only
    biases: np.ndarray
    head: np.ndarray | None = None  # class projection c of a rank-1 head
    round: int = 0

    @property
    def n_attack(self) -> int:
        return self.biases.shape[0]


def draw_direction(cfg: AttackConfig, d: int, rng: np.random.Generator) -> np.ndarray:
    w = cfg.direction.sample(rng, d)
    while not np.any(w):
        w = cfg.direction.sample(rng, d)
    return w


def initial_interval(w: np.ndarray, box: FeatureBox, margin: float = 1e-6) -> tuple[float, float]:
    """Bias interval whose ends switch every in-box record off (low) and on (high)."""
    p_min, p_max = box.projection_range(w)
    pad = margin * max(p_max - p_min, abs(p_max), abs(p_min), np.finfo(float).tiny)
    return -p_max - pad, -p_min + pad


def _mixing_layer(cfg: AttackConfig, box: FeatureBox, k: int, rng) -> tuple[np.ndarray, np.ndarray]:
    rows = cfg.direction.sample(rng, (k, box.dim))
    low = np.array([box.projection_range(r)[0] for r in rows])
    return rows, -low + cfg.downstream.sample(rng, k)


def _output_range(model_layers, box: FeatureBox, row: np.ndarray) -> float:
    body = DenseModel(tuple(model_layers) + (Layer(row[None, :], np.zeros(1), False),))
    lo, hi = propagate_box(body, box.lower, box.upper)[-1]
    return float(hi[0] - lo[0])


def _calibrate_output(model_layers, box: FeatureBox, row: np.ndarray, spread: float) -> np.ndarray:
    """Rescale a scalar output row so the output varies by about ``spread`` over the box."""
    v_range = _output_range(model_layers, box, row)
    return row if v_range <= 0 else row * (spread / v_range)


def _calibrate_head(model_layers, box: FeatureBox, c: np.ndarray, u: np.ndarray, spread: float):
    """Scale ``c`` to unit range and ``u`` so head logits vary by about ``spread``.

    The scale sits in ``u``: rescaled attack rows grow with ``|c|``, so a
    large ``c`` would cost absolute digits in every slice.
    """
    c_range = float(np.max(c) - np.min(c))
    if c_range > 0:
        c = c / c_range
    v_range = _output_range(model_layers, box, u)
    if v_range > 0:
        u = u * (spread / v_range)
    return c, u


def craft_parameters(
    cfg: AttackConfig,
    w: np.ndarray,
    biases: np.ndarray,
    rng: np.random.Generator,
    n_classes: int | None = None,
    round_index: int = 0,
    drift: bool = False,
) -> CraftedModel:
    """Attack rows all equal ``w``; everything downstream is drawn fresh.

    With ``n_classes`` the output layer is the rank-1 product ``c u^T``.
    Draws that fail the fixed-gating check are retried.  ``drift`` marks a
    multi-step FedAvg round, which uses ``cfg.fedavg_output_spread``.
    """
    biases = np.asarray(biases, dtype=np.float64)
    n = biases.shape[0]
    if n < 2 or np.any(np.diff(biases) <= 0):
        raise ValueError("attack biases must be strictly increasing")
    box = cfg.feature_box
    if box is None:
        raise ValueError("attack needs a feature box")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (box.dim,):
        raise ValueError("direction does not match the feature dimension")
    k = cfg.mixing_units
    for _ in range(cfg.max_redraws):
        weight, bias = np.tile(w, (n, 1)), biases
        if k:
            mix_w, mix_b = _mixing_layer(cfg, box, k, rng)
            weight, bias = np.vstack([weight, mix_w]), np.concatenate([bias, mix_b])
        layers = [Layer(weight, bias, True)]
        width = n + k
        for h in cfg.hidden:
            layers.append(Layer(cfg.downstream.sample(rng, (h, width)), cfg.downstream.sample(rng, h), True))
            width = h
        head = None
        if n_classes is None:
            row = cfg.downstream.sample(rng, width)
            spread = cfg.fedavg_output_spread if drift else cfg.output_spread
            if spread is not None:
                row = _calibrate_output(layers, box, row, spread)
            layers.append(Layer(row[None, :], cfg.downstream.sample(rng, 1), False))
        else:
            c = cfg.downstream.sample(rng, n_classes)
            u = cfg.downstream.sample(rng, width)
            head, u = _calibrate_head(layers, box, c, u, cfg.output_spread)
            layers.append(Layer(np.outer(head, u), cfg.downstream.sample(rng, n_classes), False))
        model = DenseModel(tuple(layers))
        try:
            gains = path_gain(model, box.lower, box.upper, head=head)
        except GatingNotFixedError:
            continue
        return CraftedModel(model, gains[:n], biases, head, round_index)
    raise GatingNotFixedError(f"no fixed-gating draw after {cfg.max_redraws} attempts")
