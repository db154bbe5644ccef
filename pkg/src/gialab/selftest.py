"""Quick built-in checks behind ``gialab selftest``."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import gen_synthetic
from .nn import Batch, DenseModel, Layer, SquaredError, batch_gradient, batch_loss, forward_rows
from .oracle import occupancy_sweep
from .vgia.config import AttackConfig, FeatureBox
from .vgia.params import craft_parameters
from .vgia.run import run_vgia
from .vgia.slices import compute_slices


def random_model(rng, d: int, widths, out: int = 1) -> DenseModel:
    layers, fan_in = [], d
    for h in widths:
        layers.append(Layer(rng.normal(0, 1 / np.sqrt(fan_in), (h, fan_in)), rng.normal(0, 0.1, h), True))
        fan_in = h
    layers.append(Layer(rng.normal(0, 1 / np.sqrt(fan_in), (out, fan_in)), rng.normal(0, 0.1, out), False))
    return DenseModel(tuple(layers))


def finite_difference_error(model: DenseModel, batch: Batch, loss, h: float = 1e-3) -> float:
    """Worst relative gap between the analytic gradient and a five-point stencil."""
    grad = batch_gradient(model, batch, loss).params()
    params = [np.array(p) for p in model.params()]
    worst = 0.0
    for k, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            vals = []
            for step in (2, 1, -1, -2):
                q = [a.copy() for a in params]
                q[k][idx] += step * h
                vals.append(batch_loss(model.with_params(q), batch, loss))
            fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            a = grad[k][idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst


def kink_margin(model: DenseModel, x: np.ndarray) -> float:
    _, pre, _ = forward_rows(model, x)
    return min(float(np.min(np.abs(a))) for a, layer in zip(pre, model.layers) if layer.relu)


def check_gradient(seed: int = 0, instances: int = 3):
    rng = np.random.default_rng([seed, 11])
    worst = 0.0
    done = 0
    while done < instances:
        d, n = int(rng.integers(2, 9)), int(rng.integers(2, 13))
        model = random_model(rng, d, (n, 6))
        x = rng.uniform(-1, 1, (4, d))
        if kink_margin(model, x) < 1e-2:
            continue
        worst = max(worst, finite_difference_error(model, Batch(x, rng.normal(size=4)), SquaredError()))
        done += 1
    return worst < 1e-6, f"max relative error {worst:.1e}"


def check_empty_slab(cfg: AttackConfig, seed: int = 0):
    """Units whose thresholds share one gap between records give zero slices."""
    rng = np.random.default_rng([seed, 12])
    d = 6
    box = FeatureBox.uniform(d)
    cfg = replace(cfg, feature_box=box, n_neurons=6)
    batch = gen_synthetic(d, 16, [seed, 12])
    w = rng.normal(0, 1e-2, d)
    p = np.sort(batch.features @ w)
    k = int(np.argmax(np.diff(p)))
    gap_lo, gap_hi = p[k], p[k + 1]
    biases = -np.linspace(gap_hi, gap_lo, 8)[1:-1]
    crafted = craft_parameters(cfg, w, biases, rng)
    slices = compute_slices(batch_gradient(crafted.model, batch, SquaredError()), crafted.gains, biases)
    peak = max(float(np.max(np.abs(s.s))) for s in slices)
    return peak < 1e-12, f"max |s| {peak:.1e}"


def check_soundness(cfg: AttackConfig, seed: int = 0):
    """Span verdicts against ground-truth occupancy for small patterns."""
    trials = occupancy_sweep(3, 4, range(seed, seed + 5), cfg)
    wrong = [t for t in trials if not t.agrees]
    false_cert = sum(1 for t in wrong if t.verdict)
    return not wrong, f"{len(trials) - len(wrong)}/{len(trials)} verdicts agree, {false_cert} false certificates"


def check_end_to_end(cfg: AttackConfig, seed: int = 0):
    d, b = 4, 8
    batch = gen_synthetic(d, b, [seed, 13])
    cfg = replace(cfg, feature_box=FeatureBox.uniform(d), n_neurons=16, seed=seed)
    result = run_vgia(batch, cfg, rounds=25)
    x_err = t_err = 0.0
    hits = 0
    for rec in result.reconstructions:
        dist = np.linalg.norm(batch.features - rec.x_hat, axis=1)
        j = int(np.argmin(dist))
        hits += dist[j] < 1e-9
        x_err = max(x_err, float(dist[j]))
        t_err = max(t_err, abs(float(rec.y_hat) - float(batch.targets[j])))
    ok = hits == b and len(result.reconstructions) == b and x_err < 1e-9 and t_err < 1e-8
    return ok, f"{hits}/{b} recovered, input err {x_err:.1e}, target err {t_err:.1e}"


def run_selftest(cfg: AttackConfig | None = None, seed: int = 0):
    cfg = cfg or AttackConfig()
    checks = [
        ("gradient finite differences", lambda: check_gradient(seed)),
        ("empty slab gives zero slice", lambda: check_empty_slab(cfg, seed)),
        ("certificate soundness (occupancy oracle)", lambda: check_soundness(cfg, seed)),
        ("B=8 end-to-end recovery", lambda: check_end_to_end(cfg, seed)),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
