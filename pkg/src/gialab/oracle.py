"""Ground-truth occupancy trials for the isolation certificate.

A trial places ``m`` residents inside one parent slab, splits the slab into
children according to a chosen occupancy pattern, and compares the span
test's verdict with the truth "no child holds two or more residents".
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .nn import Batch, LossKind, SquaredError, batch_gradient
from .vgia.config import AttackConfig, FeatureBox
from .vgia.isolation import span_residual
from .vgia.params import craft_parameters
from .vgia.slices import compute_slices


@dataclass(frozen=True)
class Trial:
    pattern: tuple[int, ...]
    seed: int
    truth: bool
    verdict: bool
    residual: float

    @property
    def agrees(self) -> bool:
        return self.truth == self.verdict


def patterns(m: int, q: int):
    """Every way to drop ``m`` ordered residents into the ``q - 1`` children of ``q`` probes."""
    return itertools.combinations_with_replacement(range(q - 1), m)


def occupancy_trial(pattern, q: int, seed: int, cfg: AttackConfig | None = None, loss: LossKind | None = None,
                    d: int = 16, outsiders: int = 4) -> Trial:
    cfg = cfg or AttackConfig()
    loss = loss or SquaredError()
    pattern = np.asarray(pattern)
    m = len(pattern)
    rng = np.random.default_rng([seed, m, q, *pattern.tolist()])
    box = FeatureBox.uniform(d)
    cfg = replace(cfg, feature_box=box, n_neurons=max(cfg.min_probes, q))
    w = rng.normal(0.0, 1e-2, d)
    x = rng.uniform(0.0, 1.0, (m + outsiders, d))
    p = x @ w
    order = np.argsort(p)
    below = outsiders // 2
    res = order[below : below + m]
    pr = p[res]
    # parent slab (lo, hi] holds exactly the residents
    lo = p[order[below - 1]] + rng.uniform(0.2, 0.8) * (pr[0] - p[order[below - 1]]) if below else pr[0] - 1e-3
    above = p[order[below + m]] if below + m < len(p) else pr[-1] + 1e-3
    hi = pr[-1] + rng.uniform(0.2, 0.8) * (above - pr[-1])
    # child k is (t_{k+1}, t_k] with t_0 = hi; residents descend so child 0 is the top
    desc = pr[::-1]
    cuts = [hi]
    for k in range(q - 2):
        inside, later = desc[pattern == k], desc[pattern > k]
        upper = inside.min() if inside.size else cuts[-1]
        lower = later.max() if later.size else lo
        cuts.append(lower + rng.uniform(0.2, 0.8) * (upper - lower))
    cuts.append(lo)
    y = rng.normal(size=len(p))
    batch = Batch(x, y)

    def slices(biases):
        crafted = craft_parameters(cfg, w, biases, rng)
        return compute_slices(batch_gradient(crafted.model, batch, loss), crafted.gains, biases, 0, cfg.zero_tolerance)

    parent = slices(np.array([-hi, -lo]))[0]
    kids = [k.s for k in slices(-np.array(cuts)) if np.max(np.abs(k.s)) > k.zero_level]
    counts = np.bincount(pattern, minlength=q - 1)
    residual = span_residual(parent.s, kids)
    return Trial(tuple(pattern.tolist()), seed, bool(np.all(counts <= 1)), residual < cfg.span_tolerance, residual)


def occupancy_sweep(max_m: int, max_q: int, seeds, cfg: AttackConfig | None = None, min_q: int = 3):
    """All patterns with ``1 <= m <= max_m`` residents and ``min_q <= q <= max_q`` probes."""
    trials = []
    for m in range(1, max_m + 1):
        for q in range(min_q, max_q + 1):
            for pat in patterns(m, q):
                trials.extend(occupancy_trial(pat, q, s, cfg) for s in seeds)
    return trials
