"""Attack configuration and parameter distributions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Distribution:
    """``normal(mean, std)`` or ``uniform(low, high)``."""

    kind: str = "uniform"
    a: float = 0.01
    b: float = 0.02

    def __post_init__(self):
        if self.kind not in ("normal", "uniform"):
            raise ValueError(f"unknown distribution {self.kind!r}")
        if self.kind == "uniform" and not self.a < self.b:
            raise ValueError("uniform distribution needs low < high")
        if self.kind == "normal" and self.b <= 0:
            raise ValueError("normal distribution needs a positive std")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "normal":
            return rng.normal(self.a, self.b, size=shape)
        return rng.uniform(self.a, self.b, size=shape)

    @classmethod
    def parse(cls, value) -> "Distribution":
        if isinstance(value, Distribution):
            return value
        kind, a, b = value
        return cls(str(kind), float(a), float(b))

    def as_list(self) -> list:
        return [self.kind, self.a, self.b]


@dataclass(frozen=True)
class FeatureBox:
    """Known per-feature bounds ``lower <= x <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=np.float64)
        hi = np.array(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, d: int, low: float = 0.0, high: float = 1.0) -> "FeatureBox":
        return cls(np.full(d, low), np.full(d, high))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x: np.ndarray) -> bool:
        x = np.atleast_2d(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def projection_range(self, w: np.ndarray) -> tuple[float, float]:
        """Exact min/max of ``w @ x`` over the box."""
        wp, wn = np.clip(w, 0, None), np.clip(w, None, 0)
        return float(wp @ self.lower + wn @ self.upper), float(wp @ self.upper + wn @ self.lower)


@dataclass(frozen=True)
class AttackConfig:
    n_neurons: int = 128
    hidden: tuple[int, ...] = (16,)
    direction: Distribution = field(default_factory=lambda: Distribution("normal", 0.0, 1e-2))
    downstream: Distribution = field(default_factory=lambda: Distribution("uniform", 0.01, 0.02))
    feature_box: FeatureBox | None = None
    span_tolerance: float = 1e-8
    zero_tolerance: float = 1e-12
    fedavg_residual_threshold: float = 1e-3
    fedavg_zero_threshold: float = 1e-4
    # relative mismatch allowed when a certified resident's coefficient in
    # the parent round is predicted from its recovered target
    multiplicity_tolerance: float = 1e-6
    fedavg_multiplicity_tolerance: float | None = None
    # always-on first-layer units with fresh random directions; they let the
    # output depend on more than the projection w @ x
    mixing_units: int = 8
    # how far the model output (or the rank-1 logit scale) swings over the
    # feature box; large swings make collided residents' coefficients drift apart
    output_spread: float = 4.0
    # multi-step FedAvg drift grows with the output residual; None keeps the raw draw
    fedavg_output_spread: float | None = None
    min_probes: int = 3
    correctness_tolerance: float = 1e-9
    beta_floor: float = 1e-12
    # certified children with |beta| below this fraction of the round's largest
    # rescaled bias gradient are re-probed instead of divided
    min_relative_beta: float = 1e-4
    box_margin: float = 1e-6
    target_range: tuple[float, float] = (-1e6, 1e6)
    max_redraws: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "direction", Distribution.parse(self.direction))
        object.__setattr__(self, "downstream", Distribution.parse(self.downstream))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "target_range", tuple(float(v) for v in self.target_range))
        if self.min_probes < 3:
            raise ValueError("min_probes must be >= 3")
        if self.n_neurons < self.min_probes:
            raise ValueError("need at least min_probes attack neurons")
        for name in (
            "span_tolerance",
            "zero_tolerance",
            "fedavg_residual_threshold",
            "fedavg_zero_threshold",
            "multiplicity_tolerance",
            "correctness_tolerance",
            "beta_floor",
            "output_spread",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.fedavg_output_spread is not None and not self.fedavg_output_spread > 0:
            raise ValueError("fedavg_output_spread must be positive or None")
        if self.mixing_units < 0:
            raise ValueError("mixing_units must be >= 0")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
