"""One honest victim client talking to a (malicious) server.

FedSGD clients return the exact full-batch gradient.  FedAvg clients run
``local_epochs`` passes of mini-batch SGD and return the parameter delta;
:func:`pseudo_gradient` turns that delta back into a gradient proxy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Batch, DenseModel, GradientReport, LossKind, batch_gradient

FEDSGD = "fedsgd-fullbatch"
FEDAVG = "fedavg"


@dataclass(frozen=True)
class ClientConfig:
    mode: str = FEDSGD
    local_epochs: int = 1
    local_batch_size: int | None = None  # None means the whole local dataset
    # a power of two, so the server undoes the step size without rounding
    learning_rate: float = 2.0**-13
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.mode not in (FEDSGD, FEDAVG):
            raise ValueError(f"unknown client mode {self.mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.local_batch_size is not None and self.local_batch_size < 1:
            raise ValueError("local_batch_size must be >= 1")

    def batch_size_for(self, n: int) -> int:
        b = n if self.local_batch_size is None else self.local_batch_size
        if b > n:
            raise ValueError(f"local_batch_size {b} exceeds the {n} local records")
        return b

    def steps(self, n: int) -> int:
        """Number of local SGD steps a FedAvg round takes on ``n`` records."""
        if self.mode == FEDSGD:
            return 1
        b = self.batch_size_for(n)
        return self.local_epochs * -(-n // b)

    @property
    def is_fedavg(self) -> bool:
        return self.mode == FEDAVG


@dataclass(frozen=True)
class RoundMessageDown:
    model: DenseModel
    round_index: int


@dataclass(frozen=True)
class RoundMessageUp:
    round_index: int
    gradient: GradientReport | None = None
    delta: GradientReport | None = None
    steps: int = 1
    # mini-batch order per epoch, kept for the experiment log
    schedule: tuple[tuple[int, ...], ...] = field(default=(), repr=False)


def epoch_orders(n: int, cfg: ClientConfig, round_index: int) -> list[np.ndarray]:
    """Fixed per-epoch permutations derived from the shuffle seed and round."""
    rng = np.random.default_rng([cfg.shuffle_seed, round_index])
    return [rng.permutation(n) for _ in range(cfg.local_epochs)]


def client_round(msg: RoundMessageDown, data: Batch, cfg: ClientConfig, loss: LossKind) -> RoundMessageUp:
    if not cfg.is_fedavg:
        return RoundMessageUp(msg.round_index, gradient=batch_gradient(msg.model, data, loss))

    bs = cfg.batch_size_for(data.size)
    eta = cfg.learning_rate
    params = [np.array(p) for p in msg.model.params()]
    # accumulate the applied updates directly: one step gives exactly -eta * grad
    delta = [np.zeros_like(p) for p in params]
    model = msg.model
    steps = 0
    schedule = []
    for order in epoch_orders(data.size, cfg, msg.round_index):
        schedule.append(tuple(int(i) for i in order))
        for start in range(0, data.size, bs):
            # sorted within the mini-batch so a full-batch step sums like FedSGD
            grad = batch_gradient(model, data.subset(np.sort(order[start : start + bs])), loss)
            for p, d, g in zip(params, delta, grad.params()):
                step = -eta * g
                d += step
                p += step
            model = model.with_params(params)
            params = [np.array(p) for p in model.params()]
            steps += 1
    return RoundMessageUp(
        msg.round_index, delta=GradientReport.from_params(delta), steps=steps, schedule=tuple(schedule)
    )


def pseudo_gradient(up: RoundMessageUp, cfg: ClientConfig) -> GradientReport:
    """Attacker-side gradient proxy ``-delta / (eta * steps)``; FedSGD passes through."""
    if up.gradient is not None:
        return up.gradient
    if up.delta is None:
        raise ValueError("message carries neither a gradient nor a delta")
    if up.steps < 1:
        raise ValueError("cannot normalise a delta produced by zero local steps")
    denom = cfg.learning_rate * up.steps
    return GradientReport.from_params([-d / denom for d in up.delta.params()])
