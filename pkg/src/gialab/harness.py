"""Scoring, paired runs and seed sweeps with CSV/JSON export."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ctp import CtpConfig, epsilon_w, run_ctp, variant_for
from .data import DatasetSpec, load, with_close_pairs
from .fl import ClientConfig
from .nn import Batch, loss_from_name
from .vgia.config import AttackConfig
from .vgia.recover import SPAN_CERTIFIED
from .vgia.run import AttackResult, attack_direction, run_vgia

log = logging.getLogger(__name__)

COLUMNS = (
    "method",
    "dataset",
    "seed",
    "B",
    "d",
    "N",
    "rounds_budget",
    "n_correct",
    "n_spurious",
    "rounds_to_verifiability",
    "fp_certificates",
    "eps",
    "eps_w",
    "wall_ms",
    # extras after the fixed schema
    "cell",
    "client",
    "local_epochs",
    "local_batch",
    "n_target_correct",
    "complete",
    "status",
)
AGGREGATED = ("n_correct", "n_spurious", "rounds_to_verifiability", "fp_certificates", "eps_w", "wall_ms", "n_target_correct")
METHODS = ("vgia", "ctp")


class CertificateSoundnessError(AssertionError):
    """A span certificate from an exact-gradient run scored as spurious."""


@dataclass(frozen=True)
class RunMetrics:
    n_emitted: int
    n_correct: int
    n_spurious: int
    n_target_correct: int
    reconstruction_error_fraction: float
    false_positive_certificates: int
    rounds_to_verifiability: int | None = None
    wall_ms_per_round: float | None = None
    # matched truth index per emitted record, -1 when unmatched
    matches: tuple[int, ...] = field(default=(), repr=False)
    errors: tuple[float, ...] = field(default=(), repr=False)


def _target_ok(y_hat, y, classification: bool, tol: float) -> bool:
    if y_hat is None:
        return False
    if classification:
        return int(y_hat) == int(y)
    return abs(float(y_hat) - float(y)) < tol


def score(reconstructions, truth: Batch, tol: float = 1e-9, target_tol: float = 1e-8) -> RunMetrics:
    """Greedy nearest matching of reconstructions to truth rows by l2 distance.

    Pairs are taken in order of increasing distance, each truth row used at
    most once.  A reconstruction is correct when its match is closer than
    ``tol``; everything else is spurious.
    """
    recs = list(reconstructions)
    if not recs:
        return RunMetrics(0, 0, 0, 0, 0.0, 0)
    xh = np.stack([np.asarray(r.x_hat, dtype=np.float64) for r in recs])
    x = truth.features
    dist = np.sqrt(np.maximum(0.0, (xh * xh).sum(1)[:, None] + (x * x).sum(1)[None, :] - 2 * xh @ x.T))
    # exact distances for near pairs; the expansion above loses digits there
    near = np.argwhere(dist < max(1e-3, 1e3 * tol))
    for i, j in near:
        dist[i, j] = np.linalg.norm(xh[i] - x[j])
    order = np.argsort(dist, axis=None, kind="stable")
    match = [-1] * len(recs)
    used = np.zeros(truth.size, dtype=bool)
    left = len(recs)
    for flat in order:
        i, j = divmod(int(flat), truth.size)
        if match[i] >= 0 or used[j]:
            continue
        match[i], used[j] = j, True
        left -= 1
        if left == 0 or used.all():
            break
    classification = truth.n_classes is not None
    errors, correct, target_ok, fp = [], 0, 0, 0
    for i, (r, j) in enumerate(zip(recs, match)):
        err = float(dist[i, j]) if j >= 0 else math.inf
        errors.append(err)
        ok = err < tol
        correct += ok
        if ok and _target_ok(r.y_hat, truth.targets[j], classification, target_tol):
            target_ok += 1
        if not ok and r.certificate == SPAN_CERTIFIED:
            fp += 1
    n = len(recs)
    return RunMetrics(n, correct, n - correct, target_ok, (n - correct) / n, fp, matches=tuple(match), errors=tuple(errors))


@dataclass(frozen=True)
class Cell:
    """One experimental condition; every seed re-draws the data and the attack."""

    dataset: DatasetSpec
    attack: AttackConfig
    client: ClientConfig = field(default_factory=ClientConfig)
    loss: str = "squared-error"
    rounds: int = 25
    methods: tuple[str, ...] = ("vgia",)
    ctp_epsilon: float | None = None
    # when set, the baseline stops at ctp_epsilon_factor * epsilon_w of the drawn batch
    ctp_epsilon_factor: float | None = None
    close_pairs: int = 0
    score_tolerance: float = 1e-9
    # drifted FedAvg recoveries cannot reach the exact-gradient tolerance
    fedavg_score_tolerance: float = 1e-4
    target_tolerance: float = 1e-8
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method(s) {bad}; expected {METHODS}")
        if "ctp" in self.methods and (self.ctp_epsilon is None) == (self.ctp_epsilon_factor is None):
            raise ValueError("ctp needs exactly one of ctp_epsilon and ctp_epsilon_factor")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        c = self.client
        if not c.is_fedavg:
            return f"{self.dataset.label}-fedsgd"
        return f"{self.dataset.label}-fedavg-E{c.local_epochs}-b{c.local_batch_size or 'full'}"

    def tolerance_for(self, batch_size: int) -> float:
        if self.client.is_fedavg and self.client.steps(batch_size) > 1:
            return self.fedavg_score_tolerance
        return self.score_tolerance


@dataclass
class CellRun:
    rows: list[dict]
    traces: dict[str, list[dict]]


@dataclass
class SweepResult:
    rows: list[dict]
    traces: dict[str, list[dict]]
    failures: list[tuple[str, int, str]]

    def aggregate(self) -> list[dict]:
        return aggregate_rows(self.rows)

    def table(self) -> list[dict]:
        return self.rows + self.aggregate()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def prepare(cell: Cell, seed: int):
    """Draw the seed's batch, attack config and shared direction ``w``."""
    loaded = load(cell.dataset, draw_seed=seed)
    attack = replace(cell.attack, seed=seed)
    if attack.feature_box is None:
        attack = replace(attack, feature_box=loaded.box)
    w = attack_direction(attack, loaded.batch.dim)
    batch = loaded.batch
    if cell.close_pairs:
        batch = with_close_pairs(batch, w, cell.close_pairs, np.random.default_rng([seed, 7]), attack.feature_box)
    client = replace(cell.client, shuffle_seed=cell.client.shuffle_seed + seed)
    return batch, attack, client, w


def run_cell(cell: Cell, seed: int, record_timing: bool = True) -> CellRun:
    batch, attack, client, w = prepare(cell, seed)
    loss = loss_from_name(cell.loss)
    eps_w = epsilon_w(batch, w)
    tol = cell.tolerance_for(batch.size)
    rows, traces = [], {}
    for method in cell.methods:
        start = time.perf_counter()
        eps = None
        if method == "vgia":
            result = run_vgia(batch, attack, client, loss, cell.rounds, w=w)
        else:
            eps = cell.ctp_epsilon if cell.ctp_epsilon is not None else cell.ctp_epsilon_factor * eps_w
            ctp_cfg = CtpConfig(eps, variant_for(eps, eps_w))
            result = run_ctp(batch, ctp_cfg, attack, client, loss, cell.rounds, w=w)
        wall = 1e3 * (time.perf_counter() - start)
        m = score(result.reconstructions, batch, tol, cell.target_tolerance)
        if method == "vgia" and not (client.is_fedavg and client.steps(batch.size) > 1) and m.false_positive_certificates:
            raise CertificateSoundnessError(
                f"{m.false_positive_certificates} span-certified record(s) scored spurious on exact gradients"
            )
        rows.append(_row(cell, method, seed, batch, attack, result, m, eps, eps_w, wall if record_timing else None))
        traces[f"{cell.label}_{method}_seed{seed}"] = [
            _trace_dict(t, record_timing) for t in result.trace
        ]
    return CellRun(rows, traces)


def _trace_dict(t, record_timing: bool) -> dict:
    d = t.to_dict()
    if not record_timing:
        d["wall_ms"] = None
    return d


def _row(cell, method, seed, batch, attack, result: AttackResult, m: RunMetrics, eps, eps_w, wall) -> dict:
    c = cell.client
    return {
        "method": method if method == "vgia" else f"ctp_{variant_for(eps, eps_w)}",
        "dataset": cell.dataset.label,
        "seed": seed,
        "B": batch.size,
        "d": batch.dim,
        "N": attack.n_neurons,
        "rounds_budget": cell.rounds,
        "n_correct": m.n_correct,
        "n_spurious": m.n_spurious,
        "rounds_to_verifiability": result.rounds_to_verifiability,
        "fp_certificates": m.false_positive_certificates,
        "eps": eps,
        "eps_w": eps_w,
        "wall_ms": wall,
        "cell": cell.label,
        "client": c.mode,
        "local_epochs": c.local_epochs if c.is_fedavg else None,
        "local_batch": c.batch_size_for(batch.size) if c.is_fedavg else None,
        "n_target_correct": m.n_target_correct,
        "complete": result.complete,
        "status": "ok",
    }


def _failed_row(cell: Cell, seed: int, reason: str) -> dict:
    row = {k: None for k in COLUMNS}
    row.update(method="+".join(cell.methods), dataset=cell.dataset.label, seed=seed, cell=cell.label,
               rounds_budget=cell.rounds, client=cell.client.mode, status=f"failed: {reason}")
    return row


def _task(args):
    index, cell, seed, record_timing = args
    try:
        return index, seed, run_cell(cell, seed, record_timing), None
    except Exception as exc:  # one failed cell must not sink the sweep
        return index, seed, None, f"{type(exc).__name__}: {exc}"


def sweep(cells, seeds, workers: int = 1, record_timing: bool = True) -> SweepResult:
    """Run every (cell, seed); rows come back in grid order whatever the worker count."""
    tasks = [(i, cell, int(s), record_timing) for i, cell in enumerate(cells) for s in seeds]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    rows, traces, failures = [], {}, []
    for (index, cell, seed, _), (_, _, run, err) in zip(tasks, results):
        if err is not None:
            log.error("cell %s seed %d failed: %s", cell.label, seed, err)
            failures.append((cell.label, seed, err))
            rows.append(_failed_row(cell, seed, err))
            continue
        rows.extend(run.rows)
        traces.update(run.traces)
    return SweepResult(rows, traces, failures)


def aggregate_rows(rows) -> list[dict]:
    """Mean and population std per (cell, method) over successful seeds."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["cell"], r["method"]), []).append(r)
    out = []
    for (cell, method), members in groups.items():
        for stat in ("mean", "std"):
            agg = {k: None for k in COLUMNS}
            first = members[0]
            for k in ("method", "dataset", "B", "d", "N", "rounds_budget", "cell", "client", "local_epochs", "local_batch"):
                agg[k] = first[k]
            agg["seed"] = stat
            agg["status"] = f"{stat} of {len(members)}"
            for k in AGGREGATED:
                vals = [m[k] for m in members if m[k] is not None]
                if vals:
                    agg[k] = float(np.mean(vals) if stat == "mean" else np.std(vals))
            out.append(agg)
    return out


def format_rows(rows) -> list[list[str]]:
    return [[_fmt(r[k]) for k in COLUMNS] for r in rows]


def write_results(outdir, result: SweepResult, effective_config: dict | None = None) -> Path:
    """Write ``results.csv``, one JSON trace per run and the effective config."""
    out = Path(outdir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    path = out / "results.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(format_rows(result.table()))
    for key, trace in result.traces.items():
        (out / "traces" / f"{key}.json").write_text(json.dumps(trace, indent=1) + "\n")
    if effective_config is not None:
        (out / "config.json").write_text(json.dumps(effective_config, indent=2, sort_keys=True) + "\n")
    return path
