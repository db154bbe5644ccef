"""Experiment configuration: sectioned key-value files with typed values.

Values are Python literals (``1e-8``, ``[1, 2]``, ``("normal", 0, 0.01)``);
bare words such as ``fedavg`` are read as strings, ``true``/``false``/``none``
as their obvious meanings.  Every key is checked against a fixed table so a
typo fails loudly with its ``section.key`` path.
"""

from __future__ import annotations

import ast
import configparser
import itertools
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetSpec
from .fl import ClientConfig
from .harness import Cell
from .nn import LOSSES
from .vgia.config import AttackConfig, FeatureBox


class ConfigError(ValueError):
    pass


def _names(cls, drop=()) -> tuple[str, ...]:
    return tuple(f.name for f in fields(cls) if f.name not in drop)


RUN_KEYS = (
    "rounds",
    "seeds",
    "outdir",
    "methods",
    "close_pairs",
    "score_tolerance",
    "fedavg_score_tolerance",
    "target_tolerance",
    "record_timing",
    "name",
)
SECTIONS = {
    "dataset": _names(DatasetSpec),
    "model": ("n_neurons", "hidden", "loss"),
    "client": _names(ClientConfig),
    "attack": _names(AttackConfig, drop=("n_neurons", "hidden", "seed")),
    "ctp": ("epsilon", "epsilon_factor"),
    "run": RUN_KEYS,
    "sweep": ("workers",),
}
# sweep axes look like "client.local_epochs = [1, 2, 3, 5]"
SWEEPABLE = ("dataset", "model", "client", "attack", "ctp", "run")

_WORDS = {"true": True, "false": False, "none": None, "null": None}


def parse_value(text: str):
    text = text.strip()
    if text.lower() in _WORDS:
        return _WORDS[text.lower()]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _check_key(section: str, key: str):
    if section == "sweep" and "." in key:
        head, tail = key.split(".", 1)
        if head not in SWEEPABLE:
            raise ConfigError(f"unknown sweep axis sweep.{key}")
        _check_key(head, tail)
        return
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SECTIONS[section]:
        raise ConfigError(f"unknown key {section}.{key}")


def read_config_text(text: str) -> dict[str, dict]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}".splitlines()[0]) from None
    raw = {}
    for section in parser.sections():
        raw[section] = {}
        for key, value in parser.items(section):
            _check_key(section, key)
            raw[section][key] = parse_value(value)
    return raw


def apply_overrides(raw: dict[str, dict], overrides) -> dict[str, dict]:
    out = {s: dict(v) for s, v in raw.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        path, value = item.split("=", 1)
        if "." not in path:
            raise ConfigError(f"override {item!r} is not section.key=value")
        section, key = path.strip().split(".", 1)
        _check_key(section, key)
        out.setdefault(section, {})[key] = parse_value(value)
    return out


def _box(value, d: int) -> FeatureBox | None:
    if value is None:
        return None
    try:
        lo, hi = value
    except (TypeError, ValueError):
        raise ConfigError("attack.feature_box must be [lower, upper]") from None
    lo = [lo] * d if isinstance(lo, (int, float)) else lo
    hi = [hi] * d if isinstance(hi, (int, float)) else hi
    return FeatureBox(lo, hi)


def _build(section: str, cls, values: dict, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    attack: AttackConfig
    client: ClientConfig
    loss: str = "squared-error"
    ctp: dict | None = None
    rounds: int = 25
    seeds: tuple[int, ...] = (0,)
    outdir: str = "results"
    methods: tuple[str, ...] = ("vgia",)
    close_pairs: int = 0
    score_tolerance: float = 1e-9
    fedavg_score_tolerance: float = 1e-4
    target_tolerance: float = 1e-8
    record_timing: bool = True
    name: str | None = None
    workers: int | None = None
    grid: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_raw(cls, raw: dict[str, dict]) -> "ExperimentConfig":
        ds = _build("dataset", DatasetSpec, raw.get("dataset", {}))
        model = dict(raw.get("model", {}))
        loss = model.pop("loss", "classification" if ds.is_classification else "regression")
        if loss == "classification":
            loss = "cross-entropy"
        elif loss == "regression":
            loss = "squared-error"
        if loss not in LOSSES:
            raise ConfigError(f"model.loss must be one of {sorted(LOSSES)}, got {loss!r}")
        attack_vals = dict(raw.get("attack", {}))
        d = ds.d if ds.source == "synthetic" else None
        if "feature_box" in attack_vals:
            if d is None:
                raise ConfigError("attack.feature_box needs a synthetic dataset; csv data derives its own box")
            attack_vals["feature_box"] = _box(attack_vals["feature_box"], d)
        attack = _build("attack", AttackConfig, {**attack_vals, **model})
        client = _build("client", ClientConfig, raw.get("client", {}))
        run = dict(raw.get("run", {}))
        if "seeds" in run:
            s = run["seeds"]
            run["seeds"] = tuple(range(s)) if isinstance(s, int) else tuple(int(v) for v in s)
        if "methods" in run:
            m = run["methods"]
            run["methods"] = (m,) if isinstance(m, str) else tuple(m)
        sweep = dict(raw.get("sweep", {}))
        workers = sweep.pop("workers", None)
        for axis, values in sweep.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"sweep.{axis} must be a non-empty list")
        ctp = raw.get("ctp")
        if ctp is not None and ("epsilon" in ctp) == ("epsilon_factor" in ctp):
            raise ConfigError("[ctp] needs exactly one of epsilon and epsilon_factor")
        try:
            cfg = cls(ds, attack, client, loss, ctp, workers=workers, grid=sweep, raw=raw, **run)
        except TypeError as exc:
            raise ConfigError(f"[run] {exc}") from None
        if cfg.rounds < 1:
            raise ConfigError("run.rounds must be >= 1")
        if "ctp" in cfg.methods and cfg.ctp is None:
            raise ConfigError("run.methods includes ctp but there is no [ctp] section")
        cfg.cells()  # validate every grid point up front
        return cfg

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=(int(seed),))

    def cells(self, methods=None) -> list[Cell]:
        methods = tuple(methods or self.methods)
        if not self.grid:
            return [self._cell(self.raw, methods)]
        axes = list(self.grid)
        cells = []
        for combo in itertools.product(*(self.grid[a] for a in axes)):
            raw = {s: dict(v) for s, v in self.raw.items()}
            for axis, value in zip(axes, combo):
                section, key = axis.split(".", 1)
                raw.setdefault(section, {})[key] = value
            raw.pop("sweep", None)
            sub = ExperimentConfig.from_raw(raw)
            label = ",".join(f"{a}={v}" for a, v in zip(axes, combo))
            cells.append(replace(sub._cell(raw, methods), name=f"{sub.dataset.label}[{label}]"))
        return cells

    def _cell(self, raw, methods) -> Cell:
        ctp = self.ctp or {}
        if "ctp" in methods and not ctp:
            raise ConfigError("ctp runs need a [ctp] section with epsilon or epsilon_factor")
        try:
            return Cell(
                self.dataset,
                self.attack,
                self.client,
                self.loss,
                self.rounds,
                methods,
                ctp.get("epsilon") if "ctp" in methods else None,
                ctp.get("epsilon_factor") if "ctp" in methods else None,
                self.close_pairs,
                self.score_tolerance,
                self.fedavg_score_tolerance,
                self.target_tolerance,
                self.name,
            )
        except ValueError as exc:
            raise ConfigError(f"[run] {exc}") from None

    def to_dict(self) -> dict:
        """Fully resolved settings, JSON-ready."""

        def plain(obj):
            if hasattr(obj, "tolist"):
                return obj.tolist()
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if hasattr(obj, "__dataclass_fields__"):
                return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
            return obj

        attack = plain(self.attack)
        return {
            "dataset": plain(self.dataset),
            "model": {"n_neurons": self.attack.n_neurons, "hidden": list(self.attack.hidden), "loss": self.loss},
            "client": plain(self.client),
            "attack": {k: v for k, v in attack.items() if k not in ("n_neurons", "hidden", "seed")},
            "ctp": plain(self.ctp),
            "run": {k: plain(getattr(self, k)) for k in RUN_KEYS},
            "sweep": {"workers": self.workers, **plain(self.grid)},
        }


def load_config(path=None, overrides=(), text: str | None = None) -> ExperimentConfig:
    if text is None:
        if path is None:
            raise ConfigError("no config given")
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return ExperimentConfig.from_raw(apply_overrides(read_config_text(text), overrides))
