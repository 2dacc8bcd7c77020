"""Run configuration: one JSON document with model, data, regime, weighter,
schedule and io sections.

``model.dataset_heads`` may be omitted; it is then filled from the dataset
manifests when the run is resolved. ``regime`` accepts either explicit
optimizer tables or ``{"mode": m, "reference": true, "lr_scale": s}`` for
the reference table with learning rates multiplied by ``s``.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .data import AugmentConfig
from .model import ConfigError
from .train import WEIGHTERS, HyperparamRegime

SEED_ENV = "IVF_SEED"


@dataclass
class WeighterConfig:
    kind: str = "static"
    gamma: float = 1.0
    temperature: float = 1.0
    window: int = 500

    def __post_init__(self):
        if self.kind not in WEIGHTERS:
            raise ConfigError(f"unknown weighter {self.kind!r}")
        if self.window < 1:
            raise ConfigError("weighter window must be >= 1")


@dataclass
class Schedule:
    iterations: int = 1000
    eval_every: int = 0  # 0: only at the end
    seed: int = 0
    batch_size: int = 6

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 0:
            raise ConfigError("iterations/eval_every must be >= 0 and batch_size >= 1")


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    datasets: list[str] = field(default_factory=list)
    augment: dict = field(default_factory=dict)
    regime: dict = field(default_factory=lambda: {"mode": "all", "reference": True})
    weighter: WeighterConfig = field(default_factory=WeighterConfig)
    schedule: Schedule = field(default_factory=Schedule)
    io: dict = field(default_factory=lambda: {"output_dir": "run"})
    synth: list[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: Path | None = None) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        d = copy.deepcopy(dict(d))
        try:
            cfg = cls(
                model=d.get("model", {}),
                datasets=[str(p) for p in d.get("datasets", [])],
                augment=d.get("augment", {}),
                regime=d.get("regime", {"mode": "all", "reference": True}),
                weighter=WeighterConfig(**d.get("weighter", {})),
                schedule=Schedule(**d.get("schedule", {})),
                io=d.get("io", {"output_dir": "run"}),
                synth=d.get("synth", []),
            )
        except TypeError as e:
            raise ConfigError(str(e)) from None
        if base is not None:
            cfg.datasets = [str(_rel(base, p)) for p in cfg.datasets]
            for s in cfg.synth:
                if "root" in s:
                    s["root"] = str(_rel(base, s["root"]))
            if "output_dir" in cfg.io:
                cfg.io["output_dir"] = str(_rel(base, cfg.io["output_dir"]))
        cfg.build_regime()
        cfg.build_augment()
        return cfg

    def to_dict(self) -> dict:
        return {
            "model": copy.deepcopy(self.model),
            "datasets": list(self.datasets),
            "augment": copy.deepcopy(self.augment),
            "regime": copy.deepcopy(self.regime),
            "weighter": dataclasses.asdict(self.weighter),
            "schedule": dataclasses.asdict(self.schedule),
            "io": dict(self.io),
            "synth": copy.deepcopy(self.synth),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def build_regime(self) -> HyperparamRegime:
        r = dict(self.regime)
        try:
            if r.pop("reference", False):
                return HyperparamRegime.reference(r.pop("mode", "all"), **r)
            return HyperparamRegime.from_dict(r)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad regime section: {e}") from None

    def build_augment(self) -> AugmentConfig:
        a = dict(self.augment)
        try:
            if "size" in a and "video_short_edge" not in a:
                return AugmentConfig.desk(**a)
            return AugmentConfig(**a)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad augment section: {e}") from None

    @property
    def output_dir(self) -> Path:
        return Path(self.io.get("output_dir", "run"))


def _rel(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base.resolve() / p


def set_path(d: dict, dotted: str, value: Any) -> None:
    """Set ``d["a"]["b"] = value`` for ``dotted = "a.b"``, creating sections."""
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    cur[keys[-1]] = value


def load_config(path=None, overrides: list[str] = (), env: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults < file < IVF_SEED < ``key.path=json`` overrides."""
    env = os.environ if env is None else env
    doc: dict = {}
    base = None
    if path is not None:
        path = Path(path)
        doc = json.loads(path.read_text())
        base = path.parent
    if SEED_ENV in env:
        try:
            set_path(doc, "schedule.seed", int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_path(doc, key, value)
    return RunConfig.from_dict(doc, base)
