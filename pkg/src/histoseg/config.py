"""Run configuration: YAML file -> validated dataclasses.

The config file is optional; every field has a default. Sections:

    seed: 7
    synth:   {fractions: [0.44, 0.32, 0.24], noise: 15.0, ...}
    plan:    {rot90: 450, ..., exclusion_fraction: "4/9", batch_size: 128}
    train:   {learning_rate: 0.001, patience_epochs: 20, ...}
    kmeans:  {restarts: 3, space: rgb, pooled: false, ...}
    balance: {targets: [0.35, 0.34, 0.31], tolerance: 0.02}
    color_augment: {fraction: 0.4, max_slope: 1.0, max_offset: 40.0}
    colormap: {myocyte: [255, 0, 0], background: [255, 255, 255],
               fibrosis: [0, 0, 255]}
    threshold:
      default: background
      rules:
        - {class: fibrosis, red: [0, 160], green: [0, 190], blue: [140, 255]}

Unknown sections or keys are rejected. Fraction-valued fields accept
"a/b" strings. Command-line overrides are applied before validation.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .baselines import ThresholdRule, ThresholdRuleSet
from .data import CLASS_NAMES, DEFAULT_COLORMAP, AugmentPlan
from .errors import ConfigError
from .synth import SynthParams
from .training import TrainConfig


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 3
    restarts: int = 3
    max_iter: int = 300
    tol: float = 1e-6
    space: str = "rgb"
    pooled: bool = False
    objective: str = "squared"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tol < 0:
            raise ConfigError(f"tol must be >= 0, got {self.tol}")
        if self.space not in ("rgb", "lab"):
            raise ConfigError(f"space must be 'rgb' or 'lab', got {self.space!r}")
        if self.objective not in ("squared", "euclidean"):
            raise ConfigError(
                f"objective must be 'squared' or 'euclidean', got "
                f"{self.objective!r}"
            )


@dataclass(frozen=True)
class BalanceConfig:
    targets: tuple[float, float, float] = (0.35, 0.34, 0.31)
    tolerance: float = 0.02

    def __post_init__(self) -> None:
        t = tuple(float(v) for v in self.targets)
        if len(t) != 3 or any(v <= 0 for v in t):
            raise ConfigError("balance targets must be three positive fractions")
        if abs(sum(t) - 1.0) > 1e-6:
            raise ConfigError(f"balance targets must sum to 1, got {sum(t)}")
        if self.tolerance <= 0:
            raise ConfigError(f"tolerance must be positive, got {self.tolerance}")
        object.__setattr__(self, "targets", t)


@dataclass(frozen=True)
class ColorAugmentConfig:
    fraction: float = 0.4
    max_slope: float = 1.0
    max_offset: float = 40.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.fraction <= 0.5):
            raise ConfigError(
                f"color-augment fraction must lie in [0, 0.5], got {self.fraction}"
            )


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for every command."""

    seed: int = 0
    synth: SynthParams = SynthParams()
    plan: AugmentPlan = AugmentPlan()
    train: TrainConfig = TrainConfig()
    kmeans: KMeansConfig = KMeansConfig()
    balance: BalanceConfig = BalanceConfig()
    color_augment: ColorAugmentConfig = ColorAugmentConfig()
    colormap: dict | None = None
    threshold: ThresholdRuleSet | None = None

    def resolved_colormap(self) -> dict:
        return self.colormap if self.colormap is not None else dict(DEFAULT_COLORMAP)


def _as_fraction(value) -> float:
    if isinstance(value, str):
        parts = value.split("/")
        if len(parts) == 2:
            try:
                return float(parts[0]) / float(parts[1])
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad fraction {value!r}: {exc}") from exc
        raise ConfigError(f"bad fraction {value!r}")
    return float(value)


def _coerce(value, target_type, key: str):
    try:
        if target_type is int:
            if isinstance(value, bool) or (isinstance(value, float)
                                           and not value.is_integer()):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            return int(value)
        if target_type is float:
            return _as_fraction(value)
        if target_type is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{key} must be a boolean, got {value!r}")
            return value
        if target_type is str:
            if not isinstance(value, str):
                raise ConfigError(f"{key} must be a string, got {value!r}")
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return value


_SECTION_TYPES = {
    "synth": SynthParams,
    "plan": AugmentPlan,
    "train": TrainConfig,
    "kmeans": KMeansConfig,
    "balance": BalanceConfig,
    "color_augment": ColorAugmentConfig,
}

_TUPLE_FIELDS = {
    ("synth", "fractions"), ("synth", "palette"), ("balance", "targets"),
}


def _build_section(name: str, cls, raw: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section {name!r}")
        f = fields[key]
        if (name, key) in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key} must be a list")
            value = tuple(tuple(v) if isinstance(v, (list, tuple)) else v
                          for v in value)
        elif f.type in ("int", int):
            value = _coerce(value, int, f"{name}.{key}")
        elif f.type in ("float", float):
            value = _coerce(value, float, f"{name}.{key}")
        elif f.type in ("bool", bool):
            value = _coerce(value, bool, f"{name}.{key}")
        elif f.type in ("str", str):
            value = _coerce(value, str, f"{name}.{key}")
        kwargs[key] = value
    return cls(**kwargs)


def _class_id(name, context: str) -> int:
    if isinstance(name, int) and 0 <= name < len(CLASS_NAMES):
        return name
    if isinstance(name, str) and name in CLASS_NAMES:
        return CLASS_NAMES.index(name)
    raise ConfigError(
        f"{context}: class must be one of {CLASS_NAMES} or an id below "
        f"{len(CLASS_NAMES)}, got {name!r}"
    )


def _build_colormap(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("colormap must map class names to RGB triples")
    out = {}
    for name, color in raw.items():
        cls = _class_id(name, "colormap")
        if (not isinstance(color, (list, tuple)) or len(color) != 3
                or any(not isinstance(v, int) or not 0 <= v <= 255 for v in color)):
            raise ConfigError(
                f"colormap entry for {name!r} must be three ints in [0, 255], "
                f"got {color!r}"
            )
        key = tuple(int(v) for v in color)
        if key in out:
            raise ConfigError(f"colormap color {key} is assigned twice")
        out[key] = cls
    if len(out) != len(CLASS_NAMES):
        raise ConfigError(
            f"colormap must cover all classes {CLASS_NAMES}, got {len(out)} entries"
        )
    return out


def _build_threshold(raw: dict) -> ThresholdRuleSet:
    if not isinstance(raw, dict):
        raise ConfigError("threshold section must be a mapping")
    unknown = set(raw) - {"default", "rules"}
    if unknown:
        raise ConfigError(f"unknown keys in threshold section: {sorted(unknown)}")
    if "rules" not in raw or not isinstance(raw["rules"], list) or not raw["rules"]:
        raise ConfigError("threshold section needs a nonempty 'rules' list")
    default_cls = _class_id(raw.get("default", "background"), "threshold.default")
    rules = []
    for i, entry in enumerate(raw["rules"]):
        if not isinstance(entry, dict):
            raise ConfigError(f"threshold rule {i} must be a mapping")
        unknown = set(entry) - {"class", "red", "green", "blue"}
        if unknown:
            raise ConfigError(
                f"unknown keys in threshold rule {i}: {sorted(unknown)}"
            )
        if "class" not in entry:
            raise ConfigError(f"threshold rule {i} is missing 'class'")
        cls = _class_id(entry["class"], f"threshold rule {i}")
        ranges = {}
        for ch in ("red", "green", "blue"):
            rng = entry.get(ch, [0, 255])
            if (not isinstance(rng, (list, tuple)) or len(rng) != 2
                    or any(not isinstance(v, int) for v in rng)):
                raise ConfigError(
                    f"threshold rule {i} {ch} range must be [lo, hi] ints, "
                    f"got {rng!r}"
                )
            ranges[ch] = (rng[0], rng[1])
        rules.append(ThresholdRule(cls=cls, red=ranges["red"],
                                   green=ranges["green"], blue=ranges["blue"]))
    return ThresholdRuleSet(rules=tuple(rules), default_cls=default_cls)


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load and validate a RunConfig.

    Args:
        path: YAML file, or None for pure defaults.
        overrides: {("section", "key") or ("key",): value} applied on
            top of the file before validation (CLI flags).
    """
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded
    for section in list(raw):
        if raw[section] is None:
            raw[section] = {}
    if overrides:
        for keys, value in overrides.items():
            if len(keys) == 1:
                raw[keys[0]] = value
            else:
                section = raw.setdefault(keys[0], {})
                if not isinstance(section, dict):
                    raise ConfigError(f"section {keys[0]!r} must be a mapping")
                section[keys[1]] = value
    known = set(_SECTION_TYPES) | {"seed", "colormap", "threshold"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    if "seed" in raw:
        kwargs["seed"] = _coerce(raw["seed"], int, "seed")
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            kwargs[name] = _build_section(name, cls, raw[name])
    if "colormap" in raw:
        kwargs["colormap"] = _build_colormap(raw["colormap"])
    if "threshold" in raw:
        kwargs["threshold"] = _build_threshold(raw["threshold"])
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain nested dict of the effective configuration (for run logs)."""
    out: dict = {"seed": cfg.seed}
    for name, value in (("synth", cfg.synth), ("plan", cfg.plan),
                        ("train", cfg.train), ("kmeans", cfg.kmeans),
                        ("balance", cfg.balance),
                        ("color_augment", cfg.color_augment)):
        d = dataclasses.asdict(value)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
            if isinstance(v, np.floating):
                d[k] = float(v)
        out[name] = d
    out["colormap"] = {CLASS_NAMES[cls]: list(color)
                       for color, cls in cfg.resolved_colormap().items()}
    if cfg.threshold is not None:
        out["threshold"] = {
            "default": CLASS_NAMES[cfg.threshold.default_cls],
            "rules": [{"class": CLASS_NAMES[r.cls], "red": list(r.red),
                       "green": list(r.green), "blue": list(r.blue)}
                      for r in cfg.threshold.rules],
        }
    return out
