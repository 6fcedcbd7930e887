"""Run configuration: one JSON document holding every tunable.

Defaults are the published hyperparameters.  Loading rejects unknown keys
and range-checks every value, so a typo fails loudly instead of silently
falling back to a default.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

from .errors import ConfigurationError


@dataclass
class PhantomSection:
    size: int = 256
    contrast: float = 0.4
    noise: float = 0.03
    counts: List[int] = field(default_factory=lambda: [50, 50, 50, 50])


@dataclass
class PreprocessSection:
    size: int = 256
    sigma: float = 0.5
    bins: int = 256
    frame: str = "loose"


@dataclass
class SegSection:
    input_size: int = 256
    base_filters: int = 32
    dropout: float = 0.5
    lambda_dice: float = 150.0
    reconstruction_loss: str = "dice"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 150
    eps: float = 1e-7
    threshold: float = 0.5


@dataclass
class ShapeSection:
    input_size: int = 64
    dropout: float = 0.5
    lr: float = 1e-3
    momentum: float = 0.9
    alpha: float = 0.9
    rms_eps: float = 1e-7
    batch_size: int = 16
    epochs: int = 50
    folds: int = 5
    eps: float = 1e-7


@dataclass
class RunConfig:
    seed: int = 0
    phantom: PhantomSection = field(default_factory=PhantomSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    seg: SegSection = field(default_factory=SegSection)
    shape: ShapeSection = field(default_factory=ShapeSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def training_identity(self, section: str) -> dict:
        """The part of the config a checkpoint of ``section`` depends on.

        ``epochs`` is left out so a run can be resumed with a longer schedule.
        """
        doc = asdict(getattr(self, section))
        doc.pop("epochs", None)
        return {"seed": self.seed, section: doc}


_SECTIONS = {"phantom": PhantomSection, "preprocess": PreprocessSection,
             "seg": SegSection, "shape": ShapeSection}

# (low, high, low_inclusive, high_inclusive); None means unbounded
_RANGES: Dict[str, Tuple[Optional[float], Optional[float], bool, bool]] = {
    "seed": (0, 2**64 - 1, True, True),
    "phantom.size": (64, 4096, True, True),
    "phantom.contrast": (0, 1, False, True),
    "phantom.noise": (0, 1, True, False),
    "preprocess.size": (8, 4096, True, True),
    "preprocess.sigma": (0, None, False, False),
    "preprocess.bins": (2, 65536, True, True),
    "seg.input_size": (4, 4096, True, True),
    "seg.base_filters": (1, 1024, True, True),
    "seg.dropout": (0, 1, True, False),
    "seg.lambda_dice": (0, None, True, False),
    "seg.lr": (0, None, False, False),
    "seg.beta1": (0, 1, True, False),
    "seg.beta2": (0, 1, True, False),
    "seg.adam_eps": (0, None, False, False),
    "seg.batch_size": (1, None, True, False),
    "seg.epochs": (0, None, True, False),
    "seg.eps": (0, 1, False, False),
    "seg.threshold": (0, 1, False, False),
    "shape.input_size": (16, 4096, True, True),
    "shape.dropout": (0, 1, True, False),
    "shape.lr": (0, None, False, False),
    "shape.momentum": (0, 1, True, False),
    "shape.alpha": (0, 1, True, False),
    "shape.rms_eps": (0, None, False, False),
    "shape.batch_size": (1, None, True, False),
    "shape.epochs": (0, None, True, False),
    "shape.folds": (2, None, True, False),
    "shape.eps": (0, 1, False, False),
}

_CHOICES = {"preprocess.frame": ("tight", "loose", "none"), "seg.reconstruction_loss": ("dice", "l1")}


def _check_type(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigurationError(f"{key}: booleans are not accepted")
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigurationError(f"{key}: expected a list of integers, got {value!r}")
    return value


def _check_range(key: str, value: Any) -> None:
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigurationError(f"{key}: must be one of {', '.join(_CHOICES[key])}, got {value!r}")
    if key not in _RANGES:
        return
    lo, hi, lo_inc, hi_inc = _RANGES[key]
    if lo is not None and (value < lo or (value == lo and not lo_inc)):
        raise ConfigurationError(f"{key}: {value} is below the allowed range")
    if hi is not None and (value > hi or (value == hi and not hi_inc)):
        raise ConfigurationError(f"{key}: {value} is above the allowed range")


def _build_section(name: str, cls, doc: Any):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{name}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigurationError(f"{name}: unknown key(s) {', '.join(unknown)}")
    default = cls()
    values = {}
    for key, value in doc.items():
        full = f"{name}.{key}"
        value = _check_type(full, value, getattr(default, key))
        _check_range(full, value)
        values[key] = value
    return cls(**values)


def _cross_checks(cfg: RunConfig) -> None:
    if len(cfg.phantom.counts) != 4 or min(cfg.phantom.counts) < 0:
        raise ConfigurationError("phantom.counts: need four nonnegative class counts")
    if cfg.phantom.noise >= cfg.phantom.contrast:
        raise ConfigurationError("phantom.noise must be below phantom.contrast")
    s = cfg.seg.input_size
    if s & (s - 1):
        raise ConfigurationError(f"seg.input_size must be a power of two, got {s}")
    from .shapecnn import ClassifierSpec

    ClassifierSpec(input_size=cfg.shape.input_size)  # raises unless the trace ends at 1x1


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be a JSON object")
    unknown = sorted(set(doc) - {"seed", *_SECTIONS})
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s) {', '.join(unknown)}")
    kw: Dict[str, Any] = {}
    if "seed" in doc:
        kw["seed"] = _check_type("seed", doc["seed"], 0)
        _check_range("seed", kw["seed"])
    for name, cls in _SECTIONS.items():
        if name in doc:
            kw[name] = _build_section(name, cls, doc[name])
    cfg = RunConfig(**kw)
    _cross_checks(cfg)
    return cfg


def load_config(path: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Read ``path`` (defaults when None); ``seed`` overrides the stored seed."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if seed is not None:
        doc = {**doc, "seed": seed}
    return config_from_dict(doc)
