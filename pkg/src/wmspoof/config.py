"""Experiment configuration: JSON schema, defaults and validation.

Missing fields take the documented defaults (delta=3, gamma=0.5, k=1,
alpha=4.5, z-threshold 4.0).  Validation errors carry the dotted path of the
offending key, e.g. ``watermark.gamma``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional, Union

from .errors import ConfigError
from .textmodel import MODES
from .watermark import SCHEMES, WatermarkConfig

DEFAULT_KEY = 0x5EED_CAFE_F00D_0001


def parse_key(value: Union[str, int]) -> int:
    """64-bit key from an int or a hex string (``0x`` prefix optional)."""
    if isinstance(value, bool):
        raise ConfigError("watermark.key", "must be a hex string or integer")
    if isinstance(value, int):
        key = value
    else:
        try:
            key = int(str(value), 16)
        except ValueError:
            raise ConfigError("watermark.key", f"not a hex string: {value!r}") from None
    if not 0 <= key < 2**64:
        raise ConfigError("watermark.key", "must fit in 64 bits")
    return key


def format_key(key: int) -> str:
    return f"0x{key:016x}"


@dataclass
class ModelSpec:
    order: int = 2
    smoothing: float = 0.1


@dataclass
class SyntheticSpec:
    n_lines: int = 16000
    min_len: int = 20
    max_len: int = 60
    n_words: int = 120
    branching: int = 32
    unigram_share: float = 0.4
    zipf: float = 0.8
    concentration: float = 1.0
    seed: int = 0  # the language itself; the master seed only drives sampling


@dataclass
class WatermarkSpec:
    scheme: str = "greenlist"
    key: str = format_key(DEFAULT_KEY)
    gamma: float = 0.5
    delta: float = 3.0
    context_width: int = 1
    tournament_depth: int = 4

    def build(self) -> WatermarkConfig:
        return WatermarkConfig(
            self.scheme, parse_key(self.key), self.gamma, self.delta, self.context_width, self.tournament_depth
        )


@dataclass
class DistillSpec:
    n_sequences: int = 10000
    length: int = 64
    mix: float = 0.3
    prompt_length: int = 4
    temperature: float = 1.0
    train_on_prompt: bool = False


@dataclass
class ExtractSpec:
    orders: list = field(default_factory=lambda: [1, 2])
    cap: int = 5000
    threshold: float = 0.05
    min_support: int = 5


@dataclass
class EvalSpec:
    n_positive: int = 100
    n_null: int = 1000
    length: int = 200
    temperature: float = 1.0
    fpr_levels: list = field(default_factory=lambda: [0.1, 0.01, 0.001])
    n_student: int = 100


@dataclass
class ExperimentConfig:
    corpus: Optional[str] = None
    tokenizer: str = "whitespace"
    max_vocab: int = 2000
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    teacher: ModelSpec = field(default_factory=lambda: ModelSpec(3, 0.1))
    student: ModelSpec = field(default_factory=lambda: ModelSpec(2, 0.1))
    attack: ModelSpec = field(default_factory=lambda: ModelSpec(2, 0.1))
    reference: ModelSpec = field(default_factory=lambda: ModelSpec(2, 0.1))
    attack_target: str = "distinct"  # or "base": inject into the student's own base model
    watermark: WatermarkSpec = field(default_factory=WatermarkSpec)
    distill: DistillSpec = field(default_factory=DistillSpec)
    extract: ExtractSpec = field(default_factory=ExtractSpec)
    alphas: list = field(default_factory=lambda: [4.5])
    sweep_alphas: list = field(default_factory=lambda: [2.5, 3.0, 3.5, 4.0, 4.5, 5.0])
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    z_threshold: float = 4.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def prep_hash(self) -> str:
        """Hash of everything that shapes the models, dataset and EWS table (not the evaluation)."""
        data = self.to_dict()
        for name in ("alphas", "sweep_alphas", "evaluation", "z_threshold"):
            data.pop(name)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def redacted(self) -> dict:
        """Config as a dict with the watermark key removed (safe to publish)."""
        data = self.to_dict()
        data["watermark"]["key"] = "<redacted>"
        return data


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected a JSON object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        if name not in known:
            raise ConfigError(key, "unknown configuration key")
        default = getattr(cls(), name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _coerce(value, default, key)
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool) and key != "watermark.key":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    if key == "watermark.key":
        return format_key(parse_key(value))
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _positive(value, key):
    if value < 1:
        raise ConfigError(key, f"must be >= 1, got {value}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.tokenizer not in MODES:
        raise ConfigError("tokenizer", f"must be one of {MODES}")
    if cfg.attack_target not in ("distinct", "base"):
        raise ConfigError("attack_target", "must be 'distinct' or 'base'")
    _positive(cfg.max_vocab, "max_vocab")
    for name in ("teacher", "student", "attack", "reference"):
        spec = getattr(cfg, name)
        _positive(spec.order, f"{name}.order")
        if not spec.smoothing > 0:
            raise ConfigError(f"{name}.smoothing", "must be > 0")
    s = cfg.synthetic
    for name in ("n_lines", "min_len", "n_words", "branching"):
        _positive(getattr(s, name), f"synthetic.{name}")
    if s.max_len < s.min_len:
        raise ConfigError("synthetic.max_len", "must be >= min_len")
    if not 0.0 <= s.unigram_share <= 1.0:
        raise ConfigError("synthetic.unigram_share", "must lie in [0, 1]")
    if cfg.watermark.scheme not in SCHEMES:
        raise ConfigError("watermark.scheme", f"must be one of {SCHEMES}")
    try:
        cfg.watermark.build()
    except ConfigError as exc:
        raise ConfigError(f"watermark.{exc.key}", str(exc).split(": ", 2)[-1]) from None
    d = cfg.distill
    _positive(d.n_sequences, "distill.n_sequences")
    _positive(d.length, "distill.length")
    if not 0.0 <= d.mix <= 1.0:
        raise ConfigError("distill.mix", "must lie in [0, 1]")
    if d.prompt_length < 0:
        raise ConfigError("distill.prompt_length", "must be >= 0")
    if not d.temperature > 0:
        raise ConfigError("distill.temperature", "must be > 0")
    e = cfg.extract
    if not e.orders or any(not isinstance(n, int) or not 1 <= n <= 3 for n in e.orders):
        raise ConfigError("extract.orders", "must be a non-empty list of ints in [1, 3]")
    _positive(e.cap, "extract.cap")
    _positive(e.min_support, "extract.min_support")
    if e.threshold < 0:
        raise ConfigError("extract.threshold", "must be >= 0")
    for name in ("alphas", "sweep_alphas"):
        vals = getattr(cfg, name)
        if not vals:
            raise ConfigError(name, "must be non-empty")
        for a in vals:
            if isinstance(a, bool) or not isinstance(a, (int, float)) or not math.isfinite(a) or a < 0:
                raise ConfigError(name, f"alpha values must be finite and >= 0, got {a!r}")
        setattr(cfg, name, [float(a) for a in vals])
    ev = cfg.evaluation
    for name in ("n_positive", "n_null", "length", "n_student"):
        _positive(getattr(ev, name), f"evaluation.{name}")
    if not ev.temperature > 0:
        raise ConfigError("evaluation.temperature", "must be > 0")
    if not ev.fpr_levels or any(not 0 < f <= 1 for f in ev.fpr_levels):
        raise ConfigError("evaluation.fpr_levels", "levels must lie in (0, 1]")
    if not math.isfinite(cfg.z_threshold):
        raise ConfigError("z_threshold", "must be finite")
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    if "alpha" in data:  # scalar shorthand
        data = dict(data)
        alpha = data.pop("alpha")
        data.setdefault("alphas", [alpha] if not isinstance(alpha, list) else alpha)
    return validate(_build(ExperimentConfig, data, ""))


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from None
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(cfg.to_json(), encoding="utf-8")


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Dotted-path overrides (e.g. ``{"watermark.scheme": "tournament"}``) win over file values."""
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return config_from_dict(data)
