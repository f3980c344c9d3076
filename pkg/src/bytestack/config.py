"""Static configuration: model hierarchy, training recipe and data sources.

Configs are plain frozen dataclasses. ``validate`` is the only way to obtain a
config the rest of the package trusts; it collects every violated invariant
instead of stopping at the first one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

VOCAB_SIZE = 257
PAD_ID = 256

STAGE_KINDS = ("transformer", "selective_ssm")
POS_EMBEDDINGS = ("none", "learned_absolute", "rotary")
SCAN_MODES = ("associative", "sequential")


class ConfigError(ValueError):
    """Raised with every violated invariant; ``violations`` keeps them as a list."""

    def __init__(self, violations: Iterable[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class StageConfig:
    kind: str = "transformer"
    patch_size: int = 8
    width: int = 32
    layers: int = 1
    chunk_count: int = 1
    pos_embedding: str | None = None  # resolved by validate(): rotary / none by kind
    dropout: float = 0.0
    heads: int = 2
    ff_mult: int = 2
    state_size: int = 16
    scan: str = "associative"


@dataclass(frozen=True)
class HierarchyConfig:
    stages: tuple[StageConfig, ...]
    vocab_size: int = VOCAB_SIZE
    pad_id: int = PAD_ID
    allow_p1_extension: bool = False
    # Add the parent patch vector to the start-token row too (off: start rows
    # receive nothing from the stage above).
    global_to_start: bool = False

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def patch_sizes(self) -> tuple[int, ...]:
        return tuple(s.patch_size for s in self.stages)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(s.width for s in self.stages)

    @property
    def max_length(self) -> int:
        return math.prod(self.patch_sizes)

    @property
    def inner_length(self) -> int:
        """Bytes covered by one outermost patch (product of P_2..P_N)."""
        return math.prod(self.patch_sizes[1:])

    def packed_batches(self, batch_size: int, length: int | None = None) -> tuple[int, ...]:
        """K_i for every stage; ``length`` selects the effective first patch count."""
        p1 = self.patch_sizes[0] if length is None else math.ceil(length / self.inner_length)
        sizes = (p1,) + self.patch_sizes[1:]
        return tuple(batch_size * math.prod(sizes[:i]) for i in range(self.n_stages))


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.10
    total_steps: int = 1000
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip_norm: float = 1.0
    accumulation: int = 1
    micro_batch: int = 8
    seed: int = 0
    weight_decay: float = 0.0
    min_lr: float = 0.0
    eval_every: int = 100
    eval_batches: int = 8
    checkpoint_every: int = 0
    time_budget_s: float = 0.0

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation


@dataclass(frozen=True)
class DataConfig:
    kind: str = "corpus"  # corpus | vqa
    train: str = ""
    val: str = ""
    test: str = ""
    context: int = 0  # 0 -> L_max
    loss_on: str = "answer"  # vqa only: answer | full


@dataclass(frozen=True)
class RunConfig:
    model: HierarchyConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def context(self) -> int:
        return self.data.context or self.model.max_length

    def to_dict(self) -> dict[str, Any]:
        return _asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _asdict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    return obj


def _stage_violations(i: int, s: StageConfig) -> list[str]:
    out = []
    where = f"at stage {i + 1}"
    if s.kind not in STAGE_KINDS:
        out.append(f"kind must be one of {STAGE_KINDS} {where}")
    for name in ("patch_size", "width", "layers", "chunk_count", "heads", "ff_mult", "state_size"):
        if not isinstance(getattr(s, name), int) or getattr(s, name) < 1:
            out.append(f"{name} must be ≥ 1 {where}")
    if s.pos_embedding not in POS_EMBEDDINGS:
        out.append(f"pos_embedding must be one of {POS_EMBEDDINGS} {where}")
    if not 0.0 <= s.dropout < 1.0:
        out.append(f"dropout must lie in [0, 1) {where}")
    if s.scan not in SCAN_MODES:
        out.append(f"scan must be one of {SCAN_MODES} {where}")
    if i == 0 and s.chunk_count != 1:
        out.append("chunk_count must be 1 at stage 1")
    if s.kind == "transformer" and isinstance(s.width, int) and isinstance(s.heads, int) and s.heads >= 1:
        if s.width % s.heads:
            out.append(f"width must be divisible by heads {where}")
        elif s.pos_embedding == "rotary" and (s.width // s.heads) % 2:
            out.append(f"rotary needs an even head width {where}")
    if s.kind == "selective_ssm" and s.pos_embedding == "rotary":
        out.append(f"rotary positions need attention; use none or learned_absolute {where}")
    return out


def _resolve_stage(s: StageConfig) -> StageConfig:
    if s.pos_embedding is None:
        default = "none" if s.kind == "selective_ssm" else "rotary"
        s = dataclasses.replace(s, pos_embedding=default)
    return s


def validate(config: RunConfig | HierarchyConfig):
    """Return an immutable, fully resolved copy of ``config`` or raise ConfigError."""
    if isinstance(config, RunConfig):
        model = validate(config.model)
        errors = _train_violations(config.train) + _data_violations(config.data)
        if config.data.context and config.data.context > model.max_length and not model.allow_p1_extension:
            errors.append(f"data.context {config.data.context} exceeds L_max {model.max_length}")
        if errors:
            raise ConfigError(errors)
        return dataclasses.replace(config, model=model)

    stages = tuple(_resolve_stage(s) for s in config.stages)
    errors: list[str] = []
    if len(stages) < 1:
        errors.append("model needs at least one stage")
    for i, s in enumerate(stages):
        errors.extend(_stage_violations(i, s))
    if config.vocab_size != VOCAB_SIZE:
        errors.append(f"vocab_size is fixed at {VOCAB_SIZE}")
    if config.pad_id != PAD_ID:
        errors.append(f"pad_id is fixed at {PAD_ID}")
    if config.allow_p1_extension and stages and stages[0].pos_embedding == "learned_absolute":
        errors.append("allow_p1_extension requires stage 1 without learned_absolute positions")
    if errors:
        raise ConfigError(errors)
    return dataclasses.replace(config, stages=stages)


def _train_violations(t: TrainConfig) -> list[str]:
    out = []
    if not 0.0 < t.warmup_fraction < 1.0:
        out.append("train.warmup_fraction must lie in (0, 1)")
    if t.grad_clip_norm <= 0:
        out.append("train.grad_clip_norm must be > 0")
    if t.total_steps < 0:
        out.append("train.total_steps must be ≥ 0")
    if t.accumulation < 1 or t.micro_batch < 1:
        out.append("train.accumulation and train.micro_batch must be ≥ 1")
    if t.peak_lr <= 0:
        out.append("train.peak_lr must be > 0")
    if len(t.betas) != 2 or not all(0.0 <= b < 1.0 for b in t.betas):
        out.append("train.betas must be two values in [0, 1)")
    return out


def _data_violations(d: DataConfig) -> list[str]:
    out = []
    if d.kind not in ("corpus", "vqa"):
        out.append("data.kind must be corpus or vqa")
    if d.loss_on not in ("answer", "full"):
        out.append("data.loss_on must be answer or full")
    if d.context < 0:
        out.append("data.context must be ≥ 0")
    return out


# -- file I/O -----------------------------------------------------------------

def _build(cls, table: dict[str, Any], section: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(table) - set(known)
    if unknown:
        raise ConfigError([f"{section}: unknown key(s) {sorted(unknown)}"])
    kwargs = {}
    for k, v in table.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def from_dict(raw: dict[str, Any]) -> RunConfig:
    model_raw = dict(raw.get("model", {}))
    stages = tuple(_build(StageConfig, s, "model.stages") for s in model_raw.pop("stages", []))
    model = _build(HierarchyConfig, {**model_raw, "stages": stages}, "model")
    train = _build(TrainConfig, raw.get("train", {}), "train")
    data = _build(DataConfig, raw.get("data", {}), "data")
    return RunConfig(model=model, train=train, data=data)


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config: file not found {path}"]) from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"config: {e}"]) from None
    raw = apply_overrides(raw, overrides)
    cfg = from_dict(raw)
    # relative data paths resolve against the config file's directory
    data = cfg.data
    fixed = {}
    for key in ("train", "val", "test"):
        value = getattr(data, key)
        if value and not Path(value).is_absolute():
            fixed[key] = str((path.parent / value).resolve())
    if fixed:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(data, **fixed))
    return validate(cfg)


def _field_type(section: str, key: str):
    cls = {"model": HierarchyConfig, "stages": StageConfig, "train": TrainConfig, "data": DataConfig}[section]
    for f in dataclasses.fields(cls):
        if f.name == key:
            return f
    raise ConfigError([f"override: unknown key {section}.{key}"])


def _coerce(text: str, default: Any, name: str) -> Any:
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return [float(v) for v in text.strip("()[]").split(",")]
    except ValueError:
        raise ConfigError([f"override: {name}={text!r} does not match type {type(default).__name__}"]) from None
    return text


def apply_overrides(raw: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` (or ``model.stages.<idx>.key=value``) strings."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override: expected key=value, got {item!r}"])
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 2 and parts[0] in ("model", "train", "data"):
            f = _field_type(parts[0], parts[1])
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            raw.setdefault(parts[0], {})[parts[1]] = _coerce(text, default, key)
        elif len(parts) == 4 and parts[:2] == ["model", "stages"] and parts[2].isdigit():
            f = _field_type("stages", parts[3])
            stages = raw.setdefault("model", {}).setdefault("stages", [])
            idx = int(parts[2])
            if idx >= len(stages):
                raise ConfigError([f"override: no stage {idx} (config has {len(stages)})"])
            default = f.default if f.default is not None else ""
            stages[idx][parts[3]] = _coerce(text, default, key)
        else:
            raise ConfigError([f"override: cannot address {key!r}"])
    return raw


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    lines = ["[model]"]
    stages = d["model"].pop("stages")
    lines += [f"{k} = {_toml_value(v)}" for k, v in d["model"].items()]
    for s in stages:
        lines += ["", "[[model.stages]]"]
        lines += [f"{k} = {_toml_value(v)}" for k, v in s.items() if v is not None]
    for section in ("train", "data"):
        lines += ["", f"[{section}]"]
        lines += [f"{k} = {_toml_value(v)}" for k, v in d[section].items()]
    return "\n".join(lines) + "\n"
