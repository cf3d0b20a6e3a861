"""Run configuration schema: strict JSON in, canonical JSON out.

Every field is mandatory in serialized form and unknown keys are rejected,
so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .data import CLIP_MEAN, CLIP_STD, AugmentSpec
from .errors import ConfigInvalid

SCHEDULERS = ("cosine", "constant")
PRECISIONS = ("f32", "f64", "bf16_emulated")
REDUCTIONS = ("sequential", "unordered")

# run_id labels a run; it is not part of what the run *is*
IDENTITY_EXCLUDED = ("run_id",)


@dataclass(frozen=True)
class AugConfig:
    scale_min: float = 0.8
    scale_max: float = 1.0
    ratio_min: float = 3.0 / 4.0
    ratio_max: float = 4.0 / 3.0
    out_size: int = 32
    mean: tuple = CLIP_MEAN
    std: tuple = CLIP_STD

    def spec(self) -> AugmentSpec:
        return AugmentSpec(self.scale_min, self.scale_max, self.ratio_min, self.ratio_max, self.out_size, tuple(self.mean), tuple(self.std))


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    width: int = 128
    hidden: int = 128
    embed_dim: int = 64
    learnable_tau: bool = True
    tau_init: float = 1.0 / 0.07
    tau_max: float = 100.0


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "synthetic"
    concepts: tuple = ("alpha", "beta")
    n_per_concept: int = 64
    image_size: int = 64
    seed: int = 0
    eval_n_per_concept: int = 50
    eval_seed: int = 1


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "default"
    seed: int = 0
    world_size: int = 2
    batch_per_worker: int = 16
    epochs: int = 50
    warmup_steps: int = 20
    peak_lr: float = 5.0e-4
    scheduler: str = "cosine"
    weight_decay: float = 0.2
    aug: AugConfig = field(default_factory=AugConfig)
    gather_with_grad: bool = True
    local_loss: bool = False
    precision: str = "f32"
    grad_checkpointing: bool = False
    batchnorm_sync: bool = False
    ddp_static_graph: bool = False
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1.0e-6
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    reduction: str = "sequential"

    def validate(self) -> "RunConfig":
        err = []
        if not isinstance(self.run_id, str) or not self.run_id:
            err.append("run_id must be a non-empty string")
        if not 0 <= self.seed < 2**64:
            err.append("seed must be a u64")
        if self.world_size < 1:
            err.append("world_size must be >= 1")
        if self.batch_per_worker < 2:
            err.append("batch_per_worker must be >= 2")
        if self.epochs < 1:
            err.append("epochs must be >= 1")
        if self.warmup_steps < 0:
            err.append("warmup_steps must be >= 0")
        if not (self.peak_lr > 0 and math.isfinite(self.peak_lr)):
            err.append("peak_lr must be > 0")
        if self.scheduler not in SCHEDULERS:
            err.append(f"scheduler must be one of {SCHEDULERS}")
        if not self.weight_decay >= 0:
            err.append("weight_decay must be >= 0")
        if self.precision not in PRECISIONS:
            err.append(f"precision must be one of {PRECISIONS}")
        if self.reduction not in REDUCTIONS:
            err.append(f"reduction must be one of {REDUCTIONS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            err.append("need 0 <= beta1, beta2 < 1 and eps > 0")
        try:
            self.aug.spec().validate()
        except Exception as exc:  # BadSpec
            err.append(f"aug: {exc}")
        if self.aug.out_size > self.dataset.image_size:
            err.append("aug.out_size exceeds dataset.image_size")
        m = self.model
        if min(m.patch_size, m.width, m.hidden, m.embed_dim) < 1:
            err.append("model dimensions must be positive")
        elif self.aug.out_size % m.patch_size:
            err.append("model.patch_size must divide aug.out_size")
        if not (0 < m.tau_init <= m.tau_max):
            err.append("need 0 < model.tau_init <= model.tau_max")
        d = self.dataset
        if d.concepts and (len(d.concepts) < 2 or len(set(d.concepts)) != len(d.concepts)):
            err.append("dataset.concepts needs at least two distinct names")
        if d.concepts and (d.n_per_concept < 1 or d.eval_n_per_concept < 1):
            err.append("dataset counts must be >= 1")
        if err:
            raise ConfigInvalid("; ".join(err))
        return self

    @property
    def dtype(self) -> str:
        return "f64" if self.precision == "f64" else "f32"

    @property
    def global_batch(self) -> int:
        return self.world_size * self.batch_per_worker

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------

_NESTED = {"aug": AugConfig, "model": ModelConfig, "dataset": DatasetConfig}
_ENUM_FIELDS = {"scheduler", "precision", "reduction"}
_TUPLE_FIELDS = {"mean", "std", "concepts"}


def _check_value(name: str, ftype: str, value: Any) -> Any:
    t = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{name} must be a boolean")
    elif t == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{name} must be an integer")
    elif t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"{name} must be a number")
        value = float(value)
    elif t == "str":
        if not isinstance(value, str):
            raise ConfigInvalid(f"{name} must be a string")
    elif t == "tuple":
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid(f"{name} must be a list")
        value = tuple(value)
    return value


def _build(cls, raw: Any, prefix: str = ""):
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"{prefix or 'config'} must be a JSON object")
    names = [f.name for f in fields(cls)]
    unknown = sorted(set(raw) - set(names))
    missing = sorted(set(names) - set(raw))
    if unknown:
        raise ConfigInvalid(f"unknown key(s): {', '.join(prefix + k for k in unknown)}")
    if missing:
        raise ConfigInvalid(f"missing key(s): {', '.join(prefix + k for k in missing)}")
    kwargs = {}
    for f in fields(cls):
        value = raw[f.name]
        if f.name in _NESTED and cls is RunConfig:
            kwargs[f.name] = _build(_NESTED[f.name], value, f"{prefix}{f.name}.")
            continue
        value = _check_value(prefix + f.name, f.type, value)
        if f.name in _ENUM_FIELDS:
            value = value.lower()
        if f.name in ("mean", "std"):
            value = tuple(float(_check_value(f"{prefix}{f.name}[]", "float", v)) for v in value)
        if f.name == "concepts":
            value = tuple(_check_value(f"{prefix}concepts[]", "str", v) for v in value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw).validate()


def config_to_dict(cfg: RunConfig) -> dict:
    def conv(x):
        if is_dataclass(x):
            return {k: conv(v) for k, v in asdict(x).items()}
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [conv(v) for v in x]
        return x

    return conv(cfg)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path=None) -> str:
    text = json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def canonical_json(cfg: RunConfig) -> str:
    """Sorted keys, no whitespace, shortest round-trip floats; identity fields only."""
    body = config_to_dict(cfg)
    for key in IDENTITY_EXCLUDED:
        body.pop(key, None)
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def config_hash(cfg: RunConfig) -> str:
    cfg.validate()
    return hashlib.sha256(canonical_json(cfg).encode("ascii")).hexdigest()


def _leaves(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_leaves(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def diff_configs(a: RunConfig, b: RunConfig) -> list[tuple[str, Any, Any]]:
    """Differing leaf fields as (dotted name, a value, b value), sorted by name."""
    la, lb = _leaves(config_to_dict(a)), _leaves(config_to_dict(b))
    out = []
    for key in sorted(set(la) | set(lb)):
        if key in IDENTITY_EXCLUDED:
            continue
        if la.get(key) != lb.get(key):
            out.append((key, la.get(key), lb.get(key)))
    return out
