"""AdamW, warmup + cosine/constant schedules and the deterministic training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import Dataset, normalize_image, random_resized_crop, synth_dataset
from .errors import BadConcepts, BadStep, ConfigInvalid, ShapeMismatch
from .loss import LossConfig, distributed_loss
from .model import EncoderParams, ModelDims, encode_image, encode_text, init_params, is_bias, temperature
from .rng import stream


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    warmup_steps: int
    peak_lr: float
    total_steps: int

    def __post_init__(self):
        if self.kind not in ("cosine", "constant"):
            raise ConfigInvalid(f"unknown scheduler {self.kind!r}")
        if self.warmup_steps < 0 or self.total_steps <= self.warmup_steps:
            raise ConfigInvalid(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if not self.peak_lr > 0:
            raise ConfigInvalid("peak_lr must be positive")


def lr_at(s: ScheduleSpec, step: int) -> float:
    """Linear warmup from 0, then cosine decay to 0 at total_steps (or constant)."""
    if not 0 <= step <= s.total_steps:
        raise BadStep(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if s.kind == "constant":
        return s.peak_lr
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1.0e-6
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    st: AdamWState,
    lr: float,
    decay: Mapping[str, bool] | None = None,
) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; ``st`` is advanced in place.

    Decay is applied first (p -= lr*wd*p) and only to names with
    ``decay[name]`` true (all names when ``decay`` is None).
    """
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    st.step += 1
    t = st.step
    bc1 = 1.0 - st.beta1**t
    bc2 = 1.0 - st.beta2**t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        f = p.dtype.type
        m = st.m.get(name)
        v = st.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if decay is None or decay.get(name, True):
            p = p - f(lr * st.weight_decay) * p
        m = f(st.beta1) * m + f(1.0 - st.beta1) * g
        v = f(st.beta2) * v + f(1.0 - st.beta2) * (g * g)
        m_hat = m / f(bc1)
        v_hat = v / f(bc2)
        p = p - f(lr) * m_hat / (np.sqrt(v_hat) + f(st.eps))
        st.m[name], st.v[name] = m, v
        out[name] = p
    return out


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    loss: float
    tau: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "lr": self.lr, "loss": self.loss, "tau": self.tau})


@dataclass
class TrainResult:
    trajectory: list
    params: EncoderParams
    checkpoint: bytes
    dataset: Dataset

    def trajectory_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.trajectory)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.trajectory]

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        traj = out / "trajectory.jsonl"
        ckpt = out / "checkpoint.rpck"
        traj.write_text(self.trajectory_jsonl(), encoding="utf-8")
        ckpt.write_bytes(self.checkpoint)
        return traj, ckpt


def dataset_for(cfg: RunConfig, *, eval_split: bool = False) -> Dataset:
    d = cfg.dataset
    if not d.concepts:
        raise ConfigInvalid(f"dataset {d.name!r} has no synthetic concepts; supply a dataset directory")
    try:
        return synth_dataset(
            list(d.concepts),
            d.eval_n_per_concept if eval_split else d.n_per_concept,
            d.image_size,
            d.eval_seed if eval_split else d.seed,
        )
    except BadConcepts as exc:
        raise ConfigInvalid(str(exc)) from None


def model_dims(cfg: RunConfig, vocab_size: int) -> ModelDims:
    m = cfg.model
    return ModelDims(
        image_size=cfg.aug.out_size,
        patch_size=m.patch_size,
        vocab_size=vocab_size,
        width=m.width,
        hidden=m.hidden,
        embed_dim=m.embed_dim,
    ).validate()


def loss_config(cfg: RunConfig) -> LossConfig:
    if cfg.world_size == 1:
        agg = "single"
    else:
        agg = "local_loss" if cfg.local_loss else "gather_global"
    return LossConfig(
        aggregation=agg,
        world_size=cfg.world_size,
        gather_with_grad=cfg.gather_with_grad,
        precision_stage="emulate_bf16_on_gather" if cfg.precision == "bf16_emulated" else "none",
        tau_mode="learnable" if cfg.model.learnable_tau else "fixed",
        tau=cfg.model.tau_init,
        tau_max=cfg.model.tau_max,
    )


def initial_params(cfg: RunConfig, vocab_size: int) -> EncoderParams:
    # one "init" stream shared by all workers: replicas start identical
    p = init_params(stream(cfg.seed, 0, "init"), model_dims(cfg, vocab_size), cfg.dtype)
    arrays = p.arrays()
    arrays["log_tau"] = np.array(math.log(cfg.model.tau_init))
    return p.replace(arrays)


def steps_per_epoch(cfg: RunConfig, n: int) -> int:
    return n // cfg.global_batch


def train(
    cfg: RunConfig,
    dataset: Dataset | None = None,
    *,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Train the dual encoder per ``cfg``; identical configs give identical bytes.

    Each epoch k reshuffles with ``stream(seed, 0, "shuffle:epoch_k")``; each
    batch is split into ``world_size`` contiguous shards, rank r augments its
    shard with ``stream(seed, r, "augment")``, encodes it, and the loss is
    aggregated as configured. The trailing partial batch is dropped.
    """
    cfg.validate()
    ds = dataset if dataset is not None else dataset_for(cfg)
    if ds.image_size < cfg.aug.out_size:
        raise ConfigInvalid("dataset images are smaller than aug.out_size")
    spe = steps_per_epoch(cfg, len(ds))
    if spe == 0:
        raise ConfigInvalid(f"dataset of {len(ds)} pairs is smaller than one global batch of {cfg.global_batch}")
    total = cfg.epochs * spe
    sched = ScheduleSpec(cfg.scheduler, cfg.warmup_steps, cfg.peak_lr, total)
    lcfg = loss_config(cfg)
    spec = cfg.aug.spec().validate()

    params = initial_params(cfg, len(ds.vocab))
    decay = {name: not (is_bias(name) or name == "log_tau") for name in params.names()}
    opt = AdamWState(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    augment = [stream(cfg.seed, r, "augment") for r in range(cfg.world_size)]
    tokens = [c.token_ids for c in ds.captions]
    bpw = cfg.batch_per_worker

    trajectory: list[StepRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, 0, f"shuffle:epoch_{epoch}").shuffle(len(ds))
        for b in range(spe):
            batch = order[b * cfg.global_batch : (b + 1) * cfg.global_batch]
            U_shards, V_shards = [], []
            for r in range(cfg.world_size):
                idx = batch[r * bpw : (r + 1) * bpw]
                imgs = np.stack(
                    [normalize_image(random_resized_crop(ds.images[i], spec, augment[r]), spec.mean, spec.std) for i in idx]
                )
                U_shards.append(encode_image(params, imgs))
                V_shards.append(encode_text(params, [tokens[i] for i in idx]))
            tau = temperature(params, lcfg.tau_max) if lcfg.tau_mode == "learnable" else lcfg.tau
            out = distributed_loss(U_shards, V_shards, tau, lcfg)
            names = params.names()
            grads = dict(zip(names, nx.grad(out.total, params.values(), reduction=cfg.reduction)))
            lr = lr_at(sched, step)
            tau_value = tau.item() if isinstance(tau, nx.Tensor) else float(tau)
            rec = StepRecord(step, float(lr), out.value, tau_value)
            trajectory.append(rec)
            if on_step is not None:
                on_step(rec)
            params = params.replace(adamw_step(params.arrays(), grads, opt, lr, decay))
            step += 1
    return TrainResult(trajectory, params, params.checkpoint_bytes(), ds)
