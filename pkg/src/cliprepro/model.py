"""Toy dual encoder: patch-MLP image tower, bag-of-words text tower, shared embedding space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import PAD
from .errors import BadDims, ShapeMismatch
from .numerics import Tensor
from .rng import RngStream

TAU_INIT = 1.0 / 0.07
TAU_MAX = 100.0


@dataclass(frozen=True)
class ModelDims:
    image_size: int = 32
    patch_size: int = 8
    vocab_size: int = 16
    width: int = 128
    hidden: int = 128
    embed_dim: int = 64

    def validate(self) -> "ModelDims":
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise BadDims(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise BadDims(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.vocab_size < 3:
            raise BadDims("vocab_size must cover PAD, UNK and at least one word")
        return self

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def shapes(self) -> dict[str, tuple]:
        return {
            "theta.patch.weight": (self.patch_dim, self.width),
            "theta.patch.bias": (self.width,),
            "theta.mlp1.weight": (self.width, self.hidden),
            "theta.mlp1.bias": (self.hidden,),
            "theta.mlp2.weight": (self.hidden, self.hidden),
            "theta.mlp2.bias": (self.hidden,),
            "theta.proj": (self.hidden, self.embed_dim),
            "phi.token_embedding": (self.vocab_size, self.width),
            "phi.mlp1.weight": (self.width, self.hidden),
            "phi.mlp1.bias": (self.hidden,),
            "phi.mlp2.weight": (self.hidden, self.hidden),
            "phi.mlp2.bias": (self.hidden,),
            "phi.proj": (self.hidden, self.embed_dim),
            "log_tau": (),
        }


def is_bias(name: str) -> bool:
    return name.endswith(".bias")


class EncoderParams:
    """Named parameter tensors in a fixed order (the checkpoint order)."""

    def __init__(self, dims: ModelDims, arrays: dict[str, np.ndarray], dtype="f32"):
        self.dims = dims
        self.dtype = nx.resolve_dtype(dtype)
        expected = dims.shapes()
        if list(arrays) != list(expected):
            missing = set(expected) ^ set(arrays)
            raise BadDims(f"parameter names do not match the architecture: {sorted(missing) or 'order differs'}")
        self.tensors: dict[str, Tensor] = {}
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=self.dtype)
            if arr.shape != expected[name]:
                raise BadDims(f"{name}: expected shape {expected[name]}, got {arr.shape}")
            self.tensors[name] = Tensor(arr, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @property
    def embed_dim(self) -> int:
        return self.dims.embed_dim

    def replace(self, arrays: dict[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams(self.dims, arrays, self.dtype)

    def checkpoint_bytes(self) -> bytes:
        return nx.checkpoint_bytes(self.arrays(), nx.dtype_name(self.dtype))

    @classmethod
    def from_checkpoint(cls, tensors: dict[str, np.ndarray], dtype: str, dims: ModelDims) -> "EncoderParams":
        return cls(dims, dict(tensors), dtype)


def init_params(s: RngStream, dims: ModelDims, dtype="f32") -> EncoderParams:
    """Weights ~ N(0, 0.02), biases 0, log_tau = ln(1/0.07); draws in checkpoint order."""
    dims.validate()
    arrays: dict[str, np.ndarray] = {}
    for name, shape in dims.shapes().items():
        if name == "log_tau":
            arrays[name] = np.array(math.log(TAU_INIT))
        elif is_bias(name):
            arrays[name] = np.zeros(shape)
        else:
            n = int(np.prod(shape))
            arrays[name] = s.normal_array(n, 0.0, 0.02).reshape(shape)
    return EncoderParams(dims, arrays, dtype)


def temperature(p: EncoderParams, tau_max: float = TAU_MAX) -> Tensor:
    """Learnable multiplier tau = exp(min(log_tau, ln tau_max))."""
    return nx.exp(nx.clamp_max(p["log_tau"], math.log(tau_max)))


def _mlp_head(p: EncoderParams, prefix: str, h: Tensor) -> Tensor:
    h = nx.relu(h @ p[f"{prefix}.mlp1.weight"] + p[f"{prefix}.mlp1.bias"])
    h = nx.relu(h @ p[f"{prefix}.mlp2.weight"] + p[f"{prefix}.mlp2.bias"])
    return h @ p[f"{prefix}.proj"]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    n, hgt, wid, c = images.shape
    g_h, g_w = hgt // patch, wid // patch
    x = images.reshape(n, g_h, patch, g_w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(n * g_h * g_w, patch * patch * c))


def image_features(p: EncoderParams, images) -> Tensor:
    """Unnormalized f(x; theta) for an (N, S, S, 3) batch of preprocessed images."""
    arr = np.asarray(images, dtype=p.dtype)
    d = p.dims
    if arr.ndim != 4 or arr.shape[1:] != (d.image_size, d.image_size, 3):
        raise ShapeMismatch(f"expected images of shape (N, {d.image_size}, {d.image_size}, 3), got {arr.shape}")
    x = Tensor(patchify(arr, d.patch_size))
    h = nx.relu(x @ p["theta.patch.weight"] + p["theta.patch.bias"])
    h = nx.mean_groups(h, d.n_patches)
    return _mlp_head(p, "theta", h)


def bag_of_words(token_batch: Sequence[Sequence[int]], vocab_size: int, dtype) -> np.ndarray:
    """Row i holds count(token)/length over non-PAD tokens of caption i."""
    weights = np.zeros((len(token_batch), vocab_size), dtype=np.float64)
    for i, ids in enumerate(token_batch):
        kept = [t for t in ids if t != PAD]
        if not kept:
            raise ShapeMismatch(f"caption {i} has no non-PAD tokens")
        for t in kept:
            if not 0 <= t < vocab_size:
                raise ShapeMismatch(f"token id {t} outside vocabulary of size {vocab_size}")
            weights[i, t] += 1.0
        weights[i] /= len(kept)
    return weights.astype(dtype)


def text_features(p: EncoderParams, token_batch: Sequence[Sequence[int]]) -> Tensor:
    """Unnormalized g(t; phi); PAD-masked mean pooling is a bag-of-words product.

    Token vectors pass through ReLU before pooling, mirroring the per-patch
    activation of the image tower.
    """
    tokens = nx.relu(p["phi.token_embedding"])
    pooled = Tensor(bag_of_words(token_batch, p.dims.vocab_size, p.dtype)) @ tokens
    return _mlp_head(p, "phi", pooled)


def encode_image(p: EncoderParams, images) -> Tensor:
    return nx.l2_normalize(image_features(p, images))


def encode_text(p: EncoderParams, token_batch: Sequence[Sequence[int]]) -> Tensor:
    return nx.l2_normalize(text_features(p, token_batch))
