"""Synthetic image-caption pairs, a whitespace tokenizer and the crop/normalize pipeline."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics
from .errors import BadConcepts, BadSpec
from .rng import RngStream, stream

PAD = 0
UNK = 1
CONTEXT_LIMIT = 77

# zero-shot prompt templates; used verbatim for training captions too
TEMPLATES = (
    "a histopathology slide showing {}",
    "histopathology image of {}",
    "pathology tissue showing {}",
    "presence of {} tissue on image",
)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

_WORD = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class SynthImage:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    concept_id: int

    def __post_init__(self):
        h, w = self.pixels.shape[:2]
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or h < 8 or w < 8:
            raise BadSpec(f"image must be HxWx3 with H, W >= 8, got {self.pixels.shape}")
        if not (self.pixels.min() >= 0.0 and self.pixels.max() <= 1.0):
            raise BadSpec("pixel values must lie in [0, 1]")


@dataclass(frozen=True)
class Caption:
    text: str
    token_ids: tuple
    concept_id: int


@dataclass(frozen=True)
class AugmentSpec:
    scale_min: float = 0.8
    scale_max: float = 1.0
    ratio_min: float = 3.0 / 4.0
    ratio_max: float = 4.0 / 3.0
    out_size: int = 32
    mean: tuple = CLIP_MEAN
    std: tuple = CLIP_STD

    def validate(self) -> "AugmentSpec":
        if not 0.0 < self.scale_min <= self.scale_max <= 1.0:
            raise BadSpec(f"need 0 < scale_min <= scale_max <= 1, got ({self.scale_min}, {self.scale_max})")
        if not 0.0 < self.ratio_min <= self.ratio_max:
            raise BadSpec(f"need 0 < ratio_min <= ratio_max, got ({self.ratio_min}, {self.ratio_max})")
        if self.out_size < 1:
            raise BadSpec("out_size must be positive")
        if len(self.mean) != 3 or len(self.std) != 3 or any(s <= 0 for s in self.std):
            raise BadSpec("mean/std must be 3-vectors with positive std")
        return self


@dataclass
class Dataset:
    concepts: list
    images: list
    captions: list
    vocab: dict
    image_size: int
    n_per_concept: int
    seed: int
    templates: tuple = TEMPLATES
    context_limit: int = CONTEXT_LIMIT
    template_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def pixels(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.images])

    def labels(self) -> np.ndarray:
        return np.array([im.concept_id for im in self.images], dtype=np.int64)


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def build_vocab(texts: Sequence[str]) -> dict[str, int]:
    vocab = {"<pad>": PAD, "<unk>": UNK}
    for w in sorted({w for t in texts for w in words(t)}):
        vocab[w] = len(vocab)
    return vocab


def tokenize(text: str, vocab: Mapping[str, int], context_limit: int = CONTEXT_LIMIT) -> list[int]:
    """Lower-case, split on whitespace/punctuation, map to ids (unknown -> UNK), truncate."""
    return [vocab.get(w, UNK) for w in words(text)][:context_limit]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _render(size: int, base: float, tint, freq: float, theta: float, amp: float, phase: float) -> np.ndarray:
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    wave = np.sin(2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    weights = (1.0, 0.8, 0.6)
    chans = [base + tint[c] + amp * weights[c] * wave for c in range(3)]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0).astype(np.float32)


def synth_dataset(
    concepts: Sequence[str],
    n_per_concept: int,
    image_size: int = 64,
    seed: int = 0,
    *,
    templates: Sequence[str] = TEMPLATES,
    context_limit: int = CONTEXT_LIMIT,
) -> Dataset:
    """Procedural texture images paired with template captions, concept-major order.

    Each concept gets its own brightness level, tint, stripe frequency and
    orientation; every image jitters those and draws a random phase and
    caption template. All randomness comes from ``stream(seed, 0, "synth")``.
    """
    concepts = list(concepts)
    if len(concepts) < 2 or len(set(concepts)) != len(concepts):
        raise BadConcepts("need at least two distinct concept names")
    if n_per_concept < 1:
        raise BadConcepts("n_per_concept must be >= 1")
    if image_size < 8:
        raise BadSpec("image_size must be >= 8")
    s = stream(seed, 0, "synth")
    k = len(concepts)
    families = []
    for i in range(k):
        families.append(
            dict(
                base=0.5 + 0.25 * i / (k - 1) + s.uniform(-0.03, 0.03),
                tint=[s.uniform(-0.06, 0.06) for _ in range(3)],
                freq=s.uniform(2.0, 6.0),
                theta=math.pi * i / k + s.uniform(-0.15, 0.15),
                amp=s.uniform(0.12, 0.22),
            )
        )
    texts = [t.format(c) for c in concepts for t in templates]
    vocab = build_vocab(texts)
    images, captions, tids = [], [], []
    for cid, name in enumerate(concepts):
        fam = families[cid]
        for _ in range(n_per_concept):
            phase = s.uniform(0.0, 2.0 * math.pi)
            freq = fam["freq"] * s.uniform(0.9, 1.1)
            theta = fam["theta"] + s.uniform(-0.1, 0.1)
            base = fam["base"] + s.uniform(-0.04, 0.04)
            tid = s.randbelow(len(templates))
            pixels = _render(image_size, base, fam["tint"], freq, theta, fam["amp"], phase)
            text = templates[tid].format(name)
            images.append(SynthImage(pixels, cid))
            captions.append(Caption(text, tuple(tokenize(text, vocab, context_limit)), cid))
            tids.append(tid)
    return Dataset(
        concepts=concepts,
        images=images,
        captions=captions,
        vocab=vocab,
        image_size=image_size,
        n_per_concept=n_per_concept,
        seed=seed,
        templates=tuple(templates),
        context_limit=context_limit,
        template_ids=tids,
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    height: int
    width: int
    area_fraction: float  # sampled before clamping


def _span(s: RngStream, lo: float, hi: float) -> float:
    # one draw even for a degenerate range, so streams stay aligned
    return lo + (hi - lo) * s.next_double()


def sample_crop(spec: AugmentSpec, height: int, width: int, s: RngStream) -> CropBox:
    """Draw one crop box; always consumes exactly four uniform draws."""
    area_frac = _span(s, spec.scale_min, spec.scale_max)
    log_ratio = _span(s, math.log(spec.ratio_min), math.log(spec.ratio_max))
    aspect = math.exp(log_ratio)
    target = area_frac * height * width
    w = min(max(int(round(math.sqrt(target * aspect))), 1), width)
    h = min(max(int(round(math.sqrt(target / aspect))), 1), height)
    top = int(s.next_double() * (height - h + 1))
    left = int(s.next_double() * (width - w + 1))
    return CropBox(top, left, h, w, area_frac)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    in_h, in_w = arr.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = axis(in_h, out_h)
    x0, x1, wx = axis(in_w, out_w)
    a = arr.astype(np.float64)
    top = a[y0][:, x0] * (1.0 - wx)[None, :, None] + a[y0][:, x1] * wx[None, :, None]
    bot = a[y1][:, x0] * (1.0 - wx)[None, :, None] + a[y1][:, x1] * wx[None, :, None]
    out = top * (1.0 - wy)[:, None, None] + bot * wy[:, None, None]
    return out.astype(arr.dtype)


def random_resized_crop(img: SynthImage, spec: AugmentSpec, s: RngStream) -> SynthImage:
    spec.validate()
    height, width = img.pixels.shape[:2]
    if spec.out_size > min(height, width):
        raise BadSpec(f"out_size {spec.out_size} exceeds image size {height}x{width}")
    box = sample_crop(spec, height, width, s)
    patch = img.pixels[box.top : box.top + box.height, box.left : box.left + box.width]
    return SynthImage(resize_bilinear(patch, spec.out_size, spec.out_size), img.concept_id)


def center_resize(img: SynthImage, out_size: int) -> SynthImage:
    """Evaluation transform: whole image resized to ``out_size``."""
    return SynthImage(resize_bilinear(img.pixels, out_size, out_size), img.concept_id)


def normalize_image(img, mean: Sequence[float] = CLIP_MEAN, std: Sequence[float] = CLIP_STD) -> np.ndarray:
    pixels = img.pixels if isinstance(img, SynthImage) else np.asarray(img)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if std.shape != (3,) or np.any(std <= 0):
        raise BadSpec("std must be three positive numbers")
    return ((pixels.astype(np.float64) - mean) / std).astype(np.float32)


def denormalize_image(arr: np.ndarray, mean: Sequence[float] = CLIP_MEAN, std: Sequence[float] = CLIP_STD) -> np.ndarray:
    return (arr.astype(np.float64) * np.asarray(std) + np.asarray(mean)).astype(np.float32)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + records.rpck
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
RECORDS = "records.rpck"


def dataset_records(ds: Dataset) -> dict[str, np.ndarray]:
    tokens = np.zeros((len(ds), ds.context_limit), dtype=np.float32)
    for i, cap in enumerate(ds.captions):
        tokens[i, : len(cap.token_ids)] = cap.token_ids
    return {
        "images": ds.pixels(),
        "concept_ids": ds.labels().astype(np.float32),
        "template_ids": np.asarray(ds.template_ids, dtype=np.float32),
        "token_ids": tokens,
    }


def save_dataset(ds: Dataset, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "cliprepro-dataset/1",
        "concepts": list(ds.concepts),
        "n_per_concept": ds.n_per_concept,
        "image_size": ds.image_size,
        "seed": ds.seed,
        "count": len(ds),
        "context_limit": ds.context_limit,
        "templates": list(ds.templates),
        "vocab": ds.vocab,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    numerics.save_checkpoint(out / RECORDS, dataset_records(ds), "f32")
    return out


def load_dataset(directory) -> Dataset:
    src = Path(directory)
    try:
        manifest = json.loads((src / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BadSpec(f"cannot read dataset manifest in {src}: {exc}") from None
    rec, _ = numerics.load_checkpoint(src / RECORDS)
    concepts = manifest["concepts"]
    templates = tuple(manifest["templates"])
    images, captions = [], []
    tids = rec["template_ids"].astype(np.int64).tolist()
    for i in range(manifest["count"]):
        cid = int(rec["concept_ids"][i])
        images.append(SynthImage(rec["images"][i], cid))
        ids = tuple(int(t) for t in rec["token_ids"][i] if t != PAD)
        captions.append(Caption(templates[tids[i]].format(concepts[cid]), ids, cid))
    return Dataset(
        concepts=concepts,
        images=images,
        captions=captions,
        vocab=dict(manifest["vocab"]),
        image_size=manifest["image_size"],
        n_per_concept=manifest["n_per_concept"],
        seed=manifest["seed"],
        templates=templates,
        context_limit=manifest["context_limit"],
        template_ids=tids,
    )
