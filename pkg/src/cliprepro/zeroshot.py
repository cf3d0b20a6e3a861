"""Zero-shot classification from prompt templates, plus accuracy/sensitivity/specificity."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import TEMPLATES, AugmentSpec, Dataset, center_resize, normalize_image, tokenize
from .errors import BadSpec, DuplicateLabels, LengthMismatch, TooFewClasses
from .model import EncoderParams, encode_image, encode_text

PLACEHOLDER = "{}"


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: tuple = TEMPLATES

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise BadSpec("need at least one template")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise BadSpec(f"template {t!r} must contain exactly one {PLACEHOLDER} placeholder")

    def fill(self, label: str) -> list[str]:
        # literal substitution: str.format would choke on braces inside labels
        return [t.replace(PLACEHOLDER, label) for t in self.templates]


@dataclass(frozen=True)
class ClassEmbedding:
    label: str
    vector: np.ndarray


def expand_prompts(labels: Sequence[str], t: PromptTemplateSet | None = None) -> list[list[str]]:
    t = t or PromptTemplateSet()
    labels = list(labels)
    if not labels:
        raise DuplicateLabels("need at least one class label")
    if len(set(labels)) != len(labels):
        dup = sorted({x for x in labels if labels.count(x) > 1})
        raise DuplicateLabels(f"duplicate class labels: {dup}")
    return [t.fill(label) for label in labels]


def merge_embeddings(rows: np.ndarray) -> np.ndarray:
    """Mean of unit rows, renormalized; rows are summed in order."""
    rows = np.asarray(rows)
    total = rows[0].copy()
    for r in rows[1:]:
        total = total + r
    return nx.l2_normalize(total / rows.dtype.type(len(rows))).data


def build_class_embeddings(
    p: EncoderParams,
    labels: Sequence[str],
    t: PromptTemplateSet | None = None,
    vocab: dict | None = None,
    context_limit: int = 77,
) -> list[ClassEmbedding]:
    """One unit vector per class: encoded prompts averaged then renormalized.

    ``vocab`` maps words to token ids; it must be the vocabulary the text
    tower was trained with.
    """
    prompts = expand_prompts(labels, t)
    if vocab is None:
        raise BadSpec("a vocabulary is required to tokenize prompts")
    out = []
    for label, captions in zip(labels, prompts):
        tokens = [tokenize(c, vocab, context_limit) for c in captions]
        emb = encode_text(p, tokens).data
        out.append(ClassEmbedding(label, merge_embeddings(emb)))
    return out


def classify(U, classes: Sequence[ClassEmbedding]) -> np.ndarray:
    """Index of the class with the largest dot product; ties go to the lowest index."""
    if len(classes) < 2:
        raise TooFewClasses(f"need at least 2 classes, got {len(classes)}")
    U = np.atleast_2d(np.asarray(U.data if isinstance(U, nx.Tensor) else U))
    C = np.stack([c.vector for c in classes]).astype(U.dtype)
    scores = nx.matmul(nx.Tensor(U), nx.Tensor(C.T)).data
    return np.argmax(scores, axis=1)  # argmax returns the first maximum


@dataclass
class EvalReport:
    """Evaluation summary. Published table rows carry no counts or confusion (None)."""

    dataset: str
    class_names: list
    class_counts: list | None
    accuracy: float
    confusion: list | None  # confusion[true][pred]
    sensitivity: float | None = None
    specificity: float | None = None

    def accuracy_pct(self) -> str:
        return format_percent(self.accuracy)

    def to_dict(self) -> dict:
        out = {
            "dataset": self.dataset,
            "classes": list(self.class_names),
            "class_counts": None if self.class_counts is None else list(self.class_counts),
            "accuracy": self.accuracy,
            "accuracy_pct": self.accuracy_pct(),
        }
        if self.sensitivity is not None:
            out["sensitivity"] = self.sensitivity
            out["specificity"] = self.specificity
        out["confusion"] = None if self.confusion is None else [list(r) for r in self.confusion]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        counts, conf = d.get("class_counts"), d.get("confusion")
        return cls(
            dataset=d["dataset"],
            class_names=list(d["classes"]),
            class_counts=None if counts is None else list(counts),
            accuracy=d["accuracy"],
            confusion=None if conf is None else [list(r) for r in conf],
            sensitivity=d.get("sensitivity"),
            specificity=d.get("specificity"),
        )

    def render(self) -> str:
        parts = [f"accuracy {self.accuracy_pct()}"]
        if self.sensitivity is not None:
            parts.append(f"sensitivity {self.sensitivity!r}")
            parts.append(f"specificity {self.specificity!r}")
        return f"{self.dataset}: " + ", ".join(parts)


def format_percent(fraction: float) -> str:
    return f"{100.0 * fraction:.2f}%"


def metrics(
    preds: Sequence[int],
    labels: Sequence[int],
    positive_class: int = 1,
    *,
    class_names: Sequence[str] | None = None,
    dataset: str = "unnamed",
) -> EvalReport:
    """Confusion matrix and accuracy; sensitivity/specificity only for two classes."""
    preds, labels = [int(x) for x in preds], [int(x) for x in labels]
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    if not labels:
        raise LengthMismatch("no samples to evaluate")
    k = len(class_names) if class_names is not None else max(max(preds), max(labels), 1) + 1
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    conf = [[0] * k for _ in range(k)]
    for p, y in zip(preds, labels):
        if not (0 <= p < k and 0 <= y < k):
            raise LengthMismatch(f"class index outside [0, {k})")
        conf[y][p] += 1
    counts = [sum(row) for row in conf]
    acc = sum(conf[i][i] for i in range(k)) / len(labels)
    sens = spec = None
    if k == 2:
        pos, neg = positive_class, 1 - positive_class
        tp, fn = conf[pos][pos], conf[pos][neg]
        tn, fp = conf[neg][neg], conf[neg][pos]
        sens = tp / (tp + fn) if tp + fn else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
    return EvalReport(dataset, names, counts, acc, conf, sens, spec)


def evaluate(
    p: EncoderParams,
    ds: Dataset,
    out_size: int,
    mean=None,
    std=None,
    templates: PromptTemplateSet | None = None,
    dataset_name: str = "synthetic",
) -> EvalReport:
    """Zero-shot accuracy of ``p`` on ``ds`` using centre-resized images."""
    spec = AugmentSpec(out_size=out_size)
    mean = spec.mean if mean is None else mean
    std = spec.std if std is None else std
    classes = build_class_embeddings(p, ds.concepts, templates, ds.vocab, ds.context_limit)
    imgs = np.stack([normalize_image(center_resize(im, out_size), mean, std) for im in ds.images])
    U = encode_image(p, imgs)
    preds = classify(U, classes)
    return metrics(preds, ds.labels(), class_names=ds.concepts, dataset=dataset_name)
