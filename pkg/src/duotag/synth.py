"""Synthetic multi-label image dataset generator.

Every class gets a latent prototype vector; an image's feature vector is
the sum of the prototypes of its positive classes plus Gaussian noise
scaled by 1/snr. Labels are drawn independently per class at the
configured frequency and then hierarchy-closed. A flip-noise rate
produces a corrupted copy of the labels intended for the training split
only, mimicking residual annotation noise; validation and test stay
clean.

Optionally the generator emits vote records that consolidate back to the
exact ground truth, and a held-out compositional class whose prototype is
the sum of two seen classes' prototypes (an image is positive for it when
positive for both parts) for zero-shot evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (AnnotationRecord, ConsolidatedDataset, LabelDef, LabelSet,
                   save_dataset, write_annotations)

_SINGLE_NAMES = [
    "garden", "beach", "kitchen", "bed", "sauna", "balcony", "lobby",
    "terrace", "gym", "bar", "forest", "lake", "mountain", "sunset", "spa",
    "patio", "dock", "cabin", "court", "harbor", "vineyard",
]


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 2000
    n_classes: int = 12
    d_in: int = 16
    hierarchy_depth: int = 2
    frequencies: tuple[float, ...] | None = None
    snr: float = 3.0
    flip_noise_rate: float = 0.0
    prototype_coherence: float = 0.0
    description_mode_classes: tuple[int, ...] = ()
    make_votes: bool = True
    make_holdout: bool = True
    votes_per_task: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1 or self.n_classes < 1 or self.d_in < 1:
            raise ValueError("n_images, n_classes and d_in must be >= 1")
        if self.hierarchy_depth not in (0, 2, 3):
            raise ValueError("hierarchy_depth must be 0 (flat), 2 or 3")
        if self.hierarchy_depth and self.n_classes < self.hierarchy_depth + 1:
            raise ValueError("not enough classes for the requested hierarchy")
        if self.frequencies is not None:
            if len(self.frequencies) != self.n_classes:
                raise ValueError("need one frequency per class")
            if any(not 0.0 < f < 1.0 for f in self.frequencies):
                raise ValueError("frequencies must lie in (0, 1)")
        if self.snr <= 0.0:
            raise ValueError("snr must be strictly positive")
        if not 0.0 <= self.flip_noise_rate < 1.0:
            raise ValueError("flip_noise_rate must lie in [0, 1)")
        if not 0.0 <= self.prototype_coherence < 1.0:
            raise ValueError("prototype_coherence must lie in [0, 1)")
        if any(not 0 <= i < self.n_classes for i in self.description_mode_classes):
            raise ValueError("description_mode_classes index out of range")


@dataclass
class SynthResult:
    dataset: ConsolidatedDataset
    records: list[AnnotationRecord]
    holdout_label: LabelDef | None
    holdout_truth: np.ndarray | None


def _make_labels(config: SynthConfig) -> LabelSet:
    labels: list[LabelDef] = []

    def add(class_id: str, name: str, parent_id: str | None = None):
        mode = "description" if len(labels) in config.description_mode_classes else "name"
        labels.append(LabelDef(
            class_id=class_id, name=name,
            description=f"{name}, a scene showing {name} and related amenities",
            category="synthetic", parent_id=parent_id, prompt_mode=mode))

    if config.hierarchy_depth >= 2:
        add("c00", "pool")
        add("c01", "indoor pool", parent_id="c00")
        add("c02", "outdoor pool", parent_id="c00")
        if config.hierarchy_depth == 3:
            add("c03", "heated indoor pool", parent_id="c01")
    remaining = config.n_classes - len(labels)
    if remaining > len(_SINGLE_NAMES):
        raise ValueError(f"at most {len(_SINGLE_NAMES) + len(labels)} classes supported")
    for k in range(remaining):
        add(f"c{len(labels):02d}", _SINGLE_NAMES[k])
    return LabelSet(labels)


def _default_frequencies(n_classes: int) -> np.ndarray:
    return np.linspace(0.35, 0.08, n_classes)


def synth_generate(config: SynthConfig) -> SynthResult:
    """Generate a dataset (plus optional votes and holdout class) from a seed."""
    rng = np.random.default_rng(config.seed)
    labels = _make_labels(config)
    n, n_classes = config.n_images, config.n_classes
    freq = (np.asarray(config.frequencies, dtype=np.float64)
            if config.frequencies is not None else _default_frequencies(n_classes))

    prototypes = rng.normal(size=(n_classes, config.d_in))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    if config.prototype_coherence > 0.0:
        # crowd prototypes around one shared direction: class identity then
        # lives in a small distinct component, so many samples are hard
        shared = rng.normal(size=config.d_in)
        shared /= np.linalg.norm(shared)
        coh = config.prototype_coherence
        prototypes = coh * shared + np.sqrt(1.0 - coh * coh) * prototypes
        prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    truth = (rng.random((n, n_classes)) < freq).astype(np.float64)
    # closure: a positive child always implies its ancestors
    for j, label in enumerate(labels):
        rows = truth[:, j] == 1
        ancestor = label.parent_id
        while ancestor is not None:
            truth[rows, labels.index[ancestor]] = 1.0
            ancestor = labels[ancestor].parent_id

    noise = rng.normal(size=(n, config.d_in)) / config.snr
    features = truth @ prototypes + noise

    train_truth = None
    if config.flip_noise_rate > 0.0:
        flips = rng.random((n, n_classes)) < config.flip_noise_rate
        train_truth = np.where(flips, 1.0 - truth, truth)

    image_ids = [f"img{i:05d}" for i in range(n)]
    dataset = ConsolidatedDataset(image_ids=image_ids, features=features,
                                  truth=truth, labels=labels,
                                  train_truth=train_truth)

    records: list[AnnotationRecord] = []
    if config.make_votes:
        v = config.votes_per_task
        lo = int(np.ceil(0.6 * v))  # smallest vote count that clears the default threshold
        pos_votes = rng.integers(lo, v + 1, size=(n, n_classes))
        neg_votes = rng.integers(0, lo, size=(n, n_classes))
        for i, image_id in enumerate(image_ids):
            for j, label in enumerate(labels):
                count = pos_votes[i, j] if truth[i, j] == 1 else neg_votes[i, j]
                records.append(AnnotationRecord(image_id=image_id,
                                                class_id=label.class_id,
                                                votes_positive=int(count),
                                                votes_total=v))

    holdout_label = None
    holdout_truth = None
    if config.make_holdout:
        leaves = [label for label in labels
                  if label.parent_id is None and not any(
                      other.parent_id == label.class_id for other in labels)]
        if len(leaves) < 2:
            raise ValueError("holdout class needs at least two standalone classes")
        a, b = leaves[0], leaves[1]
        holdout_label = LabelDef(
            class_id="holdout", name=f"{a.name} and {b.name}",
            description=f"{a.name} and {b.name} together in one scene",
            category="synthetic")
        ja, jb = labels.index[a.class_id], labels.index[b.class_id]
        holdout_truth = truth[:, ja] * truth[:, jb]

    return SynthResult(dataset=dataset, records=records,
                       holdout_label=holdout_label, holdout_truth=holdout_truth)


def save_synth(result: SynthResult, out_dir) -> None:
    out_dir = Path(out_dir)
    save_dataset(result.dataset, out_dir)
    if result.records:
        write_annotations(result.records, out_dir / "annotations.jsonl")
    if result.holdout_label is not None:
        positives = [result.dataset.image_ids[i]
                     for i in np.flatnonzero(result.holdout_truth == 1)]
        doc = {
            "class_id": result.holdout_label.class_id,
            "name": result.holdout_label.name,
            "description": result.holdout_label.description,
            "positive_image_ids": positives,
        }
        (out_dir / "holdout.json").write_text(json.dumps(doc, sort_keys=True,
                                                         indent=1) + "\n")


def load_holdout(path, image_ids: list[str]) -> tuple[LabelDef, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    label = LabelDef(class_id=doc["class_id"], name=doc["name"],
                     description=doc["description"], category="synthetic")
    positives = set(doc["positive_image_ids"])
    truth = np.array([1.0 if image_id in positives else 0.0
                      for image_id in image_ids])
    return label, truth


def default_noisy_config(seed: int = 7) -> SynthConfig:
    """The standard noisy benchmark: 2000 images, 12 classes, one 2-level
    hierarchy, 10% label flips on the training labels.

    Frequencies mix two well-covered standalone classes (they host the
    compositional holdout) with a low-frequency tail whose supervision is
    mostly flip noise; prototypes are partially crowded so hard samples
    exist. Three classes use description prompts, which also puts the
    connective words of the description template into the vocabulary.
    """
    frequencies = (0.35, 0.32, 0.30, 0.45, 0.40) + tuple(
        float(f) for f in np.linspace(0.12, 0.05, 7))
    return SynthConfig(n_images=2000, n_classes=12, d_in=16, hierarchy_depth=2,
                       frequencies=frequencies, snr=16.0,
                       prototype_coherence=0.5, flip_noise_rate=0.1,
                       description_mode_classes=(5, 6, 7), seed=seed)


def separable_config(seed: int = 5) -> SynthConfig:
    """A small clean set that a healthy model must overfit almost perfectly."""
    return SynthConfig(n_images=200, n_classes=5, d_in=8, hierarchy_depth=0,
                       snr=50.0, flip_noise_rate=0.0, make_votes=False,
                       make_holdout=False, seed=seed)
