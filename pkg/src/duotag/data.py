"""Label definitions, annotation consolidation, hierarchy closure and splits.

Ground truth comes from annotator votes: a class is positive for an image
when the voting rate reaches that class's agreement threshold (0.6 by
default), and positives propagate upward through the label hierarchy.
Splitting is stratified on each image's lowest-frequency positive label,
with frequencies computed globally before splitting; images without any
positive label form their own stratum and are kept (they still provide
negative supervision).

File formats:
  labels.csv        class_id,name,description,category,parent_id,prompt_mode,agreement_threshold
  annotations.jsonl one vote record per line
  features.csv      image_id followed by d_in floats
  ground_truth.jsonl {"image_id": ..., "positive_class_ids": [...]}
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

PROMPT_TEMPLATE = "a photo with {}"
DEFAULT_AGREEMENT_THRESHOLD = 0.6
DEFAULT_VOTES_PER_TASK = 5


@dataclass(frozen=True)
class LabelDef:
    class_id: str
    name: str
    description: str = ""
    category: str = ""
    parent_id: str | None = None
    prompt_mode: str = "name"
    agreement_threshold: float = DEFAULT_AGREEMENT_THRESHOLD

    def __post_init__(self):
        if not self.class_id:
            raise ValueError("class_id must be non-empty")
        if not self.name:
            raise ValueError(f"label {self.class_id!r} has an empty name")
        if self.prompt_mode not in ("name", "description"):
            raise ValueError(f"unknown prompt_mode {self.prompt_mode!r}")
        if not 0.0 <= self.agreement_threshold <= 1.0:
            raise ValueError("agreement_threshold must lie in [0, 1]")


class LabelSet:
    """Ordered label collection; validates ids and the parent forest."""

    def __init__(self, labels: list[LabelDef]):
        self.labels = list(labels)
        self.index = {label.class_id: j for j, label in enumerate(self.labels)}
        if len(self.index) != len(self.labels):
            raise ValueError("duplicate class_id in label list")
        for label in self.labels:
            if label.parent_id is not None and label.parent_id not in self.index:
                raise ValueError(f"label {label.class_id!r} references unknown "
                                 f"parent {label.parent_id!r}")
        self._check_acyclic()

    def _check_acyclic(self):
        for label in self.labels:
            seen = {label.class_id}
            current = label.parent_id
            while current is not None:
                if current in seen:
                    raise ValueError(f"hierarchy cycle through {current!r}")
                seen.add(current)
                current = self.labels[self.index[current]].parent_id

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __getitem__(self, class_id: str) -> LabelDef:
        return self.labels[self.index[class_id]]

    @property
    def class_ids(self) -> list[str]:
        return [label.class_id for label in self.labels]

    def ancestors(self, class_id: str) -> list[str]:
        out = []
        current = self[class_id].parent_id
        while current is not None:
            out.append(current)
            current = self[current].parent_id
        return out


def build_label_text(label: LabelDef) -> str:
    """Render a label as the prompt fed to the text encoder."""
    if label.prompt_mode == "description":
        if not label.description:
            raise ValueError(f"label {label.class_id!r} uses description prompts "
                             "but has no description")
        return PROMPT_TEMPLATE.format(label.description)
    return PROMPT_TEMPLATE.format(label.name)


def label_prompts(labels: LabelSet) -> list[str]:
    return [build_label_text(label) for label in labels]


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    class_id: str
    votes_positive: int
    votes_total: int = DEFAULT_VOTES_PER_TASK

    def __post_init__(self):
        if not 0 <= self.votes_positive <= self.votes_total:
            raise ValueError(f"votes_positive {self.votes_positive} outside "
                             f"[0, {self.votes_total}]")
        if self.votes_total < 1:
            raise ValueError("votes_total must be >= 1")


def consolidate(records: list[AnnotationRecord], labels: LabelSet,
                image_ids: list[str]) -> np.ndarray:
    """Vote records -> binary matrix; missing (image, class) pairs are negative."""
    row = {image_id: i for i, image_id in enumerate(image_ids)}
    if len(row) != len(image_ids):
        raise ValueError("duplicate image ids")
    truth = np.zeros((len(image_ids), len(labels)))
    for record in records:
        if record.class_id not in labels.index:
            raise ValueError(f"annotation references unknown class {record.class_id!r}")
        if record.image_id not in row:
            raise ValueError(f"annotation references unknown image {record.image_id!r}")
        label = labels[record.class_id]
        rate = record.votes_positive / record.votes_total
        if rate >= label.agreement_threshold:
            truth[row[record.image_id], labels.index[record.class_id]] = 1.0
    return truth


def propagate_hierarchy(truth: np.ndarray, labels: LabelSet) -> np.ndarray:
    """Mark every ancestor of a positive class positive; idempotent."""
    truth = np.asarray(truth)
    if truth.shape[1] != len(labels):
        raise ValueError(f"truth has {truth.shape[1]} columns for {len(labels)} labels")
    out = truth.copy()
    for j, label in enumerate(labels):
        rows = out[:, j] == 1
        if not rows.any():
            continue
        for ancestor in labels.ancestors(label.class_id):
            out[rows, labels.index[ancestor]] = 1.0
    return out


@dataclass
class ConsolidatedDataset:
    """Images with features, hierarchy-closed ground truth, and label defs.

    ``train_truth`` optionally carries a noisier variant of the labels to
    be used for the training split only; when absent the clean truth is
    used everywhere.
    """

    image_ids: list[str]
    features: np.ndarray
    truth: np.ndarray
    labels: LabelSet
    train_truth: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.image_ids)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.features.shape[0] != n or self.truth.shape != (n, len(self.labels)):
            raise ValueError("inconsistent dataset shapes")
        closed = propagate_hierarchy(self.truth, self.labels)
        if not np.array_equal(closed, self.truth):
            raise ValueError("ground truth is not hierarchy-closed")
        if self.train_truth is not None:
            self.train_truth = np.asarray(self.train_truth, dtype=np.float64)
            if self.train_truth.shape != self.truth.shape:
                raise ValueError("train_truth shape does not match truth")

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    def training_targets(self) -> np.ndarray:
        return self.truth if self.train_truth is None else self.train_truth

    def subset(self, indices) -> "ConsolidatedDataset":
        indices = np.asarray(indices, dtype=np.intp)
        return ConsolidatedDataset(
            image_ids=[self.image_ids[i] for i in indices],
            features=self.features[indices],
            truth=self.truth[indices],
            labels=self.labels,
            train_truth=None if self.train_truth is None else self.train_truth[indices],
        )


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError("need three strictly positive ratios")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


def _largest_remainder(n: int, ratios) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [int(e) for e in exact]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_indices(truth: np.ndarray, class_ids: list[str],
                       ratios, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partition row indices, stratified by lowest-frequency positive label.

    Frequency ties resolve to the smaller class_id; images with no
    positive label form the "" stratum. Deterministic per seed.
    """
    truth = np.asarray(truth)
    freq = truth.sum(axis=0)
    strata: dict[str, list[int]] = {}
    for i in range(truth.shape[0]):
        positive = np.flatnonzero(truth[i] == 1)
        if positive.size == 0:
            key = ""
        else:
            key = min((freq[j], class_ids[j]) for j in positive)[1]
        strata.setdefault(key, []).append(i)
    rng = np.random.default_rng(seed)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for key in sorted(strata):
        members = np.array(strata[key], dtype=np.intp)
        rng.shuffle(members)
        counts = _largest_remainder(len(members), ratios)
        start = 0
        for part, count in zip(parts, counts):
            part.extend(members[start:start + count].tolist())
            start += count
    return tuple(np.array(sorted(p), dtype=np.intp) for p in parts)


def stratified_split(dataset: ConsolidatedDataset, spec: SplitSpec):
    """Split into (train, val, test) datasets; together they partition input."""
    train_idx, val_idx, test_idx = stratified_indices(
        dataset.truth, dataset.labels.class_ids, spec.ratios, spec.seed)
    return dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx)


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------

LABELS_HEADER = ["class_id", "name", "description", "category", "parent_id",
                 "prompt_mode", "agreement_threshold"]


def write_labels(labels: LabelSet, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LABELS_HEADER)
        for label in labels:
            writer.writerow([label.class_id, label.name, label.description,
                             label.category, label.parent_id or "",
                             label.prompt_mode, repr(label.agreement_threshold)])


def read_labels(path) -> LabelSet:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != LABELS_HEADER:
            raise ValueError(f"unexpected labels header: {header}")
        labels = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(LABELS_HEADER):
                raise ValueError(f"{path}:{line_no}: expected {len(LABELS_HEADER)} fields")
            labels.append(LabelDef(
                class_id=row[0], name=row[1], description=row[2], category=row[3],
                parent_id=row[4] or None, prompt_mode=row[5],
                agreement_threshold=float(row[6])))
    return LabelSet(labels)


def write_annotations(records: list[AnnotationRecord], path) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps({
                "image_id": record.image_id, "class_id": record.class_id,
                "votes_positive": record.votes_positive,
                "votes_total": record.votes_total,
            }, sort_keys=True) + "\n")


def read_annotations(path) -> list[AnnotationRecord]:
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                records.append(AnnotationRecord(**doc))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed annotation: {exc}") from exc
    return records


def write_features(image_ids: list[str], features: np.ndarray, path) -> None:
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for image_id, row in zip(image_ids, features):
            writer.writerow([image_id] + [repr(v) for v in row])


def read_features(path) -> tuple[list[str], np.ndarray]:
    image_ids = []
    rows = []
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                image_ids.append(row[0])
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: malformed feature row: {exc}") from exc
    return image_ids, np.array(rows, dtype=np.float64)


def write_ground_truth(image_ids: list[str], truth: np.ndarray,
                       labels: LabelSet, path) -> None:
    class_ids = labels.class_ids
    with open(path, "w") as f:
        for i, image_id in enumerate(image_ids):
            positive = [class_ids[j] for j in np.flatnonzero(truth[i] == 1)]
            f.write(json.dumps({"image_id": image_id,
                                "positive_class_ids": positive},
                               sort_keys=True) + "\n")


def read_ground_truth(path, labels: LabelSet,
                      image_ids: list[str]) -> np.ndarray:
    row = {image_id: i for i, image_id in enumerate(image_ids)}
    truth = np.zeros((len(image_ids), len(labels)))
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                i = row[doc["image_id"]]
                for class_id in doc["positive_class_ids"]:
                    truth[i, labels.index[class_id]] = 1.0
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed ground truth: {exc}") from exc
    return truth


def save_dataset(dataset: ConsolidatedDataset, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_labels(dataset.labels, out_dir / "labels.csv")
    write_features(dataset.image_ids, dataset.features, out_dir / "features.csv")
    write_ground_truth(dataset.image_ids, dataset.truth, dataset.labels,
                       out_dir / "ground_truth.jsonl")
    if dataset.train_truth is not None:
        write_ground_truth(dataset.image_ids, dataset.train_truth, dataset.labels,
                           out_dir / "ground_truth_train.jsonl")


def load_dataset(data_dir) -> ConsolidatedDataset:
    data_dir = Path(data_dir)
    labels = read_labels(data_dir / "labels.csv")
    image_ids, features = read_features(data_dir / "features.csv")
    truth = read_ground_truth(data_dir / "ground_truth.jsonl", labels, image_ids)
    train_truth = None
    noisy_path = data_dir / "ground_truth_train.jsonl"
    if noisy_path.exists():
        train_truth = read_ground_truth(noisy_path, labels, image_ids)
    return ConsolidatedDataset(image_ids=image_ids, features=features, truth=truth,
                               labels=labels, train_truth=train_truth)
