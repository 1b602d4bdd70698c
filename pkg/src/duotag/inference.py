"""Scoring, zero-shot prediction, the pair-softmax baseline and thresholds.

A prediction is sigmoid(cosine * exp(logit_scale)); zero-shot scoring is
the same pipeline on label-texts the model never trained on. The
pair-softmax baseline scores each class by softmax over the logits of
("a photo", "a photo of {name}") and keeps the second component, which
algebraically equals sigmoid of the logit difference.

Threshold selection finds, per class, the largest probability cutoff that
keeps recall at or above a target on a reference split, and reports how
much of the prediction volume falls below the cutoffs (the storage that
could be dropped).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .loss import stable_sigmoid
from .model import DualEncoderModel, ModelGraph, TokenizedText

PAIR_PROMPT_EMPTY = "a photo"
PAIR_PROMPT_TEMPLATE = "a photo of {}"


def predict_probs(model: DualEncoderModel, features: np.ndarray,
                  texts: list[TokenizedText]) -> np.ndarray:
    """Probability matrix for already-tokenized label-texts."""
    graph = ModelGraph(model, trainable=False)
    image_emb = graph.encode_images(features)
    text_emb = graph.encode_texts(texts)
    _, scaled = graph.similarity(image_emb, text_emb)
    return stable_sigmoid(scaled.value)


def predict(model: DualEncoderModel, features: np.ndarray,
            prompts: list[str]) -> np.ndarray:
    """Probability matrix (n x L) for the given label-text prompts."""
    if not prompts:
        raise ValueError("need at least one prompt")
    texts = [model.tokenizer.encode(p) for p in prompts]
    return predict_probs(model, features, texts)


def zero_shot(model: DualEncoderModel, features: np.ndarray,
              prompts: list[str]) -> np.ndarray:
    """Score unseen label-texts with no retraining.

    Identical to predict except prompts made only of out-of-vocabulary
    words are rejected (their embedding would carry no class signal).
    """
    if not prompts:
        raise ValueError("need at least one prompt")
    texts = []
    for prompt in prompts:
        text = model.tokenizer.encode(prompt)
        if text.all_oov:
            raise ValueError(f"prompt has no in-vocabulary token: {prompt!r}")
        texts.append(text)
    return predict_probs(model, features, texts)


def clip_pair_baseline(model: DualEncoderModel, features: np.ndarray,
                       class_names: list[str]) -> np.ndarray:
    """Pair-softmax scoring: P(class) = softmax([s_empty, s_class])[1].

    The empty prompt is encoded once and shared across classes.
    """
    if not class_names:
        raise ValueError("need at least one class name")
    prompts = [PAIR_PROMPT_EMPTY] + [PAIR_PROMPT_TEMPLATE.format(name)
                                     for name in class_names]
    texts = [model.tokenizer.encode(p) for p in prompts]
    graph = ModelGraph(model, trainable=False)
    image_emb = graph.encode_images(features)
    text_emb = graph.encode_texts(texts)
    _, scaled = graph.similarity(image_emb, text_emb)
    logits = scaled.value
    # softmax over the pair reduces to a sigmoid of the difference
    return stable_sigmoid(logits[:, 1:] - logits[:, :1])


@dataclass
class ClassThreshold:
    class_id: str
    threshold: float | None  # None when the class has no positives
    recall: float | None
    drop_fraction: float | None


@dataclass
class ThresholdTable:
    rows: list[ClassThreshold]
    overall_drop_fraction: float

    def by_class(self) -> dict[str, ClassThreshold]:
        return {row.class_id: row for row in self.rows}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class_id", "threshold", "recall", "drop_fraction"])
            for row in self.rows:
                writer.writerow([
                    row.class_id,
                    "" if row.threshold is None else repr(row.threshold),
                    "" if row.recall is None else repr(row.recall),
                    "" if row.drop_fraction is None else repr(row.drop_fraction),
                ])


def read_threshold_csv(path) -> dict[str, float]:
    """class_id -> threshold for all classes where one is defined."""
    out: dict[str, float] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            if row and row[1]:
                out[row[0]] = float(row[1])
    return out


def select_thresholds(scores: np.ndarray, truth: np.ndarray,
                      target_recall: float,
                      class_ids: list[str] | None = None) -> ThresholdTable:
    """Largest per-class cutoff whose recall on the reference split stays
    at or above the target; predictions scoring below their class cutoff
    count as dropped."""
    if not 0.0 < target_recall <= 1.0:
        raise ValueError("target_recall must lie in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth shapes differ")
    n, n_classes = scores.shape
    if class_ids is None:
        class_ids = [str(j) for j in range(n_classes)]
    rows = []
    dropped = 0
    considered = 0
    for j in range(n_classes):
        positive_scores = scores[truth[:, j] == 1, j]
        n_pos = positive_scores.size
        if n_pos == 0:
            rows.append(ClassThreshold(class_ids[j], None, None, None))
            continue
        keep = int(np.ceil(target_recall * n_pos))
        threshold = float(np.sort(positive_scores)[::-1][keep - 1])
        achieved = float(np.sum(positive_scores >= threshold)) / n_pos
        drop = float(np.sum(scores[:, j] < threshold)) / n
        rows.append(ClassThreshold(class_ids[j], threshold, achieved, drop))
        dropped += int(np.sum(scores[:, j] < threshold))
        considered += n
    if considered == 0:
        raise ValueError("no class has any positives; thresholds undefined")
    return ThresholdTable(rows=rows, overall_drop_fraction=dropped / considered)


def write_predictions(image_ids: list[str], probs: np.ndarray,
                      class_ids: list[str], path,
                      thresholds: dict[str, float] | None = None) -> None:
    """JSONL {image_id, scores:{class_id: p}}; sub-threshold entries omitted."""
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w") as f:
        for i, image_id in enumerate(image_ids):
            scores = {}
            for j, class_id in enumerate(class_ids):
                p = float(probs[i, j])
                if thresholds is not None and class_id in thresholds \
                        and p < thresholds[class_id]:
                    continue
                scores[class_id] = p
            f.write(json.dumps({"image_id": image_id, "scores": scores},
                               sort_keys=True) + "\n")


def export_embeddings(model: DualEncoderModel, features: np.ndarray,
                      image_ids: list[str], path) -> None:
    """CSV of image_id plus the unit-norm joint embedding, reload-stable."""
    graph = ModelGraph(model, trainable=False)
    emb = graph.encode_images(features).value
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for image_id, row in zip(image_ids, emb):
            writer.writerow([image_id] + [repr(v) for v in row])


def export_logit_histogram(model: DualEncoderModel, features: np.ndarray,
                           prompts: list[str], path, bins: int = 40) -> None:
    """Histogram of scaled output logits, for inspecting class separation."""
    texts = [model.tokenizer.encode(p) for p in prompts]
    graph = ModelGraph(model, trainable=False)
    image_emb = graph.encode_images(features)
    text_emb = graph.encode_texts(texts)
    _, scaled = graph.similarity(image_emb, text_emb)
    counts, edges = np.histogram(scaled.value.ravel(), bins=bins)
    doc = {"bin_edges": edges.tolist(), "counts": counts.tolist()}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
