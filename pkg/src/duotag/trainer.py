"""Mini-batch training loop with decoupled weight decay.

Each step builds a fresh tape: encode the image batch, encode every
label-text (the class count is small and the text encoder's weights move
every step, so nothing is cached), take scaled cosine logits, and apply
the fused tempered BCE. The optimizer applies decoupled multiplicative
weight decay to weight matrices only — biases and the logit_scale scalar
are exempt — and logit_scale is clamped back into range after every step.

The returned model is the best-validation-macro-mAP snapshot; the full
epoch history (including the logit_scale trajectory) is kept for
inspection.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import ConsolidatedDataset, label_prompts
from .inference import predict_probs
from .loss import fused_bce_node
from .metrics import MetricReport, evaluate
from .model import (DualEncoderModel, ModelConfig, ModelGraph, Tokenizer,
                    clamp_logit_scale, init_model)


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; message carries diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pos_weight: float | tuple[float, ...] = 10.0
    logit_scale_init: float | None = None  # overrides the model config when set
    logit_scale_frozen: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be > 0")


@dataclass
class OptimizerState:
    """First/second moment accumulators and the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_model(cls, model: DualEncoderModel) -> "OptimizerState":
        return cls(m={name: np.zeros_like(arr) for name, arr in model.params.items()},
                   v={name: np.zeros_like(arr) for name, arr in model.params.items()},
                   step=0)


def optimizer_step(model: DualEncoderModel, grads: dict[str, np.ndarray],
                   state: OptimizerState, config: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, then the logit_scale clamp."""
    missing = set(model.params) - set(grads)
    if missing:
        raise ValueError(f"gradients missing for parameters: {sorted(missing)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    for name in sorted(model.params):
        if config.logit_scale_frozen and name == "logit_scale":
            continue
        g = grads[name]
        p = model.params[name]
        if config.weight_decay > 0.0 and model.is_decayed(name):
            p *= 1.0 - lr * config.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
    clamp_logit_scale(model)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_metrics: MetricReport | None
    logit_scale: float

    def to_dict(self, class_ids: list[str] | None = None) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "logit_scale": self.logit_scale,
            "val": None if self.val_metrics is None
            else self.val_metrics.to_dict(class_ids),
        }


@dataclass
class TrainData:
    """Arrays and label-texts for one training run; val split may be absent."""

    train_features: np.ndarray
    train_targets: np.ndarray
    prompts: list[str]
    val_features: np.ndarray | None = None
    val_truth: np.ndarray | None = None
    class_ids: list[str] | None = None

    @property
    def has_validation(self) -> bool:
        return (self.val_features is not None and self.val_truth is not None
                and len(self.val_features) > 0)


@dataclass
class TrainResult:
    model: DualEncoderModel
    history: list[EpochReport]
    best_epoch: int | None


def _pos_weight_vector(config: TrainConfig, n_classes: int) -> np.ndarray:
    w = np.asarray(config.pos_weight, dtype=np.float64)
    if w.ndim == 0:
        w = np.full(n_classes, float(w))
    if w.shape != (n_classes,):
        raise ValueError(f"pos_weight must be scalar or length {n_classes}")
    if not np.all(w > 0.0):
        raise ValueError("pos_weight must be strictly positive")
    return w


def train(data: TrainData, model_config: ModelConfig, train_config: TrainConfig,
          tokenizer: Tokenizer | None = None) -> TrainResult:
    """Run the full loop; deterministic for fixed configs and seeds."""
    if len(data.train_features) == 0:
        raise ValueError("training split is empty")
    if tokenizer is None:
        tokenizer = Tokenizer.from_texts(data.prompts)
    if train_config.logit_scale_init is not None:
        model_config = replace(model_config,
                               logit_scale_init=train_config.logit_scale_init)
    model = init_model(model_config, tokenizer)
    texts = [tokenizer.encode(p) for p in data.prompts]
    n_classes = len(texts)
    targets = np.asarray(data.train_targets, dtype=np.float64)
    if targets.shape != (len(data.train_features), n_classes):
        raise ValueError("train_targets shape does not match features/prompts")
    pos_w = _pos_weight_vector(train_config, n_classes)

    state = OptimizerState.for_model(model)
    rng = np.random.default_rng(train_config.seed)
    history: list[EpochReport] = []
    best_epoch: int | None = None
    best_macro = -np.inf
    best_params = None
    n_train = len(data.train_features)

    for epoch in range(train_config.epochs):
        order = rng.permutation(n_train)
        total = 0.0
        for batch_no, start in enumerate(range(0, n_train, train_config.batch_size)):
            idx = order[start:start + train_config.batch_size]
            graph = ModelGraph(model)
            image_emb = graph.encode_images(data.train_features[idx])
            text_emb = graph.encode_texts(texts)
            _, scaled = graph.similarity(image_emb, text_emb)
            loss_node = fused_bce_node(scaled, targets[idx], pos_w)
            loss_value = loss_node.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"loss is {loss_value} at epoch {epoch} batch {batch_no} "
                    f"(logit_scale={model.logit_scale:.4f})")
            grads = graph.tape.backward(loss_node)
            optimizer_step(model, grads, state, train_config)
            total += loss_value * len(idx)
        train_loss = total / n_train

        val_metrics = None
        if data.has_validation:
            probs = predict_probs(model, data.val_features, texts)
            ks = (min(10, n_classes),)
            val_metrics = evaluate(probs, data.val_truth, ks=ks)
            if val_metrics.macro_map > best_macro:
                best_macro = val_metrics.macro_map
                best_epoch = epoch
                best_params = model.copy_params()
        history.append(EpochReport(epoch=epoch, train_loss=train_loss,
                                   val_metrics=val_metrics,
                                   logit_scale=model.logit_scale))

    if best_params is not None:
        model.load_params(best_params)
    return TrainResult(model=model, history=history, best_epoch=best_epoch)


def train_data_from_datasets(train_ds: ConsolidatedDataset,
                             val_ds: ConsolidatedDataset | None) -> TrainData:
    """Assemble a TrainData bundle; train targets use the noisy variant if present."""
    return TrainData(
        train_features=train_ds.features,
        train_targets=train_ds.training_targets(),
        prompts=label_prompts(train_ds.labels),
        val_features=None if val_ds is None else val_ds.features,
        val_truth=None if val_ds is None else val_ds.truth,
        class_ids=train_ds.labels.class_ids,
    )


@dataclass
class SweepCell:
    logit_scale_init: float
    macro_map: float | None
    gap_at_k: float | None
    k: int | None
    best_epoch: int | None
    error: str | None = None


def temperature_sweep(grid, data: TrainData, model_config: ModelConfig,
                      train_config: TrainConfig) -> list[SweepCell]:
    """One full training run per logit_scale_init; failures don't stop the sweep."""
    if len(list(grid)) == 0:
        raise ValueError("sweep grid is empty")
    if not data.has_validation:
        raise ValueError("the sweep compares validation metrics; provide a val split")
    cells: list[SweepCell] = []
    k = min(10, len(data.prompts))
    for init in grid:
        cfg = replace(train_config, logit_scale_init=float(init))
        try:
            result = train(data, model_config, cfg)
            report = result.history[result.best_epoch].val_metrics
            cells.append(SweepCell(logit_scale_init=float(init),
                                   macro_map=report.macro_map,
                                   gap_at_k=report.gap_at_k[k], k=k,
                                   best_epoch=result.best_epoch))
        except (TrainingDiverged, FloatingPointError, ValueError) as exc:
            cells.append(SweepCell(logit_scale_init=float(init), macro_map=None,
                                   gap_at_k=None, k=None, best_epoch=None,
                                   error=str(exc)))
    return cells


def write_history(history: list[EpochReport], path,
                  class_ids: list[str] | None = None) -> None:
    with open(path, "w") as f:
        for report in history:
            f.write(json.dumps(report.to_dict(class_ids), sort_keys=True) + "\n")


def write_sweep_csv(cells: list[SweepCell], path) -> None:
    ks = [cell.k for cell in cells if cell.k is not None]
    k = ks[0] if ks else 10
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["logit_scale_init", "macro_map", f"gap_at_{k}",
                         "best_epoch", "error"])
        for cell in cells:
            writer.writerow([
                repr(cell.logit_scale_init),
                "" if cell.macro_map is None else repr(cell.macro_map),
                "" if cell.gap_at_k is None else repr(cell.gap_at_k),
                "" if cell.best_epoch is None else cell.best_epoch,
                cell.error or "",
            ])
