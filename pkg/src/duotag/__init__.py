"""duotag: dual-encoder multi-label image tagging with a tempered-sigmoid BCE.

Images (as precomputed feature vectors) and label-texts are embedded into
one joint space; a label's probability is the sigmoid of the
temperature-scaled cosine similarity, with the temperature learned during
training. The package ships its own small reverse-mode autodiff engine,
the full ranking-metric suite (AP, macro/weighted mAP, GAP, GAP@K),
annotation consolidation with label-hierarchy closure, stratified
splitting, a synthetic dataset generator, zero-shot scoring, per-class
threshold selection, and a CLI that wires it all into reproducible runs.
"""

from .data import (AnnotationRecord, ConsolidatedDataset, LabelDef, LabelSet,
                   SplitSpec, build_label_text, consolidate, label_prompts,
                   propagate_hierarchy, stratified_split)
from .estimator import DualEncoderTagger
from .inference import (clip_pair_baseline, export_embeddings, predict,
                        select_thresholds, zero_shot)
from .loss import LossBatch, TemperedScale, analytic_grad_logits, tempered_bce
from .metrics import (MetricReport, average_precision, evaluate, gap, gap_at_k,
                      macro_map, weighted_map)
from .model import (DualEncoderModel, ModelConfig, Tokenizer, clamp_logit_scale,
                    init_model, load_checkpoint, save_checkpoint)
from .synth import SynthConfig, synth_generate
from .trainer import TrainConfig, TrainData, temperature_sweep, train

__version__ = "0.1.0"

__all__ = [
    "AnnotationRecord", "ConsolidatedDataset", "DualEncoderModel",
    "DualEncoderTagger", "LabelDef", "LabelSet", "LossBatch", "MetricReport",
    "ModelConfig", "SplitSpec", "SynthConfig", "TemperedScale", "Tokenizer",
    "TrainConfig", "TrainData", "analytic_grad_logits", "average_precision",
    "build_label_text", "clamp_logit_scale", "clip_pair_baseline",
    "consolidate", "evaluate", "export_embeddings", "gap", "gap_at_k",
    "init_model", "label_prompts", "load_checkpoint", "macro_map", "predict",
    "propagate_hierarchy", "save_checkpoint", "select_thresholds",
    "stratified_split", "synth_generate", "temperature_sweep", "tempered_bce",
    "train", "weighted_map", "zero_shot",
]
