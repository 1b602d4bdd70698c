"""Dual-encoder model: image features and label-texts meet in one embedding space.

The image side is a small affine+tanh stack over precomputed feature
vectors; the text side is a token-embedding lookup, mean pooling and an
affine+tanh stack. Both end in a bias-free projection into the joint
space, rows are L2-normalized, and logits are pairwise cosine
similarities scaled by exp(logit_scale), where logit_scale = ln(1/tau) is
a learnable, clamped scalar.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .loss import TemperedScale

LOGIT_SCALE_MAX = math.log(100.0)  # tau clamped at 0.01
DEFAULT_LOGIT_SCALE_INIT = 3.652

_WORD_RE = re.compile(r"[a-z0-9]+")
OOV_TOKEN = "<oov>"


class Tokenizer:
    """Lowercase word tokenizer with a fixed vocabulary and an OOV id of 0."""

    def __init__(self, vocab: list[str]):
        if not vocab or vocab[0] != OOV_TOKEN:
            raise ValueError(f"vocabulary must start with the {OOV_TOKEN!r} token")
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary contains duplicate tokens")
        self.vocab = list(vocab)
        self._ids = {token: i for i, token in enumerate(vocab)}

    @classmethod
    def from_texts(cls, texts) -> "Tokenizer":
        words = sorted({w for text in texts for w in _WORD_RE.findall(text.lower())})
        return cls([OOV_TOKEN] + words)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> "TokenizedText":
        words = _WORD_RE.findall(text.lower())
        if not words:
            raise ValueError(f"text tokenizes to nothing: {text!r}")
        ids = [self._ids.get(w, 0) for w in words]
        return TokenizedText(token_ids=ids, source=text)


@dataclass(frozen=True)
class TokenizedText:
    token_ids: list[int]
    source: str

    def __post_init__(self):
        if not self.token_ids:
            raise ValueError(f"empty token list for text {self.source!r}")

    @property
    def all_oov(self) -> bool:
        return all(i == 0 for i in self.token_ids)


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and initialization of the dual encoder.

    ``n_layers_img`` / ``n_layers_txt`` of 0 mean the trunk is the
    identity and the projection consumes the raw features (or pooled
    token embeddings) directly. The joint space defaults to a generous
    width: random-init cosines scale like 1/sqrt(d_e), so a wide space
    keeps the scaled logits unsaturated at the start of training even
    for large logit_scale values.
    """

    d_in: int
    vocab_size: int
    d_i: int = 32
    d_t: int = 16
    d_e: int = 128
    n_layers_img: int = 1
    n_layers_txt: int = 1
    logit_scale_init: float = DEFAULT_LOGIT_SCALE_INIT
    logit_scale_max: float = LOGIT_SCALE_MAX
    seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "vocab_size", "d_i", "d_t", "d_e"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_layers_img < 0 or self.n_layers_txt < 0:
            raise ValueError("layer counts must be >= 0")
        if not 0.0 <= self.logit_scale_init <= self.logit_scale_max:
            raise ValueError(f"logit_scale_init {self.logit_scale_init} outside "
                             f"[0, {self.logit_scale_max}]")


@dataclass(frozen=True)
class SimilarityLogits:
    """Raw pairwise cosines and their temperature-scaled counterparts."""

    raw: np.ndarray
    scaled: np.ndarray


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


class DualEncoderModel:
    """Parameter store for the dual encoder; graphs are built per pass."""

    def __init__(self, config: ModelConfig, tokenizer: Tokenizer,
                 params: dict[str, np.ndarray]):
        if tokenizer.vocab_size != config.vocab_size:
            raise ValueError(f"tokenizer vocabulary size {tokenizer.vocab_size} "
                             f"does not match config vocab_size {config.vocab_size}")
        self.config = config
        self.tokenizer = tokenizer
        self.params = params

    @property
    def logit_scale(self) -> float:
        return float(self.params["logit_scale"][0, 0])

    def scale(self) -> TemperedScale:
        return TemperedScale(self.logit_scale)

    def is_decayed(self, name: str) -> bool:
        """Weight decay applies to weights, not to biases or gain-like scalars."""
        return not (name.endswith("_b") or name == "logit_scale")

    def copy_params(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for name, arr in params.items():
            self.params[name][...] = arr


def init_model(config: ModelConfig, tokenizer: Tokenizer) -> DualEncoderModel:
    """Deterministically initialize all parameters from the config seed."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    width = config.d_in
    for i in range(config.n_layers_img):
        params[f"img{i}_w"] = _glorot(rng, width, config.d_i)
        params[f"img{i}_b"] = np.zeros((1, config.d_i))
        width = config.d_i
    params["proj_img"] = _glorot(rng, width, config.d_e)
    params["tok_emb"] = _glorot(rng, config.vocab_size, config.d_t)
    for i in range(config.n_layers_txt):
        params[f"txt{i}_w"] = _glorot(rng, config.d_t, config.d_t)
        params[f"txt{i}_b"] = np.zeros((1, config.d_t))
    params["proj_txt"] = _glorot(rng, config.d_t, config.d_e)
    params["logit_scale"] = np.array([[config.logit_scale_init]])
    return DualEncoderModel(config, tokenizer, params)


def clamp_logit_scale(model: DualEncoderModel) -> None:
    """Keep logit_scale in [0, logit_scale_max]; run after every optimizer step."""
    arr = model.params["logit_scale"]
    arr[0, 0] = min(max(arr[0, 0], 0.0), model.config.logit_scale_max)


class ModelGraph:
    """Bind a model's parameters onto one tape for a forward/backward pass."""

    def __init__(self, model: DualEncoderModel, tape: Tape | None = None,
                 trainable: bool = True):
        self.model = model
        self.tape = tape if tape is not None else Tape()
        if trainable:
            self.nodes = {name: self.tape.parameter(arr, name)
                          for name, arr in model.params.items()}
        else:
            self.nodes = {name: self.tape.constant(arr)
                          for name, arr in model.params.items()}

    def encode_images(self, features: np.ndarray) -> Node:
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.model.config.d_in:
            raise ValueError(f"features must be n x {self.model.config.d_in}, "
                             f"got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise FloatingPointError("image features contain non-finite values")
        x = self.tape.constant(feats)
        for i in range(self.model.config.n_layers_img):
            x = ad.tanh_act(ad.affine(x, self.nodes[f"img{i}_w"], self.nodes[f"img{i}_b"]))
        return ad.row_l2_normalize(ad.matmul(x, self.nodes["proj_img"]))

    def encode_texts(self, texts: list[TokenizedText]) -> Node:
        if not texts:
            raise ValueError("need at least one text to encode")
        vocab_size = self.model.config.vocab_size
        for text in texts:
            if any(i < 0 or i >= vocab_size for i in text.token_ids):
                raise IndexError(f"token id out of range for text {text.source!r}")
        all_ids = [i for text in texts for i in text.token_ids]
        lengths = [len(text.token_ids) for text in texts]
        x = ad.gather_rows(self.nodes["tok_emb"], all_ids)
        x = ad.mean_pool_rows(x, lengths)
        # text trunk stays affine (no nonlinearity): embeddings then compose
        # linearly in the pooled tokens, which zero-shot prompts rely on
        for i in range(self.model.config.n_layers_txt):
            x = ad.affine(x, self.nodes[f"txt{i}_w"], self.nodes[f"txt{i}_b"])
        return ad.row_l2_normalize(ad.matmul(x, self.nodes["proj_txt"]))

    def similarity(self, image_emb: Node, text_emb: Node) -> tuple[Node, Node]:
        """Pairwise cosine logits; returns (raw, scaled) nodes."""
        if image_emb.shape[1] != text_emb.shape[1]:
            raise ValueError(f"embedding dims differ: {image_emb.shape[1]} "
                             f"vs {text_emb.shape[1]}")
        raw = ad.matmul(image_emb, ad.transpose(text_emb))
        scaled = ad.scale_by_exp(raw, self.nodes["logit_scale"])
        return raw, scaled


def encode_images(model: DualEncoderModel, features: np.ndarray) -> np.ndarray:
    """No-grad image embedding (each row unit-norm)."""
    return ModelGraph(model, trainable=False).encode_images(features).value


def encode_texts(model: DualEncoderModel, texts: list[TokenizedText]) -> np.ndarray:
    """No-grad text embedding (one unit-norm row per label-text)."""
    return ModelGraph(model, trainable=False).encode_texts(texts).value


def similarity(model: DualEncoderModel, image_emb: np.ndarray,
               text_emb: np.ndarray) -> SimilarityLogits:
    """Pairwise cosines of precomputed embeddings, raw and scaled."""
    image_emb = np.asarray(image_emb, dtype=np.float64)
    text_emb = np.asarray(text_emb, dtype=np.float64)
    if image_emb.shape[1] != text_emb.shape[1]:
        raise ValueError(f"embedding dims differ: {image_emb.shape[1]} "
                         f"vs {text_emb.shape[1]}")
    raw = image_emb @ text_emb.T
    return SimilarityLogits(raw=raw, scaled=raw * np.exp(model.logit_scale))


def save_checkpoint(model: DualEncoderModel, path) -> None:
    """Write config, vocabulary and parameters as one JSON document.

    Floats survive the round trip bitwise, so a reloaded model reproduces
    embeddings exactly.
    """
    doc = {
        "config": asdict(model.config),
        "vocab": model.tokenizer.vocab,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in sorted(model.params.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> DualEncoderModel:
    doc = json.loads(Path(path).read_text())
    config = ModelConfig(**doc["config"])
    tokenizer = Tokenizer(doc["vocab"])
    params = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return DualEncoderModel(config, tokenizer, params)
