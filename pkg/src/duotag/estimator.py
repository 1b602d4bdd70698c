"""scikit-learn style front door for the dual-encoder tagger.

X is a matrix of precomputed image feature vectors, Y the binary
multi-label indicator matrix. The estimator holds out a stratified
validation fraction for best-epoch selection, trains the dual encoder,
and scores via ``predict_proba``. ``score`` returns macro mAP (ranking
quality), not subset accuracy.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import stratified_indices
from .metrics import evaluate
from .model import LOGIT_SCALE_MAX, ModelConfig, Tokenizer
from .trainer import TrainConfig, TrainData, train


def _check_features(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_2d=True,
                       force_all_finite=True)


def _check_targets(Y, n_samples: int) -> np.ndarray:
    Y = check_array(Y, dtype=np.float64, ensure_2d=True)
    if Y.shape[0] != n_samples:
        raise ValueError(f"X has {n_samples} rows but Y has {Y.shape[0]}")
    if not np.all((Y == 0.0) | (Y == 1.0)):
        raise ValueError("Y must be a binary indicator matrix")
    return Y


class DualEncoderTagger(BaseEstimator):
    """Multi-label classifier scoring images against label-text embeddings.

    Parameters
    ----------
    label_texts : list of str, optional
        One prompt per output column (e.g. "a photo with pool"). When
        omitted, generic prompts "a photo with label {j}" are used.
    d_i, d_t, d_e : int
        Image trunk width, token embedding width, and joint embedding dim.
    n_layers_img, n_layers_txt : int
        Depth of the affine+tanh trunks (0 = linear projection only).
    logit_scale_init, logit_scale_max : float
        Initial and maximum value of the learnable log inverse temperature.
    logit_scale_frozen : bool
        Freeze the temperature instead of learning it.
    batch_size, epochs, learning_rate, weight_decay, pos_weight
        Optimizer settings; decay skips biases and the temperature scalar.
    validation_fraction : float
        Held-out fraction used to pick the best epoch (0 disables).
    random_state : int
        Seed for initialization, batching and the validation split.
    """

    def __init__(self, label_texts=None, d_i=32, d_t=16, d_e=128,
                 n_layers_img=1, n_layers_txt=1,
                 logit_scale_init=3.652, logit_scale_max=LOGIT_SCALE_MAX,
                 logit_scale_frozen=False, batch_size=32, epochs=30,
                 learning_rate=3e-4, weight_decay=0.01, pos_weight=10.0,
                 validation_fraction=0.1, random_state=0):
        self.label_texts = label_texts
        self.d_i = d_i
        self.d_t = d_t
        self.d_e = d_e
        self.n_layers_img = n_layers_img
        self.n_layers_txt = n_layers_txt
        self.logit_scale_init = logit_scale_init
        self.logit_scale_max = logit_scale_max
        self.logit_scale_frozen = logit_scale_frozen
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.pos_weight = pos_weight
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, Y):
        X = _check_features(X)
        Y = _check_targets(Y, X.shape[0])
        n_labels = Y.shape[1]
        if self.label_texts is not None:
            if len(self.label_texts) != n_labels:
                raise ValueError(f"{len(self.label_texts)} label_texts for "
                                 f"{n_labels} output columns")
            prompts = list(self.label_texts)
        else:
            prompts = [f"a photo with label {j}" for j in range(n_labels)]

        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.validation_fraction > 0.0 and X.shape[0] >= 10:
            vf = self.validation_fraction
            class_ids = [str(j) for j in range(n_labels)]
            train_idx, val_idx, _unused = stratified_indices(
                Y, class_ids, (1.0 - vf, vf, 0.0), self.random_state)
            data = TrainData(train_features=X[train_idx], train_targets=Y[train_idx],
                             prompts=prompts, val_features=X[val_idx],
                             val_truth=Y[val_idx])
        else:
            data = TrainData(train_features=X, train_targets=Y, prompts=prompts)

        tokenizer = Tokenizer.from_texts(prompts)
        model_config = ModelConfig(
            d_in=X.shape[1], vocab_size=tokenizer.vocab_size, d_i=self.d_i,
            d_t=self.d_t, d_e=self.d_e, n_layers_img=self.n_layers_img,
            n_layers_txt=self.n_layers_txt, logit_scale_init=self.logit_scale_init,
            logit_scale_max=self.logit_scale_max, seed=self.random_state)
        train_config = TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            pos_weight=self.pos_weight, logit_scale_frozen=self.logit_scale_frozen,
            seed=self.random_state)
        result = train(data, model_config, train_config, tokenizer=tokenizer)

        self.model_ = result.model
        self.history_ = result.history
        self.label_texts_ = prompts
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = n_labels
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = _check_features(X)
        from .inference import predict
        return predict(self.model_, X, self.label_texts_)

    def predict(self, X, threshold=0.5):
        return (self.predict_proba(X) >= threshold).astype(np.int64)

    def score(self, X, Y):
        """Macro mean average precision of the probability ranking."""
        check_is_fitted(self)
        X = _check_features(X)
        Y = _check_targets(Y, X.shape[0])
        ks = (min(10, Y.shape[1]),)
        return evaluate(self.predict_proba(X), Y, ks=ks).macro_map

    def _more_tags(self):
        return {"multilabel": True, "X_types": ["2darray"]}
