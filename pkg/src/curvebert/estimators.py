"""Scikit-learn style estimators wrapping the training pipeline.

``CurveBertPretrainer`` is an unsupervised transformer: ``fit`` runs
masked-curve pre-training on a matrix of curves, ``transform`` returns the
encoder's representation (aggregate vector plus content-token vectors,
flattened). ``CurveBertClassifier`` fine-tunes a classifier head, either
from scratch or on top of a pretrainer/checkpoint, and follows the usual
``fit`` / ``predict`` / ``predict_proba`` contract, so both compose with
sklearn pipelines and model selection utilities.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import numerics as nm
from .checkpoint import Checkpoint, load_checkpoint
from .data import DatasetSplit, SpectralCurve
from .encoder import encoder_forward
from .input_layer import ModelConfig, compose_batch
from .trainer import TrainSpec, finetune, predict, pretrain

__all__ = ["CurveBertPretrainer", "CurveBertClassifier", "check_curve_matrix"]


def check_curve_matrix(X, curve_length: int | None = None) -> np.ndarray:
    """Validate a [n_curves, curve_length] float matrix."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if curve_length is not None and X.shape[1] != curve_length:
        raise ValueError(f"expected curves of length {curve_length}, got {X.shape[1]}")
    return X


def _as_curves(X: np.ndarray, y=None) -> list[SpectralCurve]:
    labels = [None] * len(X) if y is None else y
    return [
        SpectralCurve(row, label=None if lab is None else int(lab), source_id=f"row{i}")
        for i, (row, lab) in enumerate(zip(X, labels))
    ]


def _holdout(curves: list[SpectralCurve], fraction: float, seed: int, stratify: bool):
    """Deterministic train/validation holdout (per class when labeled)."""
    rng = np.random.default_rng(seed)
    if stratify:
        groups: dict[int, list[int]] = {}
        for i, c in enumerate(curves):
            groups.setdefault(int(c.label), []).append(i)
        train_idx, valid_idx = [], []
        for label in sorted(groups):
            idx = np.array(groups[label])
            n_valid = max(1, int(round(len(idx) * fraction)))
            if n_valid >= len(idx):
                raise ValueError(f"class {label} too small for a {fraction:.0%} validation holdout")
            order = rng.permutation(len(idx))
            valid_idx.extend(idx[order[:n_valid]])
            train_idx.extend(idx[order[n_valid:]])
    else:
        order = rng.permutation(len(curves))
        n_valid = max(1, int(round(len(curves) * fraction)))
        if n_valid >= len(curves):
            raise ValueError("dataset too small for the validation holdout")
        valid_idx, train_idx = order[:n_valid], order[n_valid:]
    return [curves[i] for i in sorted(train_idx)], [curves[i] for i in sorted(valid_idx)]


class CurveBertPretrainer(TransformerMixin, BaseEstimator):
    """Unsupervised masked-curve pre-training as a feature transformer.

    Parameters mirror the model configuration; ``task_variant`` selects the
    pre-training objective. Pair-based variants need labels in ``fit`` (to
    form same/different-class pairs); the single-curve variant does not.
    """

    def __init__(
        self,
        L=8,
        A=8,
        H=256,
        token_size=100,
        task_variant="NCP-OMCM",
        dropout=0.1,
        batch_size=64,
        max_epoch=2000,
        patience=20,
        lr=0.001,
        weight_decay=0.01,
        val_fraction=0.15,
        random_state=0,
    ):
        self.L = L
        self.A = A
        self.H = H
        self.token_size = token_size
        self.task_variant = task_variant
        self.dropout = dropout
        self.batch_size = batch_size
        self.max_epoch = max_epoch
        self.patience = patience
        self.lr = lr
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _config(self, curve_length: int, num_classes: int = 2) -> ModelConfig:
        return ModelConfig(
            L=self.L,
            A=self.A,
            H=self.H,
            token_size=self.token_size,
            curve_length=curve_length,
            num_classes=num_classes,
            task_variant=self.task_variant,
            dropout=self.dropout,
        )

    def fit(self, X, y=None):
        X = check_curve_matrix(X)
        labeled = y is not None
        if self.task_variant != "NCP-OMCM" and not labeled:
            raise ValueError(f"{self.task_variant} pre-training forms class pairs and needs y")
        curves = _as_curves(X, y)
        train, valid = _holdout(curves, self.val_fraction, self.random_state, stratify=labeled)
        config = self._config(X.shape[1])
        spec = TrainSpec(
            phase="pretrain",
            batch_size=min(self.batch_size, len(train)),
            max_epoch=self.max_epoch,
            patience=self.patience,
            seed=self.random_state,
            lr=self.lr,
            weight_decay=self.weight_decay,
        )
        self.checkpoint_ = pretrain(train, valid, config, spec)
        self.config_ = config
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        """Encoder features per curve: [aggregate, token_1..token_N] flattened."""
        check_is_fitted(self, "checkpoint_")
        X = check_curve_matrix(X, self.n_features_in_)
        params = self.checkpoint_.params
        config = self.config_
        rows = []
        for start in range(0, len(X), self.batch_size):
            batch = [X[i] for i in range(start, min(start + self.batch_size, len(X)))]
            seq = compose_batch(batch, None, params, config)
            out = encoder_forward(seq, params, config)
            tokens = out.tokens.data[:, seq.content_positions, :]
            feats = np.concatenate([out.cls.data, tokens.reshape(len(batch), -1)], axis=1)
            rows.append(feats)
        return np.concatenate(rows, axis=0)


class CurveBertClassifier(ClassifierMixin, BaseEstimator):
    """Curve classifier fine-tuned from scratch or from a pre-trained model.

    ``pretrained`` may be a fitted :class:`CurveBertPretrainer`, a
    :class:`Checkpoint`, or a checkpoint path; None trains from scratch.
    Architecture parameters are ignored when a pre-trained model is given
    (its architecture wins).
    """

    def __init__(
        self,
        L=8,
        A=8,
        H=256,
        token_size=100,
        pretrained=None,
        finetune_mode="all_tokens",
        dropout=0.1,
        batch_size=128,
        max_epoch=2000,
        patience=20,
        lr=0.001,
        weight_decay=0.01,
        val_fraction=0.15,
        random_state=0,
    ):
        self.L = L
        self.A = A
        self.H = H
        self.token_size = token_size
        self.pretrained = pretrained
        self.finetune_mode = finetune_mode
        self.dropout = dropout
        self.batch_size = batch_size
        self.max_epoch = max_epoch
        self.patience = patience
        self.lr = lr
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _resolve_pretrained(self) -> Checkpoint | None:
        p = self.pretrained
        if p is None:
            return None
        if isinstance(p, Checkpoint):
            return p
        if isinstance(p, CurveBertPretrainer):
            check_is_fitted(p, "checkpoint_")
            return p.checkpoint_
        if isinstance(p, (str, Path)):
            return load_checkpoint(p)
        raise TypeError(f"pretrained must be None, a Checkpoint, a CurveBertPretrainer, or a path; got {type(p)}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("classification needs at least 2 classes")
        base = self._resolve_pretrained()
        if base is not None:
            config = ModelConfig(
                L=base.config.L,
                A=base.config.A,
                H=base.config.H,
                token_size=base.config.token_size,
                curve_length=X.shape[1],
                num_classes=len(self.classes_),
                task_variant=base.config.task_variant,
                dropout=self.dropout,
            )
        else:
            config = ModelConfig(
                L=self.L,
                A=self.A,
                H=self.H,
                token_size=self.token_size,
                curve_length=X.shape[1],
                num_classes=len(self.classes_),
                dropout=self.dropout,
            )
        curves = _as_curves(X, encoded)
        train, valid = _holdout(curves, self.val_fraction, self.random_state, stratify=True)
        spec = TrainSpec(
            phase="finetune",
            batch_size=min(self.batch_size, len(train)),
            max_epoch=self.max_epoch,
            patience=self.patience,
            seed=self.random_state,
            lr=self.lr,
            weight_decay=self.weight_decay,
            finetune_mode=self.finetune_mode,
        )
        # the trainer reports on the test partition; fit has none, so reuse
        # the validation curves there and keep only the checkpoint
        split = DatasetSplit(train=train, valid=valid, test=valid, test_rate=self.val_fraction, seed=self.random_state)
        self.checkpoint_, _ = finetune(base, split, config, spec)
        self.config_ = config
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        X = check_curve_matrix(X, self.n_features_in_)
        encoded = predict(
            self.checkpoint_.params, self.config_, _as_curves(X), self.batch_size, self.finetune_mode
        )
        return self.classes_[encoded]

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        X = check_curve_matrix(X, self.n_features_in_)
        params = self.checkpoint_.params
        config = self.config_
        from .tasks import finetune_logits

        rows = []
        for start in range(0, len(X), self.batch_size):
            batch = [X[i] for i in range(start, min(start + self.batch_size, len(X)))]
            seq = compose_batch(batch, None, params, config)
            out = encoder_forward(seq, params, config)
            logits = finetune_logits(out, seq, params, mode=self.finetune_mode)
            rows.append(nm.softmax(logits, axis=-1).data)
        return np.concatenate(rows, axis=0)
