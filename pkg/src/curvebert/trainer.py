"""Training orchestration: pre-training, fine-tuning, metrics, grid search.

Both loops run shuffled mini-batches through Adam with early stopping:
training halts once the validation score has not improved for ``patience``
consecutive epochs, and the returned checkpoint holds the parameters of the
best validation epoch, not the last one.

Pre-training optimizes the variant's total loss on training curves only.
Its early-stopping signal is the reconstruction (MCM) component measured on
validation curves — validation labels are never read during pre-training,
so pair variants evaluate on label-free random pairings. Fine-tuning
optimizes cross-entropy on labeled single curves, early-stops on validation
weighted F1, and reports test metrics only once, from the best checkpoint.

Every random choice (parameter init, shuffling, masking, dropout, pairing)
derives from the TrainSpec seed through tagged substreams, so a (data,
config, seed) tuple fully determines every reported number.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .numerics import AdamState, Tensor, adam_step, reset_grads
from .checkpoint import Checkpoint
from .data import SpectralCurve, DatasetSplit, sample_pairs
from .encoder import encoder_forward, init_encoder_params
from .input_layer import (
    ModelConfig,
    PAIR_VARIANTS,
    compose_batch,
    init_input_params,
)
from .tasks import finetune_logits, init_head_params, pretrain_loss

logger = logging.getLogger(__name__)

__all__ = [
    "TrainSpec",
    "MetricsReport",
    "TrainerError",
    "CompatibilityError",
    "init_model_params",
    "pretrain",
    "finetune",
    "predict",
    "weighted_metrics",
    "grid_search",
    "repeat_runs",
]

# substream tags for seed derivation
_INIT, _SHUFFLE, _MASK, _DROPOUT, _VALID, _PAIRS, _HEAD = range(7)


class TrainerError(ValueError):
    """Training cannot proceed (bad spec, empty data, ...)."""


class CompatibilityError(TrainerError):
    """Checkpoint architecture does not match the requested configuration."""


@dataclass
class TrainSpec:
    """Knobs for one training phase; defaults follow the reference setup."""

    phase: str = "pretrain"
    batch_size: int | None = None  # 64 for pre-training, 128 for fine-tuning
    max_epoch: int = 2000
    patience: int = 20
    seed: int = 0
    eval_metric: str | None = None  # 'loss' (pretrain) or 'weighted_f1' (finetune)
    lr: float = 0.001
    weight_decay: float = 0.01
    finetune_mode: str = "all_tokens"

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise TrainerError(f"unknown phase '{self.phase}'")
        if self.batch_size is None:
            self.batch_size = 64 if self.phase == "pretrain" else 128
        if self.batch_size < 1:
            raise TrainerError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.patience < self.max_epoch:
            raise TrainerError(f"patience ({self.patience}) must be below max_epoch ({self.max_epoch})")
        if self.eval_metric is None:
            self.eval_metric = "loss" if self.phase == "pretrain" else "weighted_f1"


@dataclass
class MetricsReport:
    """Support-weighted metrics plus the confusion matrix they derive from."""

    precision: float
    recall: float
    weighted_f1: float
    per_class_support: np.ndarray
    confusion_matrix: np.ndarray
    run_seed: int = 0
    config: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "weighted_f1": self.weighted_f1,
            "run_seed": self.run_seed,
        }


def _stream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic child generator of the run seed, one per (tag, epoch, ...)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def init_model_params(
    config: ModelConfig, seed: int, phase: str = "pretrain", finetune_mode: str = "all_tokens"
) -> dict[str, Tensor]:
    """All trainable tensors for the phase, keyed by stable path names."""
    rng = _stream(seed, _INIT)
    return {
        **init_input_params(config, rng),
        **init_encoder_params(config, rng),
        **init_head_params(config, rng, phase, finetune_mode),
    }


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: nm.tensor(p.data.copy(), requires_grad=True) for name, p in params.items()}


def _restore(params: dict[str, Tensor], snapshot: dict[str, Tensor]) -> None:
    for name, p in params.items():
        p.data[...] = snapshot[name].data


def _step(params: dict[str, Tensor], state: AdamState, loss: Tensor) -> None:
    if not loss.requires_grad:
        # possible only when no position was selected for masking in the batch
        logger.warning("loss carries no gradient this batch; optimizer step skipped")
        return
    reset_grads(params.values())
    nm.backward(loss)
    # a parameter can legitimately sit outside this batch's graph (e.g. the
    # [MASK] vector when no position drew the replace action)
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adam_step(params, state)
    reset_grads(params.values())


def _opt_snapshot(state: AdamState) -> AdamState:
    return replace(
        state,
        m={k: v.copy() for k, v in state.m.items()},
        v={k: v.copy() for k, v in state.v.items()},
    )


# -- pre-training -----------------------------------------------------------------


def _validation_mcm_loss(
    valid_curves: list[SpectralCurve],
    params: dict[str, Tensor],
    config: ModelConfig,
    spec: TrainSpec,
) -> float:
    """Masked-reconstruction loss on validation curves, labels never read.

    Pair variants pair validation curves by a seeded shuffle (no class
    information); masking uses a fixed stream so epochs are comparable.
    """
    rng = _stream(spec.seed, _VALID)
    is_pair = config.task_variant in PAIR_VARIANTS
    order = rng.permutation(len(valid_curves))
    total, count = 0.0, 0
    for batch_idx in _batches(len(order), spec.batch_size, order):
        batch = [valid_curves[i] for i in batch_idx]
        if is_pair:
            half = len(batch) // 2
            if half == 0:
                continue
            curves_a = [c.intensities for c in batch[:half]]
            curves_b = [c.intensities for c in batch[half : 2 * half]]
        else:
            curves_a = [c.intensities for c in batch]
            curves_b = None
        seq = compose_batch(curves_a, curves_b, params, config, mask_rng=rng)
        out = encoder_forward(seq, params, config)
        variant = config.task_variant if not is_pair else "NCP-Null"
        loss = pretrain_loss(variant, seq, out, params, None)
        n = len(curves_a)
        total += loss.mcm_component.item() * n
        count += n
    if count == 0:
        raise TrainerError("validation set too small to form a single batch")
    return total / count


def pretrain(
    train_curves: list[SpectralCurve],
    valid_curves: list[SpectralCurve],
    config: ModelConfig,
    spec: TrainSpec,
) -> Checkpoint:
    """Pre-train per the configured variant; returns the best checkpoint.

    The checkpoint's ``history`` holds one row per epoch: training MCM/NCP
    components, total, and the validation reconstruction loss.
    """
    if spec.phase != "pretrain":
        raise TrainerError(f"pretrain() called with a '{spec.phase}' spec")
    if len(train_curves) < 1 or len(valid_curves) < 1:
        raise TrainerError("pre-training needs non-empty train and validation curve sets")
    if spec.batch_size > len(train_curves):
        raise TrainerError(
            f"batch_size {spec.batch_size} exceeds the {len(train_curves)} training curves"
        )
    variant = config.task_variant
    is_pair = variant in PAIR_VARIANTS
    params = init_model_params(config, spec.seed, phase="pretrain")
    state = AdamState(lr=spec.lr, weight_decay=spec.weight_decay)

    best_loss = np.inf
    best_epoch = -1
    best_params = _snapshot(params)
    best_state = _opt_snapshot(state)
    history: list[dict] = []
    for epoch in range(spec.max_epoch):
        mask_rng = _stream(spec.seed, _MASK, epoch)
        dropout_rng = _stream(spec.seed, _DROPOUT, epoch)
        if is_pair:
            pairs = sample_pairs(train_curves, len(train_curves), seed=int(_stream(spec.seed, _PAIRS, epoch).integers(2**31)))
            order = np.arange(len(pairs))
        else:
            pairs = None
            order = _stream(spec.seed, _SHUFFLE, epoch).permutation(len(train_curves))
        sums = {"mcm": 0.0, "ncp": 0.0, "total": 0.0}
        seen = 0
        for batch_idx in _batches(len(order), spec.batch_size, order):
            if pairs is None:
                curves_a = [train_curves[i].intensities for i in batch_idx]
                curves_b = None
                labels = None
            else:
                pair_batch = [pairs[i] for i in batch_idx]
                curves_a = [p.curve_a.intensities for p in pair_batch]
                curves_b = [p.curve_b.intensities for p in pair_batch]
                labels = [int(p.same_class) for p in pair_batch]
            seq = compose_batch(curves_a, curves_b, params, config, mask_rng=mask_rng)
            out = encoder_forward(seq, params, config, training=True, rng=dropout_rng)
            loss = pretrain_loss(variant, seq, out, params, labels)
            n = len(curves_a)
            sums["mcm"] += loss.mcm_component.item() * n
            sums["ncp"] += (loss.ncp_component.item() if loss.ncp_component is not None else 0.0) * n
            sums["total"] += loss.total.item() * n
            seen += n
            _step(params, state, loss.total)
        val_loss = _validation_mcm_loss(valid_curves, params, config, spec)
        history.append(
            {
                "epoch": epoch,
                "mcm": sums["mcm"] / seen,
                "ncp": sums["ncp"] / seen,
                "total": sums["total"] / seen,
                "validation": val_loss,
            }
        )
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = _snapshot(params)
            best_state = _opt_snapshot(state)
        if epoch - best_epoch >= spec.patience:
            break
    logger.info("pre-training stopped at epoch %d (best %d, val loss %.6f)", len(history) - 1, best_epoch, best_loss)
    return Checkpoint(
        config=config,
        params=best_params,
        optimizer=best_state,
        phase="pretrain",
        epoch=best_epoch,
        best_score=float(best_loss),
        rng_state=_stream(spec.seed, _VALID).bit_generator.state,
        history=history,
    )


# -- fine-tuning ------------------------------------------------------------------

_ARCH_FIELDS = ("L", "A", "H", "token_size", "curve_length", "ffn_inner")


def _check_compatibility(pretrained: Checkpoint, config: ModelConfig) -> None:
    old = pretrained.config
    if old.token_size != config.token_size:
        raise CompatibilityError(
            f"token_size must be consistent with the pre-training stage: "
            f"checkpoint has {old.token_size}, requested {config.token_size}"
        )
    for name in _ARCH_FIELDS:
        a, b = getattr(old, name), getattr(config, name)
        if a != b:
            raise CompatibilityError(f"checkpoint {name}={a} does not match requested {name}={b}")


def predict(
    params: dict[str, Tensor],
    config: ModelConfig,
    curves: list[SpectralCurve],
    batch_size: int = 128,
    mode: str = "all_tokens",
) -> np.ndarray:
    """Deterministic class predictions (evaluation mode) for single curves."""
    preds = []
    for start in range(0, len(curves), batch_size):
        batch = curves[start : start + batch_size]
        seq = compose_batch([c.intensities for c in batch], None, params, config)
        out = encoder_forward(seq, params, config)
        logits = finetune_logits(out, seq, params, mode=mode)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def finetune(
    pretrained: Checkpoint | None,
    split: DatasetSplit,
    config: ModelConfig,
    spec: TrainSpec,
) -> tuple[Checkpoint, MetricsReport]:
    """Supervised classification training, optionally from a pre-trained checkpoint.

    With ``pretrained=None`` the whole model starts from random init (the
    from-scratch comparison arm). The encoder and input layer come from the
    checkpoint when given; the classifier head is always fresh. Test curves
    are touched exactly once, after training, by the final report.
    """
    if spec.phase != "finetune":
        raise TrainerError(f"finetune() called with a '{spec.phase}' spec")
    for name, curves in (("train", split.train), ("valid", split.valid), ("test", split.test)):
        if not curves:
            raise TrainerError(f"fine-tuning needs a non-empty {name} split")
    params = init_model_params(config, spec.seed, phase="finetune", finetune_mode=spec.finetune_mode)
    if pretrained is not None:
        _check_compatibility(pretrained, config)
        carried = 0
        for name, p in pretrained.params.items():
            if name in params and not name.startswith("heads."):
                params[name].data[...] = p.data
                carried += 1
        logger.info("initialized %d tensors from the pre-trained checkpoint", carried)
    state = AdamState(lr=spec.lr, weight_decay=spec.weight_decay)

    labels_train = np.array([c.label for c in split.train], dtype=np.int64)
    labels_valid = np.array([c.label for c in split.valid], dtype=np.int64)
    best_f1 = -np.inf
    best_epoch = -1
    best_params = _snapshot(params)
    best_state = _opt_snapshot(state)
    history: list[dict] = []
    for epoch in range(spec.max_epoch):
        dropout_rng = _stream(spec.seed, _DROPOUT, epoch)
        order = _stream(spec.seed, _SHUFFLE, epoch).permutation(len(split.train))
        total_loss, seen = 0.0, 0
        for batch_idx in _batches(len(order), spec.batch_size, order):
            batch = [split.train[i] for i in batch_idx]
            seq = compose_batch([c.intensities for c in batch], None, params, config)
            out = encoder_forward(seq, params, config, training=True, rng=dropout_rng)
            logits = finetune_logits(out, seq, params, mode=spec.finetune_mode)
            loss = nm.cross_entropy(logits, labels_train[batch_idx])
            total_loss += loss.item() * len(batch)
            seen += len(batch)
            _step(params, state, loss)
        val_pred = predict(params, config, split.valid, spec.batch_size, spec.finetune_mode)
        val_report = weighted_metrics(val_pred, labels_valid, config.num_classes)
        history.append(
            {"epoch": epoch, "train_loss": total_loss / seen, "validation": val_report.weighted_f1}
        )
        if val_report.weighted_f1 > best_f1:
            best_f1 = val_report.weighted_f1
            best_epoch = epoch
            best_params = _snapshot(params)
            best_state = _opt_snapshot(state)
        if epoch - best_epoch >= spec.patience:
            break
    logger.info("fine-tuning stopped at epoch %d (best %d, val F1 %.4f)", len(history) - 1, best_epoch, best_f1)
    test_pred = predict(best_params, config, split.test, spec.batch_size, spec.finetune_mode)
    report = weighted_metrics(
        test_pred,
        np.array([c.label for c in split.test], dtype=np.int64),
        config.num_classes,
        run_seed=spec.seed,
        config_snapshot=config.to_dict(),
    )
    ckpt = Checkpoint(
        config=config,
        params=best_params,
        optimizer=best_state,
        phase="finetune",
        finetune_mode=spec.finetune_mode,
        epoch=best_epoch,
        best_score=float(best_f1),
        rng_state=_stream(spec.seed, _VALID).bit_generator.state,
        history=history,
    )
    return ckpt, report


# -- metrics ----------------------------------------------------------------------


def weighted_metrics(
    predictions,
    labels,
    num_classes: int,
    run_seed: int = 0,
    config_snapshot: dict | None = None,
) -> MetricsReport:
    """Support-weighted precision/recall/F1 from the confusion matrix.

    A class nobody predicted contributes precision 0 at its support weight;
    weights are the true-label proportions.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.size == 0:
        raise TrainerError("cannot compute metrics on empty inputs")
    if predictions.shape != labels.shape:
        raise TrainerError(f"predictions/labels length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes or predictions.min() < 0 or predictions.max() >= num_classes:
        raise TrainerError(f"labels/predictions must lie in [0, {num_classes})")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)
    support = matrix.sum(axis=1)
    predicted = matrix.sum(axis=0)
    diag = np.diag(matrix).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision_c = np.where(predicted > 0, diag / predicted, 0.0)
        recall_c = np.where(support > 0, diag / support, 0.0)
        denom = precision_c + recall_c
        f1_c = np.where(denom > 0, 2 * precision_c * recall_c / denom, 0.0)
    weights = support / support.sum()
    return MetricsReport(
        precision=float(np.sum(weights * precision_c)),
        recall=float(np.sum(weights * recall_c)),
        weighted_f1=float(np.sum(weights * f1_c)),
        per_class_support=support,
        confusion_matrix=matrix,
        run_seed=run_seed,
        config=config_snapshot or {},
    )


# -- experiment drivers -------------------------------------------------------------


def _grid_combo_result(args):
    (combo_index, overrides, base_config_dict, split, pretrain_spec, finetune_spec) = args
    cfg_dict = dict(base_config_dict)
    cfg_dict.update(overrides)
    cfg_dict["ffn_inner"] = None  # keep the inner width tied to H across the grid
    cfg_dict["max_seq_length"] = None
    config = ModelConfig.from_dict(cfg_dict)
    ckpt = None
    if pretrain_spec is not None:
        ckpt = pretrain(split.train, split.valid, config, pretrain_spec)
    finetuned, _report = finetune(ckpt, split, config, finetune_spec)
    return combo_index, overrides, float(finetuned.best_score)


def grid_search(
    split: DatasetSplit,
    grids: dict[str, list],
    base_config: ModelConfig,
    finetune_spec: TrainSpec,
    pretrain_spec: TrainSpec | None = None,
    jobs: int = 1,
) -> list[dict]:
    """Evaluate every combination of the given hyperparameter grids.

    ``grids`` maps config field names (L, A, H, token_size) to candidate
    lists. Candidates whose token_size does not divide the curve length are
    skipped with a logged reason. Results are ranked by best validation
    weighted F1, descending, with ties broken by grid order; each row holds
    the overrides, the score, and the rank.
    """
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise TrainerError("every grid must be non-empty")
    names = list(grids)
    combos = []
    for values in itertools.product(*(grids[n] for n in names)):
        overrides = dict(zip(names, values))
        token_size = overrides.get("token_size", base_config.token_size)
        if base_config.curve_length % token_size != 0:
            logger.warning(
                "skipping %s: token_size %d does not divide curve_length %d",
                overrides, token_size, base_config.curve_length,
            )
            continue
        combos.append(overrides)
    tasks_args = [
        (i, overrides, base_config.to_dict(), split, pretrain_spec, finetune_spec)
        for i, overrides in enumerate(combos)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_grid_combo_result, tasks_args))
    else:
        raw = [_grid_combo_result(a) for a in tasks_args]
    raw.sort(key=lambda r: (-r[2], r[0]))
    results = []
    for rank, (combo_index, overrides, score) in enumerate(raw, start=1):
        row = {"rank": rank, "validation_weighted_f1": score, "combo_index": combo_index}
        row.update(overrides)
        results.append(row)
    return results


def repeat_runs(op, n: int = 10, base_seed: int = 0) -> dict:
    """Mean and population variance of each metric over n seeded repetitions.

    ``op`` maps a seed to a MetricsReport (or a plain metric dict). Seeds
    are base_seed .. base_seed+n-1.
    """
    if n < 2:
        raise TrainerError(f"repeat_runs needs n >= 2, got {n}")
    rows = []
    for i in range(n):
        result = op(base_seed + i)
        rows.append(result.as_row() if isinstance(result, MetricsReport) else dict(result))
    metrics = [k for k in rows[0] if k != "run_seed"]
    summary = {"n": n, "base_seed": base_seed, "metrics": {}}
    for key in metrics:
        values = np.array([r[key] for r in rows], dtype=np.float64)
        summary["metrics"][key] = {
            "mean": float(values.mean()),
            "variance": float(values.var()),  # population convention
            "values": values.tolist(),
        }
    return summary
