"""Pre-training objectives and the fine-tuning classification head.

Masked-curve reconstruction (MCM): a learnable affine decoder maps the
encoder output at each selected position back to token_size raw values,
and the loss is the mean squared error against the original block —
averaged over the selected set and the block dimension. Positions that
were selected but left unchanged still count.

Next-curve prediction (NCP) variants on pair inputs: 'NCP-CLS' classifies
same/different from the aggregate vector alone; 'NCP-All' from the
aggregate vector concatenated with every content-token representation;
'NCP-Null' composes pair inputs but optimizes MCM only (no pair head
exists); 'NCP-OMCM' drops pairs entirely and runs MCM on single curves.

Fine-tuning classifies a single curve from the aggregate vector plus all
content-token representations (default), or from the aggregate vector
alone, kept for comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .encoder import EncoderOutput
from .input_layer import ModelConfig, SequenceBatch, TokenSequence

logger = logging.getLogger(__name__)

__all__ = [
    "FINETUNE_MODES",
    "VariantError",
    "PretrainBatchLoss",
    "HEAD_PARAM_SHAPES",
    "init_head_params",
    "mcm_loss",
    "ncp_cls_loss",
    "ncp_all_loss",
    "pretrain_loss",
    "finetune_logits",
]

FINETUNE_MODES = ("all_tokens", "cls_only")


class VariantError(ValueError):
    """Input shape (pair vs single curve) does not match the task variant."""


@dataclass
class PretrainBatchLoss:
    """Total pre-training loss and its components for one batch."""

    total: Tensor
    mcm_component: Tensor
    ncp_component: Tensor | None = None


def HEAD_PARAM_SHAPES(
    config: ModelConfig, phase: str = "pretrain", finetune_mode: str = "all_tokens"
) -> dict[str, tuple[int, ...]]:
    tpc = config.tokens_per_curve
    if phase == "pretrain":
        shapes = {
            "heads.mcm.weight": (config.H, config.token_size),
            "heads.mcm.bias": (config.token_size,),
        }
        if config.task_variant == "NCP-CLS":
            shapes["heads.ncp.weight"] = (config.H, 2)
            shapes["heads.ncp.bias"] = (2,)
        elif config.task_variant == "NCP-All":
            shapes["heads.ncp.weight"] = ((2 * tpc + 1) * config.H, 2)
            shapes["heads.ncp.bias"] = (2,)
        return shapes
    if phase == "finetune":
        if finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"unknown finetune mode '{finetune_mode}', expected one of {FINETUNE_MODES}")
        width = config.H if finetune_mode == "cls_only" else (tpc + 1) * config.H
        return {
            "heads.classifier.weight": (width, config.num_classes),
            "heads.classifier.bias": (config.num_classes,),
        }
    raise ValueError(f"unknown phase '{phase}'")


def init_head_params(
    config: ModelConfig,
    rng: np.random.Generator,
    phase: str = "pretrain",
    finetune_mode: str = "all_tokens",
) -> dict[str, Tensor]:
    params = {}
    for name, shape in HEAD_PARAM_SHAPES(config, phase, finetune_mode).items():
        value = rng.normal(0.0, 0.02, size=shape) if name.endswith(".weight") else np.zeros(shape)
        params[name] = nm.tensor(value, requires_grad=True)
    return params


def _batched(output: EncoderOutput) -> tuple[Tensor, Tensor]:
    """Promote (cls, tokens) to batch form [b, H] / [b, s, H]."""
    tokens = output.tokens
    cls = output.cls
    if tokens.ndim == 2:
        tokens = tokens.reshape(1, *tokens.shape)
        cls = cls.reshape(1, *cls.shape)
    return cls, tokens


def _target_lists(targets) -> list[list[tuple[int, np.ndarray]]]:
    """Accept one example's target list or a per-example list of lists."""
    if targets and isinstance(targets[0], tuple):
        return [targets]
    return list(targets)


def mcm_loss(output: EncoderOutput, targets, params: dict[str, Tensor]) -> Tensor:
    """Reconstruction error over the masked set.

    ``targets`` holds (sequence position, original raw block) records, one
    list per example. An empty masked set contributes a loss of exactly 0
    (logged) so batch processing stays deterministic.
    """
    per_example = _target_lists(targets)
    cls, tokens = _batched(output)
    b, s, h = tokens.shape
    flat_idx = []
    blocks = []
    for example, records in enumerate(per_example):
        for pos, block in records:
            flat_idx.append(example * s + pos)
            blocks.append(block)
    if not flat_idx:
        logger.warning("no masked positions in batch; reconstruction term is 0")
        return nm.tensor(0.0)
    gathered = tokens.reshape(b * s, h)[np.array(flat_idx, dtype=np.int64)]
    recon = nm.matmul(gathered, params["heads.mcm.weight"]) + params["heads.mcm.bias"]
    return nm.mse(recon, nm.tensor(np.stack(blocks)))


def ncp_cls_loss(output: EncoderOutput, labels, params: dict[str, Tensor]) -> Tensor:
    """Same/different-class pair loss from the aggregate vector alone."""
    cls, _ = _batched(output)
    logits = nm.matmul(cls, params["heads.ncp.weight"]) + params["heads.ncp.bias"]
    return nm.cross_entropy(logits, labels)


def _content_features(output: EncoderOutput, content_positions: np.ndarray) -> Tensor:
    """[C, T_1..T_N] concatenation, flattened per example."""
    cls, tokens = _batched(output)
    content = tokens[:, np.asarray(content_positions, dtype=np.int64), :]
    b, n, h = content.shape
    return nm.concat([cls, content.reshape(b, n * h)], axis=1)


def ncp_all_loss(
    output: EncoderOutput,
    labels,
    params: dict[str, Tensor],
    content_positions: np.ndarray,
) -> Tensor:
    """Pair loss from the aggregate vector plus every content representation."""
    features = _content_features(output, content_positions)
    if features.shape[1] != params["heads.ncp.weight"].shape[0]:
        raise nm.ShapeError(
            f"feature width {features.shape[1]} does not match pair head input "
            f"{params['heads.ncp.weight'].shape[0]}; token count must be fixed across the batch"
        )
    logits = nm.matmul(features, params["heads.ncp.weight"]) + params["heads.ncp.bias"]
    return nm.cross_entropy(logits, labels)


def pretrain_loss(
    variant: str,
    seq: TokenSequence | SequenceBatch,
    output: EncoderOutput,
    params: dict[str, Tensor],
    ncp_labels=None,
) -> PretrainBatchLoss:
    """Dispatch the variant's total loss over one composed (masked) batch.

    Pair variants require pair inputs; 'NCP-OMCM' requires single-curve
    inputs. 'NCP-Null' and 'NCP-OMCM' carry no pair term at all, so no
    gradient can flow from pair labels.
    """
    if variant in ("NCP-CLS", "NCP-All", "NCP-Null"):
        if not seq.is_pair:
            raise VariantError(f"{variant} pre-training needs pair inputs, got a single curve")
    elif variant == "NCP-OMCM":
        if seq.is_pair:
            raise VariantError("NCP-OMCM pre-training needs single-curve inputs, got a pair")
    else:
        raise VariantError(f"unknown pre-training variant '{variant}'")
    mcm = mcm_loss(output, seq.mcm_targets, params)
    if variant == "NCP-CLS":
        ncp = ncp_cls_loss(output, ncp_labels, params)
        return PretrainBatchLoss(total=mcm + ncp, mcm_component=mcm, ncp_component=ncp)
    if variant == "NCP-All":
        ncp = ncp_all_loss(output, ncp_labels, params, seq.content_positions)
        return PretrainBatchLoss(total=mcm + ncp, mcm_component=mcm, ncp_component=ncp)
    return PretrainBatchLoss(total=mcm, mcm_component=mcm, ncp_component=None)


def finetune_logits(
    output: EncoderOutput,
    seq: TokenSequence | SequenceBatch,
    params: dict[str, Tensor],
    mode: str = "all_tokens",
) -> Tensor:
    """Class logits for single-curve inputs.

    'all_tokens' (default) classifies from the aggregate vector plus every
    content-token representation; 'cls_only' from the aggregate vector
    alone (kept for comparison — it underperforms on curves).
    """
    if seq.is_pair:
        raise VariantError("classification runs on single-curve inputs, got a pair")
    if mode not in FINETUNE_MODES:
        raise ValueError(f"unknown finetune mode '{mode}', expected one of {FINETUNE_MODES}")
    if mode == "cls_only":
        features, _ = _batched(output)
    else:
        features = _content_features(output, seq.content_positions)
    logits = nm.matmul(features, params["heads.classifier.weight"]) + params["heads.classifier.bias"]
    if output.tokens.ndim == 2:
        return logits.reshape(logits.shape[1])
    return logits
