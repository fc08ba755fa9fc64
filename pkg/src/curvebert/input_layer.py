"""Curve tokenization and the model input layer.

A curve of ``curve_length`` points is cut into contiguous, non-overlapping
blocks of ``token_size`` points. Each block is embedded to an H-vector by a
shared kernel bank (equivalent to a strided 1-D convolution over the whole
curve), then summed with a learnable segment embedding and a fixed
sinusoidal position embedding. Sequences start with a learnable [CLS]
vector and use [SEP] vectors between curves of a pair and at the end.

Masked-curve training replaces a random subset of block embeddings before
the encoder sees them: of the selected positions, 80% become the learnable
[MASK] vector, 10% the embedding of a random block from the batch, and 10%
stay unchanged. Selected positions keep their segment and position
embeddings, and their original raw blocks are recorded as reconstruction
targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from enum import IntEnum

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "TASK_VARIANTS",
    "PAIR_VARIANTS",
    "ConfigError",
    "ModelConfig",
    "SpecialToken",
    "TokenSequence",
    "SequenceBatch",
    "partition",
    "embed_tokens",
    "position_embedding",
    "position_table",
    "compose_input",
    "compose_batch",
    "plan_mcm_mask",
    "apply_mcm_mask",
    "init_input_params",
    "INPUT_PARAM_SHAPES",
]

TASK_VARIANTS = ("NCP-CLS", "NCP-All", "NCP-Null", "NCP-OMCM")
PAIR_VARIANTS = ("NCP-CLS", "NCP-All", "NCP-Null")

MASK_SELECT_PROB = 0.15
MASK_ACTION_PROBS = (0.80, 0.10, 0.10)  # replace-with-[MASK], random block, keep


class ConfigError(ValueError):
    """Model configuration violates an architectural invariant."""


class PartitionError(ValueError):
    """Curve length is not an exact multiple of the block size."""


@dataclass
class ModelConfig:
    """Architectural truth for one model: sizes, block length, task variant.

    ``ffn_inner`` and ``max_seq_length`` default to H and the pair-input
    sequence length respectively when left as None. ``pe_base`` is the
    wavelength base of the sinusoidal position embedding;
    ``pe_literal_pairing`` switches to the variant where the two members of
    a sin/cos pair use different frequencies (exponent from their own dim
    index) instead of sharing the even member's frequency.
    """

    L: int = 8
    A: int = 8
    H: int = 256
    token_size: int = 100
    curve_length: int = 1000
    num_classes: int = 12
    ffn_inner: int | None = None
    max_seq_length: int | None = None
    task_variant: str = "NCP-OMCM"
    dropout: float = 0.1
    pe_base: float = 1000.0
    pe_literal_pairing: bool = False

    def __post_init__(self):
        if self.ffn_inner is None:
            self.ffn_inner = self.H
        if self.H % 2 != 0:
            raise ConfigError(f"H must be even for sin/cos pairing, got {self.H}")
        if self.H % self.A != 0:
            raise ConfigError(f"H={self.H} must divide evenly across A={self.A} heads")
        if self.curve_length % self.token_size != 0:
            raise ConfigError(
                f"curve_length {self.curve_length} is not divisible by token_size {self.token_size}"
            )
        if self.task_variant not in TASK_VARIANTS:
            raise ConfigError(f"unknown task variant '{self.task_variant}', expected one of {TASK_VARIANTS}")
        if self.max_seq_length is None:
            self.max_seq_length = self.pair_seq_length
        needed = self.pair_seq_length if self.task_variant in PAIR_VARIANTS else self.single_seq_length
        if self.max_seq_length < needed:
            raise ConfigError(
                f"max_seq_length {self.max_seq_length} too small for {self.task_variant} "
                f"(needs {needed})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.L < 0:  # L=0 is a legal degenerate stack (identity encoder)
            raise ConfigError(f"L must be non-negative, got {self.L}")
        for name in ("A", "H", "token_size", "curve_length", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def tokens_per_curve(self) -> int:
        return self.curve_length // self.token_size

    @property
    def single_seq_length(self) -> int:
        # [CLS] blocks [SEP]
        return self.tokens_per_curve + 2

    @property
    def pair_seq_length(self) -> int:
        # [CLS] blocks_a [SEP] blocks_b [SEP]
        return 2 * self.tokens_per_curve + 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class SpecialToken(IntEnum):
    CLS = 0
    SEP = 1
    CONTENT = 2


@dataclass
class TokenSequence:
    """One composed model input plus the bookkeeping to mask and reconstruct."""

    embeddings: Tensor  # [seq_len, H]
    segment_ids: np.ndarray  # [seq_len], 0 = curve A, 1 = curve B
    position_ids: np.ndarray  # [seq_len]
    special_mask: np.ndarray  # [seq_len] of SpecialToken values
    blocks: np.ndarray  # [n_content, token_size] original raw blocks in order
    content_positions: np.ndarray  # [n_content] sequence indices of content tokens
    curve_boundaries: tuple[range, range | None]
    is_pair: bool
    mcm_targets: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def seq_length(self) -> int:
        return int(self.special_mask.shape[0])


@dataclass
class SequenceBatch:
    """A batch of same-layout composed inputs (layout arrays are shared)."""

    embeddings: Tensor  # [batch, seq_len, H]
    segment_ids: np.ndarray  # [seq_len]
    special_mask: np.ndarray  # [seq_len]
    content_positions: np.ndarray  # [n_content]
    mcm_targets: list[list[tuple[int, np.ndarray]]]  # per example
    is_pair: bool

    @property
    def batch_size(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def seq_length(self) -> int:
        return int(self.embeddings.shape[1])


# -- tokenization ----------------------------------------------------------------


def partition(curve: np.ndarray, token_size: int) -> np.ndarray:
    """Cut a curve into [n_blocks, token_size]; concatenation restores it."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 1:
        raise PartitionError(f"expected a 1-D curve, got shape {curve.shape}")
    remainder = curve.shape[0] % token_size
    if remainder != 0:
        raise PartitionError(
            f"curve of length {curve.shape[0]} is not divisible by token_size {token_size} "
            f"(remainder {remainder})"
        )
    return curve.reshape(-1, token_size)


def embed_tokens(blocks: np.ndarray, weight: Tensor, bias: Tensor) -> Tensor:
    """Map raw blocks [n, token_size] to embeddings [n, H] with the kernel bank.

    Row-for-row equal to conv1d over the concatenated curve with
    stride = kernel width = token_size.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim != 2 or blocks.shape[1] != weight.shape[1]:
        raise nm.ShapeError(
            f"blocks {blocks.shape} do not match kernel width {weight.shape[1]}"
        )
    return nm.matmul(nm.tensor(blocks), weight.transpose((1, 0))) + bias


# -- position embeddings -----------------------------------------------------------


def _position_angles(positions: np.ndarray, h: int, base: float, literal: bool) -> np.ndarray:
    dims = np.arange(h)
    if literal:
        exponent = 2.0 * dims / h  # each dim uses its own index
    else:
        exponent = 2.0 * (2 * (dims // 2)) / h  # both pair members share the even index
    return positions[:, None] / np.power(base, exponent)[None, :]


def position_table(
    max_positions: int, h: int, base: float = 1000.0, literal: bool = False
) -> np.ndarray:
    """Sinusoidal embeddings for positions 0..max_positions-1, shape [max, H]."""
    if h % 2 != 0:
        raise ConfigError(f"H must be even, got {h}")
    angles = _position_angles(np.arange(max_positions, dtype=np.float64), h, base, literal)
    table = np.empty_like(angles)
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


def position_embedding(
    pos: int, h: int, base: float = 1000.0, literal: bool = False, max_position: int | None = None
) -> Tensor:
    """The H-vector added to the token at sequence position ``pos``."""
    if pos < 0 or (max_position is not None and pos >= max_position):
        bound = max_position if max_position is not None else "inf"
        raise ConfigError(f"position {pos} outside [0, {bound})")
    return nm.tensor(position_table(pos + 1, h, base, literal)[pos])


# -- masking ---------------------------------------------------------------------


def plan_mcm_mask(
    n_content: int,
    rng: np.random.Generator,
    p_select: float = MASK_SELECT_PROB,
) -> list[tuple[int, str]]:
    """Independent per-position mask decisions: (content index, action).

    Actions: 'mask' (replace with [MASK]), 'random' (replace with a random
    block's embedding), 'keep' (leave unchanged but still reconstruct).
    """
    plan = []
    p_mask, p_random, _ = MASK_ACTION_PROBS
    for i in range(n_content):
        if rng.random() >= p_select:
            continue
        roll = rng.random()
        if roll < p_mask:
            plan.append((i, "mask"))
        elif roll < p_mask + p_random:
            plan.append((i, "random"))
        else:
            plan.append((i, "keep"))
    return plan


# -- composition -------------------------------------------------------------------


def _layout(config: ModelConfig, is_pair: bool):
    """Sequence layout arrays shared by every example of a batch."""
    tpc = config.tokens_per_curve
    if is_pair:
        special = np.full(config.pair_seq_length, SpecialToken.CONTENT, dtype=np.int8)
        special[0] = SpecialToken.CLS
        special[1 + tpc] = SpecialToken.SEP
        special[-1] = SpecialToken.SEP
        segment = np.zeros(config.pair_seq_length, dtype=np.int64)
        segment[tpc + 2 :] = 1  # B starts after the first [SEP]
        bounds = (range(1, 1 + tpc), range(tpc + 2, tpc + 2 + tpc))
    else:
        special = np.full(config.single_seq_length, SpecialToken.CONTENT, dtype=np.int8)
        special[0] = SpecialToken.CLS
        special[-1] = SpecialToken.SEP
        segment = np.zeros(config.single_seq_length, dtype=np.int64)
        bounds = (range(1, 1 + tpc), None)
    content_positions = np.nonzero(special == SpecialToken.CONTENT)[0]
    return special, segment, content_positions, bounds


def _assemble_embeddings(
    blocks_matrix: np.ndarray,
    mask_row_flags: np.ndarray,
    batch: int,
    config: ModelConfig,
    params: dict[str, Tensor],
    special: np.ndarray,
    segment: np.ndarray,
    content_positions: np.ndarray,
) -> Tensor:
    """Token + segment + position sum for a [batch, seq_len, H] input."""
    n_blocks = blocks_matrix.shape[0] // batch
    content = embed_tokens(blocks_matrix, params["input.conv.weight"], params["input.conv.bias"])
    specials = nm.concat(
        [
            params["input.special.cls"].reshape(1, config.H),
            params["input.special.sep"].reshape(1, config.H),
            params["input.special.mask"].reshape(1, config.H),
        ],
        axis=0,
    )
    all_rows = nm.concat([content, specials], axis=0)
    cls_row, sep_row, mask_row = blocks_matrix.shape[0] + np.arange(3)
    seq_len = special.shape[0]
    perm = np.empty((batch, seq_len), dtype=np.int64)
    perm[:, special == SpecialToken.CLS] = cls_row
    perm[:, special == SpecialToken.SEP] = sep_row
    block_rows = np.arange(blocks_matrix.shape[0]).reshape(batch, n_blocks)
    block_rows = np.where(mask_row_flags.reshape(batch, n_blocks), mask_row, block_rows)
    perm[:, content_positions] = block_rows
    token_part = all_rows[perm]  # [batch, seq_len, H]
    segment_part = params["input.segment"][segment]  # [seq_len, H]
    pe = position_table(seq_len, config.H, config.pe_base, config.pe_literal_pairing)
    return token_part + segment_part + nm.tensor(pe)


def compose_batch(
    curves_a: list[np.ndarray],
    curves_b: list[np.ndarray] | None,
    params: dict[str, Tensor],
    config: ModelConfig,
    mask_rng: np.random.Generator | None = None,
    p_select: float = MASK_SELECT_PROB,
) -> SequenceBatch:
    """Compose a batch of inputs, optionally applying masked-curve selection.

    When ``mask_rng`` is given, random-replacement draws come from all
    content blocks of the batch.
    """
    is_pair = curves_b is not None
    if is_pair and len(curves_a) != len(curves_b):
        raise nm.ShapeError(f"pair batch sizes disagree: {len(curves_a)} vs {len(curves_b)}")
    batch = len(curves_a)
    if batch == 0:
        raise ValueError("empty batch")
    special, segment, content_positions, _ = _layout(config, is_pair)
    seq_len = special.shape[0]
    if seq_len > config.max_seq_length:
        raise ConfigError(f"sequence length {seq_len} exceeds max_seq_length {config.max_seq_length}")
    per_example = []
    for i in range(batch):
        blocks = partition(curves_a[i], config.token_size)
        if is_pair:
            blocks = np.concatenate([blocks, partition(curves_b[i], config.token_size)], axis=0)
        per_example.append(blocks)
    originals = np.concatenate(per_example, axis=0)  # [batch*n_blocks, token_size]
    n_blocks = per_example[0].shape[0]

    blocks_matrix = originals.copy()
    mask_row_flags = np.zeros(originals.shape[0], dtype=bool)
    mcm_targets: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(batch)]
    if mask_rng is not None:
        for i in range(batch):
            for local_idx, action in plan_mcm_mask(n_blocks, mask_rng, p_select):
                flat = i * n_blocks + local_idx
                pos = int(content_positions[local_idx])
                mcm_targets[i].append((pos, originals[flat].copy()))
                if action == "mask":
                    mask_row_flags[flat] = True
                elif action == "random":
                    donor = int(mask_rng.integers(originals.shape[0]))
                    blocks_matrix[flat] = originals[donor]
    embeddings = _assemble_embeddings(
        blocks_matrix, mask_row_flags, batch, config, params, special, segment, content_positions
    )
    return SequenceBatch(
        embeddings=embeddings,
        segment_ids=segment,
        special_mask=special,
        content_positions=content_positions,
        mcm_targets=mcm_targets,
        is_pair=is_pair,
    )


def compose_input(
    curve_a: np.ndarray,
    curve_b: np.ndarray | None,
    config: ModelConfig,
    params: dict[str, Tensor],
) -> TokenSequence:
    """Compose a single (unmasked) input sequence per the sum-of-three rule."""
    is_pair = curve_b is not None
    special, segment, content_positions, bounds = _layout(config, is_pair)
    batch = compose_batch(
        [np.asarray(curve_a)],
        [np.asarray(curve_b)] if is_pair else None,
        params,
        config,
    )
    blocks = partition(curve_a, config.token_size)
    if is_pair:
        blocks = np.concatenate([blocks, partition(curve_b, config.token_size)], axis=0)
    return TokenSequence(
        embeddings=batch.embeddings.reshape(batch.seq_length, config.H),
        segment_ids=segment,
        position_ids=np.arange(special.shape[0]),
        special_mask=special,
        blocks=blocks,
        content_positions=content_positions,
        curve_boundaries=bounds,
        is_pair=is_pair,
    )


def apply_mcm_mask(
    seq: TokenSequence,
    params: dict[str, Tensor],
    config: ModelConfig,
    rng: np.random.Generator,
    p_select: float = MASK_SELECT_PROB,
    block_pool: np.ndarray | None = None,
) -> TokenSequence:
    """Masked copy of a composed sequence, with reconstruction targets.

    ``block_pool`` supplies the donor blocks for random replacement
    (defaults to the sequence's own content blocks). [CLS]/[SEP] are never
    selected; every selected position records its pre-mask raw block.
    """
    pool = seq.blocks if block_pool is None else np.asarray(block_pool, dtype=np.float64)
    n_blocks = seq.blocks.shape[0]
    blocks_matrix = seq.blocks.copy()
    mask_row_flags = np.zeros(n_blocks, dtype=bool)
    targets: list[tuple[int, np.ndarray]] = []
    for local_idx, action in plan_mcm_mask(n_blocks, rng, p_select):
        pos = int(seq.content_positions[local_idx])
        targets.append((pos, seq.blocks[local_idx].copy()))
        if action == "mask":
            mask_row_flags[local_idx] = True
        elif action == "random":
            blocks_matrix[local_idx] = pool[int(rng.integers(pool.shape[0]))]
    embeddings = _assemble_embeddings(
        blocks_matrix,
        mask_row_flags,
        1,
        config,
        params,
        seq.special_mask,
        seq.segment_ids,
        seq.content_positions,
    ).reshape(seq.seq_length, config.H)
    return TokenSequence(
        embeddings=embeddings,
        segment_ids=seq.segment_ids,
        position_ids=seq.position_ids,
        special_mask=seq.special_mask,
        blocks=seq.blocks,
        content_positions=seq.content_positions,
        curve_boundaries=seq.curve_boundaries,
        is_pair=seq.is_pair,
        mcm_targets=targets,
    )


# -- parameters --------------------------------------------------------------------


def INPUT_PARAM_SHAPES(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        "input.conv.weight": (config.H, config.token_size),
        "input.conv.bias": (config.H,),
        "input.special.cls": (config.H,),
        "input.special.sep": (config.H,),
        "input.special.mask": (config.H,),
        "input.segment": (2, config.H),
    }


def init_input_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Embedding-side parameters: kernel bank (fan-in uniform), specials, segments."""
    bound = 1.0 / np.sqrt(config.token_size)
    params = {
        "input.conv.weight": rng.uniform(-bound, bound, size=(config.H, config.token_size)),
        "input.conv.bias": rng.uniform(-bound, bound, size=config.H),
        "input.special.cls": rng.normal(0.0, 0.02, size=config.H),
        "input.special.sep": rng.normal(0.0, 0.02, size=config.H),
        "input.special.mask": rng.normal(0.0, 0.02, size=config.H),
        "input.segment": rng.normal(0.0, 0.02, size=(2, config.H)),
    }
    return {name: nm.tensor(value, requires_grad=True) for name, value in params.items()}
