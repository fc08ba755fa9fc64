"""Checkpoint container: text manifest plus raw float64 payload.

Layout: a header line ``CURVEBERT-CKPT v1 manifest=<n>`` (UTF-8, LF), then
``n`` bytes of manifest text, then the binary payload. The manifest carries
the model configuration and training state as ``key = value`` sections and
a parameter index of ``name shape byte_offset byte_length`` lines. Payload
arrays are little-endian 64-bit floats in row-major order, so a save/load
round trip is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import AdamState, Tensor
from .input_layer import ModelConfig

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = "CURVEBERT-CKPT"
VERSION = "v1"


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    """Everything needed to resume or hand off training."""

    config: ModelConfig
    params: dict[str, Tensor]
    optimizer: AdamState | None = None
    phase: str = "pretrain"
    finetune_mode: str = "all_tokens"
    epoch: int = 0
    best_score: float | None = None
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    def clone_params(self) -> dict[str, Tensor]:
        return {name: nm.tensor(p.data.copy(), requires_grad=True) for name, p in self.params.items()}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_config_value(raw: str):
    if raw == "none":
        return None
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {name: p.data for name, p in ckpt.params.items()}
    opt = ckpt.optimizer
    if opt is not None:
        for name, arr in opt.m.items():
            arrays[f"adam.m.{name}"] = arr
        for name, arr in opt.v.items():
            arrays[f"adam.v.{name}"] = arr

    index_lines = []
    offset = 0
    payload_parts = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        index_lines.append(f"{name} {shape} {offset} {len(blob)}")
        payload_parts.append(blob)
        offset += len(blob)

    lines = ["[config]"]
    for key, value in ckpt.config.to_dict().items():
        lines.append(f"{key} = {_format_value(value)}")
    lines.append("[training]")
    lines.append(f"phase = {ckpt.phase}")
    lines.append(f"finetune_mode = {ckpt.finetune_mode}")
    lines.append(f"epoch = {ckpt.epoch}")
    lines.append(f"best_score = {_format_value(ckpt.best_score)}")
    if opt is not None:
        lines.append("[optimizer]")
        for key in ("lr", "weight_decay", "beta1", "beta2", "epsilon", "step"):
            lines.append(f"{key} = {_format_value(getattr(opt, key))}")
    if ckpt.rng_state is not None:
        lines.append("[rng]")
        lines.append(f"state = {json.dumps(ckpt.rng_state)}")
    lines.append("[params]")
    lines.extend(index_lines)
    manifest = ("\n".join(lines) + "\n").encode("utf-8")

    with path.open("wb") as fh:
        fh.write(f"{MAGIC} {VERSION} manifest={len(manifest)}\n".encode("ascii"))
        fh.write(manifest)
        for blob in payload_parts:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with path.open("rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 3 or parts[0] != MAGIC or not parts[2].startswith("manifest="):
            raise CheckpointError(f"{path}: not a checkpoint file (bad header '{header}')")
        if parts[1] != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {parts[1]} (expected {VERSION})")
        manifest = fh.read(int(parts[2].split("=", 1)[1])).decode("utf-8")
        payload = fh.read()

    sections: dict[str, list[str]] = {}
    current = None
    for line in manifest.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            raise CheckpointError(f"{path}: manifest line outside any section: '{line}'")
        else:
            sections[current].append(line)

    def kv(section: str) -> dict[str, str]:
        out = {}
        for line in sections.get(section, []):
            key, _, value = line.partition(" = ")
            out[key] = value
        return out

    config_raw = {k: _parse_config_value(v) for k, v in kv("config").items()}
    config = ModelConfig.from_dict(config_raw)

    arrays: dict[str, np.ndarray] = {}
    for line in sections.get("params", []):
        name, shape_text, offset_text, length_text = line.split()
        offset, length = int(offset_text), int(length_text)
        flat = np.frombuffer(payload[offset : offset + length], dtype="<f8")
        if shape_text == "scalar":
            arrays[name] = np.array(flat[0])
        else:
            shape = tuple(int(d) for d in shape_text.split("x"))
            arrays[name] = flat.reshape(shape).copy()

    params = {
        name: nm.tensor(arr, requires_grad=True)
        for name, arr in arrays.items()
        if not name.startswith("adam.")
    }

    optimizer = None
    opt_kv = kv("optimizer")
    if opt_kv:
        optimizer = AdamState(
            lr=float(opt_kv["lr"]),
            weight_decay=float(opt_kv["weight_decay"]),
            beta1=float(opt_kv["beta1"]),
            beta2=float(opt_kv["beta2"]),
            epsilon=float(opt_kv["epsilon"]),
            step=int(opt_kv["step"]),
            m={n[len("adam.m."):]: a for n, a in arrays.items() if n.startswith("adam.m.")},
            v={n[len("adam.v."):]: a for n, a in arrays.items() if n.startswith("adam.v.")},
        )

    training = kv("training")
    rng_kv = kv("rng")
    return Checkpoint(
        config=config,
        params=params,
        optimizer=optimizer,
        phase=training.get("phase", "pretrain"),
        finetune_mode=training.get("finetune_mode", "all_tokens"),
        epoch=int(training.get("epoch", 0)),
        best_score=_parse_config_value(training.get("best_score", "none")),
        rng_state=json.loads(rng_kv["state"]) if "state" in rng_kv else None,
    )
