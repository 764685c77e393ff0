"""Binary checkpoint codec.

Layout (little-endian): magic "HGSC", uint32 version, uint64 seed, uint32
stage length + UTF-8 stage, uint64 iteration, uint32 group count, then per
group: uint32 name length + UTF-8 name, uint32 ndim, uint64 dims, float64
payload.
"""

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import torch
from torch import Tensor, nn

from .constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .utils.files import atomic_write

logger = logging.getLogger(__name__)

ADAM_KEYS = ("exp_avg", "exp_avg_sq", "step")


class CheckpointError(ValueError):
    """The checkpoint is corrupt, truncated or incompatible."""


@dataclass
class Checkpoint:
    seed: int
    stage: str
    iteration: int
    groups: Dict[str, Tensor] = field(default_factory=dict)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<IQ", CHECKPOINT_VERSION, checkpoint.seed))
    stage = checkpoint.stage.encode("utf-8")
    out.write(struct.pack("<I", len(stage)) + stage)
    out.write(struct.pack("<QI", checkpoint.iteration, len(checkpoint.groups)))
    for name, value in checkpoint.groups.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(
            value.detach().cpu().numpy(), dtype="<f8"
        )
        out.write(struct.pack("<I", len(encoded)) + encoded)
        out.write(struct.pack("<I", array.ndim))
        out.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        out.write(array.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(
                f"Checkpoint {self.source} is truncated while reading {what}."
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"Checkpoint {source} has bad magic {magic!r}, expected "
            f"{CHECKPOINT_MAGIC!r}."
        )
    version, seed = reader.unpack("<IQ", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Checkpoint {source} has format version {version}; this build "
            f"reads version {CHECKPOINT_VERSION}."
        )
    (stage_length,) = reader.unpack("<I", "stage")
    stage = reader.take(stage_length, "stage").decode("utf-8")
    iteration, count = reader.unpack("<QI", "header")
    groups = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<I", "group name")
        name = reader.take(name_length, "group name").decode("utf-8")
        (ndim,) = reader.unpack("<I", f"group {name}")
        shape = reader.unpack(f"<{ndim}Q", f"group {name}")
        size = int(np.prod(shape)) if ndim else 1
        payload = reader.take(8 * size, f"group {name}")
        array = np.frombuffer(payload, dtype="<f8").reshape(shape)
        groups[name] = torch.from_numpy(array.astype(np.float64))
    if reader.offset != len(data):
        raise CheckpointError(
            f"Checkpoint {source} has {len(data) - reader.offset} trailing "
            "bytes."
        )
    return Checkpoint(
        seed=seed, stage=stage, iteration=iteration, groups=groups
    )


def write_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    atomic_write(path, encode_checkpoint(checkpoint))
    logger.info(
        f"Saved checkpoint {path} (stage {checkpoint.stage}, iteration "
        f"{checkpoint.iteration}, {len(checkpoint.groups)} groups)."
    )


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} does not exist.")
    return decode_checkpoint(path.read_bytes(), str(path))


def module_groups(modules: Mapping[str, nn.Module]) -> Dict[str, Tensor]:
    """Parameters and buffers of each module under `<prefix>.<name>`."""
    groups = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict(keep_vars=False).items():
            groups[f"{prefix}.{name}"] = value.detach().to(torch.float64)
    return groups


def optimizer_groups(
    optimizer: torch.optim.Optimizer, names: Mapping[nn.Parameter, str]
) -> Dict[str, Tensor]:
    groups = {}
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param)
            if not state:
                continue
            for key in ADAM_KEYS:
                groups[f"adam.{names[param]}.{key}"] = (
                    torch.as_tensor(state[key]).detach().to(torch.float64)
                )
    return groups


def restore_modules(
    groups: Mapping[str, Tensor], modules: Mapping[str, nn.Module]
) -> None:
    """Load module state strictly; every error names the offending group."""
    for prefix, module in modules.items():
        expected = module.state_dict()
        provided = {
            name[len(prefix) + 1 :]: value
            for name, value in groups.items()
            if name.startswith(prefix + ".")
        }
        for name, current in expected.items():
            if name not in provided:
                raise CheckpointError(
                    f"Checkpoint group {prefix}.{name} is missing."
                )
            if tuple(provided[name].shape) != tuple(current.shape):
                raise CheckpointError(
                    f"Checkpoint group {prefix}.{name} has shape "
                    f"{tuple(provided[name].shape)}, expected "
                    f"{tuple(current.shape)}."
                )
        for name in provided:
            if name not in expected:
                raise CheckpointError(
                    f"Checkpoint group {prefix}.{name} has no matching "
                    "model state."
                )
        module.load_state_dict(
            {
                name: provided[name].to(current.dtype)
                for name, current in expected.items()
            }
        )


def restore_optimizer(
    groups: Mapping[str, Tensor],
    optimizer: torch.optim.Optimizer,
    names: Mapping[nn.Parameter, str],
) -> None:
    for group in optimizer.param_groups:
        for param in group["params"]:
            prefix = f"adam.{names[param]}"
            if f"{prefix}.step" not in groups:
                continue
            state = {}
            for key in ("exp_avg", "exp_avg_sq"):
                value = groups[f"{prefix}.{key}"]
                if tuple(value.shape) != tuple(param.shape):
                    raise CheckpointError(
                        f"Checkpoint group {prefix}.{key} has shape "
                        f"{tuple(value.shape)}, expected {tuple(param.shape)}."
                    )
                state[key] = value.to(param.dtype).clone()
            state["step"] = torch.tensor(
                float(groups[f"{prefix}.step"]),
                dtype=torch.get_default_dtype(),
            )
            optimizer.state[param] = state
