"""
RTRL DESK - Checkpoint files

Layout (little-endian):
    magic "RTRLCKPT" | u32 version | 32-byte SHA-256 config digest | u32 block count
    then per block: u16 name length | UTF-8 name | TSR1 tensor

Block names: param.<name>, buffer.<name>, adam.m.<name>, adam.v.<name>,
meta.stage, meta.iteration, meta.adam_step, meta.num_classes,
meta.train_identities, meta.config (canonical config text as byte values).
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from loguru import logger

from app.core.errors import CheckpointError, FormatError
from app.services.tensor_io import decode_tensor, encode_tensor

MAGIC = b"RTRLCKPT"
VERSION = 1
DIGEST_BYTES = 32


@dataclass
class Checkpoint:
    digest: bytes
    blocks: Dict[str, np.ndarray] = field(default_factory=dict)

    def meta(self, name: str) -> float:
        key = f"meta.{name}"
        if key not in self.blocks:
            raise CheckpointError(f"checkpoint has no '{key}' block")
        return float(self.blocks[key].reshape(-1)[0])

    def config_text(self) -> str:
        raw = self.blocks.get("meta.config")
        return "" if raw is None else bytes(raw.astype(np.uint8)).decode("utf-8")

    def train_identities(self) -> List[int]:
        raw = self.blocks.get("meta.train_identities")
        return [] if raw is None else [int(v) for v in raw]

    def section(self, prefix: str) -> Dict[str, np.ndarray]:
        """Blocks under `prefix.` with the prefix stripped"""
        start = len(prefix) + 1
        return {name[start:]: value for name, value in self.blocks.items() if name.startswith(prefix + ".")}


def meta_block(value: float) -> np.ndarray:
    return np.array([value], dtype=np.float64)


def text_block(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    if len(checkpoint.digest) != DIGEST_BYTES:
        raise CheckpointError(f"config digest must be {DIGEST_BYTES} bytes, got {len(checkpoint.digest)}")
    parts = [MAGIC, struct.pack("<I", VERSION), checkpoint.digest, struct.pack("<I", len(checkpoint.blocks))]
    for name, array in checkpoint.blocks.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(encode_tensor(array))
    return b"".join(parts)


def decode_checkpoint(buffer: bytes) -> Checkpoint:
    header = len(MAGIC) + 4 + DIGEST_BYTES + 4
    if len(buffer) < header:
        raise FormatError("truncated checkpoint header", offset=len(buffer))
    if buffer[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buffer[:len(MAGIC)])!r}", offset=0)
    (version,) = struct.unpack_from("<I", buffer, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    digest = bytes(buffer[len(MAGIC) + 4:len(MAGIC) + 4 + DIGEST_BYTES])
    (count,) = struct.unpack_from("<I", buffer, header - 4)

    checkpoint = Checkpoint(digest=digest)
    cursor = header
    for _ in range(count):
        if len(buffer) - cursor < 2:
            raise FormatError("truncated block name length", offset=cursor)
        (length,) = struct.unpack_from("<H", buffer, cursor)
        cursor += 2
        if len(buffer) - cursor < length:
            raise FormatError("truncated block name", offset=cursor)
        name = bytes(buffer[cursor:cursor + length]).decode("utf-8")
        cursor += length
        checkpoint.blocks[name], cursor = decode_tensor(buffer, cursor)
    if cursor != len(buffer):
        raise FormatError(f"{len(buffer) - cursor} trailing bytes after the last block", offset=cursor)
    return checkpoint


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = path.with_name(path.name + ".tmp")
    staging.write_bytes(encode_checkpoint(checkpoint))
    staging.replace(path)
    logger.info(f"💾 Checkpoint saved: {path} ({len(checkpoint.blocks)} blocks)")


def load_checkpoint(path: Union[str, Path], expected_digest: Optional[bytes] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    checkpoint = decode_checkpoint(path.read_bytes())
    if expected_digest is not None and checkpoint.digest != expected_digest:
        raise CheckpointError(f"checkpoint {path} was written for a different configuration (digest mismatch)")
    return checkpoint
