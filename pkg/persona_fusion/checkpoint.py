"""Binary model checkpoints.

Layout (all integers little-endian)::

    magic "PFCKPT\\0\\0" | u32 version
    u64 metadata length | metadata JSON (config, vocabulary, training state, dtype)
    u32 tensor count
    per tensor: u32 name length | name | u8 dtype tag | u32 ndim | u64 extents... |
                u64 byte length | raw values | u32 crc32 of the raw values
    u32 crc32 of everything above
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from persona_fusion.config import TrainConfig
from persona_fusion.matchers import Matcher
from persona_fusion.models import Family, Strategy
from persona_fusion.vocab import Vocab

logger = logging.getLogger(__name__)

MAGIC = b"PFCKPT\x00\x00"
VERSION = 1
FIXED_TABLE = "vocab.fixed"
_DTYPE_TAGS = {"float64": 1, "float32": 2, "int64": 3}
_TAG_DTYPES = {tag: name for name, tag in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Raised when a checkpoint file is truncated, corrupted or from another format version."""


class CheckpointMismatchError(CheckpointError):
    """Raised when a checkpoint does not match the requested model."""


@dataclass
class ModelCheckpoint:
    """Parameters plus everything needed to rebuild and audit the model."""

    config: TrainConfig
    vocab_words: list[str]
    vocab_chars: list[str]
    tensors: dict[str, np.ndarray]
    step: int = 0
    best_hits1: float = 0.0
    epoch: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return {name: array for name, array in self.tensors.items() if name != FIXED_TABLE}

    def vocab(self) -> Vocab:
        return Vocab(
            words=list(self.vocab_words),
            chars=list(self.vocab_chars),
            fixed=self.tensors[FIXED_TABLE],
            pretrained_dim=self.config.pretrained_dim,
            corpus_dim=self.config.corpus_dim,
            max_word_chars=self.config.max_word_chars,
        )

    def metadata(self) -> dict[str, Any]:
        return {
            "config": self.config.model_dump(mode="json"),
            "vocab_words": self.vocab_words,
            "vocab_chars": self.vocab_chars,
            "step": self.step,
            "epoch": self.epoch,
            "best_hits1": self.best_hits1,
            "dtype": self.config.dtype,
            "extra": self.extra,
        }


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    dtype = array.dtype.name
    if dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported dtype {dtype} for tensor {name}")
    raw = np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
    encoded_name = name.encode("utf-8")
    parts = [
        struct.pack("<I", len(encoded_name)),
        encoded_name,
        struct.pack("<BI", _DTYPE_TAGS[dtype], array.ndim),
        struct.pack(f"<{array.ndim}Q", *array.shape),
        struct.pack("<Q", len(raw)),
        raw,
        struct.pack("<I", zlib.crc32(raw)),
    ]
    return b"".join(parts)


def checkpoint_bytes(checkpoint: ModelCheckpoint) -> bytes:
    metadata = json.dumps(checkpoint.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(metadata)), metadata]
    body.append(struct.pack("<I", len(checkpoint.tensors)))
    for name in sorted(checkpoint.tensors):
        body.append(_encode_tensor(name, checkpoint.tensors[name]))
    payload = b"".join(body)
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(checkpoint: ModelCheckpoint, path: str | Path) -> Path:
    """Write ``checkpoint`` to ``path``; equal checkpoints give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(checkpoint))
    logger.info(f"Saved checkpoint ({len(checkpoint.tensors)} tensors, step {checkpoint.step}) to {path}")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if size < 0 or self.offset + size > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> ModelCheckpoint:
    """Decode checkpoint bytes.

    Raises:
        CheckpointError: On a wrong magic or version, truncation, or a checksum mismatch
    """
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a persona-fusion checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupted or truncated)")

    reader = _Reader(data[:-4])
    reader.take(len(MAGIC) + 4)
    (metadata_length,) = reader.unpack("<Q")
    try:
        metadata = json.loads(reader.take(metadata_length).decode("utf-8"))
        config = TrainConfig(**metadata["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint metadata is unreadable: {e}") from e

    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<I")
        name = reader.take(name_length).decode("utf-8")
        tag, ndim = reader.unpack("<BI")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name}")
        shape = reader.unpack(f"<{ndim}Q")
        (byte_length,) = reader.unpack("<Q")
        raw = reader.take(byte_length)
        (crc,) = reader.unpack("<I")
        if zlib.crc32(raw) != crc:
            raise CheckpointError(f"checksum mismatch for tensor {name}")
        dtype = np.dtype(_TAG_DTYPES[tag]).newbyteorder("<")
        if byte_length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"tensor {name} holds {byte_length} bytes, shape {shape} needs another size")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.offset != len(reader.data):
        raise CheckpointError("trailing bytes after the tensor table")
    if FIXED_TABLE not in tensors:
        raise CheckpointError(f"checkpoint lacks the {FIXED_TABLE} table")

    return ModelCheckpoint(
        config=config,
        vocab_words=list(metadata["vocab_words"]),
        vocab_chars=list(metadata["vocab_chars"]),
        tensors=tensors,
        step=int(metadata["step"]),
        epoch=int(metadata.get("epoch", 0)),
        best_hits1=float(metadata["best_hits1"]),
        extra=dict(metadata.get("extra", {})),
    )


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    try:
        data = Path(path).read_bytes()
        checkpoint = parse_checkpoint(data)
        logger.info(f"Loaded checkpoint {path}: {checkpoint.config.family.value}-{checkpoint.config.strategy.value}")
        return checkpoint
    except Exception as e:
        logger.error(f"Error loading checkpoint {path}: {str(e)}")
        raise


def check_compatible(checkpoint: ModelCheckpoint, family: Family | str | None, strategy: Strategy | str | None) -> None:
    """Raise CheckpointMismatchError when the checkpoint holds another family or strategy."""
    config = checkpoint.config
    if family is not None and Family(family) != config.family:
        raise CheckpointMismatchError(
            f"checkpoint holds a {config.family.value} model, requested {Family(family).value}"
        )
    if strategy is not None and Strategy(strategy) != config.strategy:
        raise CheckpointMismatchError(
            f"checkpoint holds strategy {config.strategy.value}, requested {Strategy(strategy).value}"
        )


def from_matcher(matcher: Matcher, step: int = 0, best_hits1: float = 0.0, epoch: int = 0) -> ModelCheckpoint:
    """Snapshot the current parameters of ``matcher`` (values are copied)."""
    tensors = {name: array.copy() for name, array in matcher.parameter_arrays().items()}
    tensors[FIXED_TABLE] = matcher.vocab.fixed.copy()
    return ModelCheckpoint(
        config=matcher.config,
        vocab_words=list(matcher.vocab.words),
        vocab_chars=list(matcher.vocab.chars),
        tensors=tensors,
        step=step,
        best_hits1=best_hits1,
        epoch=epoch,
    )


def restore_matcher(
    checkpoint: ModelCheckpoint, family: Family | str | None = None, strategy: Strategy | str | None = None
) -> Matcher:
    """Rebuild the matcher stored in ``checkpoint``.

    Raises:
        CheckpointMismatchError: If the family or strategy differ from the requested ones, or the
            stored parameters do not fit the architecture described by the stored config
    """
    from persona_fusion.harness import build_matcher

    check_compatible(checkpoint, family, strategy)
    matcher = build_matcher(checkpoint.config, checkpoint.vocab())
    try:
        matcher.load_parameters(checkpoint.parameters)
    except ValueError as e:
        raise CheckpointMismatchError(f"checkpoint parameters do not fit the model: {e}") from e
    return matcher
