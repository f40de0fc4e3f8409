"""
ControlSR Checkpoint Container (CSRK)
Bit-exact little-endian tensor container for model checkpoints.

Layout:
    magic "CSRK" (4B) | u32 version | u32 record_count
    per record: u32 name_len, name bytes (UTF-8), u32 ndim, u32 dims[ndim],
                u8 trainable, f32 data[prod(dims)]
    trailer: u8 stage_code | u64 rng_seed
"""
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from src.errors import ControlSRError, ParseError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"CSRK"
FORMAT_VERSION = 1
HEADER_SIZE = 8  # magic + version


class Stage(Enum):
    """Training stage that produced a checkpoint"""
    VAE = "vae"
    BACKBONE = "backbone"
    CONTROL = "control"


_STAGE_CODES = {Stage.VAE: 0, Stage.BACKBONE: 1, Stage.CONTROL: 2}
_CODE_STAGES = {code: stage for stage, code in _STAGE_CODES.items()}


@dataclass
class TensorRecord:
    """One named float32 tensor"""
    name: str
    data: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValidationError("tensor record needs a non-empty name")
        self.data = np.ascontiguousarray(self.data, dtype="<f4")
        if any(d <= 0 for d in self.data.shape):
            raise ValidationError(f"record {self.name}: dims must be positive, got {self.data.shape}")

    @property
    def dims(self) -> List[int]:
        return list(self.data.shape)


@dataclass
class Checkpoint:
    """Ordered tensor records plus stage tag and seed"""
    stage: Stage
    records: List[TensorRecord] = field(default_factory=list)
    rng_seed: int = 0
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        names = [r.name for r in self.records]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate record names: {dupes}")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise ValidationError(f"rng_seed out of u64 range: {self.rng_seed}")

    def as_dict(self) -> Dict[str, TensorRecord]:
        return {r.name: r for r in self.records}

    def flags(self) -> Dict[str, bool]:
        return {r.name: r.trainable for r in self.records}


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize a checkpoint to CSRK bytes"""
    parts = [MAGIC, struct.pack("<II", checkpoint.format_version, len(checkpoint.records))]
    for record in checkpoint.records:
        name = record.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", record.data.ndim))
        parts.append(struct.pack(f"<{record.data.ndim}I", *record.data.shape))
        parts.append(struct.pack("<B", 1 if record.trainable else 0))
        parts.append(record.data.astype("<f4", copy=False).tobytes(order="C"))
    parts.append(struct.pack("<BQ", _STAGE_CODES[checkpoint.stage], checkpoint.rng_seed))
    return b"".join(parts)


class _Reader:
    """Cursor over a byte buffer that reports truncation with offsets"""

    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(
                f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} available",
                offset=self.pos, path=self.path)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes, path: str = "<bytes>") -> Checkpoint:
    """Parse CSRK bytes; raises ParseError on any malformation"""
    reader = _Reader(buf, path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0, path=path)
    version, count = reader.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}", offset=4, path=path)

    records: List[TensorRecord] = []
    seen = set()
    for _ in range(count):
        start = reader.pos
        (name_len,) = reader.unpack("<I", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("record name is not valid UTF-8", offset=start + 4, path=path)
        if name in seen:
            raise ParseError(f"duplicate record name '{name}'", offset=start, path=path)
        seen.add(name)
        (ndim,) = reader.unpack("<I", "ndim")
        dims = reader.unpack(f"<{ndim}I", "dims") if ndim else ()
        if ndim == 0 or any(d == 0 for d in dims):
            raise ParseError(f"record '{name}' has invalid dims {list(dims)}", offset=start, path=path)
        (trainable,) = reader.unpack("<B", "trainable flag")
        n_values = int(np.prod(dims))
        payload = reader.take(4 * n_values, f"payload of '{name}' ({n_values} values)")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        records.append(TensorRecord(name=name, data=data, trainable=bool(trainable)))

    stage_code, seed = reader.unpack("<BQ", "trailer")
    if stage_code not in _CODE_STAGES:
        raise ParseError(f"unknown stage code {stage_code}", offset=reader.pos - 9, path=path)
    if reader.pos != len(buf):
        raise ParseError(f"{len(buf) - reader.pos} trailing bytes", offset=reader.pos, path=path)
    return Checkpoint(stage=_CODE_STAGES[stage_code], records=records, rng_seed=seed,
                      format_version=version)


def write_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    """Write a checkpoint file"""
    path = Path(path)
    payload = encode_checkpoint(checkpoint)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise ControlSRError(f"failed to write checkpoint {path}: {e}") from e
    logger.info(f"Wrote checkpoint {path} ({checkpoint.stage.value}, "
                f"{len(checkpoint.records)} records, {len(payload)} bytes)")


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint file"""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise ControlSRError(f"failed to read checkpoint {path}: {e}") from e
    checkpoint = decode_checkpoint(buf, str(path))
    logger.debug(f"Read checkpoint {path}: {len(checkpoint.records)} records")
    return checkpoint
