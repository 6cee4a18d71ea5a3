"""Checkpoint container.

Little-endian layout:

    magic "CRNNCKPT" | version u16 | network digest (32 raw bytes)
    | epoch u32 | seed u64 | tensor count u32
    | per tensor: name (u16 length + utf-8) | dtype (u16 length + numpy str)
                  | ndim u8 | dims u32 * ndim | raw bytes
    | CRC-32 of everything above u32
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from src.helpers.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from src.helpers.logger import Logger
from src.helpers.model import CorruptionError, DigestMismatchError, ParseError
from src.helpers.repository import BaseRepository, ByteReader, pack_string
from src.models.runs import Checkpoint

logger = Logger(__name__)


class CheckpointRepository(BaseRepository):
    def encode(self, checkpoint: Checkpoint) -> bytes:
        parts = [
            CHECKPOINT_MAGIC,
            struct.pack("<H", CHECKPOINT_VERSION),
            bytes.fromhex(checkpoint.spec_digest),
            struct.pack("<IQI", checkpoint.epoch, checkpoint.seed, len(checkpoint.tensors)),
        ]
        for name, tensor in checkpoint.tensors.items():
            data = np.ascontiguousarray(tensor, dtype=tensor.dtype.newbyteorder("<"))
            parts.append(pack_string(name))
            parts.append(pack_string(data.dtype.str))
            parts.append(struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape))
            parts.append(data.tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    def decode(self, payload: bytes, path: str = "<memory>") -> Checkpoint:
        if len(payload) < len(CHECKPOINT_MAGIC) + 4 or payload[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise CorruptionError(f"{path}: not a checkpoint (bad magic)")
        body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptionError(f"{path}: checksum mismatch")

        reader = ByteReader(body, path)
        try:
            reader.take(len(CHECKPOINT_MAGIC), "magic")
            (version,) = reader.unpack("<H", "version")
            if version != CHECKPOINT_VERSION:
                raise CorruptionError(f"{path}: unsupported checkpoint version {version}")
            digest = reader.take(32, "digest").hex()
            epoch, seed, count = reader.unpack("<IQI", "header")
            tensors: dict[str, np.ndarray] = {}
            for _ in range(count):
                name = reader.string("tensor name")
                dtype = np.dtype(reader.string("tensor dtype"))
                (ndim,) = reader.unpack("<B", "rank")
                shape = reader.unpack(f"<{ndim}I", "shape")
                size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
                raw = reader.take(size, f"tensor {name}")
                tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        except (ParseError, TypeError, ValueError) as e:
            raise CorruptionError(f"{path}: {e}") from e
        if reader.remaining:
            raise CorruptionError(f"{path}: {reader.remaining} trailing bytes")
        return Checkpoint(spec_digest=digest, epoch=epoch, seed=seed, tensors=tensors)

    def write(self, path: str | Path, checkpoint: Checkpoint) -> Path:
        target = self.write_bytes(path, self.encode(checkpoint))
        logger.debug("Checkpoint for epoch %d written to %s", checkpoint.epoch, target)
        return target

    def read(self, path: str | Path, spec_digest: str | None = None) -> Checkpoint:
        source = self.resolve(path)
        try:
            payload = source.read_bytes()
        except FileNotFoundError as e:
            raise CorruptionError(f"{source}: checkpoint not found") from e
        checkpoint = self.decode(payload, str(source))
        if spec_digest is not None and checkpoint.spec_digest != spec_digest:
            raise DigestMismatchError(
                f"{source}: checkpoint was written for network {checkpoint.spec_digest[:12]}, "
                f"config describes {spec_digest[:12]}"
            )
        return checkpoint
