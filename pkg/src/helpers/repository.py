import os
import struct
import tempfile
from pathlib import Path

from src.helpers.model import ParseError


class BaseRepository:
    """File-backed repository rooted at a directory.

    Writes go to a temporary sibling and are renamed into place, so readers
    never observe a half-written container.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else Path.cwd()

    def resolve(self, path: str | Path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    def write_bytes(self, path: str | Path, payload: bytes) -> Path:
        target = self.resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, temp = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(payload)
            os.replace(temp, target)
        except BaseException:
            if os.path.exists(temp):
                os.unlink(temp)
            raise
        return target

    def write_text(self, path: str | Path, text: str) -> Path:
        return self.write_bytes(path, text.encode("utf-8"))

    def read_bytes(self, path: str | Path) -> bytes:
        return self.resolve(path).read_bytes()


class ByteReader:
    """Cursor over a byte buffer that reports truncation with its offset."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if size < 0 or end > len(self.data):
            raise ParseError(self.path, self.offset, f"truncated while reading {what}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (length,) = self.unpack("<H", f"{what} length")
        return self.take(length, what).decode("utf-8")

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset


def pack_string(value: str) -> bytes:
    encoded = value.encode("utf-8")
    return struct.pack("<H", len(encoded)) + encoded
