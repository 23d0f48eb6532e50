"""Small helpers for atomic file output and little-endian binary headers."""

from __future__ import annotations

import contextlib
import os
import struct
import tempfile
from pathlib import Path
from typing import IO, Iterator

from .errors import FormatError


@contextlib.contextmanager
def atomic_open(path: str | os.PathLike, mode: str = "wb") -> Iterator[IO]:
    """Open a temporary sibling of ``path`` and rename it into place on success.

    Nothing is left behind if the body raises.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": ""}
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_atomic(path: str | os.PathLike, data: bytes | str) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    with atomic_open(path, mode) as fh:
        fh.write(data)


def check_magic(buf: bytes, magic: bytes, what: str) -> None:
    if buf[: len(magic)] != magic:
        raise FormatError(f"{what}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")


def unpack_from(fmt: str, buf: bytes, offset: int, what: str) -> tuple:
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise FormatError(f"{what}: truncated file")
    return struct.unpack_from(fmt, buf, offset)
