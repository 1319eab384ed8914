"""Binary PPM (P6, 3 channels) and PGM (P5, 1 channel) images, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from trojancc.tensor import Tensor


class ImageFormatError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:i])
    if i >= n or not data[i : i + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte")
    return tokens, i + 1


def decode(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError("non-numeric header field") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError("image dimensions must be positive")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = data[offset : offset + need]
    if len(body) != need:
        raise ImageFormatError(f"expected {need} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels).copy()


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageFormatError(f"need an HxWx1 or HxWx3 uint8 array, got {img.shape} {img.dtype}")
    magic = b"P6" if img.shape[2] == 3 else b"P5"
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_image(path: str | Path) -> Tensor:
    return Tensor.from_array(decode(Path(path).read_bytes()), "uint8")


def write_image(path: str | Path, img: Tensor | np.ndarray) -> None:
    arr = img.array if isinstance(img, Tensor) else img
    Path(path).write_bytes(encode(arr))
