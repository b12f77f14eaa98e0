"""8-bit binary PGM (P5) files and image-name manifests."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import MalformedImage, MalformedLine, MissingFile


def write_pgm(path, arr) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM pixel values must fit in a byte")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    """Return an (H, W) uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedImage(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise MalformedImage(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedImage(f"{path}: non-integer PGM header field") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise MalformedImage(f"{path}: expected positive size and maxval 255")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise MalformedImage(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def read_manifest(path) -> dict[str, Path]:
    """Parse ``IMAGE_NAME FILE_PATH`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    out: dict[str, Path] = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MalformedLine(path, line_no, "expected IMAGE_NAME FILE_PATH")
        name, file = parts
        p = Path(file)
        out[name] = p if p.is_absolute() else path.parent / p
    return out


def write_manifest(path, entries: dict[str, str]) -> None:
    lines = ["# image_name file_path"] + [f"{k} {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
