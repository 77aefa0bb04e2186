"""Filesystem adapter - raster, CSV, JSON and NPZ file operations.

This adapter keeps file formats in one place so that services work on arrays:
- Raster IO through Pillow (PNG 8/16-bit, PGM/PPM)
- CSV integer grids
- JSON / JSON-lines documents
- NPZ archives for feature caches
- Content hashing for cache keys
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError

from spmatch.domain.errors import FormatError, ImageIOError

RASTER_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm"}
LABEL_SUFFIXES = {".png", ".csv", ".pgm"}


def read_text_sync(path: Path, encoding: str = "utf-8") -> str:
    """Read a text file.

    Raises:
        FileNotFoundError: If file does not exist
    """
    with open(path, encoding=encoding) as f:
        return f.read()


def _write_text(path: Path, content: str, encoding: str = "utf-8") -> None:
    """Write a text file, creating parent directories."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding=encoding) as f:
        f.write(content)


def read_binary_sync(path: Path) -> bytes:
    """Read a binary file."""
    with open(path, "rb") as f:
        return f.read()


def file_exists(path: Path) -> bool:
    """Check if file exists."""
    return path.exists() and path.is_file()


def sha256_bytes(*chunks: bytes) -> str:
    """Hash a sequence of byte chunks."""
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(len(chunk).to_bytes(8, "little"))
        digest.update(chunk)
    return digest.hexdigest()


# ============================================================================
# Rasters
# ============================================================================


def read_raster(path: Path) -> tuple[np.ndarray, int]:
    """
    Read a raster into an integer array.

    Args:
        path: PNG, PGM or PPM file

    Returns:
        (array, max_value): array of shape (h, w) or (h, w, c) and the
        maximum representable value (255 or 65535)

    Raises:
        FormatError: Unsupported extension or pixel mode
        ImageIOError: Missing, unreadable or truncated file
    """
    if path.suffix.lower() not in RASTER_SUFFIXES:
        raise FormatError(f"Unsupported raster format: {path.suffix or '(none)'} ({path})")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("P", "PA", "LA", "RGBA", "CMYK", "YCbCr"):
                img = img.convert("L" if mode in ("LA",) else "RGB")
                mode = img.mode
            if mode == "1":
                img = img.convert("L")
                mode = "L"
            array = np.array(img)
    except FileNotFoundError as e:
        raise ImageIOError(f"File not found: {path}") from e
    except UnidentifiedImageError as e:
        raise FormatError(f"Cannot identify raster file: {path}") from e
    except (OSError, SyntaxError, ValueError) as e:
        raise ImageIOError(f"Cannot read raster {path}: {e}") from e

    if mode in ("L", "RGB"):
        return array.astype(np.int64), 255
    if mode.startswith("I;16") or mode == "I":
        return array.astype(np.int64), 65535
    raise FormatError(f"Unsupported pixel mode {mode!r} in {path}")


def write_png(path: Path, array: np.ndarray) -> None:
    """
    Write an integer array as PNG.

    uint8 arrays of shape (h, w) or (h, w, 3) are written as 8-bit gray/RGB;
    2-D arrays with values up to 65535 are written as 16-bit gray.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    if array.dtype == np.uint8:
        img = Image.fromarray(array)
    elif array.ndim == 2:
        if array.min() < 0 or array.max() > 65535:
            raise FormatError("16-bit PNG values must lie in [0, 65535]")
        img = Image.fromarray(array.astype(np.uint16))
    else:
        raise FormatError(f"Cannot write array of dtype {array.dtype} and shape {array.shape} as PNG")
    try:
        img.save(path, format="PNG")
    except OSError as e:
        raise ImageIOError(f"Cannot write {path}: {e}") from e


# ============================================================================
# CSV grids
# ============================================================================


def read_csv_grid(path: Path) -> np.ndarray:
    """
    Read a rectangular CSV grid of integers.

    Raises:
        ImageIOError: Missing or unreadable file
        FormatError: Ragged rows or non-integer cells
    """
    try:
        text = read_text_sync(path)
    except OSError as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e

    rows: list[list[int]] = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            rows.append([int(cell.strip()) for cell in row])
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: non-integer value in {row}") from e
    if not rows:
        raise FormatError(f"{path}: empty grid")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: rows have different lengths")
    return np.array(rows, dtype=np.int64)


def write_csv_grid(path: Path, array: np.ndarray, fmt: str = "{}") -> None:
    """Write a 2-D array as CSV rows."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for row in np.asarray(array):
        writer.writerow([fmt.format(v) for v in row.tolist()])
    _write_text(path, buffer.getvalue())


# ============================================================================
# JSON and NPZ
# ============================================================================


def read_json(path: Path) -> Any:
    """Read a JSON document."""
    try:
        return json.loads(read_text_sync(path))
    except OSError as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON in {path}: {e}") from e


def write_json(path: Path, document: Any) -> None:
    """Write a JSON document with stable key order."""
    _write_text(path, json.dumps(document, indent=2, sort_keys=True) + "\n")


def write_jsonl(path: Path, lines: Iterable[str]) -> None:
    """Write pre-serialized JSON lines."""
    _write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: Path) -> list[Any]:
    """Read a JSON-lines file."""
    try:
        text = read_text_sync(path)
    except OSError as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e
    try:
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON line in {path}: {e}") from e


def save_npz(path: Path, **arrays: np.ndarray) -> None:
    """Write arrays to an uncompressed NPZ archive."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_npz(path: Path) -> dict[str, np.ndarray]:
    """Read every array of an NPZ archive into memory."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            return {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as e:
        raise ImageIOError(f"Cannot read {path}: {e}") from e
