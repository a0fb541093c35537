"""On-disk formats: binary PGM views, DSP1 float maps and a JSON Lines manifest."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Union

import numpy as np

PathLike = Union[str, Path]

DSP_MAGIC = b"DSP1"
MANIFEST_FIELDS = ("id", "left", "right", "disp", "teacher", "label", "split", "illum", "dist")


class DataError(Exception):
    """Base class for dataset read/validation failures."""


class HeaderError(DataError):
    """The file does not start with a well-formed header."""


class TruncationError(DataError):
    """Payload length disagrees with the size declared in the header."""


class ShapeMismatchError(DataError):
    """Maps that must share dimensions do not."""


class ManifestError(DataError):
    """A manifest record is invalid or references a missing file."""


# ---------------------------------------------------------------- PGM
def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Write a [0, 1] grayscale image as 8-bit binary PGM."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _pgm_tokens(buf: bytes, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HeaderError("PGM header ended early")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def read_pgm_bytes(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        tokens, offset = _pgm_tokens(buf, 4)
    except HeaderError as exc:
        raise HeaderError(f"{path}: {exc}") from None
    if tokens[0] != b"P5":
        raise HeaderError(f"{path}: bad PGM magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise HeaderError(f"{path}: non-numeric PGM header fields") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise HeaderError(f"{path}: unsupported PGM header w={w} h={h} maxval={maxval}")
    payload = buf[offset:]
    if len(payload) != w * h:
        raise TruncationError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path: PathLike) -> np.ndarray:
    """Read an 8-bit PGM as float32 values in [0, 1]."""
    return read_pgm_bytes(path).astype(np.float32) / np.float32(255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 1/255 grid PGM can represent."""
    return (np.clip(np.rint(np.asarray(image) * 255.0), 0, 255) / 255.0).astype(np.float32)


# ---------------------------------------------------------------- DSP1
def write_dsp(path: PathLike, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D map, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(DSP_MAGIC + struct.pack("<II", h, w) + arr.tobytes())


def read_dsp(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != DSP_MAGIC:
        raise HeaderError(f"{path}: missing DSP1 header")
    h, w = struct.unpack("<II", buf[4:12])
    payload = buf[12:]
    if len(payload) != 4 * h * w:
        raise TruncationError(f"{path}: header declares {h}x{w} floats, payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------- manifest
@dataclass
class ManifestRecord:
    id: str
    left: str
    right: str
    disp: str
    teacher: str
    label: int
    split: str
    illum: str
    dist: str

    def resolve(self, root: Path, key: str) -> Path:
        p = Path(getattr(self, key))
        return p if p.is_absolute() else root / p


def write_manifest(path: PathLike, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=False) + "\n")


def read_manifest(path: PathLike, check_files: bool = True) -> List[ManifestRecord]:
    """Parse and validate a manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    records: List[ManifestRecord] = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if set(raw) != set(MANIFEST_FIELDS):
                raise ManifestError(
                    f"{path}:{lineno}: fields {sorted(raw)} do not match {sorted(MANIFEST_FIELDS)}"
                )
            rec = ManifestRecord(**raw)
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            if rec.label not in (0, 1):
                raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {rec.label!r}")
            if rec.split not in ("train", "test"):
                raise ManifestError(f"{path}:{lineno}: unknown split {rec.split!r}")
            seen.add(rec.id)
            if check_files:
                for key in ("left", "right", "disp", "teacher"):
                    target = rec.resolve(root, key)
                    if not target.exists():
                        raise ManifestError(f"{path}:{lineno}: missing file {target}")
            records.append(rec)
    return records
