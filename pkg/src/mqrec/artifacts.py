"""Artifact directory: manifest, checksummed binary matrices and token maps.

Matrix file layout (all little-endian)::

    b"MQRC" | u32 version | u64 rows | u64 cols | rows*cols f32 | u32 crc32(payload)

Arrays that are not 2-D are stored flattened to ``(rows, cols)``; the
manifest records their true shape under ``shape.<name>``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ArtifactError",
    "CorruptionError",
    "VersionError",
    "FormatError",
    "ArtifactBundle",
    "write_matrix",
    "read_matrix",
    "save_bundle",
    "load_bundle",
    "write_token_map",
    "read_token_map",
]

MAGIC = b"MQRC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
MANIFEST = "manifest.txt"


class ArtifactError(Exception):
    """Base class for artifact load failures."""


class CorruptionError(ArtifactError):
    pass


class VersionError(ArtifactError):
    pass


class FormatError(ArtifactError):
    pass


def _as_2d(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return a
    if a.ndim == 1:
        return a.reshape(1, -1)
    return a.reshape(-1, a.shape[-1])


def write_matrix(path, a) -> None:
    m = np.ascontiguousarray(_as_2d(np.asarray(a)), dtype="<f4")
    payload = m.tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an MQRC matrix file")
    _, version, rows, cols = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    n = rows * cols * 4
    if len(raw) != _HEADER.size + n + 4:
        raise CorruptionError(f"{path}: truncated or oversized payload")
    payload = raw[_HEADER.size:_HEADER.size + n]
    (crc,) = struct.unpack_from("<I", raw, _HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise CorruptionError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_token_map(path, side: str, raw_ids, codes) -> None:
    lines = [f"{side} {rid} " + " ".join(str(int(c) + 1) for c in row) for rid, row in zip(raw_ids, codes)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_token_map(path) -> tuple:
    """``(side, raw_ids, codes)``; codes come back 0-based."""
    side, ids, codes = None, [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 3 or (side is not None and parts[0] != side):
            raise FormatError(f"{path}:{lineno}: malformed token map line")
        side = parts[0]
        ids.append(parts[1])
        codes.append([int(c) - 1 for c in parts[2:]])
    return side, ids, np.asarray(codes, dtype=np.int64)


@dataclass
class ArtifactBundle:
    manifest: dict = field(default_factory=dict)
    matrices: dict = field(default_factory=dict)
    # side -> (raw ids, (N, K) codes)
    token_maps: dict = field(default_factory=dict)


def _safe_name(name: str) -> str:
    if not name or any(c in name for c in "/\\ \t=") or name.startswith("."):
        raise ValueError(f"invalid matrix name {name!r}")
    return name


def save_bundle(path, bundle: ArtifactBundle) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": str(FORMAT_VERSION)}
    manifest.update({k: str(v) for k, v in bundle.manifest.items()})
    for name, arr in sorted(bundle.matrices.items()):
        arr = np.asarray(arr)
        write_matrix(out / f"{_safe_name(name)}.mqrc", arr)
        manifest[f"shape.{name}"] = ",".join(str(s) for s in arr.shape)
    for side, (ids, codes) in sorted(bundle.token_maps.items()):
        write_token_map(out / f"tokens_{side}.txt", side, ids, codes)
        manifest[f"tokens.{side}"] = f"tokens_{side}.txt"
    text = "".join(f"{k} = {v}\n" for k, v in manifest.items())
    (out / MANIFEST).write_text(text, encoding="utf-8")
    return out


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST
    if not p.exists():
        raise FormatError(f"{path}: no {MANIFEST}")
    out = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{p}:{lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def load_bundle(path) -> ArtifactBundle:
    root = Path(path)
    manifest = read_manifest(root)
    version = manifest.pop("format_version", None)
    if version != str(FORMAT_VERSION):
        raise VersionError(f"{path}: bundle version {version}, expected {FORMAT_VERSION}")
    matrices, token_maps = {}, {}
    for key in [k for k in manifest if k.startswith("shape.")]:
        name = key[len("shape."):]
        shape = tuple(int(s) for s in manifest.pop(key).split(",") if s)
        m = read_matrix(root / f"{name}.mqrc")
        if int(np.prod(shape)) != m.size:
            raise CorruptionError(f"{name}: manifest shape {shape} does not match stored {m.shape}")
        matrices[name] = m.reshape(shape)
    for key in [k for k in manifest if k.startswith("tokens.")]:
        side, ids, codes = read_token_map(root / manifest.pop(key))
        token_maps[side] = (ids, codes)
    return ArtifactBundle(manifest, matrices, token_maps)
