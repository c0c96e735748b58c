"""Binary container for named float64 tensors with a JSON header.

Layout, all little-endian:

    magic (8 bytes) | version u32 | header length u32 | header JSON (utf-8)
    | tensor count u32 | tensors | sha256 of everything before (32 bytes)

Each tensor: name length u16, name utf-8, ndim u8, dims u32 each, data as
float64 in C order. Checkpoints and grid interchange files share this
container under different magic strings.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"GRIDCKPT"
TENSOR_MAGIC = b"GRIDTENS"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def pack(magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    hdr = canonical_json(header).encode("utf-8")
    parts.append(struct.pack("<I", len(hdr)))
    parts.append(hdr)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        shape = arr.shape  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def unpack(data: bytes, expected_magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 48:
        raise ValueError("file truncated: shorter than any valid container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("checksum mismatch: file is corrupt or truncated")
    if body[:8] != expected_magic:
        raise ValueError(
            f"bad magic {body[:8]!r}: expected a {expected_magic.decode()} file")
    off = 8
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape)
        tensors[name] = arr.copy()
        off += 8 * size
    if off != len(body):
        raise ValueError("trailing bytes after last tensor")
    return header, tensors


def write_file(path: str, magic: bytes, header: dict,
               tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(magic, header, tensors))


def read_file(path: str, expected_magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return unpack(fh.read(), expected_magic)


# ---- grid interchange files ------------------------------------------------


def save_grid(path: str, grid, kind: str = "intensity_grid", **extra) -> None:
    """Persist an IntensityGrid (counts or real-valued predictions)."""
    header = {"kind": kind, "origin_time": grid.origin_time,
              "spec": grid.spec.to_dict(), **extra}
    write_file(path, TENSOR_MAGIC, header, {"frames": grid.frames})


def load_grid(path: str, kind: str = "intensity_grid"):
    from .ingest import GridSpec, IntensityGrid

    header, tensors = read_file(path, TENSOR_MAGIC)
    if header.get("kind") != kind:
        raise ValueError(f"expected a {kind} file, found {header.get('kind')!r}")
    spec = GridSpec.from_dict(header["spec"])
    frames = tensors["frames"]
    if kind == "intensity_grid" and np.allclose(frames, np.round(frames)):
        frames = np.round(frames).astype(np.int64)
    grid = IntensityGrid(origin_time=header["origin_time"], frames=frames, spec=spec)
    return grid, header
