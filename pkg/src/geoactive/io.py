"""On-disk formats: TNS1 tensors, parameter checkpoints, PLY point clouds."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

TNS_MAGIC = b"TNS1"
TNS_VERSION = 1
TNS_HEADER = struct.Struct("<4sIII")
CHECKPOINT_FORMAT = "geoactive-checkpoint/1"


class FormatError(ValueError):
    pass


def _as_cn(arr: np.ndarray) -> tuple[int, int]:
    """(C, N) for a TNS1 record: trailing cube dims give N, the rest fold into C."""
    if arr.ndim >= 3 and arr.shape[-1] == arr.shape[-2] == arr.shape[-3]:
        N = arr.shape[-1]
        return int(np.prod(arr.shape[:-3], dtype=np.int64)), N
    return int(arr.size), 1


def encode_tensor(arr: np.ndarray) -> bytes:
    """TNS1 bytes: header, then C blocks of N^3 f32 LE values with x varying fastest."""
    arr = np.asarray(arr)
    C, N = _as_cn(arr)
    blocks = arr.reshape(C, N, N, N).astype("<f4")
    body = b"".join(np.ascontiguousarray(b.ravel(order="F")).tobytes() for b in blocks)
    return TNS_HEADER.pack(TNS_MAGIC, TNS_VERSION, C, N) + body


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TNS1 record; returns ((C, N, N, N) float32 array, bytes consumed)."""
    if len(buf) - offset < TNS_HEADER.size:
        raise FormatError("truncated TNS1 header")
    magic, version, C, N = TNS_HEADER.unpack_from(buf, offset)
    if magic != TNS_MAGIC:
        raise FormatError(f"bad TNS1 magic {magic!r}")
    if version != TNS_VERSION:
        raise FormatError(f"unsupported TNS1 version {version}")
    count = C * N**3
    start = offset + TNS_HEADER.size
    end = start + 4 * count
    if end > len(buf):
        raise FormatError("truncated TNS1 payload")
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    out = np.stack([b.reshape(N, N, N, order="F") for b in flat.reshape(C, N**3)]) if C else np.zeros((0, N, N, N), "<f4")
    return out.astype(np.float32), end - offset


def save_tensor(path: str | Path, arr: np.ndarray, channels: list[str] | None = None, meta: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_tensor(arr))
    if channels is not None or meta is not None:
        side = {"channels": channels, **(meta or {})}
        path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=1) + "\n")


def load_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tensor file not found: {path}")
    arr, used = decode_tensor(path.read_bytes())
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arr, meta


# --- checkpoints ---------------------------------------------------------------------

def save_checkpoint(directory: str | Path, arrays: dict[str, np.ndarray], info: dict) -> Path:
    """Write params.bin (concatenated TNS1 records) and manifest.json into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    entries = []
    for name in arrays:
        arr = np.asarray(arrays[name])
        rec = encode_tensor(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(blob), "nbytes": len(rec)})
        blob += rec
    (directory / "params.bin").write_bytes(bytes(blob))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "tensors": entries,
        "params_sha256": hashlib.sha256(blob).hexdigest(),
        **info,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{mpath} is not a {CHECKPOINT_FORMAT} manifest")
    blob = (directory / "params.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["params_sha256"]:
        raise FormatError("params.bin does not match its manifest checksum")
    arrays = {}
    for e in manifest["tensors"]:
        arr, _ = decode_tensor(blob, e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"])
    return arrays, manifest


# --- PLY ---------------------------------------------------------------------------------

def write_ply(path: str | Path, points: np.ndarray, colors: np.ndarray, comments: list[str] = ()) -> None:
    """ASCII PLY with float xyz and uchar rgb per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines += [
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(points, colors):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(c[0])} {int(c[1])} {int(c[2])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply_vertex_count(path: str | Path) -> int:
    for line in Path(path).read_text().splitlines():
        if line.startswith("element vertex"):
            return int(line.split()[-1])
    raise FormatError("no vertex element in PLY header")


INSTANCE_PALETTE = np.array(
    [[200, 200, 200], [230, 60, 60], [60, 160, 230], [90, 200, 90], [240, 180, 40], [170, 90, 210], [40, 200, 200], [250, 120, 180], [120, 120, 40]],
    dtype=np.uint8,
)


def occupied_points(volume: np.ndarray, threshold: float, instance: np.ndarray | None = None):
    """Voxel centers with volume >= threshold and their palette colors by instance id."""
    from .scenes import voxel_centers

    N = volume.shape[0]
    sel = volume >= threshold
    pts = voxel_centers(N)[sel]
    ids = np.zeros(len(pts), dtype=np.int64) if instance is None else np.rint(instance[sel]).astype(np.int64)
    cols = INSTANCE_PALETTE[np.clip(ids, 0, len(INSTANCE_PALETTE) - 1)]
    return pts, cols
