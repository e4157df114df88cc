"""Procedural multi-object voxel scenes.

Objects are analytic primitives rasterized at voxel centers over the cube
[-0.5, 0.5]^3. Two-object scenes place the objects on opposite sides of the
origin in the horizontal plane and rotate the whole configuration about the
vertical axis.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CATEGORIES = ("box", "sphere", "cylinder", "ell")
CONTENT_RADIUS = 0.45
SCALE_RANGE = (0.08, 0.14)
PLACEMENT_RADIUS = (0.25, 0.35)
ROTATION_RANGE_DEG = (-90.0, 90.0)
MAX_PLACEMENT_ATTEMPTS = 100

VXG_MAGIC = b"VXG1"
VXG_VERSION = 1


class SceneError(ValueError):
    pass


# L-shape: vertical bar x in [-1, -0.3], z in [-1, 1]; foot x in [-1, 1], z in [-1, -0.3];
# depth y in [-0.45, 0.45]. Offset recenters the area centroid on the origin.
_ELL_BAR = 1.4 * -0.65
_ELL_FOOT = 0.91 * 0.35
_ELL_OFFSET = -(_ELL_BAR + _ELL_FOOT) / 2.31


def _shape_corners(category: str) -> np.ndarray:
    """Extreme points of a unit-scale shape, centered on its centroid."""
    if category == "box":
        ext = np.array([1.0, 1.0, 0.5])
    elif category == "sphere":
        return np.array([[1.0, 0.0, 0.0]])
    elif category == "cylinder":
        return np.array([[0.6, 0.0, 1.2]])
    elif category == "ell":
        outline = [(-1.0, -1.0), (1.0, -1.0), (1.0, -0.3), (-0.3, -0.3), (-0.3, 1.0), (-1.0, 1.0)]
        return np.array([[x + _ELL_OFFSET, y, z + _ELL_OFFSET] for x, z in outline for y in (-0.45, 0.45)])
    else:
        raise SceneError(f"unknown category {category!r}")
    return ext[None, :]


def circumradius(category: str, scale: float) -> float:
    """Radius of the smallest origin-centered ball containing the shape."""
    return float(np.linalg.norm(_shape_corners(category), axis=1).max() * scale)


def inside_shape(category: str, local: np.ndarray, scale: float) -> np.ndarray:
    """Inside test for points given in the shape's own (centroid) frame."""
    p = np.asarray(local, dtype=np.float64) / scale
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if category == "box":
        return (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0) & (np.abs(z) <= 0.5)
    if category == "sphere":
        return x * x + y * y + z * z <= 1.0
    if category == "cylinder":
        return (x * x + y * y <= 0.36) & (np.abs(z) <= 1.2)
    if category == "ell":
        x = x - _ELL_OFFSET
        z = z - _ELL_OFFSET
        slab = (np.abs(y) <= 0.45) & (x >= -1.0) & (x <= 1.0) & (z >= -1.0) & (z <= 1.0)
        return slab & ((x <= -0.3) | (z <= -0.3))
    raise SceneError(f"unknown category {category!r}")


@dataclass(frozen=True)
class ShapeSpec:
    category: str
    scale: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise SceneError(f"unknown category {self.category!r}")
        lo, hi = SCALE_RANGE
        if not lo <= self.scale <= hi:
            raise SceneError(f"scale {self.scale} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class Placement:
    shape: ShapeSpec
    center: tuple[float, float, float]
    yaw_deg: float

    def world_to_local(self, points: np.ndarray) -> np.ndarray:
        a = math.radians(self.yaw_deg)
        c, s = math.cos(a), math.sin(a)
        d = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        # rotate by -yaw about z
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return inside_shape(self.shape.category, self.world_to_local(points), self.shape.scale)

    def reach(self) -> float:
        return float(np.linalg.norm(self.center)) + circumradius(self.shape.category, self.shape.scale)


@dataclass
class VoxelScene:
    resolution: int
    instance_id: np.ndarray  # (N, N, N) uint8, indexed [x, y, z]
    categories: list[int]
    colors: list[tuple[float, float, float]]
    meta: dict = field(default_factory=dict)

    @property
    def occupancy(self) -> np.ndarray:
        return self.instance_id > 0

    @property
    def num_objects(self) -> int:
        return len(self.categories)

    def only(self, instance: int) -> VoxelScene:
        """Copy of the scene that keeps a single instance (ids are preserved)."""
        ids = np.where(self.instance_id == instance, self.instance_id, 0).astype(np.uint8)
        return VoxelScene(self.resolution, ids, list(self.categories), list(self.colors), dict(self.meta))

    def centroid(self, instance: int) -> np.ndarray:
        idx = np.argwhere(self.instance_id == instance)
        return (idx.mean(axis=0) + 0.5) / self.resolution - 0.5

    def validate(self) -> None:
        N = self.resolution
        if self.instance_id.shape != (N, N, N):
            raise SceneError("instance grid shape does not match resolution")
        K = len(self.categories)
        present = set(np.unique(self.instance_id).tolist()) - {0}
        if present != set(range(1, K + 1)):
            raise SceneError(f"instance ids {sorted(present)} do not cover 1..{K}")
        centers = voxel_centers(N)[self.occupancy]
        if len(centers) and np.linalg.norm(centers, axis=1).max() > CONTENT_RADIUS + 1e-12:
            raise SceneError("occupied voxel outside the content sphere")


def voxel_center(i: int, j: int, k: int, N: int) -> tuple[float, float, float]:
    for v in (i, j, k):
        if not 0 <= v < N:
            raise IndexError(f"voxel index {v} outside [0, {N})")
    return ((i + 0.5) / N - 0.5, (j + 0.5) / N - 0.5, (k + 0.5) / N - 0.5)


def voxel_centers(N: int) -> np.ndarray:
    """All voxel centers as an (N, N, N, 3) array indexed [i, j, k]."""
    c = (np.arange(N) + 0.5) / N - 0.5
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def rasterize(placements: list[Placement], N: int) -> np.ndarray:
    centers = voxel_centers(N)
    ids = np.zeros((N, N, N), dtype=np.uint8)
    for n, pl in enumerate(placements, start=1):
        ids[pl.contains(centers) & (ids == 0)] = n
    return ids


def _draw_color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(0.2, 1.0, size=3))


def generate_scene(
    seed: int,
    num_objects: int = 2,
    N: int = 32,
    categories: list[int] | None = None,
) -> VoxelScene:
    """Sample and rasterize a scene with one or two objects.

    With two objects, centroids sit at independently drawn radii in
    [0.25, 0.35] on a common line through the origin, and the configuration is
    rotated about z by an angle in [-90, 90] degrees. Placements whose shapes
    would leave the content sphere, or that rasterize to an empty instance, are
    redrawn (scale, radii, rotation); the categories are kept so that
    dataset-level balancing survives redraws.
    """
    if not 16 <= N <= 64:
        raise SceneError(f"resolution N={N} outside [16, 64]")
    if num_objects not in (1, 2):
        raise SceneError("num_objects must be 1 or 2")
    rng = np.random.default_rng(seed)
    if categories is None:
        categories = [int(c) for c in rng.integers(0, len(CATEGORIES), size=num_objects)]
    if len(categories) != num_objects:
        raise SceneError("categories must have one entry per object")
    colors = [_draw_color(rng) for _ in range(num_objects)]

    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        rot = float(rng.uniform(*ROTATION_RANGE_DEG))
        scales = rng.uniform(*SCALE_RANGE, size=num_objects)
        if num_objects == 1:
            radii = np.zeros(1)
        else:
            radii = rng.uniform(*PLACEMENT_RADIUS, size=2)
        a = math.radians(rot)
        axis = np.array([math.cos(a), math.sin(a), 0.0])
        placements = []
        for n in range(num_objects):
            sign = 1.0 if n == 0 else -1.0
            center = tuple(float(v) for v in sign * radii[n] * axis)
            shape = ShapeSpec(CATEGORIES[categories[n]], float(scales[n]), colors[n])
            placements.append(Placement(shape, center, rot))
        if all(p.reach() <= CONTENT_RADIUS for p in placements):
            ids = rasterize(placements, N)
            if all((ids == n).any() for n in range(1, num_objects + 1)):
                break
    else:
        raise SceneError(f"no valid placement after {MAX_PLACEMENT_ATTEMPTS} attempts (seed={seed})")

    meta = {
        "seed": int(seed),
        "rotation_deg": rot,
        "attempts": attempt + 1,
        "objects": [
            {
                "category": p.shape.category,
                "scale": p.shape.scale,
                "center": list(p.center),
                "yaw_deg": p.yaw_deg,
                "color": list(p.shape.color),
            }
            for p in placements
        ],
    }
    scene = VoxelScene(N, ids, list(categories), colors, meta)
    scene.validate()
    return scene


def placements_from_meta(meta: dict) -> list[Placement]:
    out = []
    for obj in meta["objects"]:
        shape = ShapeSpec(obj["category"], obj["scale"], tuple(obj["color"]))
        out.append(Placement(shape, tuple(obj["center"]), obj["yaw_deg"]))
    return out


def balanced_categories(count: int, seed: int) -> list[list[int]]:
    """Category pairs for `count` two-object scenes.

    Consecutive scene pairs together hold each category exactly once, so any
    contiguous run of an even number of scenes is perfectly balanced.
    """
    rng = np.random.default_rng(seed)
    out: list[list[int]] = []
    while len(out) < count:
        perm = [int(c) for c in rng.permutation(len(CATEGORIES))]
        out.append(perm[:2])
        out.append(perm[2:])
    return out[:count]


# --- VXG1 scene files -------------------------------------------------------

def save_scene(scene: VoxelScene, path: str | Path) -> None:
    path = Path(path)
    N, K = scene.resolution, scene.num_objects
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", VXG_MAGIC, VXG_VERSION, N, K))
        fh.write(np.ascontiguousarray(scene.instance_id.astype(np.uint8).ravel(order="F")).tobytes())
        for cat, col in zip(scene.categories, scene.colors):
            fh.write(struct.pack("<B3f", cat, *col))
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(scene.meta, sort_keys=True, indent=1))


def load_scene(path: str | Path) -> VoxelScene:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise SceneError(f"{path}: truncated header")
    magic, version, N, K = struct.unpack_from("<4sIII", raw, 0)
    if magic != VXG_MAGIC or version != VXG_VERSION:
        raise SceneError(f"{path}: not a VXG1 v1 file")
    need = 16 + N**3 + K * 13
    if len(raw) != need:
        raise SceneError(f"{path}: expected {need} bytes, found {len(raw)}")
    ids = np.frombuffer(raw, dtype=np.uint8, count=N**3, offset=16).reshape((N, N, N), order="F").copy()
    categories, colors = [], []
    off = 16 + N**3
    for _ in range(K):
        cat, r, g, b = struct.unpack_from("<B3f", raw, off)
        off += 13
        categories.append(int(cat))
        colors.append((float(r), float(g), float(b)))
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return VoxelScene(int(N), ids, categories, colors, meta)
