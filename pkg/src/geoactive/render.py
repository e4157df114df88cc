"""Groundtruth RGB / depth / mask / instance rendering by voxel-grid ray traversal."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rig import CameraModel, Pose, ViewIndex
from .scenes import VoxelScene

GRID_LO = -0.5
GRID_HI = 0.5


@dataclass
class RenderedView:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) camera-frame z; +inf where mask is False
    mask: np.ndarray  # (H, W) bool
    instance: np.ndarray  # (H, W) uint8, 0 = background
    view: ViewIndex | None = None

    @property
    def depth_filled(self) -> np.ndarray:
        """Depth with background set to zero, safe for interpolation."""
        return np.where(self.mask, self.depth, 0.0)


def camera_rays(pose: Pose, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin and per-pixel directions scaled so that t equals camera depth."""
    H = W = cam.image_size
    v, u = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    d_cam = np.stack([(u - cam.principal) / cam.focal, (v - cam.principal) / cam.focal, np.ones_like(u)], axis=-1)
    d_world = d_cam.reshape(-1, 3) @ pose.rotation  # R^T d for each row
    return pose.center, d_world


def slab_intersect(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Ray/AABB entry and exit parameters; rays that miss get t_in > t_out."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    # a zero direction component inside the slab yields nan from 0*inf; treat as unbounded
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    tmin = np.where(np.isnan(t1), -np.inf, tmin)
    tmax = np.where(np.isnan(t1), np.inf, tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def traverse(
    origins: np.ndarray,
    dirs: np.ndarray,
    occupancy: np.ndarray,
    clip_to_occupied: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """First occupied voxel along each ray over the grid on [-0.5, 0.5]^3.

    Voxels are visited in increasing ray parameter (Amanatides & Woo), all rays
    advancing in lockstep. Returns the entry parameter of the hit voxel (inf on a
    miss) and its (i, j, k) index (-1 on a miss). With `clip_to_occupied` the
    walk starts at the bounding box of occupied voxels, which visits the same
    voxels from the first potentially occupied one onward.
    """
    occupancy = np.asarray(occupancy, dtype=bool)
    N = occupancy.shape[0]
    h = (GRID_HI - GRID_LO) / N
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    dirs = np.asarray(dirs, dtype=np.float64)
    R = len(dirs)
    t_hit = np.full(R, np.inf)
    hit_idx = np.full((R, 3), -1, dtype=np.int64)
    if not occupancy.any():
        return t_hit, hit_idx

    if clip_to_occupied:
        occ_idx = np.argwhere(occupancy)
        ilo, ihi = occ_idx.min(axis=0), occ_idx.max(axis=0)
    else:
        ilo, ihi = np.zeros(3, dtype=np.int64), np.full(3, N - 1, dtype=np.int64)
    lo = GRID_LO + ilo * h
    hi = GRID_LO + (ihi + 1) * h
    t_in, t_out = slab_intersect(origins, dirs, lo, hi)
    t_in = np.maximum(t_in, 0.0)
    alive = np.flatnonzero(t_in <= t_out)
    if alive.size == 0:
        return t_hit, hit_idx

    o, d = origins[alive], dirs[alive]
    t_cur = t_in[alive]
    t_end = t_out[alive]
    p = o + t_cur[:, None] * d
    idx = np.floor((p - GRID_LO) / h).astype(np.int64)
    idx = np.clip(idx, ilo, ihi)
    step = np.where(d > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = GRID_LO + (idx + (step > 0)) * h
        t_max = np.where(d != 0, (boundary - o) / d, np.inf)
        t_delta = np.where(d != 0, h / np.abs(d), np.inf)

    rows = np.arange(len(alive))
    while rows.size:
        ii = idx[rows]
        occ = occupancy[ii[:, 0], ii[:, 1], ii[:, 2]]
        if occ.any():
            got = rows[occ]
            t_hit[alive[got]] = t_cur[got]
            hit_idx[alive[got]] = idx[got]
            rows = rows[~occ]
            if not rows.size:
                break
        tm = t_max[rows]
        axis = np.argmin(tm, axis=1)
        r_ax = (rows, axis)
        t_cur[rows] = tm[np.arange(len(rows)), axis]
        idx[r_ax] += step[r_ax]
        t_max[r_ax] += t_delta[r_ax]
        ii = idx[rows]
        inside = np.all((ii >= ilo) & (ii <= ihi), axis=1) & (t_cur[rows] <= t_end[rows])
        rows = rows[inside]
    return t_hit, hit_idx


def render(scene: VoxelScene, pose: Pose, cam: CameraModel, view: ViewIndex | None = None) -> RenderedView:
    H = W = cam.image_size
    origin, dirs = camera_rays(pose, cam)
    t_hit, idx = traverse(origin, dirs, scene.occupancy)
    mask = np.isfinite(t_hit)
    inst = np.zeros(H * W, dtype=np.uint8)
    inst[mask] = scene.instance_id[idx[mask, 0], idx[mask, 1], idx[mask, 2]]
    palette = np.zeros((len(scene.colors) + 1, 3), dtype=np.float32)
    if scene.colors:
        palette[1:] = np.asarray(scene.colors, dtype=np.float32)
    rgb = palette[inst]
    return RenderedView(
        rgb=rgb.reshape(H, W, 3),
        depth=t_hit.reshape(H, W),
        mask=mask.reshape(H, W),
        instance=inst.reshape(H, W),
        view=view,
    )


def occlusion_rate(scene: VoxelScene, pose: Pose, cam: CameraModel) -> float:
    """Fraction of the more-hidden object's silhouette covered by the other object."""
    if scene.num_objects != 2:
        raise ValueError("occlusion rate is defined for two-object scenes only")
    full = render(scene, pose, cam)
    worst = 0.0
    for n in (1, 2):
        alone = np.count_nonzero(render(scene.only(n), pose, cam).instance == n)
        if alone == 0:
            continue
        seen = np.count_nonzero(full.instance == n)
        worst = max(worst, 1.0 - seen / alone)
    return worst


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6 dump of an (H, W, 3) float image in [0, 1] or an (H, W) gray image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    data = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    H, W, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def dump_view(view: RenderedView, directory: str | Path, stem: str, radius: float) -> list[Path]:
    """Write rgb, depth and mask PPMs for debugging; depth maps [r-0.45, r+0.45] to [1, 0]."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    near, far = radius - 0.45, radius + 0.45
    depth_img = np.where(view.mask, (far - view.depth_filled) / (far - near), 0.0)
    out = []
    for name, img in (("rgb", view.rgb), ("depth", depth_img), ("mask", view.mask.astype(float))):
        p = directory / f"{stem}_{name}.ppm"
        write_ppm(p, img)
        out.append(p)
    return out
