"""Lifting rendered views into 3D feature volumes and aligning them across views.

Every volume lives on an N^3 grid spanning the cube [-0.5, 0.5]^3 about the
scene center, with axes aligned to some camera's axes (its "frame"). A voxel
at grid coordinates g in the frame of pose P sits at world point P.R^T g. The
reference frame of an episode is the frame of its first view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .render import RenderedView
from .rig import CameraModel, Pose
from .scenes import voxel_centers

CHANNELS = ("r", "g", "b", "depth", "mask", "surface", "grid_depth")
NUM_CHANNELS = len(CHANNELS)
SCENE_DIAMETER = math.sqrt(3.0)
MASK_SURFACE_MIN = 0.5


class LiftError(ValueError):
    pass


@dataclass
class FeatureVolume:
    data: np.ndarray  # (C, N, N, N) indexed [c, i, j, k]
    frame: str  # "camera" or "reference"
    pose: Pose | None = None  # the pose whose axes the grid follows

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[1]


def normalized_depth(z: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Map camera depth of grid points to [0, 1] using the grid's diameter."""
    return (z - (cam.radius - SCENE_DIAMETER / 2)) / SCENE_DIAMETER


def bilinear_sample(images: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) images at continuous pixel coordinates.

    Pixel centers sit at half-integers; taps outside the image contribute zero.
    Returns (C, ...) with the shape of u.
    """
    C, H, W = images.shape
    shape = np.shape(u)
    # one ring of zeros makes every tap of an in-range or clipped coordinate addressable
    padded = np.zeros((C, H + 2, W + 2), dtype=np.float64)
    padded[:, 1:-1, 1:-1] = images
    flat = padded.reshape(C, -1)
    x = np.clip(np.asarray(u, dtype=np.float64).ravel() - 0.5, -1.0, W) + 1.0
    y = np.clip(np.asarray(v, dtype=np.float64).ravel() - 0.5, -1.0, H) + 1.0
    x0 = np.minimum(np.floor(x), W)
    y0 = np.minimum(np.floor(y), H)
    fx, fy = x - x0, y - y0
    base = y0.astype(np.int64) * (W + 2) + x0.astype(np.int64)
    out = flat[:, base] * ((1.0 - fx) * (1.0 - fy))
    out += flat[:, base + 1] * (fx * (1.0 - fy))
    out += flat[:, base + W + 2] * ((1.0 - fx) * fy)
    out += flat[:, base + W + 3] * (fx * fy)
    return out.reshape((C,) + shape)


def grid_in_world(N: int, frame: Pose) -> np.ndarray:
    """World positions of the voxel centers of a grid following `frame`'s axes."""
    return voxel_centers(N) @ frame.rotation  # R^T g for each row


def voxel_pixel_coords(N: int, pose: Pose, cam: CameraModel, target_frame: Pose):
    """(u, v, z) of every voxel center of the target-frame grid seen from `pose`."""
    pts = pose.apply(grid_in_world(N, target_frame))
    return cam.project(pts)


def unproject(
    view: RenderedView,
    pose: Pose,
    cam: CameraModel,
    N: int,
    target_frame: Pose | None = None,
    return_coords: bool = False,
):
    """Fill a 7-channel volume by projecting voxel centers into the view.

    Channels are (R, G, B, depth, mask, surface, grid_depth). Depth-like
    channels are normalized by the grid diameter. The surface channel marks the
    thin shell where the voxel's depth matches the sampled surface depth within
    one voxel edge. Voxels behind the camera or projecting outside the image
    are all zero.
    """
    frame = pose if target_frame is None else target_frame
    u, v, z = voxel_pixel_coords(N, pose, cam, frame)
    H = W = cam.image_size
    in_view = (z > 1e-9) & (u >= 0) & (u <= W) & (v >= 0) & (v <= H)

    mask = view.mask.astype(np.float64)
    depth = view.depth_filled.astype(np.float64)
    stack = np.concatenate(
        [np.moveaxis(view.rgb.astype(np.float64), -1, 0), (normalized_depth(depth, cam) * mask)[None], mask[None], (depth * mask)[None]]
    )
    s = bilinear_sample(stack, u, v)
    rgb, depth_n, mask_s, depth_m = s[0:3], s[3], s[4], s[5]
    with np.errstate(divide="ignore", invalid="ignore"):
        surf_depth = np.where(mask_s > 0, depth_m / mask_s, np.inf)
    tau = 1.0 / N
    surface = (mask_s >= MASK_SURFACE_MIN) & (np.abs(z - surf_depth) <= tau)

    data = np.empty((NUM_CHANNELS, N, N, N), dtype=np.float64)
    data[0:3] = rgb
    data[3] = depth_n
    data[4] = mask_s
    data[5] = surface
    data[6] = normalized_depth(z, cam)
    data *= in_view
    vol = FeatureVolume(data, "camera" if target_frame is None else "reference", frame)
    if return_coords:
        return vol, (u, v, z, in_view)
    return vol


def unproject_into_reference(view: RenderedView, pose: Pose, cam: CameraModel, N: int, ref_pose: Pose) -> FeatureVolume:
    """Direct sampling of the reference-frame grid, with no intermediate resample."""
    return unproject(view, pose, cam, N, target_frame=ref_pose)


def _snap(coords: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(coords)
    return np.where(np.abs(coords - r) <= tol, r, coords)


def trilinear_sample(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample (C, N, N, N) at fractional index coordinates (..., 3); zero outside."""
    C, N = data.shape[0], data.shape[1]
    M = N + 2
    padded = np.zeros((C, M, M, M), dtype=np.result_type(data.dtype, np.float64))
    padded[:, 1:-1, 1:-1, 1:-1] = data
    flat = padded.reshape(C, -1)
    q = np.clip(coords.reshape(-1, 3), -1.0, N) + 1.0
    q0 = np.minimum(np.floor(q), N)
    f = q - q0
    g = 1.0 - f
    i0 = q0.astype(np.int64)
    base = (i0[:, 0] * M + i0[:, 1]) * M + i0[:, 2]
    out = np.zeros((C, len(q)), dtype=flat.dtype)
    for di in (0, 1):
        wi = f[:, 0] if di else g[:, 0]
        for dj in (0, 1):
            wij = wi * (f[:, 1] if dj else g[:, 1])
            for dk in (0, 1):
                w = wij * (f[:, 2] if dk else g[:, 2])
                out += flat[:, base + (di * M + dj) * M + dk] * w
    return out.reshape((C,) + coords.shape[:-1])


def rotate_volume(data: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Inverse-mapping resample: output(g) = input(rotation^T g) about the grid center."""
    N = data.shape[1]
    c = (N - 1) / 2.0
    idx = np.stack(np.meshgrid(*(np.arange(N, dtype=np.float64),) * 3, indexing="ij"), axis=-1)
    src = (idx - c) @ rotation + c  # rows are R^T (idx - c)
    return trilinear_sample(data, _snap(src))


def warp_to_reference(vol: FeatureVolume, ego: Pose) -> FeatureVolume:
    """Resample a camera-frame volume into the reference frame.

    `ego` maps current-camera coordinates into reference-camera coordinates.
    Both grids are centered on the scene center, so only the rotation acts.
    """
    if vol.frame != "camera":
        raise LiftError("warp expects a volume in its own camera frame")
    if not ego.is_rigid(1e-6):
        raise LiftError("egomotion is not a rigid transform")
    data = rotate_volume(vol.data, np.asarray(ego.rotation, dtype=np.float64))
    return FeatureVolume(data.astype(vol.data.dtype, copy=False), "reference", None)


def avg_pool2(data: np.ndarray) -> np.ndarray:
    C, N = data.shape[0], data.shape[1]
    if N % 2:
        raise LiftError("pooling needs an even resolution")
    M = N // 2
    return data.reshape(C, M, 2, M, 2, M, 2).mean(axis=(2, 4, 6))
