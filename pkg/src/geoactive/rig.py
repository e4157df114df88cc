"""Discrete viewing sphere, camera poses and egomotion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ELEVATIONS_DEG = (20.0, 40.0, 60.0)
AZIMUTH_STEP_DEG = 20.0
NUM_AZIMUTHS = 18
NUM_ACTIONS = 8

# (d_elev, d_azim) per action, counter-clockwise starting at +azimuth.
ACTIONS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))

NOISE_MODES = ("off", "independent", "accumulating")


class RigError(ValueError):
    pass


class ViewIndex(NamedTuple):
    elev: int
    azim: int

    @property
    def elev_deg(self) -> float:
        return ELEVATIONS_DEG[self.elev]

    @property
    def azim_deg(self) -> float:
        return AZIMUTH_STEP_DEG * self.azim

    def __str__(self) -> str:
        return f"{self.elev},{self.azim}"


def parse_view(text: str) -> ViewIndex:
    e, a = (int(v) for v in text.split(","))
    return check_view(ViewIndex(e, a))


def check_view(view: ViewIndex) -> ViewIndex:
    if not (0 <= view.elev < len(ELEVATIONS_DEG) and 0 <= view.azim < NUM_AZIMUTHS):
        raise RigError(f"invalid view {tuple(view)}")
    return view


def all_views() -> list[ViewIndex]:
    return [ViewIndex(e, a) for e in range(len(ELEVATIONS_DEG)) for a in range(NUM_AZIMUTHS)]


@dataclass(frozen=True)
class Pose:
    """Rigid transform x_cam = rotation @ x_world + translation.

    Poses built on the rig remember their spherical angles so that noisy
    egomotion can perturb them.
    """

    rotation: np.ndarray
    translation: np.ndarray
    elev_deg: float | None = None
    azim_deg: float | None = None

    @staticmethod
    def identity() -> Pose:
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """self after other."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def is_rigid(self, tol: float = 1e-9) -> bool:
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or np.shape(self.translation) != (3,):
            return False
        return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)


@dataclass(frozen=True)
class CameraModel:
    radius: float = 1.4
    fov_deg: float = 60.0
    image_size: int = 64

    def __post_init__(self):
        if self.radius <= 0.45:
            raise RigError("camera radius must exceed the content radius 0.45")
        needed = math.degrees(math.atan(0.45 / (self.radius - 0.45)))
        if self.fov_deg / 2 <= needed:
            raise RigError(f"half FOV {self.fov_deg / 2:.2f} deg does not cover the content sphere ({needed:.2f} deg)")
        if self.image_size < 4:
            raise RigError("image_size too small")

    @property
    def focal(self) -> float:
        return (self.image_size / 2) / math.tan(math.radians(self.fov_deg) / 2)

    @property
    def principal(self) -> float:
        return self.image_size / 2

    def intrinsics(self) -> np.ndarray:
        f, c = self.focal, self.principal
        return np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])

    def project(self, points_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (u, v) and depth z; pixel (r, c) covers [c, c+1) x [r, r+1)."""
        p = np.asarray(points_cam)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * p[..., 0] / z + self.principal
            v = self.focal * p[..., 1] / z + self.principal
        return u, v, z


def pose_from_angles(elev_deg: float, azim_deg: float, radius: float) -> Pose:
    """Look-at pose from spherical angles; x right, y down, z along the optical axis."""
    e, a = math.radians(elev_deg), math.radians(azim_deg)
    center = radius * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
    fwd = -center / radius
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return Pose(rot, -rot @ center, float(elev_deg), float(azim_deg))


def pose_of(view: ViewIndex, cam: CameraModel) -> Pose:
    check_view(view)
    return pose_from_angles(view.elev_deg, view.azim_deg, cam.radius)


def step_view(view: ViewIndex, action: int) -> ViewIndex | None:
    """Neighbor reached by `action`, or None when it would leave the elevation range."""
    de, da = ACTIONS[action]
    e = view.elev + de
    if not 0 <= e < len(ELEVATIONS_DEG):
        return None
    return ViewIndex(e, (view.azim + da) % NUM_AZIMUTHS)


def neighbors(view: ViewIndex) -> list[tuple[int, ViewIndex]]:
    check_view(view)
    out = []
    for action in range(NUM_ACTIONS):
        nxt = step_view(view, action)
        if nxt is not None:
            out.append((action, nxt))
    return out


def action_mask(view: ViewIndex) -> np.ndarray:
    mask = np.zeros(NUM_ACTIONS, dtype=bool)
    for action, _ in neighbors(view):
        mask[action] = True
    return mask


def are_adjacent(a: ViewIndex, b: ViewIndex) -> bool:
    return any(v == b for _, v in neighbors(a))


@dataclass(frozen=True)
class EgomotionNoise:
    sigma_deg: float = 5.0
    mode: str = "off"

    def __post_init__(self):
        if self.sigma_deg < 0:
            raise RigError("noise sigma must be non-negative")
        if self.mode not in NOISE_MODES:
            raise RigError(f"noise mode must be one of {NOISE_MODES}")

    @property
    def active(self) -> bool:
        return self.mode != "off" and self.sigma_deg > 0


OFF = EgomotionNoise(0.0, "off")


def relative_egomotion(
    frm: Pose,
    to: Pose,
    noise: EgomotionNoise = OFF,
    rng: np.random.Generator | None = None,
    carry: np.ndarray | None = None,
) -> Pose:
    """Transform taking camera-`to` coordinates into camera-`frm` coordinates.

    With noise active, the elevation and azimuth of `to` are perturbed by
    Normal(0, sigma^2) degrees before composing. In accumulating mode the draw
    is added into `carry` (a length-2 array of running [elev, azim] error owned
    by the episode) and the accumulated error is applied.
    """
    if noise.active:
        if to.elev_deg is None:
            raise RigError("noisy egomotion needs a pose built on the rig")
        if rng is None:
            raise RigError("noisy egomotion needs an rng")
        delta = rng.normal(0.0, noise.sigma_deg, size=2)
        if noise.mode == "accumulating":
            if carry is None:
                raise RigError("accumulating noise needs an episode carry buffer")
            carry += delta
            delta = carry.copy()
        radius = float(np.linalg.norm(to.center))
        to = pose_from_angles(to.elev_deg + delta[0], to.azim_deg + delta[1], radius)
    return frm.compose(to.inverse())
