"""Geometry-aware recurrent scene memory.

Per view: render -> unproject in the camera's frame -> rotate into the
reference (first-view) frame -> 2x average pool -> 3D convolutional GRU update.
Three 1x1x1 heads decode the memory into occupancy, instance embeddings and
class logits at the memory resolution.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cluster import ClusterError, iou_matrix, kmeans
from .lift import NUM_CHANNELS, FeatureVolume, avg_pool2, grid_in_world, unproject, warp_to_reference
from .render import RenderedView, render
from .rig import (
    OFF,
    CameraModel,
    EgomotionNoise,
    Pose,
    ViewIndex,
    action_mask,
    all_views,
    are_adjacent,
    pose_of,
    relative_egomotion,
    step_view,
)
from .scenes import CATEGORIES, VoxelScene

log = logging.getLogger(__name__)

PARAM_ORDER = ("w_u", "b_u", "w_r", "b_r", "w_h", "b_h", "w_occ", "b_occ", "w_emb", "b_emb", "w_cls", "b_cls")


class MemoryError_(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    N: int = 32
    hidden: int = 8
    embed: int = 8
    classes: int = len(CATEGORIES)
    in_channels: int = NUM_CHANNELS

    @property
    def N_f(self) -> int:
        return self.N // 2


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    C, H = cfg.in_channels, cfg.hidden
    shapes = {
        "w_u": (H, C + H, 3, 3, 3),
        "w_r": (H, C + H, 3, 3, 3),
        "w_h": (H, C + H, 3, 3, 3),
        "w_occ": (1, H, 1, 1, 1),
        "w_emb": (cfg.embed, H, 1, 1, 1),
        "w_cls": (cfg.classes, H, 1, 1, 1),
    }
    params = {}
    for name in PARAM_ORDER:
        if name.startswith("w_"):
            data = ag.glorot_uniform(rng, shapes[name], dtype)
        else:
            data = np.zeros(shapes["w_" + name[2:]][0], dtype=dtype)
            if name == "b_u":
                data += 1.0  # favor keeping the state early in training
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def params_like(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


@dataclass
class MemoryState:
    h: Tensor  # (C_h, N_f, N_f, N_f)
    t: int = 0


@dataclass
class DecodeOutput:
    occupancy: Tensor  # (N_f, N_f, N_f), in (0, 1)
    embeddings: Tensor  # (E, N_f, N_f, N_f)
    logits: Tensor  # (classes, N_f, N_f, N_f)


def initial_state(cfg: ModelConfig, dtype=np.float32) -> MemoryState:
    return MemoryState(Tensor(np.zeros((cfg.hidden,) + (cfg.N_f,) * 3, dtype=dtype)), 0)


def gru_step(state: MemoryState, x: FeatureVolume | Tensor, params: dict[str, Tensor], check: bool = True) -> MemoryState:
    """h+ = u*h + (1-u)*tanh(conv([x, r*h], W_h)), with u, r = sigmoid(conv([x, h], [W_u, W_r]))."""
    if isinstance(x, FeatureVolume):
        if x.frame != "reference":
            raise MemoryError_("GRU input must be expressed in the reference frame")
        x = Tensor(x.data.astype(params["w_u"].data.dtype, copy=False))
    h = state.h
    H = h.shape[0]
    xh = ag.concat([x, h])
    gates = ag.sigmoid(
        ag.conv3d(xh, ag.concat([params["w_u"], params["w_r"]]), ag.concat([params["b_u"], params["b_r"]]))
    )
    u = _channels(gates, 0, H)
    r = _channels(gates, H, 2 * H)
    cand = ag.tanh(ag.conv3d(ag.concat([x, r * h]), params["w_h"], params["b_h"]))
    h_new = u * h + (1.0 - u) * cand
    if check and np.abs(h_new.data).max() > 1.0:
        raise MemoryError_("memory state left [-1, 1]")
    return MemoryState(h_new, state.t + 1)


def _channels(t: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        acc = np.zeros_like(t.data)
        acc[lo:hi] = g
        t._accumulate(acc)

    return ag._make(t.data[lo:hi], (t,), backward)


def decode(state: MemoryState, params: dict[str, Tensor]) -> DecodeOutput:
    h = state.h
    occ = ag.sigmoid(ag.conv3d(h, params["w_occ"], params["b_occ"]))
    occ = ag.reshape(occ, occ.shape[1:])
    emb = ag.conv3d(h, params["w_emb"], params["b_emb"])
    logits = ag.conv3d(h, params["w_cls"], params["b_cls"])
    return DecodeOutput(occ, emb, logits)


# --- groundtruth in the reference frame ----------------------------------------------

def groundtruth_in_frame(scene: VoxelScene, frame: Pose, N: int) -> np.ndarray:
    """Instance ids of the frame-aligned N^3 grid by nearest lookup in the scene grid."""
    pts = grid_in_world(N, frame)
    S = scene.resolution
    idx = np.floor((pts + 0.5) * S).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < S), axis=-1)
    idx = np.clip(idx, 0, S - 1)
    ids = scene.instance_id[idx[..., 0], idx[..., 1], idx[..., 2]]
    return np.where(ok, ids, 0).astype(np.uint8)


def majority_pool(instance: np.ndarray, num_objects: int) -> np.ndarray:
    """2x2x2 pooling: a block is occupied when at least half its voxels are; its id is the most common one."""
    N = instance.shape[0]
    M = N // 2
    blocks = instance.reshape(M, 2, M, 2, M, 2).transpose(0, 2, 4, 1, 3, 5).reshape(M, M, M, 8)
    occupied = (blocks > 0).sum(axis=-1) >= 4
    counts = np.stack([(blocks == n).sum(axis=-1) for n in range(1, num_objects + 1)], axis=-1)
    ids = counts.argmax(axis=-1) + 1
    return np.where(occupied, ids, 0).astype(np.uint8)


# --- episodes -----------------------------------------------------------------

class RenderCache:
    """LRU cache of rendered views keyed by (scene key, view)."""

    def __init__(self, maxsize: int = 2048):
        self.maxsize = maxsize
        self._store: OrderedDict = OrderedDict()

    def get(self, key, scene: VoxelScene, view: ViewIndex, cam: CameraModel) -> RenderedView:
        k = (key, view)
        hit = self._store.get(k)
        if hit is not None:
            self._store.move_to_end(k)
            return hit
        out = render(scene, pose_of(view, cam), cam, view)
        self._store[k] = out
        if len(self._store) > self.maxsize:
            self._store.popitem(last=False)
        return out


class Episode:
    """Per-episode context: reference frame, egomotion noise state, cached inputs.

    The first view defines the reference frame and is never perturbed.
    """

    def __init__(
        self,
        scene: VoxelScene,
        start: ViewIndex,
        cfg: ModelConfig,
        cam: CameraModel,
        noise: EgomotionNoise = OFF,
        noise_rng: np.random.Generator | None = None,
        renders: RenderCache | None = None,
        scene_key=None,
    ):
        self.scene = scene
        self.cfg = cfg
        self.cam = cam
        self.noise = noise
        self.noise_rng = noise_rng
        self.carry = np.zeros(2)
        self.renders = renders if renders is not None else RenderCache(64)
        self.scene_key = scene_key if scene_key is not None else id(scene)
        self.start = start
        self.ref_pose = pose_of(start, cam)
        self._inputs: dict[ViewIndex, np.ndarray] = {}
        gt_full = groundtruth_in_frame(scene, self.ref_pose, cfg.N)
        self.gt_instance = majority_pool(gt_full, scene.num_objects)
        self.gt_occupancy = self.gt_instance > 0

    def view(self, v: ViewIndex) -> RenderedView:
        return self.renders.get(self.scene_key, self.scene, v, self.cam)

    def input_for(self, v: ViewIndex) -> FeatureVolume:
        """Pooled reference-frame input for view v.

        Noise-free inputs are cached per view. With noise, each call draws a
        fresh egomotion perturbation, so callers must request views in
        trajectory order.
        """
        cached = self._inputs.get(v)
        if cached is not None:
            return FeatureVolume(cached, "reference")
        pose = pose_of(v, self.cam)
        vol = unproject(self.view(v), pose, self.cam, self.cfg.N)
        if v == self.start:
            ego = Pose.identity()
        else:
            ego = relative_egomotion(self.ref_pose, pose, self.noise, self.noise_rng, self.carry)
        data = avg_pool2(warp_to_reference(vol, ego).data).astype(np.float32)
        if not self.noise.active:
            self._inputs[v] = data
        return FeatureVolume(data, "reference")


def check_trajectory(trajectory: list[ViewIndex]) -> None:
    if not trajectory:
        raise MemoryError_("trajectory must contain at least one view")
    for a, b in zip(trajectory, trajectory[1:]):
        if not are_adjacent(a, b):
            raise MemoryError_(f"views {tuple(a)} and {tuple(b)} are not adjacent on the rig")


def episode_forward(
    scene: VoxelScene,
    trajectory: list[ViewIndex],
    params: dict[str, Tensor],
    cfg: ModelConfig,
    cam: CameraModel,
    noise: EgomotionNoise = OFF,
    noise_rng: np.random.Generator | None = None,
    episode: Episode | None = None,
) -> list[DecodeOutput]:
    """Run the memory over a trajectory and decode after every view."""
    check_trajectory(trajectory)
    ep = episode or Episode(scene, trajectory[0], cfg, cam, noise, noise_rng)
    dtype = params["w_u"].data.dtype
    state = initial_state(cfg, dtype)
    outs = []
    for v in trajectory:
        state = gru_step(state, ep.input_for(v), params)
        outs.append(decode(state, params))
    return outs


def random_trajectory(start: ViewIndex, length: int, rng: np.random.Generator) -> list[ViewIndex]:
    traj = [start]
    while len(traj) < length:
        valid = np.flatnonzero(action_mask(traj[-1]))
        traj.append(step_view(traj[-1], int(rng.choice(valid))))
    return traj


# --- losses -------------------------------------------------------------------

def balanced_sample(labels: np.ndarray, per_label: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw exactly `per_label` flat voxel indices for every label present (with replacement if short)."""
    flat = np.asarray(labels).ravel()
    idx, lab = [], []
    for value in np.unique(flat):
        pool = np.flatnonzero(flat == value)
        pick = rng.choice(pool, size=per_label, replace=len(pool) < per_label)
        idx.append(pick)
        lab.append(np.full(per_label, value))
    return np.concatenate(idx), np.concatenate(lab)


@dataclass
class LossConfig:
    lambda_s: float = 1.0
    lambda_c: float = 0.1
    margin: float = 1.0
    samples_per_instance: int = 16
    class_from_gt_masks: bool = False
    pos_weight: float = 3.0


def view_loss(
    out: DecodeOutput,
    gt_instance: np.ndarray,
    categories: list[int],
    lc: LossConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, dict]:
    K = len(categories)
    gt_occ = (gt_instance > 0).astype(out.occupancy.data.dtype)
    bce = ag.bce_loss(out.occupancy, gt_occ, lc.pos_weight)
    total = bce
    parts = {"bce": float(bce.data)}

    if lc.lambda_s > 0:
        idx, lab = balanced_sample(gt_instance, lc.samples_per_instance, rng)
        ia, ib = np.triu_indices(len(idx), k=1)
        emb = out.embeddings
        con = ag.contrastive_loss(
            ag.gather_voxels(emb, idx[ia]), ag.gather_voxels(emb, idx[ib]), lab[ia] == lab[ib], lc.margin
        )
        total = total + lc.lambda_s * con
        parts["contrastive"] = float(con.data)

    if lc.lambda_c > 0:
        clusters = _training_clusters(out, gt_instance, K, lc, rng)
        terms = []
        for members, gt_id in clusters:
            label = categories[gt_id - 1]
            lg = ag.gather_voxels(out.logits, members)
            mean_logit = ag.mean_columns(lg)
            terms.append(ag.softmax_ce(mean_logit, label))
        if terms:
            cls = terms[0]
            for t in terms[1:]:
                cls = cls + t
            cls = cls * (1.0 / len(terms))
            total = total + lc.lambda_c * cls
            parts["class"] = float(cls.data)
    parts["total"] = float(total.data)
    return total, parts


def _training_clusters(out, gt_instance, K, lc, rng) -> list[tuple[np.ndarray, int]]:
    """(member voxel indices, matched groundtruth instance id) per cluster."""
    flat_gt = gt_instance.ravel()
    if lc.class_from_gt_masks:
        return [(np.flatnonzero(flat_gt == n), n) for n in range(1, K + 1) if (flat_gt == n).any()]
    active = out.occupancy.data >= 0.5
    if active.sum() < K:
        return []
    try:
        c = kmeans(out.embeddings.data, active, K, int(rng.integers(2**31)), n_init=1)
    except ClusterError:
        return []
    M = iou_matrix(c.assignment, gt_instance, c.k, K)
    result = []
    for cid in range(1, c.k + 1):
        if M[cid - 1].max() <= 0:
            continue
        result.append((c.members(cid), int(M[cid - 1].argmax()) + 1))
    return result


# --- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 600
    batch: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    views: int = 4
    lr_final: float = 1.0  # learning rate at the last step, as a fraction of lr (linear ramp)
    loss: LossConfig = field(default_factory=LossConfig)
    noise: EgomotionNoise = OFF


def train_reconstruction(
    scenes: list[VoxelScene],
    params: dict[str, Tensor],
    cfg: ModelConfig,
    cam: CameraModel,
    tc: TrainConfig,
    rng: np.random.Generator,
    renders: RenderCache | None = None,
    on_step=None,
) -> list[dict]:
    """Minimize the per-view joint loss over random view sequences.

    Each update averages `batch` episodes; every episode starts at a uniformly
    drawn rig view and takes random adjacent moves. Returns the loss curve.
    """
    if not scenes:
        raise ValueError("no training scenes")
    opt = ag.SGD(params, lr=tc.lr, momentum=tc.momentum)
    renders = renders or RenderCache()
    views = all_views()
    curve = []
    for step in range(tc.steps):
        frac = step / max(1, tc.steps - 1)
        opt.lr = tc.lr * (1.0 - (1.0 - tc.lr_final) * frac)
        opt.zero_grad()
        acc: dict[str, float] = {}
        for _ in range(tc.batch):
            si = int(rng.integers(len(scenes)))
            scene = scenes[si]
            start = views[int(rng.integers(len(views)))]
            traj = random_trajectory(start, tc.views, rng)
            ep = Episode(scene, start, cfg, cam, tc.noise, rng, renders, scene_key=si)
            outs = episode_forward(scene, traj, params, cfg, cam, episode=ep)
            loss = None
            for out in outs:
                l, parts = view_loss(out, ep.gt_instance, scene.categories, tc.loss, rng)
                loss = l if loss is None else loss + l
                for k, v in parts.items():
                    acc[k] = acc.get(k, 0.0) + v / (tc.batch * len(outs))
            loss = loss * (1.0 / len(outs))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            loss.backward()
        grad_norm = opt.step(scale=1.0 / tc.batch)
        if not math.isfinite(grad_norm):
            raise TrainingDiverged(f"non-finite gradient at step {step}")
        rec = {"step": step, **{k: round(v, 6) for k, v in acc.items()}, "grad_norm": round(grad_norm, 6), "lr": round(opt.lr, 8)}
        curve.append(rec)
        if on_step is not None:
            on_step(rec)
    return curve


# --- fixed fusion baselines -------------------------------------------------------

def fuse_fixed(inputs: list[np.ndarray], how: str = "max") -> np.ndarray:
    """Non-learned aggregation of reference-frame inputs (max or mean over views)."""
    stack = np.stack(inputs)
    if how == "max":
        return stack.max(axis=0)
    if how == "mean":
        return stack.mean(axis=0)
    raise ValueError("how must be 'max' or 'mean'")


# --- inference wrapper ---------------------------------------------------------------

@dataclass
class ReconModel:
    """A frozen reconstruction model plus the camera and render cache it runs with."""

    params: dict[str, Tensor]
    cfg: ModelConfig
    cam: CameraModel
    renders: RenderCache = field(default_factory=RenderCache)

    def episode(self, scene: VoxelScene, start: ViewIndex, key=None, noise: EgomotionNoise = OFF, noise_rng=None) -> Episode:
        return Episode(scene, start, self.cfg, self.cam, noise, noise_rng, self.renders, scene_key=key)

    def initial(self) -> MemoryState:
        return initial_state(self.cfg, self.params["w_u"].data.dtype)

    def advance(self, state: MemoryState, ep: Episode, view: ViewIndex) -> MemoryState:
        with ag.no_grad():
            return gru_step(state, ep.input_for(view), self.params)

    def decode(self, state: MemoryState) -> DecodeOutput:
        with ag.no_grad():
            return decode(state, self.params)

    def run(self, ep: Episode, trajectory: list[ViewIndex]) -> tuple[list[MemoryState], list[DecodeOutput]]:
        check_trajectory(trajectory)
        state = self.initial()
        states, outs = [], []
        for v in trajectory:
            state = self.advance(state, ep, v)
            states.append(state)
            outs.append(self.decode(state))
        return states, outs
