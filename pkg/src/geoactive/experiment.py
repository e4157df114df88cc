"""Experiment orchestration: dataset, training runs, evaluation, persistence."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .cluster import (
    ClusterError,
    Clustering,
    classify_clusters,
    kmeans,
    match_to_groundtruth,
    merge_clusters,
)
from .config import (
    SCHEMA_VERSION,
    camera_of,
    model_config_of,
    policy_config_of,
    stamp,
    train_config_of,
)
from .io import load_checkpoint, save_checkpoint
from .memory import PARAM_ORDER, ReconModel, RenderCache, init_params, train_reconstruction
from .metrics import format_percent, mean_std, percent_increase, split_indices, voxel_iou
from .policy import EpisodeRecord, _Walker, init_policy, plan_trajectory, train_reinforce
from .rig import NUM_AZIMUTHS, EgomotionNoise, ViewIndex
from .scenes import VoxelScene, balanced_categories, generate_scene
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)


# --- dataset ---------------------------------------------------------------------------

@dataclass
class Dataset:
    scenes: list[VoxelScene]
    ids: list[str]
    train_idx: list[int]
    test_idx: list[int]

    def subset(self, which: str) -> tuple[list[str], list[VoxelScene]]:
        idx = self.train_idx if which == "train" else self.test_idx
        return [self.ids[i] for i in idx], [self.scenes[i] for i in idx]


def scene_id(i: int) -> str:
    return f"scene_{i:04d}"


def build_dataset(cfg: dict) -> Dataset:
    d = cfg["dataset"]
    count, k = d["count"], d["num_objects"]
    N = cfg["grid"]["N"]
    if k == 2:
        cats = balanced_categories(count, d["seed"])
    else:
        rng = derive_rng(d["seed"], "categories")
        cats = [[int(c)] for c in np.concatenate([rng.permutation(4) for _ in range(count // 4 + 1)])[:count]]
    scenes = [generate_scene(derive_seed(d["seed"], "scene", i), k, N, categories=cats[i]) for i in range(count)]
    train, test = split_indices(count, d["train_fraction"])
    return Dataset(scenes, [scene_id(i) for i in range(count)], train, test)


def start_view(seed: int, sid: str) -> ViewIndex:
    """Evaluation start view: middle elevation, azimuth fixed per (seed, scene)."""
    return ViewIndex(1, derive_seed(seed, "start", sid) % NUM_AZIMUTHS)


# --- reconstruction training ---------------------------------------------------------------

def train_recon(cfg: dict, dataset: Dataset, log_path: str | Path | None = None) -> tuple[dict, list[dict]]:
    mc = model_config_of(cfg)
    tc = train_config_of(cfg)
    params = init_params(mc, derive_seed(cfg["seed"], "init"))
    rng = derive_rng(cfg["seed"], "train-recon")
    _, scenes = dataset.subset("train")
    fh = open(log_path, "w") if log_path else None
    try:
        if fh:
            fh.write(json.dumps({"event": "start", **stamp(cfg)}, sort_keys=True) + "\n")

        def on_step(rec):
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["step"] % 50 == 0:
                log.info("train-recon step %d total %.4f", rec["step"], rec["total"])

        curve = train_reconstruction(scenes, params, mc, camera_of(cfg), tc, rng, RenderCache(4096), on_step)
    finally:
        if fh:
            fh.close()
    return params, curve


def save_model(directory: str | Path, params: dict, cfg: dict, kind: str = "reconstruction") -> Path:
    arrays = {k: params[k].data for k in params}
    return save_checkpoint(directory, arrays, {"kind": kind, "config": cfg, **stamp(cfg)})


def load_model(directory: str | Path, renders: RenderCache | None = None) -> tuple[ReconModel, dict]:
    arrays, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "reconstruction":
        raise ValueError(f"{directory} is not a reconstruction checkpoint")
    cfg = manifest["config"]
    missing = [k for k in PARAM_ORDER if k not in arrays]
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {', '.join(missing)}")
    params = {k: ag.Tensor(arrays[k]) for k in PARAM_ORDER}
    return ReconModel(params, model_config_of(cfg), camera_of(cfg), renders or RenderCache(4096)), cfg


def load_policy(directory: str | Path) -> dict:
    arrays, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "policy":
        raise ValueError(f"{directory} is not a policy checkpoint")
    return {k: ag.Tensor(arrays[k].astype(np.float64), requires_grad=True, name=k) for k in ("w", "b")}


# --- policy training ---------------------------------------------------------------------

def train_policy(model: ReconModel, cfg: dict, dataset: Dataset, seed: int) -> tuple[dict, list[dict]]:
    pc = policy_config_of(cfg)
    policy = init_policy(model.cfg.hidden)
    _, scenes = dataset.subset("train")
    rng = derive_rng(cfg["seed"], "train-policy", seed)
    curve = train_reinforce(model, policy, scenes, pc, rng)
    return policy, curve


# --- evaluation ------------------------------------------------------------------------------

@dataclass
class SceneResult:
    scene_id: str
    record: EpisodeRecord
    seg_iou: list[float]
    correct: list[int]
    predicted: list[int]
    merged_counts: list[int]
    merge_ratios: list[float]


def _segment(model_out, k: int, seed: int) -> Clustering | None:
    try:
        return kmeans(model_out.embeddings.data, model_out.occupancy.data >= 0.5, k, seed)
    except ClusterError:
        return None


def evaluate_scene(
    model: ReconModel,
    scene: VoxelScene,
    sid: str,
    kind: str,
    seed: int,
    policy: dict | None = None,
    noise: EgomotionNoise | None = None,
    horizon: int = 4,
    oversegment_k: int = 8,
) -> SceneResult:
    """Plan a trajectory on the noise-free model, then score it (with noisy warps if requested)."""
    start = start_view(seed, sid)
    rng = derive_rng(seed, "rollout", kind, sid)
    ep = model.episode(scene, start, key=sid)
    walker = _Walker(model, ep)
    views, actions = plan_trajectory(kind, model, ep, start, rng, policy, horizon, walker=walker)
    if noise is not None and noise.active:
        nep = model.episode(scene, start, key=sid, noise=noise, noise_rng=derive_rng(seed, "noise", noise.mode, sid))
        states, outs = model.run(nep, views)
    else:
        states = [walker.state(tuple(views[: t + 1]))[0] for t in range(len(views))]
        outs = [model.decode(s) for s in states]
    K = scene.num_objects
    ious, seg, correct, predicted, merged, ratios = [], [], [], [], [], []
    for t, out in enumerate(outs):
        ious.append(voxel_iou(out.occupancy.data, ep.gt_occupancy))
        c = _segment(out, K, derive_seed(seed, "kmeans", sid, t))
        if c is None:
            seg.append(0.0)
            correct.append(0)
            predicted.append(K)
        else:
            m = match_to_groundtruth(c, ep.gt_instance, K)
            seg.append(m.mean_iou)
            labels = classify_clusters(c, out.logits.data)
            gt_of = dict(m.pairs)
            correct.append(sum(1 for cid in range(1, c.k + 1) if cid in gt_of and labels[cid - 1] == scene.categories[gt_of[cid] - 1]))
            predicted.append(c.k)
        over = _segment(out, oversegment_k, derive_seed(seed, "oversegment", sid, t))
        if over is None:
            merged.append(0)
            ratios.append(float("nan"))
        else:
            mc = merge_clusters(over)
            merged.append(mc.k)
            ratios.append(max(e["ratio"] for e in mc.merge_log) if mc.merge_log else float("nan"))
    record = EpisodeRecord(sid, kind, views, actions, ious)
    return SceneResult(sid, record, seg, correct, predicted, merged, ratios)


def summarize(results: list[SceneResult], cfg: dict, kind: str, noise: EgomotionNoise, seed: int) -> dict:
    T = len(results[0].record.ious) if results else 0
    occ = [float(np.mean([r.record.ious[t] for r in results])) for t in range(T)]
    seg = [float(np.mean([r.seg_iou[t] for r in results])) for t in range(T)]
    acc = [sum(r.correct[t] for r in results) / max(1, sum(r.predicted[t] for r in results)) for t in range(T)]
    two = [float(np.mean([r.merged_counts[t] == 2 for r in results])) for t in range(T)]
    ratios = [r.merge_ratios[-1] for r in results if np.isfinite(r.merge_ratios[-1])]
    return {
        **stamp(cfg, seed),
        "policy": kind,
        "noise": {"mode": noise.mode, "sigma_deg": noise.sigma_deg},
        "num_scenes": len(results),
        "occupancy_iou": occ,
        "segmentation_iou": seg,
        "classification_accuracy": acc,
        "percent_increase": format_percent(percent_increase(occ)),
        "merge_two_cluster_rate": two,
        "merge_max_ratio_view_last": {"mean": mean_std(ratios)[0] if ratios else None, "max": max(ratios) if ratios else None},
        "mean_return": float(np.mean([r.record.ret for r in results])) if results else None,
    }


def run_eval(
    model: ReconModel,
    cfg: dict,
    dataset: Dataset,
    kind: str,
    seed: int,
    policy: dict | None = None,
    noise: EgomotionNoise | None = None,
    which: str = "test",
) -> tuple[dict, list[SceneResult]]:
    noise = noise or EgomotionNoise(0.0, "off")
    ids, scenes = dataset.subset(which)
    horizon, osk = cfg["eval"]["horizon"], cfg["eval"]["oversegment_k"]
    results = [evaluate_scene(model, s, sid, kind, seed, policy, noise, horizon, osk) for sid, s in zip(ids, scenes)]
    return summarize(results, cfg, kind, noise, seed), results


def per_scene_csv(results: list[SceneResult], summary: dict) -> str:
    T = len(results[0].record.ious) if results else 0
    buf = _io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION} config_hash={summary['config_hash']} seed={summary['seed']}\n")
    w = csv.writer(buf, lineterminator="\n")
    header = ["scene_id", "views"]
    header += [f"occ_iou_v{t + 1}" for t in range(T)]
    header += [f"seg_iou_v{t + 1}" for t in range(T)]
    header += [f"class_correct_v{t + 1}" for t in range(T)]
    header += [f"merged_clusters_v{t + 1}" for t in range(T)]
    w.writerow(header)
    for r in results:
        row = [r.scene_id, " ".join(str(v) for v in r.record.views)]
        row += [f"{x:.6f}" for x in r.record.ious]
        row += [f"{x:.6f}" for x in r.seg_iou]
        row += [f"{c}/{p}" for c, p in zip(r.correct, r.predicted)]
        row += [str(m) for m in r.merged_counts]
        w.writerow(row)
    return buf.getvalue()


def write_eval(directory: str | Path, summary: dict, results: list[SceneResult]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    (directory / "per_scene.csv").write_text(per_scene_csv(results, summary))

