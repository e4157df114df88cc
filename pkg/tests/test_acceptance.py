"""Acceptance gate: one or more tests per criterion, tagged with @criterion(n, title).

Criteria 6 to 10 need trained models. The pipeline runs once per session through
the command line entry point. Set GEOACTIVE_ARTIFACTS to a directory to keep (and
reuse) the trained checkpoints and evaluation outputs between sessions.
"""

import itertools
import json
import math
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from geoactive import autograd as ag
from geoactive.autograd import Tensor
from geoactive.cli import main
from geoactive.cluster import Clustering, match_to_groundtruth
from geoactive.lift import FeatureVolume, unproject, unproject_into_reference, warp_to_reference
from geoactive.memory import (
    PARAM_ORDER,
    Episode,
    LossConfig,
    MemoryState,
    ModelConfig,
    episode_forward,
    gru_step,
    init_params,
    view_loss,
)
from geoactive.render import render, slab_intersect, traverse
from geoactive.rig import CameraModel, Pose, ViewIndex, all_views, pose_of, relative_egomotion
from geoactive.scenes import generate_scene, voxel_centers

CAM = CameraModel()
SEEDS = (0, 1, 2)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)), np.max(np.abs(b))))


def interior(N, radius=0.45):
    return np.linalg.norm(voxel_centers(N), axis=-1) <= radius


def rot(axis, deg):
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    t = math.radians(deg)
    return np.eye(3) + math.sin(t) * K + (1 - math.cos(t)) * K @ K


# --- 1: geometry round trip ------------------------------------------------------------

@criterion(1, "geometry round trip")
def test_c1_projection_all_views(record_property):
    t0 = time.time()
    N = 32
    scene = generate_scene(11, 2, N)
    worst = 0.0
    for v in all_views():
        pose = pose_of(v, CAM)
        _, (u, w, _, _) = unproject(render(scene, pose, CAM), pose, CAM, N, return_coords=True)
        pts = (voxel_centers(N) @ pose.rotation) @ pose.rotation.T + pose.translation
        u_ref = CAM.focal * pts[..., 0] / pts[..., 2] + CAM.image_size / 2
        w_ref = CAM.focal * pts[..., 1] / pts[..., 2] + CAM.image_size / 2
        worst = max(worst, float(np.abs(u - u_ref).max()), float(np.abs(w - w_ref).max()))
    record_property("max_px_err", f"{worst:.2e}")
    assert worst <= 0.5
    assert time.time() - t0 <= 60


@criterion(1, "geometry round trip")
def test_c1_warp_round_trip_and_identity(record_property):
    N = 32
    g = voxel_centers(N)
    x, y, z = g[..., 0], g[..., 1], g[..., 2]
    field = np.stack([np.sin(3 * x) * np.cos(2 * y) + z, x * y - z * z, np.cos(2 * (x + y + z))])
    m = interior(N)
    worst = 0.0
    for axis, deg in [((0, 0, 1), 20), ((1, 1, 0), 35), ((0.3, -1, 0.5), 60), ((1, 0, 0), 90)]:
        R = rot(axis, deg)
        there = warp_to_reference(FeatureVolume(field, "camera"), Pose(R, np.zeros(3)))
        back = warp_to_reference(FeatureVolume(there.data, "camera"), Pose(R.T, np.zeros(3)))
        worst = max(worst, float(np.abs(back.data[:, m] - field[:, m]).max()))
    record_property("round_trip_err", f"{worst:.4f}")
    assert worst <= 0.05
    data = np.random.default_rng(0).random((7, N, N, N)).astype(np.float32)
    assert warp_to_reference(FeatureVolume(data, "camera"), Pose.identity()).data.tobytes() == data.tobytes()


# --- 2: warp vs direct unprojection -----------------------------------------------------

@criterion(2, "warp path vs direct unprojection")
def test_c2_warp_vs_direct(record_property):
    t0 = time.time()
    N = 32
    rng = np.random.default_rng(2024)
    views = list(all_views())
    m = interior(N)
    worst = 0.0
    for _ in range(20):
        scene = generate_scene(int(rng.integers(1 << 30)), 2, N)
        a, b = rng.choice(len(views), size=2, replace=False)
        ref, pose = pose_of(views[a], CAM), pose_of(views[b], CAM)
        rv = render(scene, pose, CAM)
        warped = warp_to_reference(unproject(rv, pose, CAM, N), relative_egomotion(ref, pose))
        direct = unproject_into_reference(rv, pose, CAM, N, ref)
        worst = max(worst, float(np.abs(warped.data[:, m] - direct.data[:, m]).mean(axis=1).max()))
    record_property("max_channel_mean_abs", f"{worst:.4f}")
    assert worst <= 0.05
    assert time.time() - t0 <= 120


# --- 3: renderer oracle ----------------------------------------------------------------

@criterion(3, "renderer vs analytic ray-box")
def test_c3_renderer_oracle(record_property):
    rng = np.random.default_rng(3)
    N = 32
    worst = 0.0
    for _ in range(10):
        lo_i = rng.integers(0, 24, size=3)
        hi_i = np.minimum(lo_i + rng.integers(1, 10, size=3), N)
        occ = np.zeros((N, N, N), bool)
        occ[lo_i[0]:hi_i[0], lo_i[1]:hi_i[1], lo_i[2]:hi_i[2]] = True
        lo, hi = lo_i / N - 0.5, hi_i / N - 0.5
        d = rng.normal(size=(1000, 3))
        origins = 1.4 * d / np.linalg.norm(d, axis=1, keepdims=True)
        targets = np.concatenate([rng.uniform(lo, hi, size=(600, 3)), rng.uniform(-0.6, 0.6, size=(400, 3))])
        dirs = targets - origins
        t_hit, _ = traverse(origins, dirs, occ)
        t_in, t_out = slab_intersect(origins, dirs, lo, hi)
        hit = t_in <= t_out
        assert np.array_equal(np.isfinite(t_hit), hit)
        err = np.abs(t_hit[hit] - t_in[hit]) * np.linalg.norm(dirs[hit], axis=1)
        worst = max(worst, float(err.max()))
    record_property("max_dist_err", f"{worst:.1e}")
    assert worst <= 1e-6


# --- 4: gradient suite -----------------------------------------------------------------

def _fd_check(build, arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    build(*ts).backward()
    worst = 0.0
    for t, a in zip(ts, arrays):
        num = ag.numeric_gradient(lambda: float(build(*[Tensor(x) for x in arrays]).data), a, eps=1e-5)
        worst = max(worst, rel_err(t.grad, num))
    return worst


@criterion(4, "finite-difference gradient suite")
def test_c4_kernel_gradients(record_property):
    rng = np.random.default_rng(4)
    errs = {}
    x, w, b = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    errs["conv3d"] = _fd_check(lambda x, w, b: ag.total(ag.tanh(ag.conv3d(x, w, b))), [x, w, b])

    cfg = ModelConfig(N=8, hidden=2, embed=2, in_channels=3)
    p = init_params(cfg, 1, dtype=np.float64)
    names = ["w_u", "b_u", "w_r", "b_r", "w_h", "b_h"]
    xin, h0 = rng.normal(size=(3, 4, 4, 4)), rng.uniform(-0.8, 0.8, size=(2, 4, 4, 4))

    def gru(xi, hi, *ws):
        q = dict(p)
        q.update(zip(names, ws))
        return ag.total(gru_step(MemoryState(hi), xi, q).h * Tensor(np.linspace(-1, 1, 128).reshape(2, 4, 4, 4)))

    errs["gru_step"] = _fd_check(gru, [xin, h0] + [p[n].data.copy() for n in names])
    t = (rng.random((3, 4)) > 0.5).astype(float)
    errs["bce"] = _fd_check(lambda z: ag.bce_loss(ag.sigmoid(z), t, 3.0), [rng.normal(size=(3, 4))])
    same = np.array([1, 0, 1, 0, 0, 1], bool)
    errs["contrastive"] = _fd_check(lambda a, b: ag.contrastive_loss(a, b, same, 1.0), [0.4 * rng.normal(size=(4, 6)), 0.4 * rng.normal(size=(4, 6))])
    errs["softmax_ce"] = _fd_check(lambda z: ag.softmax_ce(z, 2), [rng.normal(size=4)])
    record_property("max_rel_err", f"{max(errs.values()):.1e}")
    assert max(errs.values()) <= 1e-4, errs


@criterion(4, "finite-difference gradient suite")
def test_c4_two_view_episode_gradient(record_property):
    t0 = time.time()
    cfg = ModelConfig(N=16, hidden=3, embed=2)
    scene = generate_scene(5, 2, 16)
    traj = [ViewIndex(1, 0), ViewIndex(1, 1)]
    lc = LossConfig(pos_weight=3.0, class_from_gt_masks=True)
    params = init_params(cfg, 1, dtype=np.float64)

    def loss():
        ep = Episode(scene, traj[0], cfg, CAM)
        rng = np.random.default_rng(0)
        tot = None
        for out in episode_forward(scene, traj, params, cfg, CAM, episode=ep):
            l, _ = view_loss(out, ep.gt_instance, scene.categories, lc, rng)
            tot = l if tot is None else tot + l
        return tot

    loss().backward()
    rng = np.random.default_rng(8)
    worst = 0.0
    for name in PARAM_ORDER:
        flat = params[name].data.reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, 8), replace=False)
        num = np.empty(len(picks))
        for n, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + 1e-5
            fp = float(loss().data)
            flat[i] = old - 1e-5
            fm = float(loss().data)
            flat[i] = old
            num[n] = (fp - fm) / 2e-5
        exact = params[name].grad.reshape(-1)[picks]
        if name == "b_emb":
            # a shared embedding offset cancels in every pairwise distance
            assert np.abs(exact).max() <= 1e-12 and np.abs(num).max() <= 1e-8
            continue
        worst = max(worst, rel_err(exact, num))
    record_property("episode_rel_err", f"{worst:.1e}")
    assert worst <= 1e-4
    assert time.time() - t0 <= 300


# --- 5: GRU boundedness -------------------------------------------------------------------

@criterion(5, "GRU state stays in [-1, 1]")
def test_c5_gru_boundedness(record_property):
    cfg = ModelConfig(N=8, hidden=2, embed=2, in_channels=3)
    rng = np.random.default_rng(5)
    peak = 0.0
    for trial in range(1000):
        p = init_params(cfg, trial, dtype=np.float64)
        scale = float(np.exp(rng.uniform(np.log(0.1), np.log(50.0))))
        for t in p.values():
            t.data *= scale
            t.data += rng.normal(scale=scale, size=t.data.shape)
        s = MemoryState(Tensor(np.zeros((2, 3, 3, 3))))
        for _ in range(4):
            s = gru_step(s, Tensor(rng.normal(scale=scale, size=(3, 3, 3, 3))), p)
            peak = max(peak, float(np.abs(s.h.data).max()))
    record_property("max_abs_h", f"{peak:.6f}")
    assert peak <= 1.0


# --- 12: matching oracle -------------------------------------------------------------------

@criterion(12, "matching equals brute-force search")
def test_c12_matching_brute_force():
    rng = np.random.default_rng(12)
    for _ in range(100):
        k_gt, k = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        a = rng.integers(0, k + 1, size=(5, 5, 5))
        a[0, 0, :k] = np.arange(1, k + 1)
        g = rng.integers(0, k_gt + 1, size=(5, 5, 5))
        best = Fraction(0)
        for perm in itertools.permutations(range(1, max(k, k_gt) + 1), k_gt):
            tot = Fraction(0)
            for gi, ci in enumerate(perm, start=1):
                if ci <= k:
                    union = int(np.sum((a == ci) | (g == gi)))
                    tot += Fraction(int(np.sum((a == ci) & (g == gi))), union) if union else 0
            best = max(best, tot / k_gt)
        assert match_to_groundtruth(Clustering(a, k), g, k_gt).mean_iou == float(best)


# --- 11: determinism ------------------------------------------------------------------------

TINY = {
    "seed": 3,
    "grid": {"N": 16, "N_f": 8},
    "model": {"hidden": 4, "embed": 4},
    "dataset": {"count": 6, "seed": 1},
    "train": {"steps": 2, "batch": 1, "views": 2},
    "policy": {"updates": 1, "batch": 2},
}


def _tiny_pipeline(root: Path) -> dict[str, bytes]:
    root.mkdir(parents=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    ck = str(root / "run" / "checkpoint")
    runs = [
        ["gen-scenes", "--config", str(cfg), "--out", str(root / "scenes")],
        ["render", "--scene", str(root / "scenes" / "scene_0001.vxg"), "--view", "0,7", "--dump-views", str(root / "views"), "--config", str(cfg)],
        ["train-recon", "--config", str(cfg), "--out", str(root / "run")],
        ["train-policy", "--checkpoint", ck, "--seeds", "0", "--out", str(root / "pol")],
        ["rollout", "--checkpoint", ck, "--policy", "oracle", "--scenes", str(root / "scenes"), "--out", str(root / "r.jsonl"), "--dump-tensors", str(root / "t")],
        ["eval", "--checkpoint", ck, "--policy", "learned", "--policy-checkpoint", str(root / "pol" / "policy_seed0"), "--noise", "accumulating", "--out", str(root / "e")],
        ["export-ply", "--tensor", str(root / "t" / "scene_0000.tns"), "--threshold", "0.5", "--out", str(root / "x.ply")],
        ["selftest"],
    ]
    for argv in runs:
        assert main(argv) == 0, argv
    return {
        str(p.relative_to(root)): p.read_bytes().replace(str(root).encode(), b"<root>")
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@criterion(11, "byte-identical reruns")
def test_c11_determinism(tmp_path, capsys):
    a = _tiny_pipeline(tmp_path / "a")
    out_a = capsys.readouterr().out.replace(str(tmp_path / "a"), "<root>")
    b = _tiny_pipeline(tmp_path / "b")
    out_b = capsys.readouterr().out.replace(str(tmp_path / "b"), "<root>")
    assert a.keys() == b.keys() and len(a) > 10
    assert [k for k in a if a[k] != b[k]] == []
    assert out_a == out_b


# --- 6 to 10: trained models ------------------------------------------------------------------

class Artifacts:
    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)

    def _cfg(self, name: str, raw: dict) -> str:
        p = self.root / f"{name}.json"
        p.write_text(json.dumps(raw, sort_keys=True))
        return str(p)

    def checkpoint(self, name: str, raw: dict) -> str:
        out = self.root / name
        ck = out / "checkpoint"
        if not (ck / "manifest.json").exists():
            assert main(["train-recon", "--config", self._cfg(name, raw), "--out", str(out)]) == 0
        return str(ck)

    def policies(self) -> Path:
        out = self.root / "policy"
        if not all((out / f"policy_seed{s}" / "manifest.json").exists() for s in SEEDS):
            ck = self.checkpoint("clean", {})
            assert main(["train-policy", "--checkpoint", ck, "--seeds", ",".join(map(str, SEEDS)), "--out", str(out)]) == 0
        return out

    def eval(self, model: str, kind: str, seed: int = 0, noise: str = "off") -> dict:
        out = self.root / "eval" / f"{model}_{kind}_s{seed}_{noise}"
        if not (out / "summary.json").exists():
            ck = self.checkpoint(model, MODELS[model])
            argv = ["eval", "--checkpoint", ck, "--policy", kind, "--seed", str(seed), "--noise", noise, "--out", str(out)]
            if kind == "learned":
                argv += ["--policy-checkpoint", str(self.policies() / f"policy_seed{seed}")]
            assert main(argv) == 0
        return json.loads((out / "summary.json").read_text())


MODELS = {"clean": {}, "noisy": {"noise": {"mode": "independent", "sigma_deg": 5.0}}}


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory):
    root = os.environ.get("GEOACTIVE_ARTIFACTS")
    return Artifacts(Path(root) if root else tmp_path_factory.mktemp("acceptance"))


def _fmt(xs):
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


@pytest.mark.slow
@criterion(6, "occupancy IoU improves with views")
def test_c6_multiview_improvement(artifacts, record_property):
    t0 = time.time()
    artifacts.checkpoint("clean", {})
    minutes = (time.time() - t0) / 60
    occ = artifacts.eval("clean", "random")["occupancy_iou"]
    record_property("iou", _fmt(occ))
    if minutes > 0.1:
        record_property("train_min", f"{minutes:.1f}")
    assert minutes <= 45
    assert occ[3] >= occ[0] + 0.03
    assert all(b >= a for a, b in zip(occ, occ[1:]))


@pytest.mark.slow
@criterion(7, "oversegment + merge and segmentation trend")
def test_c7_segmentation(artifacts, record_property):
    s = artifacts.eval("clean", "random")
    two, seg = s["merge_two_cluster_rate"], s["segmentation_iou"]
    record_property("two_cluster_rate_v4", f"{two[3]:.3f}")
    record_property("max_R", s["merge_max_ratio_view_last"]["max"])
    record_property("seg_iou", _fmt(seg))
    assert seg[3] > seg[0]
    assert two[3] >= 0.95


@pytest.mark.slow
@criterion(8, "classification trend")
def test_c8_classification(artifacts, record_property):
    acc = artifacts.eval("clean", "random")["classification_accuracy"]
    record_property("accuracy", _fmt(acc))
    assert acc[3] > acc[0]
    assert acc[3] >= 0.25 + 0.20


def _pct(occ):
    return 100.0 * (occ[3] - occ[0]) / occ[0]


@pytest.mark.slow
@criterion(9, "policy ordering")
def test_c9_policy_ordering(artifacts, record_property):
    pct = {k: float(np.mean([_pct(artifacts.eval("clean", k, s)["occupancy_iou"]) for s in SEEDS])) for k in ("random", "learned", "oracle", "greedy1")}
    record_property("pct_increase", ", ".join(f"{k}={v:.2f}" for k, v in pct.items()))
    assert pct["random"] <= pct["learned"] <= pct["oracle"]
    assert pct["learned"] - pct["random"] >= 2.0
    assert pct["learned"] >= pct["greedy1"] - 2.0


@pytest.mark.slow
@criterion(10, "noise robustness")
def test_c10_noise_robustness(artifacts, record_property):
    own_clean = artifacts.eval("noisy", "random")["occupancy_iou"][3]
    own_noisy = artifacts.eval("noisy", "random", noise="independent")["occupancy_iou"][3]
    other_noisy = artifacts.eval("clean", "random", noise="independent")["occupancy_iou"][3]
    drop = (own_clean - own_noisy) / own_clean
    record_property("v4_iou", f"noise-trained clean={own_clean:.3f} noisy={own_noisy:.3f}; clean-trained noisy={other_noisy:.3f}")
    assert drop <= 0.25
    assert own_noisy > other_noisy
