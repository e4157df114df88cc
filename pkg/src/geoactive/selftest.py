"""Fast built-in invariant checks behind `geoactive selftest`.

Each check returns (ok, detail). Nothing here touches the filesystem outside
a temporary directory.
"""

from __future__ import annotations

import itertools
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)), np.max(np.abs(b))))


def check_conv_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 3, 3))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    wt = Tensor(w, requires_grad=True)
    (ag.total(ag.conv3d(Tensor(x), wt) * ag.conv3d(Tensor(x), wt))).backward()

    def f():
        y = ag.conv3d_raw(x, w)
        return float((y * y).sum())

    err = _rel_err(wt.grad, ag.numeric_gradient(f, w))
    return err <= 1e-4, f"rel err {err:.2e}"


def check_gru_gradient():
    from .memory import MemoryState, ModelConfig, gru_step, init_params

    cfg = ModelConfig(N=8, hidden=3, embed=2, in_channels=2)
    params = init_params(cfg, 1, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)))
    h0 = Tensor(rng.uniform(-0.5, 0.5, size=(3, 4, 4, 4)))
    target = (rng.random((3, 4, 4, 4)) > 0.5).astype(np.float64)

    def loss():
        h = gru_step(MemoryState(h0, 0), x, params).h
        return ag.bce_loss(ag.sigmoid(h), target)

    loss().backward()
    worst = 0.0
    for name in ("w_u", "w_r", "w_h", "b_u"):
        p = params[name]
        num = ag.numeric_gradient(lambda: float(loss().data), p.data)
        worst = max(worst, _rel_err(p.grad, num))
    return worst <= 1e-4, f"worst rel err {worst:.2e}"


def check_tensor_roundtrip():
    from .io import decode_tensor, encode_tensor

    a = np.random.default_rng(3).normal(size=(3, 4, 4, 4)).astype(np.float32)
    b, _ = decode_tensor(encode_tensor(a))
    return bool(np.array_equal(a, b)), "TNS1 encode/decode"


def check_scene_roundtrip():
    from .scenes import generate_scene, load_scene, save_scene

    s = generate_scene(7, 2, 16)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "s.vxg"
        save_scene(s, p)
        t = load_scene(p)
    ok = np.array_equal(s.instance_id, t.instance_id) and s.categories == t.categories
    return ok, "VXG1 save/load"


def check_renderer_depth():
    from .render import slab_intersect, traverse

    rng = np.random.default_rng(4)
    N = 16
    worst = 0.0
    for _ in range(5):
        lo_i = rng.integers(2, 7, size=3)
        hi_i = lo_i + rng.integers(2, 7, size=3)
        occ = np.zeros((N, N, N), dtype=bool)
        occ[lo_i[0]:hi_i[0], lo_i[1]:hi_i[1], lo_i[2]:hi_i[2]] = True
        lo, hi = lo_i / N - 0.5, hi_i / N - 0.5
        origins = rng.normal(size=(200, 3))
        origins = 1.5 * origins / np.linalg.norm(origins, axis=1, keepdims=True)
        target = rng.uniform(lo, hi, size=(200, 3))
        dirs = target - origins
        t_hit, _ = traverse(origins, dirs, occ, clip_to_occupied=False)
        t_ref, _ = slab_intersect(origins, dirs, lo, hi)
        worst = max(worst, float(np.max(np.abs(t_hit - t_ref) * np.linalg.norm(dirs, axis=1))))
    return worst <= 1e-6, f"max hit error {worst:.2e}"


def check_identity_warp():
    from .lift import FeatureVolume, warp_to_reference
    from .rig import Pose

    data = np.random.default_rng(5).random((7, 8, 8, 8))
    out = warp_to_reference(FeatureVolume(data, "camera"), Pose.identity())
    return bool(np.array_equal(out.data, data)), "identity warp is bit-exact"


def check_matching():
    from .cluster import Clustering, match_to_groundtruth

    rng = np.random.default_rng(6)
    ok = True
    for _ in range(20):
        k = int(rng.integers(1, 5))
        a = rng.integers(0, k + 1, size=(4, 4, 4))
        g = rng.integers(0, k + 1, size=(4, 4, 4))
        m = match_to_groundtruth(Clustering(a, k), g, k)
        best = Fraction(0)
        for perm in itertools.permutations(range(1, k + 1)):
            tot = Fraction(0)
            for gi, ci in enumerate(perm, start=1):
                inter = int(np.sum((a == ci) & (g == gi)))
                union = int(np.sum((a == ci) | (g == gi)))
                tot += Fraction(inter, union) if union else 0
            best = max(best, tot / k)
        ok &= float(best) == m.mean_iou
    return ok, "exhaustive matching vs permutation oracle"


def check_gru_bounded():
    from .memory import MemoryState, ModelConfig, gru_step, init_params

    cfg = ModelConfig(N=8, hidden=4, embed=2, in_channels=7)
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        params = init_params(cfg, trial, dtype=np.float64)
        for p in params.values():
            p.data *= 5.0
        h = MemoryState(Tensor(np.zeros((4, 4, 4, 4))), 0)
        for _ in range(4):
            h = gru_step(h, Tensor(rng.normal(scale=3.0, size=(7, 4, 4, 4))), params)
            worst = max(worst, float(np.abs(h.h.data).max()))
    return worst <= 1.0, f"max |h| {worst:.4f}"


CHECKS = {
    "conv3d gradient": check_conv_gradient,
    "GRU step gradient": check_gru_gradient,
    "GRU boundedness": check_gru_bounded,
    "TNS1 round trip": check_tensor_roundtrip,
    "VXG1 round trip": check_scene_roundtrip,
    "renderer depth oracle": check_renderer_depth,
    "identity warp": check_identity_warp,
    "matching oracle": check_matching,
}


def run_all() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
