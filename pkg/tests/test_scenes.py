import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoactive.scenes import (
    CATEGORIES,
    CONTENT_RADIUS,
    Placement,
    SceneError,
    ShapeSpec,
    VoxelScene,
    balanced_categories,
    generate_scene,
    load_scene,
    rasterize,
    save_scene,
    voxel_center,
    voxel_centers,
)

ELL_OFFSET = -(1.4 * -0.65 + 0.91 * 0.35) / 2.31


def _inside_scalar(obj, x, y, z):
    """Per-point inside test written out longhand from the placement record."""
    yaw = math.radians(obj["yaw_deg"])
    cx, cy, cz = obj["center"]
    s = obj["scale"]
    dx, dy, dz = x - cx, y - cy, z - cz
    lx = (math.cos(yaw) * dx + math.sin(yaw) * dy) / s
    ly = (-math.sin(yaw) * dx + math.cos(yaw) * dy) / s
    lz = dz / s
    cat = obj["category"]
    if cat == "box":
        return abs(lx) <= 1 and abs(ly) <= 1 and abs(lz) <= 0.5
    if cat == "sphere":
        return lx * lx + ly * ly + lz * lz <= 1
    if cat == "cylinder":
        return lx * lx + ly * ly <= 0.36 and abs(lz) <= 1.2
    lx -= ELL_OFFSET
    lz -= ELL_OFFSET
    return abs(ly) <= 0.45 and -1 <= lx <= 1 and -1 <= lz <= 1 and (lx <= -0.3 or lz <= -0.3)


def test_voxel_center_formula():
    assert voxel_center(0, 0, 0, 2) == (-0.25, -0.25, -0.25)
    assert voxel_center(1, 1, 1, 2) == (0.25, 0.25, 0.25)
    assert voxel_center(15, 0, 31, 32) == (-0.015625, -0.484375, 0.484375)


@pytest.mark.parametrize("idx", [(-1, 0, 0), (0, 2, 0), (0, 0, 5)])
def test_voxel_center_rejects_out_of_range(idx):
    with pytest.raises(IndexError):
        voxel_center(*idx, 2)


def test_voxel_centers_grid_matches_scalar_formula():
    g = voxel_centers(4)
    assert g.shape == (4, 4, 4, 3)
    assert tuple(g[1, 2, 3]) == voxel_center(1, 2, 3, 4)


def test_seed7_two_objects_radii_in_range():
    s = generate_scene(7, 2, 32)
    assert sorted(set(np.unique(s.instance_id)) - {0}) == [1, 2]
    for obj in s.meta["objects"]:
        assert 0.25 <= np.linalg.norm(obj["center"]) <= 0.35


def test_same_seed_is_bit_identical():
    a = generate_scene(7, 2, 32)
    b = generate_scene(7, 2, 32)
    assert a.instance_id.tobytes() == b.instance_id.tobytes()
    assert a.colors == b.colors


def test_single_object_count_matches_pointwise_oracle():
    s = generate_scene(3, 1, 16)
    obj = s.meta["objects"][0]
    count = sum(
        _inside_scalar(obj, (i + 0.5) / 16 - 0.5, (j + 0.5) / 16 - 0.5, (k + 0.5) / 16 - 0.5)
        for i in range(16)
        for j in range(16)
        for k in range(16)
    )
    assert count == 9  # frozen from the pointwise oracle above
    assert int(s.occupancy.sum()) == count
    assert set(np.unique(s.instance_id)) == {0, 1}


@pytest.mark.parametrize("N", [8, 15, 65, 128])
def test_rejects_resolution_out_of_range(N):
    with pytest.raises(SceneError):
        generate_scene(0, 2, N)


def test_rejects_bad_object_count():
    with pytest.raises(SceneError):
        generate_scene(0, 3, 16)


def test_scale_range_enforced():
    with pytest.raises(SceneError):
        ShapeSpec("box", 0.2, (1.0, 0.0, 0.0))
    with pytest.raises(SceneError):
        ShapeSpec("cone", 0.1, (1.0, 0.0, 0.0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), N=st.sampled_from([16, 24, 32]))
def test_scene_invariants(seed, N):
    s = generate_scene(seed, 2, N)
    assert np.array_equal(s.instance_id > 0, s.occupancy)
    for n in (1, 2):
        assert (s.instance_id == n).any()
    pts = voxel_centers(N)[s.occupancy]
    assert np.linalg.norm(pts, axis=1).max() <= CONTENT_RADIUS
    c1, c2 = (np.asarray(o["center"]) for o in s.meta["objects"])
    cosang = c1 @ c2 / (np.linalg.norm(c1) * np.linalg.norm(c2))
    assert math.degrees(math.acos(np.clip(cosang, -1, 1))) == pytest.approx(180.0, abs=1.0)
    assert -90.0 <= s.meta["rotation_deg"] <= 90.0
    for o in s.meta["objects"]:
        assert 0.08 <= o["scale"] <= 0.14


@pytest.mark.parametrize("category", CATEGORIES)
def test_rasterization_matches_analytic_inside_test(category):
    rng = np.random.default_rng(hash(category) % 1000)
    obj = {"category": category, "scale": 0.14, "center": [0.05, -0.03, 0.02], "yaw_deg": float(rng.uniform(-90, 90))}
    p = Placement(ShapeSpec(category, 0.14, (1.0, 1.0, 1.0)), tuple(obj["center"]), obj["yaw_deg"])
    ids = rasterize([p], 16)
    for i in range(16):
        for j in range(16):
            for k in range(16):
                want = _inside_scalar(obj, (i + 0.5) / 16 - 0.5, (j + 0.5) / 16 - 0.5, (k + 0.5) / 16 - 0.5)
                assert bool(ids[i, j, k]) == want


def test_category_balance_over_400_scenes():
    cats = balanced_categories(400, 11)
    counts = np.bincount(np.concatenate(cats), minlength=4) / 800
    assert np.all(np.abs(counts - 0.25) <= 0.05)
    # also holds for scenes sampled without the balancing helper
    free = np.concatenate([generate_scene(s, 2, 16).categories for s in range(400)])
    assert np.all(np.abs(np.bincount(free, minlength=4) / 800 - 0.25) <= 0.05)


def test_generate_keeps_requested_categories():
    s = generate_scene(5, 2, 16, categories=[3, 1])
    assert s.categories == [3, 1]
    assert [o["category"] for o in s.meta["objects"]] == ["ell", "sphere"]


def test_vxg_round_trip(tmp_path):
    s = generate_scene(12, 2, 24)
    path = tmp_path / "s.vxg"
    save_scene(s, path)
    raw = path.read_bytes()
    assert raw[:4] == b"VXG1"
    assert len(raw) == 16 + 24**3 + 2 * 13
    # x-fastest: the byte after the header is voxel (0,0,0), the next is (1,0,0)
    assert raw[16 + 1] == s.instance_id[1, 0, 0]
    t = load_scene(path)
    assert np.array_equal(s.instance_id, t.instance_id)
    assert t.categories == s.categories
    np.testing.assert_allclose(t.colors, s.colors, rtol=1e-6)
    assert t.meta["seed"] == 12


def test_vxg_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.vxg"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(SceneError):
        load_scene(p)


def test_validate_catches_missing_instance():
    ids = np.zeros((16, 16, 16), dtype=np.uint8)
    ids[8, 8, 8] = 1
    with pytest.raises(SceneError):
        VoxelScene(16, ids, [0, 1], [(0, 0, 0), (0, 0, 0)]).validate()
