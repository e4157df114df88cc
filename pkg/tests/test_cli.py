import json
import subprocess
import sys
from pathlib import Path

import pytest

from geoactive.cli import main
from geoactive.io import read_ply_vertex_count

TINY = {
    "seed": 5,
    "grid": {"N": 16, "N_f": 8},
    "model": {"hidden": 4, "embed": 4},
    "dataset": {"count": 8, "seed": 2},
    "train": {"steps": 2, "batch": 1, "views": 2},
    "policy": {"updates": 1, "batch": 2},
}


def run_pipeline(root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    steps = [
        ["gen-scenes", "--config", str(cfg), "--out", str(root / "scenes")],
        ["render", "--scene", str(root / "scenes" / "scene_0000.vxg"), "--view", "1,3", "--dump-views", str(root / "views"), "--config", str(cfg)],
        ["train-recon", "--config", str(cfg), "--out", str(root / "run")],
        ["train-policy", "--checkpoint", str(root / "run" / "checkpoint"), "--seeds", "0,1", "--out", str(root / "pol")],
        [
            "rollout", "--checkpoint", str(root / "run" / "checkpoint"), "--policy", "learned",
            "--policy-checkpoint", str(root / "pol" / "policy_seed0"), "--scenes", str(root / "scenes"),
            "--out", str(root / "rollout.jsonl"), "--dump-tensors", str(root / "tensors"),
        ],
        ["eval", "--checkpoint", str(root / "run" / "checkpoint"), "--policy", "random", "--out", str(root / "eval")],
        ["eval", "--checkpoint", str(root / "run" / "checkpoint"), "--policy", "greedy1", "--noise", "independent", "--out", str(root / "eval_noise")],
        ["export-ply", "--tensor", str(root / "tensors" / "scene_0000.tns"), "--threshold", "0.0", "--out", str(root / "s0.ply")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return root


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a = run_pipeline(tmp_path_factory.mktemp("a") / "w")
    b = run_pipeline(tmp_path_factory.mktemp("b") / "w")
    return a, b


def _normalize(files: dict[str, bytes], root: Path) -> dict[str, bytes]:
    # the config path written into cfg-derived artifacts is not part of them; only contents are compared
    return {k: v.replace(str(root).encode(), b"<root>") for k, v in files.items()}


def test_every_subcommand_is_byte_identical_across_runs(two_runs):
    a, b = two_runs
    sa, sb = _normalize(snapshot(a), a), _normalize(snapshot(b), b)
    assert sa.keys() == sb.keys()
    differing = [k for k in sa if sa[k] != sb[k]]
    assert differing == []


def test_pipeline_outputs(two_runs):
    root = two_runs[0]
    manifest = json.loads((root / "scenes" / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 8
    assert [e["split"] for e in manifest["scenes"]].count("train") == 6
    assert {"schema_version", "config_hash", "code_version", "seed"} <= set(manifest)
    assert (root / "views" / "scene_0000_e1_a3_rgb.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")
    log = [json.loads(l) for l in (root / "run" / "train_log.jsonl").read_text().splitlines()]
    assert log[0]["event"] == "start" and len(log) == 3
    ckpt = json.loads((root / "run" / "checkpoint" / "manifest.json").read_text())
    assert ckpt["kind"] == "reconstruction" and ckpt["config"]["grid"]["N"] == 16
    summary = json.loads((root / "pol" / "policy_summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    rows = [json.loads(l) for l in (root / "rollout.jsonl").read_text().splitlines()]
    assert len(rows) == 8 and all(len(r["views"]) == 4 for r in rows)
    ev = json.loads((root / "eval" / "summary.json").read_text())
    assert ev["num_scenes"] == 2 and len(ev["occupancy_iou"]) == 4
    csv = (root / "eval" / "per_scene.csv").read_text().splitlines()
    assert csv[0].startswith("# schema_version=1") and csv[1].startswith("scene_id,views")
    noisy = json.loads((root / "eval_noise" / "summary.json").read_text())
    assert noisy["noise"] == {"mode": "independent", "sigma_deg": 5.0}


def test_export_ply_vertex_count_matches_tensor(two_runs):
    from geoactive.io import load_tensor

    root = two_runs[0]
    arr, meta = load_tensor(root / "tensors" / "scene_0000.tns")
    assert meta["channels"] == ["occupancy", "instance"]
    assert read_ply_vertex_count(root / "s0.ply") == int((arr[0] >= 0.0).sum())


def test_eval_sigma_zero_equals_noise_off(two_runs, tmp_path):
    ck = str(two_runs[0] / "run" / "checkpoint")
    assert main(["eval", "--checkpoint", ck, "--policy", "random", "--out", str(tmp_path / "off")]) == 0
    assert main(["eval", "--checkpoint", ck, "--policy", "random", "--noise", "accumulating", "--sigma", "0", "--out", str(tmp_path / "z")]) == 0
    off = json.loads((tmp_path / "off" / "summary.json").read_text())
    zero = json.loads((tmp_path / "z" / "summary.json").read_text())
    for key in ("occupancy_iou", "segmentation_iou", "classification_accuracy"):
        assert off[key] == zero[key]
    assert (tmp_path / "off" / "per_scene.csv").read_bytes() == (tmp_path / "z" / "per_scene.csv").read_bytes()


@pytest.mark.parametrize(
    "argv,code",
    [
        ([], 1),
        (["no-such-command"], 1),
        (["gen-scenes"], 1),
        (["render", "--scene", "x.vxg", "--view", "1,2", "--dump-views", "d"], 2),
        (["train-policy", "--checkpoint", "c", "--seeds", "a,b"], 1),
    ],
)
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        got = main(argv)
    except SystemExit as exc:
        got = exc.code
    assert got == code


def test_validation_errors(tmp_path, two_runs):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"grid": {"N": 7}}))
    assert main(["gen-scenes", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    ck = str(two_runs[0] / "run" / "checkpoint")
    scenes = str(two_runs[0] / "scenes")
    assert main(["render", "--scene", scenes + "/scene_0000.vxg", "--view", "5,0", "--dump-views", str(tmp_path)]) == 2
    assert main(["rollout", "--checkpoint", ck, "--policy", "learned", "--scenes", scenes]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--policy", "random"]) == 2
    assert main(["export-ply", "--tensor", str(two_runs[0] / "tensors" / "scene_0000.tns"), "--channel", "nope"]) == 2


def test_selftest_subprocess():
    proc = subprocess.run([sys.executable, "-m", "geoactive", "selftest"], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "8/8 checks passed" in proc.stdout
