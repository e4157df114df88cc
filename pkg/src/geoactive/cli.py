"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 validation (bad config, bad or missing input
files), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("geoactive")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("need at least one non-negative seed")
    return seeds


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- subcommands --------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    from .config import load_config, stamp
    from .experiment import build_dataset
    from .scenes import save_scene

    cfg = load_config(args.config)
    ds = build_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    train = set(ds.train_idx)
    for i, (sid, scene) in enumerate(zip(ds.ids, ds.scenes)):
        path = out / f"{sid}.vxg"
        scene.meta = {**scene.meta, **stamp(cfg), "scene_id": sid}
        save_scene(scene, path)
        entries.append(
            {"id": sid, "file": path.name, "split": "train" if i in train else "test", "categories": scene.categories, "sha256": _sha256(path)}
        )
    _write_json(out / "manifest.json", {**stamp(cfg), "config": cfg, "scenes": entries})
    print(f"wrote {len(entries)} scenes to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .config import camera_of, load_config, stamp
    from .render import dump_view, render
    from .rig import parse_view, pose_of
    from .scenes import load_scene

    cfg = load_config(args.config)
    cam = camera_of(cfg)
    scene = load_scene(args.scene)
    view = parse_view(args.view)
    rv = render(scene, pose_of(view, cam), cam, view)
    stem = f"{Path(args.scene).stem}_e{view.elev}_a{view.azim}"
    files = dump_view(rv, args.dump_views, stem, cam.radius)
    _write_json(
        Path(args.dump_views) / f"{stem}.json",
        {**stamp(cfg), "scene": Path(args.scene).name, "view": str(view), "files": [f.name for f in files], "foreground_pixels": int(rv.mask.sum())},
    )
    for f in files:
        print(f)
    return EXIT_OK


def cmd_train_recon(args) -> int:
    from .config import load_config
    from .experiment import build_dataset, save_model, train_recon

    cfg = load_config(args.config)
    out = Path(args.out or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg)
    params, curve = train_recon(cfg, ds, out / "train_log.jsonl")
    path = save_model(out / "checkpoint", params, cfg)
    print(f"checkpoint: {path.parent}  final loss {curve[-1]['total']:.4f}")
    return EXIT_OK


def cmd_train_policy(args) -> int:
    from .config import load_config, policy_config_of, stamp
    from .experiment import build_dataset, load_model, save_model, train_policy
    from .metrics import mean_std

    model, cfg = load_model(args.checkpoint)
    if args.config:
        override = load_config(args.config)
        cfg = {**cfg, "policy": override["policy"]}
    out = Path(args.out or Path(cfg["output_dir"]) / "policy")
    ds = build_dataset(cfg)
    finals = {}
    for s in args.seeds:
        policy, curve = train_policy(model, cfg, ds, s)
        save_model(out / f"policy_seed{s}", policy, cfg, kind="policy")
        with open(out / f"rewards_seed{s}.jsonl", "w") as fh:
            fh.write(json.dumps({"event": "start", **stamp(cfg, s)}, sort_keys=True) + "\n")
            for rec in curve:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        tail = curve[-max(1, len(curve) // 10):]
        finals[str(s)] = float(np.mean([r["mean_return"] for r in tail]))
    m, sd = mean_std(list(finals.values()))
    _write_json(
        out / "policy_summary.json",
        {**stamp(cfg), "seeds": args.seeds, "final_mean_return": finals, "mean": m, "std": sd, "updates": policy_config_of(cfg).updates},
    )
    print(f"policies in {out}; final mean return {m:.4f} +/- {sd:.4f}")
    return EXIT_OK


def _load_scene_dir(directory: Path):
    from .scenes import load_scene

    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory not found: {directory}")
    manifest = directory / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())["scenes"]
        files = [(e["id"], directory / e["file"]) for e in entries]
    else:
        files = [(p.stem, p) for p in sorted(directory.glob("*.vxg"))]
    if not files:
        raise FileNotFoundError(f"no .vxg scenes in {directory}")
    return [(sid, load_scene(p)) for sid, p in files]


def cmd_rollout(args) -> int:
    from .cluster import classify_clusters
    from .config import stamp
    from .experiment import _segment, evaluate_scene, load_model, load_policy
    from .io import save_tensor
    from .scenes import VoxelScene, save_scene
    from .seeding import derive_seed

    model, cfg = load_model(args.checkpoint)
    policy = _maybe_policy(args, load_policy)
    seed = cfg["seed"] if args.seed is None else args.seed
    lines = []
    dump = Path(args.dump_tensors) if args.dump_tensors else None
    for sid, scene in _load_scene_dir(Path(args.scenes)):
        if scene.resolution != cfg["grid"]["N"]:
            raise ValueError(f"{sid}: scene resolution {scene.resolution} does not match the checkpoint grid {cfg['grid']['N']}")
        res = evaluate_scene(model, scene, sid, args.policy, seed, policy, None, cfg["eval"]["horizon"], cfg["eval"]["oversegment_k"])
        lines.append(json.dumps({**res.record.to_json(), "seed": seed, "config_hash": stamp(cfg)["config_hash"]}, sort_keys=True))
        if dump is not None:
            dump.mkdir(parents=True, exist_ok=True)
            ep = model.episode(scene, res.record.views[0], key=sid)
            _, outs = model.run(ep, res.record.views)
            out = outs[-1]
            c = _segment(out, scene.num_objects, derive_seed(seed, "kmeans", sid, len(outs) - 1))
            inst = np.zeros_like(out.occupancy.data) if c is None else c.assignment.astype(np.float32)
            save_tensor(
                dump / f"{sid}.tns",
                np.stack([out.occupancy.data, inst]),
                channels=["occupancy", "instance"],
                meta={**stamp(cfg, seed), "scene_id": sid, "frame": "reference", "reference_view": str(res.record.views[0])},
            )
            if c is not None and c.k > 0:
                labels = classify_clusters(c, out.logits.data)
                seg = VoxelScene(
                    resolution=c.assignment.shape[0],
                    instance_id=c.assignment.astype(np.uint8),
                    categories=labels,
                    colors=[(0.5, 0.5, 0.5)] * c.k,
                    meta={**stamp(cfg, seed), "scene_id": sid, "kind": "segmentation", "frame": "reference"},
                )
                save_scene(seg, dump / f"{sid}_seg.vxg")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _maybe_policy(args, loader):
    if args.policy == "learned":
        if not args.policy_checkpoint:
            raise UsageError("--policy learned needs --policy-checkpoint")
        return loader(args.policy_checkpoint)
    return None


def cmd_eval(args) -> int:
    from .config import noise_of
    from .experiment import build_dataset, load_model, load_policy, run_eval, write_eval

    model, cfg = load_model(args.checkpoint)
    policy = _maybe_policy(args, load_policy)
    seed = cfg["seed"] if args.seed is None else args.seed
    noise = noise_of(cfg, args.noise)
    if args.sigma is not None:
        from .rig import EgomotionNoise

        noise = EgomotionNoise(args.sigma, args.noise)
    ds = build_dataset(cfg)
    summary, results = run_eval(model, cfg, ds, args.policy, seed, policy, noise)
    out = Path(args.out or Path(cfg["output_dir"]) / f"eval_{args.policy}_{args.noise}")
    write_eval(out, summary, results)
    print(json.dumps({k: summary[k] for k in ("occupancy_iou", "percent_increase")}))
    return EXIT_OK


def cmd_export_ply(args) -> int:
    from .io import load_tensor, occupied_points, write_ply

    arr, meta = load_tensor(args.tensor)
    names = meta.get("channels") or []
    if args.channel in names:
        ci = names.index(args.channel)
    elif args.channel.isdigit() and int(args.channel) < arr.shape[0]:
        ci = int(args.channel)
    else:
        raise ValueError(f"channel {args.channel!r} not in tensor (channels: {names or list(range(arr.shape[0]))})")
    inst = arr[names.index("instance")] if "instance" in names else None
    pts, cols = occupied_points(arr[ci], args.threshold, inst)
    out = Path(args.out) if args.out else Path(args.tensor).with_suffix(".ply")
    comments = [f"{k} {meta[k]}" for k in ("config_hash", "code_version", "seed") if k in meta]
    write_ply(out, pts, cols, comments)
    print(f"{out}: {len(pts)} vertices")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failed += not ok
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


# --- wiring -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .policy import POLICY_KINDS
    from .rig import NOISE_MODES

    p = _Parser(prog="geoactive", description="Active multi-view voxel reconstruction experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-scenes", help="generate the scene dataset")
    s.add_argument("--config", help="run config JSON (defaults if omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_scenes)

    s = sub.add_parser("render", help="render one view of a scene to PPM images")
    s.add_argument("--scene", required=True, help="VXG1 scene file")
    s.add_argument("--view", required=True, help="view as 'elev,azim' indices, e.g. 1,5")
    s.add_argument("--dump-views", required=True, help="directory for the images")
    s.add_argument("--config", help="run config JSON for the camera")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train-recon", help="train the reconstruction memory")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.set_defaults(func=cmd_train_recon)

    s = sub.add_parser("train-policy", help="train view-selection policies with REINFORCE")
    s.add_argument("--checkpoint", required=True, help="reconstruction checkpoint directory")
    s.add_argument("--config", help="run config JSON supplying the policy section")
    s.add_argument("--seeds", type=_seeds, default=[0, 1, 2], help="comma-separated seeds (default 0,1,2)")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_train_policy)

    for name, helptext in (("rollout", "roll out a policy on saved scenes"), ("eval", "evaluate on the held-out split")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True, help="reconstruction checkpoint directory")
        s.add_argument("--policy", required=True, choices=POLICY_KINDS)
        s.add_argument("--policy-checkpoint", help="policy checkpoint (for --policy learned)")
        s.add_argument("--seed", type=int, help="evaluation seed (default: checkpoint seed)")
        if name == "rollout":
            s.add_argument("--scenes", required=True, help="directory of VXG1 scenes")
            s.add_argument("--out", help="JSON-lines output file (default stdout)")
            s.add_argument("--dump-tensors", help="write final-view occupancy/instance tensors here")
            s.set_defaults(func=cmd_rollout)
        else:
            s.add_argument("--noise", default="off", choices=NOISE_MODES)
            s.add_argument("--sigma", type=float, help="noise sigma in degrees (default from config)")
            s.add_argument("--out", help="output directory")
            s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-ply", help="export thresholded voxels of a TNS1 tensor as PLY")
    s.add_argument("--tensor", required=True)
    s.add_argument("--channel", default="occupancy")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_ply)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    from .autograd import GraphError
    from .config import ConfigError
    from .io import FormatError
    from .memory import TrainingDiverged

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"geoactive: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, GraphError) as exc:
        print(f"geoactive: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"geoactive: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"geoactive: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
