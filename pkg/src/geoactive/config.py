"""Run configuration: defaults, schema validation, canonical hash."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__
from .memory import LossConfig, ModelConfig, TrainConfig
from .policy import PolicyTrainConfig
from .rig import CameraModel, EgomotionNoise

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "grid": {"N": 32, "N_f": 16},
    "model": {"hidden": 12, "embed": 8},
    "camera": {"radius": 1.4, "fov_deg": 60.0, "image_size": 64},
    "noise": {"sigma_deg": 5.0, "mode": "off"},
    "dataset": {"count": 120, "train_fraction": 0.7, "seed": 0, "num_objects": 2},
    "train": {
        "steps": 1050,
        "batch": 4,
        "lr": 0.05,
        "momentum": 0.9,
        "views": 4,
        "lr_final": 0.1,
        "lambda_s": 1.0,
        "lambda_c": 0.5,
        "margin": 1.0,
        "samples_per_instance": 16,
        "pos_weight": 3.0,
        "class_from_gt_masks": False,
    },
    "policy": {"updates": 60, "batch": 16, "lr": 0.01, "momentum": 0.9, "entropy_coef": 0.01},
    "eval": {"horizon": 4, "oversegment_k": 8},
}


class ConfigError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files("geoactive").joinpath("config_schema.json").read_text())


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(raw: dict | None = None) -> dict:
    """Validate a (partial) config and fill in defaults."""
    raw = raw or {}
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, raw)
    N, N_f = cfg["grid"]["N"], cfg["grid"]["N_f"]
    if N_f * 2 != N:
        raise ConfigError(f"grid.N_f must be N/2 ({N // 2}), got {N_f}")
    try:
        camera_of(cfg)
    except ValueError as exc:
        raise ConfigError(f"camera: {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return resolve({})
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return resolve(raw)


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


def stamp(cfg: dict, seed: int | None = None) -> dict:
    """Provenance fields carried by every artifact."""
    return {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "seed": cfg["seed"] if seed is None else seed,
    }


# --- typed views of the config ------------------------------------------------------

def camera_of(cfg: dict) -> CameraModel:
    c = cfg["camera"]
    return CameraModel(radius=c["radius"], fov_deg=c["fov_deg"], image_size=c["image_size"])


def model_config_of(cfg: dict) -> ModelConfig:
    return ModelConfig(N=cfg["grid"]["N"], hidden=cfg["model"]["hidden"], embed=cfg["model"]["embed"])


def noise_of(cfg: dict, mode: str | None = None) -> EgomotionNoise:
    n = cfg["noise"]
    return EgomotionNoise(sigma_deg=n["sigma_deg"], mode=mode or n["mode"])


def train_config_of(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    loss = LossConfig(
        lambda_s=t["lambda_s"],
        lambda_c=t["lambda_c"],
        margin=t["margin"],
        samples_per_instance=t["samples_per_instance"],
        class_from_gt_masks=t["class_from_gt_masks"],
        pos_weight=t["pos_weight"],
    )
    return TrainConfig(
        steps=t["steps"], batch=t["batch"], lr=t["lr"], momentum=t["momentum"], views=t["views"], lr_final=t["lr_final"], loss=loss, noise=noise_of(cfg)
    )


def policy_config_of(cfg: dict) -> PolicyTrainConfig:
    p = cfg["policy"]
    return PolicyTrainConfig(
        updates=p["updates"],
        batch=p["batch"],
        lr=p["lr"],
        momentum=p["momentum"],
        entropy_coef=p["entropy_coef"],
        horizon=cfg["eval"]["horizon"],
    )
