"""Checkpoint layout: ``<run>/ckpt/<iter>/{recognizer,generator,discriminator}.bin``
plus ``manifest.json``. Each ``.bin`` holds the module and optimizer state dicts.
"""
import json
import os
from pathlib import Path

import torch

from . import config as config_mod
from .charset import Charset

PARTS = ("recognizer", "generator", "discriminator")


def device():
    return torch.device(os.environ.get("SEPGAN_DEVICE", "cpu"))


def save(ckpt_root, iteration, cfg, modules, optimizers=None, **extra):
    """Write ``ckpt_root/<iteration>/``; ``modules`` maps part name -> nn.Module."""
    out = Path(ckpt_root) / str(iteration)
    out.mkdir(parents=True, exist_ok=True)
    optimizers = optimizers or {}
    for name, module in modules.items():
        blob = {"model": module.state_dict()}
        if name in optimizers:
            blob["optim"] = optimizers[name].state_dict()
        torch.save(blob, out / f"{name}.bin")
    manifest = {
        "iteration": iteration,
        "parts": sorted(modules),
        "charset": cfg["charset"],
        "config_hash": config_mod.config_hash(cfg),
        "config": cfg,
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def latest(run_or_ckpt) -> Path:
    """Resolve a run directory, a ``ckpt`` directory or a checkpoint directory."""
    path = Path(run_or_ckpt)
    if (path / "manifest.json").exists() and any((path / f"{p}.bin").exists() for p in PARTS):
        return path
    for root in (path / "ckpt", path):
        if root.is_dir():
            iters = [int(p.name) for p in root.iterdir() if p.name.isdigit() and (p / "manifest.json").exists()]
            if iters:
                return root / str(max(iters))
    raise FileNotFoundError(f"no checkpoint found under {path}")


def read_manifest(ckpt_dir) -> dict:
    return json.loads((Path(ckpt_dir) / "manifest.json").read_text())


def load_part(ckpt_dir, name, module, optimizer=None, map_location=None):
    path = Path(ckpt_dir) / f"{name}.bin"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    blob = torch.load(path, map_location=map_location or device(), weights_only=True)
    module.load_state_dict(blob["model"])
    if optimizer is not None and "optim" in blob:
        optimizer.load_state_dict(blob["optim"])
    return module


def load_models(ckpt_dir, parts=PARTS):
    """Rebuild modules from a checkpoint using its echoed config."""
    from .gan import build_gan
    from .recognizer import build_recognizer

    ckpt_dir = latest(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    cfg = config_mod.make(**manifest["config"])
    charset = Charset(cfg["charset"])
    models = {}
    if "recognizer" in parts:
        models["recognizer"] = load_part(ckpt_dir, "recognizer", build_recognizer(cfg, charset))
    if "generator" in parts or "discriminator" in parts:
        gen, disc = build_gan(cfg, charset)
        if "generator" in parts:
            models["generator"] = load_part(ckpt_dir, "generator", gen)
        if "discriminator" in parts:
            models["discriminator"] = load_part(ckpt_dir, "discriminator", disc)
    for m in models.values():
        m.to(device()).eval()
    return models, cfg, manifest
