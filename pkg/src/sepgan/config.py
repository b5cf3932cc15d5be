"""Flat ``key = value`` run configuration.

Every key has a default below; files and command-line overrides may only set
known keys. Values are coerced to the type of the default.
"""
import hashlib
import json
from pathlib import Path

from .charset import DEFAULT_SYMBOLS

# key: (default, help)
DEFAULTS = {
    "seed": (0, "master seed; corpus, init, target sampler and k-draws derive from it"),
    "charset": (DEFAULT_SYMBOLS, "recognizable symbols, EOS is appended as the last class"),
    "fonts": ("", "comma separated TTF paths; empty means auto-discover"),
    # synth
    "n": (1000, "number of samples for synth"),
    "split": ("train", "corpus split name (train|eval)"),
    "noise": (0.8, "background noise strength in [0,1]"),
    "noise_levels": ("", "comma separated noise levels to mix; overrides noise when set"),
    "min_label_len": (2, "shortest random word"),
    "max_label_len": (10, "longest random word"),
    "render_height": (64, "native render height of source samples"),
    "render_width": (256, "native render width of source samples"),
    # geometry
    "gen_height": (64, "generator input height"),
    "gen_width": (256, "generator input width"),
    "rec_height": (32, "recognizer input height"),
    "rec_width": (100, "recognizer input width"),
    "target_size": (32, "side of target style samples"),
    # models
    "backbone": ("desk", "recognizer backbone preset: desk|resnet45"),
    "hidden_size": (256, "GRU hidden units"),
    "attn_size": (256, "attention scoring dimension"),
    "max_steps": (25, "greedy decoding step limit"),
    "gen_channels": ("64,128,256,256", "channels of the four encoder units of the generator"),
    "disc_channels": ("16,64,128,128,192,256,256", "discriminator encoder filters"),
    "share_mask_grad": (False, "let GAN losses backprop through shared attention masks"),
    "rec_through_gen": (False, "let the recognition loss on generated images update the generator"),
    # training
    "data": ("", "training corpus directory"),
    "eval_data": ("", "held-out corpus directory"),
    "batch_size": (64, "images per step"),
    "lr": (0.002, "Adam learning rate of generator and discriminator"),
    "rec_lr": (0.001, "Adam learning rate of the recognizer"),
    "lr_milestones": ("2,4", "epochs at which learning rates are multiplied by lr_gamma"),
    "lr_gamma": (0.1, "learning rate decay factor"),
    "epoch_iters": (0, "iterations per epoch; 0 means corpus size // batch_size"),
    "pretrain_epochs": (3.0, "recognizer pretraining length in epochs"),
    "pretrain_iters": (0, "explicit pretraining iterations; overrides pretrain_epochs when > 0"),
    "iterations": (3000, "joint training iterations"),
    "beta_eps": (0.001, "lower clamp of the balance factor"),
    "log_interval": (50, "metrics row every this many joint iterations"),
    "ckpt_interval": (1000, "checkpoint every this many iterations"),
    "sample_interval": (500, "sample grid every this many joint iterations; 0 disables"),
    "pretrained": ("", "recognizer checkpoint to start joint training from; empty pretrains in-run"),
    "resume": ("", "checkpoint directory to resume from"),
    "prefetch": (4, "bounded queue depth of the target sample producer"),
    "threads": (0, "torch intra-op threads; 0 keeps the torch default"),
    # eval / generate
    "lexicon": ("", "lexicon file for constrained decoding"),
    "k": (8, "sample pairs in the generate grid"),
}


class ConfigError(ValueError):
    pass


def _coerce(key, value, default):
    if type(value) is type(default):
        return value
    if isinstance(default, float) and type(value) is int:
        return float(value)
    if isinstance(default, bool):
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    return str(value)


def defaults() -> dict:
    return {k: v for k, (v, _) in DEFAULTS.items()}


def parse_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def load(path=None, overrides=None) -> dict:
    """Defaults, then the config file, then ``overrides`` (highest precedence)."""
    cfg = defaults()
    layers = []
    if path:
        layers.append(parse_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, DEFAULTS[key][0])
    return cfg


def make(**overrides) -> dict:
    return load(None, overrides)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def int_list(value: str) -> list[int]:
    return [int(v) for v in str(value).split(",") if v.strip()]


def float_list(value: str) -> list[float]:
    return [float(v) for v in str(value).split(",") if v.strip()]


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in DEFAULTS if k in cfg)
