"""Word-image corpora on noisy backgrounds and online single-glyph target samples.

All rendering is driven by an explicit ``numpy.random.Generator`` so every
sample is reproducible from its seed. Images are float32 in [0, 1], already
quantized to 8 bits so that what is written to disk equals what was rendered.
"""
import json
import logging
import os
import shutil
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from . import config as config_mod
from .charset import Charset

log = logging.getLogger(__name__)

BACKGROUNDS = ("flat", "gradient", "texture", "strokes")
POLARITIES = ("black_on_white", "white_on_black")
MIN_FONT_SIZE = 14
GLYPH_MARGIN = 2
FONT_ATTEMPTS = 10

_FONT_GLOBS = (
    "DejaVuSans*.ttf",
    "DejaVuSerif*.ttf",
    "STIXGeneral*.ttf",
    "LiberationSans*.ttf",
    "LiberationSerif*.ttf",
    "LiberationMono*.ttf",
    "FreeSans*.ttf",
    "FreeSerif*.ttf",
    "FreeMono*.ttf",
)


class RenderError(RuntimeError):
    pass


@dataclass
class TargetStyleSample:
    image: np.ndarray  # (32, 32) float32
    label: str
    polarity: str
    font: str = ""


@dataclass
class SourceSample:
    image: np.ndarray  # (H, W) float32
    text: str
    background_id: str
    noise: float = 0.0


def _font_dirs():
    dirs = []
    try:
        import matplotlib

        dirs.append(Path(matplotlib.get_data_path()) / "fonts" / "ttf")
    except ImportError:
        pass
    dirs += [Path("/usr/share/fonts"), Path("/usr/local/share/fonts")]
    return [d for d in dirs if d.is_dir()]


def discover_fonts(charset: Charset) -> list[str]:
    """Locally installed fonts able to draw every symbol of ``charset``."""
    seen = {}
    for d in _font_dirs():
        for pattern in _FONT_GLOBS:
            for p in sorted(d.rglob(pattern)):
                # same face shipped twice (system + matplotlib): keep the first
                if "Display" in p.name or p.name in seen:
                    continue
                seen[p.name] = str(p)
    fonts = [p for p in seen.values() if all(has_glyph(p, c) for c in charset.symbols)]
    return sorted(fonts)


def resolve_fonts(cfg: dict, charset: Charset) -> list[str]:
    if cfg.get("fonts"):
        fonts = [f.strip() for f in cfg["fonts"].split(",") if f.strip()]
        missing = [f for f in fonts if not os.path.exists(f)]
        if missing:
            raise FileNotFoundError(f"font files not found: {missing}")
    else:
        fonts = discover_fonts(charset)
    if not fonts:
        raise RenderError("no usable fonts found")
    if len(fonts) < 10:
        log.warning("only %d fonts available; at least 10 are recommended", len(fonts))
    return fonts


@lru_cache(maxsize=512)
def _font(path: str, size: int):
    return ImageFont.truetype(path, size)


@lru_cache(maxsize=None)
def _notdef_mask(path: str) -> bytes:
    return _glyph_bytes(path, "")


def _glyph_bytes(path, ch):
    font = _font(path, 24)
    img = Image.new("L", (48, 48), 0)
    ImageDraw.Draw(img).text((8, 4), ch, font=font, fill=255)
    return img.tobytes()


@lru_cache(maxsize=None)
def has_glyph(path: str, ch: str) -> bool:
    """False when the font falls back to its missing-glyph box (or draws nothing)."""
    try:
        drawn = _glyph_bytes(path, ch)
    except OSError:
        return False
    if not any(drawn):
        return False
    return drawn != _notdef_mask(path)


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- target style samples ----------------------------------------------------


SUPERSAMPLE = 4


@lru_cache(maxsize=4096)
def _glyph_canvas(path: str, ch: str, size: int, box: int) -> np.ndarray:
    """White glyph coverage (float in [0,1]) centred on a ``size``x``size`` canvas.

    The font size is the largest that fits the glyph's ink box into ``box``.
    Rendered at ``SUPERSAMPLE`` times the resolution and reduced by block
    maximum, which cannot break a thin stroke into pieces.
    """
    s = SUPERSAMPLE
    big, fit = size * s, box * s
    pt = fit + 8 * s
    while True:
        font = _font(path, pt)
        left, top, right, bottom = font.getbbox(ch)
        if (right - left <= fit and bottom - top <= fit) or pt <= 4:
            break
        pt -= 1
    w, h = right - left, bottom - top
    x = (big - w) // 2 - left
    y = (big - h) // 2 - top
    img = Image.new("L", (big, big), 0)
    ImageDraw.Draw(img).text((x, y), ch, font=font, fill=255)
    cov = np.asarray(img, dtype=np.float32).reshape(size, s, size, s).max(axis=(1, 3))
    return cov / 255.0


def count_components(mask: np.ndarray) -> int:
    """Number of 8-connected regions in a boolean mask."""
    seen = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    n = 0
    for i, j in zip(*np.nonzero(mask)):
        if seen[i, j]:
            continue
        n += 1
        seen[i, j] = True
        stack = [(i, j)]
        while stack:
            y, x = stack.pop()
            for yy in range(max(0, y - 1), min(h, y + 2)):
                for xx in range(max(0, x - 1), min(w, x + 2)):
                    if mask[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        stack.append((yy, xx))
    return n


@lru_cache(maxsize=None)
def glyph_components(path: str, ch: str) -> int:
    """Connected ink regions of the glyph drawn large enough to be unambiguous."""
    img = Image.new("L", (160, 160), 0)
    ImageDraw.Draw(img).text((20, 10), ch, font=_font(path, 110), fill=255)
    return count_components(np.asarray(img) > 127)


@lru_cache(maxsize=None)
def _renders_faithfully(path: str, ch: str, size: int, box: int) -> bool:
    # small sizes can fuse parts, e.g. the inner dot of a monospace zero
    if not has_glyph(path, ch):
        return False
    return count_components(_glyph_canvas(path, ch, size, box) > 0.5) == glyph_components(path, ch)


def render_target_sample(rng: np.random.Generator, charset: Charset, fonts, size=32) -> TargetStyleSample:
    """One random character, random font, black-on-white or white-on-black."""
    if not fonts:
        raise ValueError("fonts must be non-empty")
    ch = charset.symbols[rng.integers(len(charset))]
    polarity = POLARITIES[int(rng.random() < 0.5)]
    # glyph box varies so the discriminator does not key on scale
    box = int(rng.integers(size // 2 + 4, size - 2 * GLYPH_MARGIN + 1))
    for _ in range(FONT_ATTEMPTS):
        path = fonts[rng.integers(len(fonts))]
        if _renders_faithfully(path, ch, size, box):
            break
    else:
        raise RenderError(f"no font could render {ch!r} after {FONT_ATTEMPTS} attempts")
    ink = _glyph_canvas(path, ch, size, box)
    image = 1.0 - ink if polarity == "black_on_white" else ink
    return TargetStyleSample(quantize(image), ch, polarity, path)


def render_target_batch(rng, charset, fonts, n, size=32):
    samples = [render_target_sample(rng, charset, fonts, size) for _ in range(n)]
    images = np.stack([s.image for s in samples])
    labels = np.array([charset.encode(s.label)[0] for s in samples], dtype=np.int64)
    return images, labels


# -- source word images ------------------------------------------------------


def random_text(rng, charset: Charset, min_len=2, max_len=10) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(charset.symbols[i] for i in rng.integers(len(charset), size=n))


def _smooth_field(rng, h, w, cells):
    coarse = rng.random((cells, max(2, cells * w // h)))
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((w, h), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0 - 0.5


def _background(rng, kind, h, w, base, noise):
    bg = np.full((h, w), base, dtype=np.float32)
    if kind == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
        ramp -= ramp.mean()
        bg += noise * rng.uniform(0.6, 1.2) * ramp
    elif kind == "texture":
        bg += noise * rng.uniform(0.5, 1.0) * _smooth_field(rng, h, w, int(rng.integers(3, 9)))
        canvas = Image.fromarray(to_uint8(bg))
        draw = ImageDraw.Draw(canvas)
        for _ in range(int(round(noise * 12))):
            x0, y0 = rng.integers(0, w), rng.integers(0, h)
            x1, y1 = x0 + rng.integers(8, w // 3), y0 + rng.integers(8, h)
            shape = draw.ellipse if rng.random() < 0.5 else draw.rectangle
            shape([int(x0), int(y0), int(x1), int(y1)], fill=int(rng.integers(0, 256)))
        patched = np.asarray(canvas, dtype=np.float32) / 255.0
        bg = (1 - noise) * bg + noise * patched
    elif kind == "strokes":
        canvas = Image.fromarray(to_uint8(bg))
        draw = ImageDraw.Draw(canvas)
        for _ in range(int(round(noise * 10))):
            pts = [(int(rng.integers(-10, w + 10)), int(rng.integers(-10, h + 10))) for _ in range(3)]
            draw.line(pts, fill=int(rng.integers(0, 256)), width=int(rng.integers(1, 4)))
        bg = np.asarray(canvas, dtype=np.float32) / 255.0
    elif kind != "flat":
        raise ValueError(f"unknown background {kind!r}")
    if noise > 0:
        bg += rng.normal(0.0, 0.06 * noise, size=(h, w)).astype(np.float32)
    return bg


def _text_mask(rng, text, fonts, h, w):
    """Antialiased text coverage in [0,1]; raises if it cannot fit at MIN_FONT_SIZE."""
    path = fonts[rng.integers(len(fonts))]
    pt = int(h * rng.uniform(0.55, 0.8))
    pad = 4
    while True:
        font = _font(path, pt)
        left, top, right, bottom = font.getbbox(text)
        if right - left <= w - 2 * pad and bottom - top <= h - 2 * pad:
            break
        pt -= 1
        if pt < MIN_FONT_SIZE:
            raise ValueError("label too long")
    tw, th = right - left, bottom - top
    x = int(rng.integers(pad, max(pad, w - pad - tw) + 1)) - left
    y = int(rng.integers(pad, max(pad, h - pad - th) + 1)) - top
    img = Image.new("L", (w, h), 0)
    ImageDraw.Draw(img).text((x, y), text, font=font, fill=255)
    if rng.random() < 0.3:
        img = img.filter(ImageFilter.GaussianBlur(rng.uniform(0.3, 0.9)))
    return np.asarray(img, dtype=np.float32) / 255.0


def render_source_sample(rng: np.random.Generator, text: str, style: dict) -> SourceSample:
    """Render ``text`` over a random background.

    ``style`` keys: ``fonts``, ``charset``, ``noise`` in [0,1], ``height``,
    ``width`` and optionally ``background`` to force one of BACKGROUNDS.
    With ``noise == 0`` every background degenerates to a flat colour and the
    image holds exactly two intensities plus antialiasing.
    """
    charset = style.get("charset")
    if charset is not None:
        charset.validate(text)
    if not text:
        raise ValueError("empty label")
    noise = float(style.get("noise", 0.0))
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    h, w = style.get("height", 64), style.get("width", 256)
    kind = style.get("background") or BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    base = float(rng.uniform(0.0, 1.0))
    contrast = rng.uniform(0.45, 0.9)
    fg = max(0.0, base - contrast) if base >= 0.5 else min(1.0, base + contrast)
    bg = _background(rng, kind, h, w, base, noise)
    mask = _text_mask(rng, text, style["fonts"], h, w)
    ink = np.full((h, w), fg, dtype=np.float32)
    if noise > 0:
        ink += noise * 0.15 * _smooth_field(rng, h, w, 4)
    image = bg * (1.0 - mask) + ink * mask
    return SourceSample(quantize(image), text, kind, noise)


# -- corpora on disk ---------------------------------------------------------

SPLIT_CODES = {"train": 0, "eval": 1}


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLIT_CODES[split], index])


def _render_one(args):
    seed, split, i, cfg_items = args
    cfg = dict(cfg_items)
    charset = Charset(cfg["charset"])
    rng = sample_rng(seed, split, i)
    levels = config_mod.float_list(cfg["noise_levels"]) or [cfg["noise"]]
    noise = float(levels[rng.integers(len(levels))])
    text = random_text(rng, charset, cfg["min_label_len"], cfg["max_label_len"])
    style = {
        "fonts": cfg["_fonts"],
        "charset": charset,
        "noise": noise,
        "height": cfg["render_height"],
        "width": cfg["render_width"],
    }
    s = render_source_sample(rng, text, style)
    return to_uint8(s.image), s.text, s.background_id, noise


def sample_id(split: str, i: int) -> str:
    return f"{split}_{i:06d}"


def prepare_out_dir(out, force=False):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_corpus(out, n: int, split: str, cfg: dict, force=False, workers=1) -> dict:
    """Render ``n`` samples into ``out`` and return the manifest.

    Layout: ``images/<id>.png`` (8-bit gray), ``labels.tsv`` (``id<TAB>text``)
    and ``manifest.json``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLIT_CODES:
        raise ValueError(f"split must be one of {sorted(SPLIT_CODES)}")
    charset = Charset(cfg["charset"])
    fonts = resolve_fonts(cfg, charset)
    out = prepare_out_dir(out, force)
    (out / "images").mkdir()
    cfg_items = tuple(sorted({**cfg, "_fonts": fonts}.items()))
    jobs = [(cfg["seed"], split, i, cfg_items) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_render_one, jobs, chunksize=32))
    else:
        results = map(_render_one, jobs)

    backgrounds, noises, rows = Counter(), Counter(), []
    for i, (img, text, kind, noise) in enumerate(results):
        sid = sample_id(split, i)
        Image.fromarray(img).save(out / "images" / f"{sid}.png")
        rows.append(f"{sid}\t{text}\n")
        backgrounds[kind] += 1
        noises[f"{noise:g}"] += 1
    (out / "labels.tsv").write_text("".join(rows), encoding="utf-8")
    manifest = {
        "count": n,
        "split": split,
        "seed": cfg["seed"],
        "backgrounds": {k: backgrounds.get(k, 0) for k in BACKGROUNDS},
        "noise": dict(sorted(noises.items())),
        "fonts": [os.path.basename(f) for f in fonts],
        "config_hash": config_mod.config_hash(cfg),
        "config": cfg,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_labels(path) -> list[tuple[str, str]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                sid, text = line.split("\t", 1)
                rows.append((sid, text))
    return rows


def load_corpus(root):
    """Return ``(ids, texts, images)`` with images as a uint8 ``(N, H, W)`` array."""
    root = Path(root)
    labels = root / "labels.tsv"
    if not labels.exists():
        raise FileNotFoundError(f"{labels} not found")
    rows = read_labels(labels)
    ids = [r[0] for r in rows]
    texts = [r[1] for r in rows]
    images = np.stack([np.asarray(Image.open(root / "images" / f"{sid}.png").convert("L")) for sid in ids])
    return ids, texts, images
