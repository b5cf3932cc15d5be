"""Word accuracy, edit distance, lexicon decoding, Otsu baseline and the
source/generated confidence ensemble.
"""
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .charset import Charset, normalize_text

MODES = ("src", "gen", "ensemble", "otsu")
RECORD_FIELDS = ["id", "gt", "pred_src", "conf_src", "pred_gen", "conf_gen", "chosen", "pred_otsu", "conf_otsu"]


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lexicon_decode(pred: str, lexicon) -> str:
    """Nearest lexicon word by edit distance; ties go to the earliest word."""
    if not lexicon:
        raise ValueError("lexicon is empty")
    best, best_d = None, None
    for word in lexicon:
        d = edit_distance(pred, word)
        if best_d is None or d < best_d:
            best, best_d = word, d
            if d == 0:
                break
    return best


def read_lexicon(path, charset: Charset = None) -> list[str]:
    words = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            w = line.strip()
            if w:
                words.append(normalize_text(w, charset) if charset else w)
    if not words:
        raise ValueError(f"lexicon {path} is empty")
    return words


# -- Otsu ------------------------------------------------------------------


def to_levels(image) -> np.ndarray:
    """Map a float image in [0,1] (or uint8) onto 8-bit levels."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def otsu_threshold(image):
    """Global threshold over the 256-bin histogram.

    Level ``t`` splits pixels into ``<= t`` and ``> t``. The score
    ``(N*S0 - n0*S)**2 / (n0*n1)`` is proportional to the between-class
    variance and is compared in exact integer arithmetic; the first maximum
    wins. Returns ``None`` for images with a single level.
    """
    hist = np.bincount(to_levels(image).ravel(), minlength=256).astype(np.int64)
    n_total = int(hist.sum())
    s_total = int((hist * np.arange(256)).sum())
    n0 = s0 = 0
    best_t, best_num, best_den = None, 0, 1
    for t in range(255):
        n0 += int(hist[t])
        s0 += t * int(hist[t])
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (n_total * s0 - n0 * s_total) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def otsu_binarize(image):
    """Return ``(binary, threshold, degenerate)``.

    ``binary`` is float32 with foreground 0 on background 1, foreground being the
    smaller class (the darker one on a tie). Single-level images come back as
    all background with ``degenerate=True``.
    """
    levels = to_levels(image)
    t = otsu_threshold(levels)
    if t is None:
        return np.ones(levels.shape, dtype=np.float32), None, True
    high = levels > t
    n_high = int(high.sum())
    fg = high if n_high < high.size - n_high else ~high
    return np.where(fg, 0.0, 1.0).astype(np.float32), t, False


# -- ensemble ----------------------------------------------------------------


def choose(pred_src, conf_src, pred_gen, conf_gen):
    """Higher sequence confidence wins; ties go to the generated image."""
    if conf_gen >= conf_src:
        return pred_gen, "gen", conf_gen
    return pred_src, "src", conf_src


@torch.no_grad()
def ensemble_predict(image_src, recognizer, generator):
    """Decode a source image and its generated version as one batch.

    ``image_src`` is ``(1, H, W)`` or ``(H, W)`` at generator size. Returns
    ``(text, provenance, src_prediction, gen_prediction)``.
    """
    from .recognizer import resize

    x = torch.as_tensor(image_src, dtype=torch.float32)
    while x.dim() < 4:
        x = x.unsqueeze(0)
    x = resize(x, generator.input_size)
    generator.eval()
    recognizer.eval()
    gen = generator(x)
    batch = torch.cat([resize(x, recognizer.input_size), resize(gen, recognizer.input_size)])
    p_src, p_gen = recognizer.predict(batch)
    text, provenance, _ = choose(p_src.text, p_src.confidence, p_gen.text, p_gen.confidence)
    return text, provenance, p_src, p_gen


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    count: int
    accuracy: dict
    records: list = field(default_factory=list)
    lexicon: str = ""
    config_hash: str = ""
    checkpoint: str = ""

    def summary(self):
        d = asdict(self)
        d.pop("records")
        return d


def accuracy(preds, gts, charset=None) -> float:
    if not gts:
        return 0.0
    hits = sum(normalize_text(p, charset) == normalize_text(g, charset) for p, g in zip(preds, gts))
    return hits / len(gts)


@torch.no_grad()
def evaluate(ckpt, data, mode="gen", lexicon=None, batch_size=64) -> EvalReport:
    """Score a checkpoint on a labelled corpus.

    ``src`` recognizes the source images, ``gen`` the generator outputs,
    ``ensemble`` both (per-image higher confidence), ``otsu`` the Otsu-binarized
    source images (the source branch is decoded too, for reference).
    """
    from . import checkpoint as ckpt_mod
    from .recognizer import resize
    from .synth import load_corpus

    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    ckpt_dir = ckpt_mod.latest(ckpt)
    parts = ("recognizer", "generator") if mode in ("gen", "ensemble") else ("recognizer",)
    models, cfg, _ = ckpt_mod.load_models(ckpt_dir, parts)
    charset = Charset(cfg["charset"])
    rec = models["recognizer"]
    gen = models.get("generator")
    ids, texts, images = load_corpus(data)
    lex = read_lexicon(lexicon, charset) if lexicon else None
    dev = ckpt_mod.device()
    gen_size = (cfg["gen_height"], cfg["gen_width"])

    def finish(pred):
        return lexicon_decode(pred, lex) if lex else pred

    records = []
    for s in range(0, len(ids), batch_size):
        batch = torch.from_numpy(images[s:s + batch_size]).float().div_(255.0).unsqueeze(1).to(dev)
        n = batch.shape[0]
        rows = [{"id": ids[s + i], "gt": texts[s + i]} for i in range(n)]
        stacks, branches = [], []
        if mode in ("src", "ensemble", "otsu"):
            stacks.append(resize(batch, rec.input_size))
            branches.append("src")
        if mode in ("gen", "ensemble"):
            stacks.append(resize(gen(resize(batch, gen_size)), rec.input_size))
            branches.append("gen")
        if mode == "otsu":
            binar = np.stack([otsu_binarize(img)[0] for img in images[s:s + batch_size]])
            stacks.append(resize(torch.from_numpy(binar).unsqueeze(1).to(dev), rec.input_size))
            branches.append("otsu")
        preds = rec.predict(torch.cat(stacks))
        for b, name in enumerate(branches):
            for i in range(n):
                p = preds[b * n + i]
                rows[i][f"pred_{name}"] = finish(p.text)
                rows[i][f"conf_{name}"] = p.confidence
        for row in rows:
            if mode == "ensemble":
                _, row["chosen"], _ = choose(row["pred_src"], row["conf_src"], row["pred_gen"], row["conf_gen"])
            records.append(row)

    gts = [r["gt"] for r in records]
    acc = {}
    for name in ("src", "gen", "otsu"):
        if f"pred_{name}" in records[0]:
            acc[name] = accuracy([r[f"pred_{name}"] for r in records], gts, charset)
    if mode == "ensemble":
        acc["ensemble"] = accuracy([r[f"pred_{r['chosen']}"] for r in records], gts, charset)
    return EvalReport(mode, len(records), acc, records, str(lexicon or ""),
                      config_mod.config_hash(cfg), str(ckpt_dir))


def write_report(report: EvalReport, out, figure=True):
    """``report.json`` + ``records.csv`` (+ ``report.png``) under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    with open(out / "records.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RECORD_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for r in report.records:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if figure:
        from . import plotting

        plotting.plot_report(report, out / "report.png")
    return out
