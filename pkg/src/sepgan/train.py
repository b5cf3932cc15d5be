"""Recognizer pretraining and the interactive joint training loop.

One joint step:

1. ``I' = G(I)`` for a batch of source images; render ``B`` target glyphs.
2. Greedy predictions ``P`` on ``I'`` (no grad), then a teacher-forced pass on
   ``(I', GT)`` gives ``L_reg`` and the attention masks shared with ``D``.
3. Keep samples with ``len(P) == len(GT)`` and edit distance <= 1.
4. If any are kept: update ``D`` when ``k ~ U[0,1) <= beta``, always update
   ``G``, then recompute ``beta``.

Randomness is keyed on ``(seed, stream, iteration)`` so a resumed run replays
exactly what an uninterrupted run would have done.
"""
import csv
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, config as config_mod
from .charset import Charset
from .evaluation import edit_distance
from .gan import build_gan, extract_char_features, gather_chars, per_sample_char_nll, style_losses
from .recognizer import build_recognizer, resize
from .synth import load_corpus, render_target_batch, resolve_fonts

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["iter", "l_reg", "l_s", "l_cd", "l_cg", "beta", "acc_src", "acc_gen"]

# independent random streams
_SRC_BATCH, _TARGETS, _K_DRAW, _PRETRAIN_BATCH = 3, 4, 5, 6


def stream_rng(seed, stream, iteration):
    return np.random.default_rng([seed, stream, iteration])


def lr_at_epoch(base_lr, epoch, milestones=(2, 4), gamma=0.1):
    """Step decay: ``base * gamma**(#milestones <= epoch)``; epochs count from 0."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


# -- filtering and balance factor ------------------------------------------


@dataclass
class FilteredBatch:
    indices: list
    images: object
    preds: list
    labels: list

    def __len__(self):
        return len(self.indices)


def keep_pair(pred: str, gt: str) -> bool:
    return len(pred) == len(gt) and edit_distance(pred, gt) <= 1


def filter_batch(preds, labels, images=None) -> FilteredBatch:
    """Keep samples whose prediction has the label's length and at most one error."""
    if len(preds) != len(labels):
        raise ValueError("predictions and labels must be aligned")
    idx = [i for i, (p, g) in enumerate(zip(preds, labels)) if keep_pair(p, g)]
    kept = None
    if images is not None:
        kept = images[idx] if idx else images[:0]
    return FilteredBatch(idx, kept, [preds[i] for i in idx], [labels[i] for i in idx])


def update_beta(beta, l_s, l_cd, l_cg, eps=1e-3):
    """``clamp((L_s + L_c_D) / (L_s + L_c_G), eps, 1)``; keeps ``beta`` on bad input."""
    vals = [float(v) for v in (l_s, l_cd, l_cg)]
    if not all(math.isfinite(v) for v in vals):
        log.warning("non-finite losses %s; beta kept at %g", vals, beta)
        return beta
    l_s, l_cd, l_cg = vals
    num, den = l_s + l_cd, l_s + l_cg
    if den <= 0 or num <= 0:
        log.warning("non-positive loss sums (%g, %g); beta kept at %g", num, den, beta)
        return beta
    return min(1.0, max(eps, num / den))


# -- state -------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: dict
    charset: Charset
    recognizer: torch.nn.Module
    generator: torch.nn.Module = None
    discriminator: torch.nn.Module = None
    optimizers: dict = field(default_factory=dict)
    beta: float = 1.0
    iteration: int = 0
    fonts: list = field(default_factory=list)

    def modules(self):
        out = {"recognizer": self.recognizer}
        if self.generator is not None:
            out["generator"] = self.generator
            out["discriminator"] = self.discriminator
        return out


def _adam(module, lr):
    return torch.optim.Adam(module.parameters(), lr=lr)


def init_state(cfg, with_gan=True) -> TrainState:
    charset = Charset(cfg["charset"])
    torch.manual_seed(cfg["seed"])
    dev = checkpoint.device()
    rec = build_recognizer(cfg, charset).to(dev)
    state = TrainState(cfg, charset, rec)
    state.optimizers["recognizer"] = _adam(rec, cfg["rec_lr"])
    if with_gan:
        gen, disc = build_gan(cfg, charset)
        state.generator, state.discriminator = gen.to(dev), disc.to(dev)
        state.optimizers["generator"] = _adam(gen, cfg["lr"])
        state.optimizers["discriminator"] = _adam(disc, cfg["lr"])
        state.fonts = resolve_fonts(cfg, charset)
    return state


def save_state(state, ckpt_root, phase):
    return checkpoint.save(
        ckpt_root, state.iteration, state.cfg, state.modules(), state.optimizers,
        beta=state.beta, phase=phase,
    )


def restore_state(state, ckpt_dir, parts=None):
    ckpt_dir = checkpoint.latest(ckpt_dir)
    manifest = checkpoint.read_manifest(ckpt_dir)
    for name, module in state.modules().items():
        if parts is not None and name not in parts:
            continue
        checkpoint.load_part(ckpt_dir, name, module, state.optimizers.get(name))
    return manifest


# -- data --------------------------------------------------------------------


class Corpus:
    """In-memory source corpus (uint8 images) with deterministic batch draws."""

    def __init__(self, root):
        self.ids, self.texts, self.images = load_corpus(root)
        if not self.ids:
            raise ValueError(f"corpus {root} is empty")

    def __len__(self):
        return len(self.ids)

    def batch(self, rng, size):
        idx = rng.choice(len(self), size=size, replace=len(self) < size)
        return self.tensor(idx), [self.texts[i] for i in idx]

    def tensor(self, idx):
        imgs = torch.from_numpy(self.images[np.asarray(idx)]).float().div_(255.0)
        return imgs.unsqueeze(1).to(checkpoint.device())


class TargetProducer:
    """Renders target batches ahead of the training loop into a bounded queue."""

    def __init__(self, cfg, charset, fonts, start, stop, batch_size):
        self.q = queue.Queue(maxsize=max(1, cfg["prefetch"]))
        self._stop = threading.Event()
        args = (cfg["seed"], charset, fonts, start, stop, batch_size, cfg["target_size"])
        self.thread = threading.Thread(target=self._run, args=args, daemon=True)
        self.thread.start()

    def _run(self, seed, charset, fonts, start, stop, batch_size, size):
        for it in range(start, stop):
            item = render_target_batch(stream_rng(seed, _TARGETS, it), charset, fonts, batch_size, size)
            while not self._stop.is_set():
                try:
                    self.q.put((it, item), timeout=0.1)
                    break
                except queue.Full:
                    continue
            if self._stop.is_set():
                return

    def get(self, it):
        got, (images, labels) = self.q.get()
        if got != it:
            raise RuntimeError(f"target producer out of sync: {got} != {it}")
        return torch.from_numpy(images).unsqueeze(1).to(checkpoint.device()), torch.from_numpy(labels).to(checkpoint.device())

    def close(self):
        self._stop.set()
        self.thread.join(timeout=5)


def target_batch(cfg, charset, fonts, it, batch_size):
    images, labels = render_target_batch(stream_rng(cfg["seed"], _TARGETS, it), charset, fonts, batch_size, cfg["target_size"])
    dev = checkpoint.device()
    return torch.from_numpy(images).unsqueeze(1).to(dev), torch.from_numpy(labels).to(dev)


def word_accuracy(preds, labels):
    return sum(p == g for p, g in zip(preds, labels)) / max(1, len(labels))


# -- steps -------------------------------------------------------------------


@dataclass
class StepResult:
    l_reg: float
    l_s: float = math.nan
    l_s_g: float = math.nan
    l_cd: float = math.nan
    l_cg: float = math.nan
    kept: int = 0
    d_updated: bool = False
    g_updated: bool = False
    preds: list = None
    generated: torch.Tensor = None


def _check_finite(name, value, dump):
    if not torch.isfinite(value).all():
        if dump is not None:
            torch.save(dump, dump["path"])
        raise FloatingPointError(f"{name} is not finite")


def joint_step(state: TrainState, images, labels, tgt_images, tgt_labels, k, dump_path=None) -> StepResult:
    """One interactive joint training step; mutates ``state`` in place.

    ``images`` are source images at generator size, ``k`` the uniform draw
    deciding whether the discriminator is updated.
    """
    cfg = state.cfg
    G, R, D = state.generator, state.recognizer, state.discriminator
    opt = state.optimizers
    rec_size = R.input_size
    dump = {"path": dump_path, "images": images, "labels": labels, "iteration": state.iteration} if dump_path else None

    G.train()
    generated = G(images)
    rec_in = resize(generated, rec_size)

    R.eval()
    preds = [p.text for p in R.predict(rec_in.detach())]
    R.train()

    opt["recognizer"].zero_grad(set_to_none=True)
    opt["generator"].zero_grad(set_to_none=True)
    through_gen = cfg["rec_through_gen"]
    l_reg, masks = R.loss(rec_in if through_gen else rec_in.detach(), labels)
    _check_finite("L_reg", l_reg, dump)
    l_reg.backward(retain_graph=through_gen or cfg["share_mask_grad"])

    result = StepResult(l_reg.item(), preds=preds, generated=generated.detach())
    chosen = filter_batch(preds, labels)
    if not chosen.indices:
        opt["recognizer"].step()
        if through_gen:
            opt["generator"].step()
        return result

    idx = torch.tensor(chosen.indices, device=images.device)
    lengths = [len(g) for g in chosen.labels]
    n_kept = len(idx)
    pred_ids = torch.tensor([c for p in chosen.preds for c in state.charset.encode(p)], device=images.device)
    gt_ids = torch.tensor([c for g in chosen.labels for c in state.charset.encode(g)], device=images.device)
    kept_masks = masks[idx]

    # discriminator phase: generated images and masks are constants
    D.train()
    opt["discriminator"].zero_grad(set_to_none=True)
    E = D.encode(rec_in[idx].detach())
    chars, owners = gather_chars(extract_char_features(E, kept_masks.detach()), lengths)
    f_tgt = D.pool_target(tgt_images)
    style_tgt = D.style(f_tgt).squeeze(1)
    l_s_d, _ = style_losses(style_tgt, D.style(chars).squeeze(1))
    l_c_d = torch.nn.functional.cross_entropy(D.content(f_tgt), tgt_labels) + \
        per_sample_char_nll(D.content(chars), pred_ids, owners, n_kept).mean()
    _check_finite("L_D", l_s_d + l_c_d, dump)
    if k <= state.beta:
        (l_s_d + l_c_d).backward()
        opt["discriminator"].step()
        result.d_updated = True

    # generator phase: gradients reach G through I'; D is evaluated, not stepped
    E = D.encode(rec_in[idx])
    gen_masks = kept_masks if cfg["share_mask_grad"] else kept_masks.detach()
    chars, owners = gather_chars(extract_char_features(E, gen_masks), lengths)
    _, l_s_g = style_losses(style_tgt.detach(), D.style(chars).squeeze(1))
    l_c_g = per_sample_char_nll(D.content(chars), gt_ids, owners, n_kept).mean()
    _check_finite("L_G", l_s_g + l_c_g, dump)
    (l_s_g + l_c_g).backward()
    opt["generator"].step()
    opt["discriminator"].zero_grad(set_to_none=True)
    opt["recognizer"].step()
    result.g_updated = True

    result.l_s, result.l_s_g = l_s_d.item(), l_s_g.item()
    result.l_cd, result.l_cg = l_c_d.item(), l_c_g.item()
    result.kept = n_kept
    state.beta = update_beta(state.beta, result.l_s, result.l_cd, result.l_cg, cfg["beta_eps"])
    return result


def recognizer_step(state: TrainState, images, labels) -> float:
    R = state.recognizer
    R.train()
    opt = state.optimizers["recognizer"]
    opt.zero_grad(set_to_none=True)
    loss = R.recognition_loss(resize(images, R.input_size), labels)
    if not torch.isfinite(loss):
        raise FloatingPointError("L_reg is not finite")
    loss.backward()
    opt.step()
    return loss.item()


@torch.no_grad()
def recognize(recognizer, images, batch_size=256):
    recognizer.eval()
    out = []
    for s in range(0, images.shape[0], batch_size):
        out += recognizer.predict(resize(images[s:s + batch_size], recognizer.input_size))
    return out


# -- loops -------------------------------------------------------------------


def _epoch_iters(cfg, corpus_size):
    return cfg["epoch_iters"] or max(1, corpus_size // cfg["batch_size"])


def _prepare(cfg):
    if cfg["threads"] > 0:
        torch.set_num_threads(cfg["threads"])
    torch.use_deterministic_algorithms(True, warn_only=True)


def pretrain_iterations(cfg, corpus_size):
    if cfg["pretrain_iters"] > 0:
        return cfg["pretrain_iters"]
    return int(round(cfg["pretrain_epochs"] * _epoch_iters(cfg, corpus_size)))


def pretrain_recognizer(cfg, out, corpus=None, iterations=None, state=None, callback=None):
    """Train the recognizer alone on source images; checkpoints go to ``out/ckpt``.

    Resumes from ``cfg['resume']`` when set. Returns the final state.
    """
    _prepare(cfg)
    out = Path(out)
    corpus = corpus or Corpus(cfg["data"])
    state = state or init_state(cfg, with_gan=False)
    if cfg["resume"]:
        manifest = restore_state(state, cfg["resume"], parts=("recognizer",))
        state.iteration = manifest["iteration"]
    total = iterations if iterations is not None else pretrain_iterations(cfg, len(corpus))
    epoch_iters = _epoch_iters(cfg, len(corpus))
    milestones = config_mod.int_list(cfg["lr_milestones"])
    ckpt_root = out / "ckpt"
    metrics_path = out / "pretrain_metrics.csv"
    new_file = not metrics_path.exists() or state.iteration == 0
    out.mkdir(parents=True, exist_ok=True)
    with open(metrics_path, "w" if new_file else "a", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(["iter", "l_reg", "acc"])
        while state.iteration < total:
            it = state.iteration
            set_lr(state.optimizers["recognizer"], lr_at_epoch(cfg["rec_lr"], it // epoch_iters, milestones, cfg["lr_gamma"]))
            images, labels = corpus.batch(stream_rng(cfg["seed"], _PRETRAIN_BATCH, it), cfg["batch_size"])
            loss = recognizer_step(state, images, labels)
            state.iteration += 1
            if state.iteration % cfg["log_interval"] == 0:
                acc = word_accuracy([p.text for p in recognize(state.recognizer, images)], labels)
                writer.writerow([state.iteration, f"{loss:.6f}", f"{acc:.4f}"])
                f.flush()
                log.info("pretrain %d loss %.4f acc %.3f", state.iteration, loss, acc)
                if callback is not None and callback(state, loss, acc):
                    break
            if state.iteration % cfg["ckpt_interval"] == 0:
                save_state(state, ckpt_root, "pretrain")
    save_state(state, ckpt_root, "pretrain")
    return state


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def train(cfg, out, corpus=None):
    """Pretrain (unless a recognizer checkpoint is given) then run the joint loop.

    Writes ``metrics.csv``, ``ckpt/<iter>/`` checkpoints, ``samples/<iter>.png``
    grids and a ``metrics.png`` figure under ``out``. Returns the final state.
    """
    from . import plotting

    _prepare(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_mod.dump(cfg))
    corpus = corpus or Corpus(cfg["data"])
    state = init_state(cfg)
    ckpt_root = out / "ckpt"

    if cfg["resume"]:
        manifest = restore_state(state, cfg["resume"])
        state.iteration = manifest["iteration"]
        state.beta = manifest["beta"]
    else:
        if cfg["pretrained"]:
            restore_state(state, cfg["pretrained"], parts=("recognizer",))
        else:
            pre = pretrain_recognizer({**cfg, "resume": ""}, out / "pretrain", corpus)
            state.recognizer.load_state_dict(pre.recognizer.state_dict())
        # fresh recognizer optimizer for the joint phase
        state.optimizers["recognizer"] = _adam(state.recognizer, cfg["rec_lr"])
        state.iteration = 0
        state.beta = 1.0

    epoch_iters = _epoch_iters(cfg, len(corpus))
    milestones = config_mod.int_list(cfg["lr_milestones"])
    gen_size = (cfg["gen_height"], cfg["gen_width"])
    metrics_path = out / "metrics.csv"
    resumed = state.iteration > 0 and metrics_path.exists()
    if resumed:
        # drop rows past the checkpoint so the file matches an uninterrupted run
        with open(metrics_path, newline="") as f:
            rows = [r for r in csv.reader(f)]
        rows = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= state.iteration]
        with open(metrics_path, "w", newline="") as f:
            csv.writer(f).writerows(rows)

    producer = TargetProducer(cfg, state.charset, state.fonts, state.iteration, cfg["iterations"], cfg["batch_size"])
    try:
        with open(metrics_path, "a" if resumed else "w", newline="") as f:
            writer = csv.writer(f)
            if not resumed:
                writer.writerow(METRICS_COLUMNS)
            while state.iteration < cfg["iterations"]:
                it = state.iteration
                epoch = it // epoch_iters
                set_lr(state.optimizers["recognizer"], lr_at_epoch(cfg["rec_lr"], epoch, milestones, cfg["lr_gamma"]))
                for name in ("generator", "discriminator"):
                    set_lr(state.optimizers[name], lr_at_epoch(cfg["lr"], epoch, milestones, cfg["lr_gamma"]))
                images, labels = corpus.batch(stream_rng(cfg["seed"], _SRC_BATCH, it), cfg["batch_size"])
                images = resize(images, gen_size)
                tgt_images, tgt_labels = producer.get(it)
                k = float(stream_rng(cfg["seed"], _K_DRAW, it).random())
                res = joint_step(state, images, labels, tgt_images, tgt_labels, k, dump_path=out / "nan_dump.pt")
                state.iteration += 1
                if state.iteration % cfg["log_interval"] == 0:
                    acc_src = word_accuracy([p.text for p in recognize(state.recognizer, images)], labels)
                    acc_gen = word_accuracy(res.preds, labels)
                    writer.writerow([state.iteration, _fmt(res.l_reg), _fmt(res.l_s), _fmt(res.l_cd),
                                     _fmt(res.l_cg), repr(state.beta), f"{acc_src:.4f}", f"{acc_gen:.4f}"])
                    f.flush()
                    log.info("iter %d l_reg %.3f l_s %.3f l_cd %.3f l_cg %.3f beta %.3f kept %d",
                             state.iteration, res.l_reg, res.l_s, res.l_cd, res.l_cg, state.beta, res.kept)
                if cfg["sample_interval"] and state.iteration % cfg["sample_interval"] == 0:
                    grid = plotting.pair_grid(images[:8, 0].cpu().numpy(), res.generated[:8, 0].cpu().numpy())
                    plotting.save_png(grid, out / "samples" / f"{state.iteration}.png")
                if state.iteration % cfg["ckpt_interval"] == 0:
                    save_state(state, ckpt_root, "joint")
    finally:
        producer.close()
    save_state(state, ckpt_root, "joint")
    plotting.plot_metrics(metrics_path, out / "metrics.png")
    return state
