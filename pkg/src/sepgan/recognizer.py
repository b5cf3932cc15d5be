"""Residual backbone + attention GRU decoder.

The decoder follows the usual additive attention recipe::

    e_{t,i} = w^T tanh(W_s s_{t-1} + W_h h_i + b)
    alpha_t = softmax(e_t)
    g_t     = sum_i alpha_{t,i} h_i
    s_t     = GRU(s_{t-1}, [embed(y_{t-1}); g_t])
    y_t     = softmax(W_out s_t + b_out)

Attention masks are returned alongside the distributions because the
discriminator pools its own features with them.
"""
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .charset import Charset

# (units, channels, stride) per stage; heights 32 -> 1, widths 100 -> 25
BACKBONES = {
    "desk": [(1, 32, (2, 2)), (2, 64, (2, 2)), (2, 96, (2, 1)), (2, 128, (2, 1)), (2, 128, (2, 1))],
    "resnet45": [(3, 32, (2, 2)), (4, 64, (2, 2)), (6, 128, (2, 1)), (6, 256, (2, 1)), (3, 512, (2, 1))],
    # for gradient checks only
    "tiny": [(1, 4, (2, 2)), (1, 4, (2, 2)), (1, 8, (2, 1)), (1, 8, (2, 1)), (1, 8, (2, 1))],
}


def conv_out(size, stride, kernel=3, padding=1):
    return (size + 2 * padding - kernel) // stride + 1


def sequence_length(width: int, preset="desk") -> int:
    """Feature sequence length produced for an input of ``width`` pixels."""
    for _, _, (_, sw) in BACKBONES[preset]:
        width = conv_out(width, sw)
    return width


def resize(images, size):
    """Bilinear resize of an ``(N, 1, H, W)`` batch; differentiable."""
    if tuple(images.shape[-2:]) == tuple(size):
        return images
    return F.interpolate(images, size=size, mode="bilinear", align_corners=False)


class ResidualUnit(nn.Module):
    def __init__(self, cin, cout, stride=(1, 1)):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if cin != cout or stride != (1, 1):
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Backbone(nn.Module):
    """Residual stages collapsing a 32-pixel-high image to a 1-D sequence."""

    def __init__(self, preset="desk", height=32):
        super().__init__()
        stages = BACKBONES[preset]
        stem = stages[0][1]
        self.stem = nn.Sequential(nn.Conv2d(1, stem, 3, 1, 1, bias=False), nn.BatchNorm2d(stem), nn.ReLU(inplace=True))
        layers, cin = [], stem
        for units, cout, stride in stages:
            for u in range(units):
                layers.append(ResidualUnit(cin, cout, stride if u == 0 else (1, 1)))
                cin = cout
        self.layers = nn.Sequential(*layers)
        self.out_channels = cin
        self.preset = preset
        h = height
        for _, _, (sh, _) in stages:
            h = conv_out(h, sh)
        if h != 1:
            raise ValueError(f"backbone {preset!r} maps height {height} to {h}, expected 1")

    def forward(self, x):
        x = self.layers(self.stem(x * 2.0 - 1.0))
        return x.squeeze(2).transpose(1, 2)  # (N, n, C)


class AttentionDecoder(nn.Module):
    def __init__(self, in_channels, num_classes, hidden_size=256, attn_size=256):
        super().__init__()
        self.num_classes = num_classes
        self.hidden_size = hidden_size
        self.W_s = nn.Linear(hidden_size, attn_size, bias=False)
        self.W_h = nn.Linear(in_channels, attn_size)  # its bias is b
        self.w = nn.Linear(attn_size, 1, bias=False)
        # one extra row for the <GO> token fed at the first step
        self.embed = nn.Embedding(num_classes + 1, hidden_size // 4)
        self.gru = nn.GRUCell(hidden_size // 4 + in_channels, hidden_size)
        self.out = nn.Linear(hidden_size, num_classes)

    @property
    def go_index(self):
        return self.num_classes

    def init_state(self, h):
        return h.new_zeros(h.shape[0], self.hidden_size)

    def attention_step(self, s_prev, h, proj_h=None):
        """Return ``(alpha, g)`` for state ``(N, S)`` and features ``(N, n, C)``."""
        if proj_h is None:
            proj_h = self.W_h(h)
        e = self.w(torch.tanh(self.W_s(s_prev).unsqueeze(1) + proj_h)).squeeze(-1)
        alpha = torch.softmax(e, dim=1)
        g = torch.bmm(alpha.unsqueeze(1), h).squeeze(1)
        return alpha, g

    def decode_step(self, s_prev, y_prev, g):
        """Return ``(s_t, logits_t)``; the distribution is ``softmax(logits_t)``."""
        s = self.gru(torch.cat([self.embed(y_prev), g], dim=1), s_prev)
        return s, self.out(s)

    def forward(self, h, targets):
        """Teacher-forced pass. ``targets`` is ``(N, T)`` including EOS.

        Returns logits ``(N, T, K)`` and attention masks ``(N, T, n)``.
        """
        n_batch, steps = targets.shape
        s = self.init_state(h)
        proj_h = self.W_h(h)
        y_prev = targets.new_full((n_batch,), self.go_index)
        logits, masks = [], []
        for t in range(steps):
            alpha, g = self.attention_step(s, h, proj_h)
            s, logit = self.decode_step(s, y_prev, g)
            logits.append(logit)
            masks.append(alpha)
            y_prev = targets[:, t]
        return torch.stack(logits, 1), torch.stack(masks, 1)

    @torch.no_grad()
    def greedy(self, h, max_steps):
        n_batch = h.shape[0]
        s = self.init_state(h)
        proj_h = self.W_h(h)
        y_prev = torch.full((n_batch,), self.go_index, dtype=torch.long, device=h.device)
        probs, masks, preds = [], [], []
        for _ in range(max_steps):
            alpha, g = self.attention_step(s, h, proj_h)
            s, logit = self.decode_step(s, y_prev, g)
            p = torch.softmax(logit, dim=1)
            y_prev = p.argmax(1)
            probs.append(p)
            masks.append(alpha)
            preds.append(y_prev)
            if bool((torch.stack(preds, 1) == self.num_classes - 1).any(1).all()):
                break
        return torch.stack(preds, 1), torch.stack(probs, 1), torch.stack(masks, 1)


@dataclass
class Prediction:
    text: str
    step_dists: torch.Tensor  # (steps, K), steps include the EOS step when emitted
    confidence: float
    masks: list = field(default_factory=list)

    @property
    def steps(self):
        return self.step_dists.shape[0]


def sequence_confidence(max_probs) -> float:
    """Geometric mean of per-step max probabilities."""
    return math.exp(float(torch.log(max_probs.double()).mean()))


class Recognizer(nn.Module):
    def __init__(self, charset: Charset, preset="desk", hidden_size=256, attn_size=256,
                 max_steps=25, input_size=(32, 100)):
        super().__init__()
        self.charset = charset
        self.input_size = tuple(input_size)
        self.max_steps = max_steps
        self.backbone = Backbone(preset, input_size[0])
        self.decoder = AttentionDecoder(self.backbone.out_channels, charset.num_classes, hidden_size, attn_size)

    @property
    def seq_len(self):
        return sequence_length(self.input_size[1], self.backbone.preset)

    def encode(self, images):
        if images.dim() != 4 or images.shape[1] != 1 or tuple(images.shape[-2:]) != self.input_size:
            raise ValueError(f"expected (N, 1, {self.input_size[0]}, {self.input_size[1]}) input, got {tuple(images.shape)}")
        return self.backbone(images)

    def targets(self, labels, device=None):
        """Pad encoded labels + EOS into ``(N, T)``; pad positions hold -100."""
        encoded = [self.charset.encode(s) + [self.charset.eos_index] for s in labels]
        steps = max(len(e) for e in encoded)
        out = torch.full((len(encoded), steps), -100, dtype=torch.long, device=device)
        for i, e in enumerate(encoded):
            out[i, : len(e)] = torch.tensor(e, dtype=torch.long)
        return out

    def forward(self, images, labels):
        """Teacher-forced logits and masks for a batch of label strings."""
        targets = self.targets(labels, images.device)
        h = self.encode(images)
        # padded steps feed EOS as y_prev; their outputs are masked out of the loss
        fed = targets.clamp(min=0).masked_fill(targets < 0, self.charset.eos_index)
        logits, masks = self.decoder(h, fed)
        return logits, masks, targets

    def loss(self, images, labels):
        logits, masks, targets = self(images, labels)
        return recognition_loss_from_logits(logits, targets), masks

    def recognition_loss(self, images, labels):
        return self.loss(images, labels)[0]

    @torch.no_grad()
    def predict(self, images) -> list[Prediction]:
        """Greedy decoding until EOS or ``max_steps``."""
        h = self.encode(images)
        preds, probs, masks = self.decoder.greedy(h, self.max_steps)
        eos = self.charset.eos_index
        out = []
        for i in range(images.shape[0]):
            row = preds[i].tolist()
            steps = row.index(eos) + 1 if eos in row else len(row)
            dists = probs[i, :steps]
            out.append(Prediction(
                text=self.charset.decode(row[:steps]),
                step_dists=dists,
                confidence=sequence_confidence(dists.max(1).values),
                masks=list(masks[i, :steps]),
            ))
        return out

    def decode_greedy(self, image) -> Prediction:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        return self.predict(image)[0]


def recognition_loss_from_logits(logits, targets):
    """Negative log-likelihood summed over steps, averaged over the batch."""
    nll = F.cross_entropy(logits.transpose(1, 2), targets, ignore_index=-100, reduction="none")
    return nll.sum(1).mean()


def recognition_loss_from_dists(dists, targets):
    """Same loss on explicit per-step distributions ``(N, T, K)``."""
    picked = dists.gather(2, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    nll = -torch.log(picked).masked_fill(targets < 0, 0.0)
    return nll.sum(1).mean()


def build_recognizer(cfg: dict, charset: Charset) -> Recognizer:
    return Recognizer(
        charset,
        preset=cfg["backbone"],
        hidden_size=cfg["hidden_size"],
        attn_size=cfg["attn_size"],
        max_steps=cfg["max_steps"],
        input_size=(cfg["rec_height"], cfg["rec_width"]),
    )
