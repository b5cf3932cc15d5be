"""Background-normalizing generator, character-level discriminator and GAN losses.

The discriminator never looks at a whole word. Its encoder produces a feature
sequence with the same length as the recognizer's, and per-character features
are pooled from it with the recognizer's attention masks. Target samples (one
clean glyph) are globally average-pooled instead.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .charset import Charset
from .config import int_list
from .recognizer import sequence_length


class GenUnit(nn.Module):
    """1x1 conv followed by two 3x3 convs, with a projected shortcut."""

    def __init__(self, cin, cout, stride=1, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout),
        )
        self.shortcut = None
        if cin != cout or stride != 1:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.body(x) + skip)


class Generator(nn.Module):
    """Eight residual units, FPN-like.

    Units 1-3 halve the resolution, unit 4 keeps it; units 5-8 mirror them with
    nearest-neighbour upsampling in 6-8. Outputs of units 3 and 5 are summed
    before unit 6. Head: 3x3 conv (16) -> 3x3 conv (1) -> sigmoid.
    """

    def __init__(self, channels=(64, 128, 256, 256), input_size=(64, 256)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.input_size = tuple(input_size)
        self.down = nn.ModuleList([
            GenUnit(1, c1, stride=2),
            GenUnit(c1, c2, stride=2),
            GenUnit(c2, c3, stride=2),
            GenUnit(c3, c4),
        ])
        self.up = nn.ModuleList([
            GenUnit(c4, c4),
            GenUnit(c4, c3, upsample=True),
            GenUnit(c3, c2, upsample=True),
            GenUnit(c2, c1, upsample=True),
        ])
        if c3 != c4:
            raise ValueError("unit 3 and unit 5 outputs must have equal channels for the skip sum")
        self.head = nn.Sequential(nn.Conv2d(c1, 16, 3, 1, 1), nn.ReLU(inplace=True), nn.Conv2d(16, 1, 3, 1, 1))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != self.input_size:
            raise ValueError(f"expected (N, 1, {self.input_size[0]}, {self.input_size[1]}) input, got {tuple(x.shape)}")
        x = x * 2.0 - 1.0
        x = self.down[0](x)
        x = self.down[1](x)
        u3 = self.down[2](x)
        x = self.down[3](u3)
        x = self.up[0](x) + u3
        for unit in self.up[1:]:
            x = unit(x)
        return torch.sigmoid(self.head(x))


# (pool kernel after the layer) for layers 1..7; 0-based indices 0, 1, 3, 5
_POOLS = {0: (2, 2), 1: (2, 2), 3: (2, 1), 5: (2, 1)}


def disc_sequence_length(width: int) -> int:
    for k in ((2, 2), (2, 2)):
        width = -(-width // k[1])  # ceil-mode average pooling
    return width


class Discriminator(nn.Module):
    """Seven-layer conv encoder plus a style head (scalar) and a content head."""

    def __init__(self, charset: Charset, channels=(16, 64, 128, 128, 192, 256, 256)):
        super().__init__()
        if len(channels) != 7:
            raise ValueError("discriminator encoder needs seven filter counts")
        layers, cin = [], 1
        for i, cout in enumerate(channels):
            kernel, pad = (2, 0) if i == 6 else (3, 1)
            layers.append(nn.Conv2d(cin, cout, kernel, 1, pad))
            cin = cout
        self.convs = nn.ModuleList(layers)
        self.out_channels = cin
        self.style = nn.Linear(cin, 1)
        self.content = nn.Linear(cin, len(charset))

    def encode_map(self, x):
        x = x * 2.0 - 1.0
        for i, conv in enumerate(self.convs):
            if i == 6:
                # keep the width: the 2x2 kernel only collapses the last two rows
                x = F.pad(x, (0, 1, 0, 0))
            x = F.leaky_relu(conv(x), 0.2)
            if i in _POOLS:
                x = F.avg_pool2d(x, _POOLS[i], _POOLS[i], ceil_mode=True)
        return x

    def encode(self, x):
        """``(N, 1, 32, W)`` -> feature sequence ``(N, n, C)``."""
        fmap = self.encode_map(x)
        if fmap.shape[2] != 1:
            raise ValueError(f"encoder output height is {fmap.shape[2]}, expected 1")
        return fmap.squeeze(2).transpose(1, 2)

    def pool_target(self, x):
        """Global average of the encoder map: ``(N, 1, 32, 32)`` -> ``(N, C)``."""
        return self.encode_map(x).mean(dim=(2, 3))


def check_mask_sharing(rec_width: int, rec_height: int, preset: str) -> int:
    """Raise unless discriminator and recognizer sequences have equal length."""
    if rec_height != 32:
        raise ValueError("discriminator encoder expects 32-pixel-high inputs")
    n_rec = sequence_length(rec_width, preset)
    n_disc = disc_sequence_length(rec_width)
    if n_rec != n_disc:
        raise ValueError(f"sequence lengths differ: recognizer {n_rec}, discriminator {n_disc}")
    return n_rec


def build_gan(cfg: dict, charset: Charset):
    check_mask_sharing(cfg["rec_width"], cfg["rec_height"], cfg["backbone"])
    gen = Generator(tuple(int_list(cfg["gen_channels"])), (cfg["gen_height"], cfg["gen_width"]))
    disc = Discriminator(charset, tuple(int_list(cfg["disc_channels"])))
    return gen, disc


# -- character features ------------------------------------------------------


def extract_char_features(E, alpha):
    """``F_t = sum_i alpha_{t,i} E_i``.

    Accepts a single sequence ``E (n, C)`` with ``alpha (n,)`` or ``(T, n)``, or
    batches ``E (N, n, C)`` with ``alpha (N, T, n)``.
    """
    if alpha.shape[-1] != E.shape[-2]:
        raise ValueError(f"mask length {alpha.shape[-1]} != sequence length {E.shape[-2]}")
    return alpha @ E


def gather_chars(features, lengths):
    """Flatten ``(N, T, C)`` to the ``(M, C)`` valid characters plus owner indices."""
    keep = torch.zeros(features.shape[:2], dtype=torch.bool, device=features.device)
    for i, n in enumerate(lengths):
        keep[i, :n] = True
    owners = torch.arange(features.shape[0], device=features.device).unsqueeze(1).expand_as(keep)
    return features[keep], owners[keep]


# -- losses ------------------------------------------------------------------


def style_losses(style_tgt, style_gen):
    """Least-squares style losses from raw (unsquashed) style scores.

    Returns ``(L_s_D, L_s_G)``: the discriminator pushes targets to 1 and
    generated characters to 0, the generator pushes its characters to 1.
    """
    if style_tgt.numel() == 0 or style_gen.numel() == 0:
        raise ValueError("style losses need non-empty batches")
    l_d = ((1.0 - style_tgt) ** 2).mean() + (style_gen ** 2).mean()
    l_g = ((1.0 - style_gen) ** 2).mean()
    return l_d, l_g


def per_sample_char_nll(logits, labels, owners, n_samples):
    """``-(1/|seq|) sum_t log Content(label_t | F_t)`` for each sample."""
    nll = F.cross_entropy(logits, labels, reduction="none")
    total = torch.zeros(n_samples, dtype=nll.dtype, device=nll.device).index_add(0, owners, nll)
    counts = torch.zeros(n_samples, dtype=nll.dtype, device=nll.device).index_add(0, owners, torch.ones_like(nll))
    return total / counts


def content_losses(gen_logits, pred_labels, gt_labels, owners, n_samples, tgt_logits, tgt_labels):
    """Content losses with the recognizer-feedback labelling.

    ``gen_logits`` are content logits for every kept generated character,
    ``pred_labels``/``gt_labels`` the recognizer prediction and ground truth for
    each of them, ``owners`` their sample index. The discriminator learns the
    recognizer's predictions; the generator is pulled towards the ground truth.
    Returns ``(L_c_D, L_c_G)``.
    """
    if gen_logits.shape[0] == 0 or tgt_logits.shape[0] == 0:
        raise ValueError("content losses need non-empty batches")
    for labels in (pred_labels, gt_labels, tgt_labels):
        if labels.numel() and (labels.min() < 0 or labels.max() >= gen_logits.shape[1]):
            raise ValueError("content label outside charset")
    tgt_term = F.cross_entropy(tgt_logits, tgt_labels)
    l_d = tgt_term + per_sample_char_nll(gen_logits, pred_labels, owners, n_samples).mean()
    l_g = per_sample_char_nll(gen_logits, gt_labels, owners, n_samples).mean()
    return l_d, l_g


def split_prediction_term(log_probs, pred, gt):
    """Split ``-(1/|P|) sum_t log Content(P_t|F_t)`` into correct/incorrect parts.

    For one sample: ``log_probs (T, K)``, ``pred``/``gt`` length ``T``. Returns
    ``(real_part, fake_part, undivided)`` with ``real_part + fake_part`` equal
    to ``undivided`` up to rounding.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt)
    picked = log_probs.gather(1, pred.unsqueeze(1)).squeeze(1)
    real = pred == gt
    size = pred.numel()
    real_part = -picked[real].sum() / size
    fake_part = -picked[~real].sum() / size
    undivided = -picked.sum() / size
    return real_part, fake_part, undivided
