import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import finite_difference_check, generator_loss_closures
from sepgan import config, recognizer as rec_mod
from sepgan.gan import (
    Discriminator,
    Generator,
    build_gan,
    check_mask_sharing,
    content_losses,
    extract_char_features,
    gather_chars,
    per_sample_char_nll,
    split_prediction_term,
    style_losses,
)
from sepgan.recognizer import Recognizer, resize
from sepgan.synth import render_target_sample

TINY_DISC = (2, 3, 3, 3, 3, 4, 4)


def test_generator_shape_and_range():
    gen = Generator((4, 8, 16, 16))
    y = gen(torch.rand(3, 1, 64, 256))
    assert y.shape == (3, 1, 64, 256)
    assert y.min() >= 0.0 and y.max() <= 1.0


def test_generator_deterministic_in_eval():
    gen = Generator((4, 8, 16, 16)).eval()
    x = torch.rand(1, 1, 64, 256)
    assert torch.equal(gen(x), gen(x))


def test_generator_rejects_wrong_size():
    with pytest.raises(ValueError):
        Generator((4, 8, 16, 16))(torch.rand(1, 1, 32, 100))


def test_generator_needs_matching_skip_channels():
    with pytest.raises(ValueError):
        Generator((4, 8, 16, 32))


def test_discriminator_sequence_length_default(charset):
    disc = Discriminator(charset)
    E = disc.encode(torch.zeros(2, 1, 32, 100))
    assert E.shape == (2, 25, 256)
    assert torch.isfinite(E).all()


@pytest.mark.parametrize("width", [100, 128, 161])
def test_sequence_lengths_agree(charset, width):
    rec = Recognizer(charset, preset="tiny", hidden_size=8, attn_size=4, input_size=(32, width)).eval()
    disc = Discriminator(charset, TINY_DISC)
    n_rec = rec.encode(torch.zeros(1, 1, 32, width)).shape[1]
    n_disc = disc.encode(torch.zeros(1, 1, 32, width)).shape[1]
    # overall horizontal stride is 4, rounding up
    assert n_rec == n_disc == math.ceil(width / 4)
    assert check_mask_sharing(width, 32, "tiny") == n_rec


def test_mask_sharing_mismatch_raises(monkeypatch):
    stride8 = [(1, 4, (2, 2)), (1, 4, (2, 2)), (1, 8, (2, 2)), (1, 8, (2, 1)), (1, 8, (2, 1))]
    monkeypatch.setitem(rec_mod.BACKBONES, "stride8", stride8)
    with pytest.raises(ValueError, match="sequence lengths differ"):
        check_mask_sharing(100, 32, "stride8")
    with pytest.raises(ValueError):
        build_gan(config.make(backbone="stride8"), None)
    with pytest.raises(ValueError):
        check_mask_sharing(100, 48, "desk")


def test_char_features_examples():
    E = torch.tensor([[2.0, 4.0], [0.0, 0.0]])
    assert torch.equal(extract_char_features(E, torch.tensor([0.5, 0.5])), torch.tensor([1.0, 2.0]))
    E = torch.randn(6, 3)
    one_hot = torch.zeros(6)
    one_hot[4] = 1.0
    assert torch.equal(extract_char_features(E, one_hot), E[4])
    assert torch.allclose(extract_char_features(E, torch.full((6,), 1 / 6)), E.mean(0), atol=1e-6)


def test_char_features_length_mismatch():
    with pytest.raises(ValueError):
        extract_char_features(torch.randn(5, 3), torch.full((4,), 0.25))


def test_gather_chars_keeps_valid_steps():
    feats = torch.arange(2 * 4 * 1, dtype=torch.float32).view(2, 4, 1)
    chars, owners = gather_chars(feats, [2, 3])
    assert chars.view(-1).tolist() == [0, 1, 4, 5, 6]
    assert owners.tolist() == [0, 0, 1, 1, 1]


def test_pool_target_is_spatial_mean(charset):
    disc = Discriminator(charset, TINY_DISC)
    x = torch.rand(2, 1, 32, 32)
    fmap = disc.encode_map(x)
    n, c, h, w = fmap.shape
    brute = torch.zeros(n, c)
    for i in range(h):
        for j in range(w):
            brute += fmap[:, :, i, j]
    assert torch.allclose(disc.pool_target(x), brute / (h * w), atol=1e-6)


def test_pool_target_of_constant_map(charset, monkeypatch):
    disc = Discriminator(charset, TINY_DISC)
    const = torch.tensor([1.5, -2.0, 0.25, 4.0]).view(1, 4, 1, 1).expand(3, 4, 2, 5)
    monkeypatch.setattr(disc, "encode_map", lambda x: const)
    assert torch.equal(disc.pool_target(torch.zeros(3, 1, 32, 32)), const[:, :, 0, 0])


def test_polarities_give_different_target_features(charset, fonts):
    torch.manual_seed(0)
    disc = Discriminator(charset)
    s = render_target_sample(np.random.default_rng(3), charset, fonts)
    x = torch.from_numpy(np.stack([s.image, 1.0 - s.image])).unsqueeze(1)
    f = disc.pool_target(x)
    assert 1.0 - F.cosine_similarity(f[0:1], f[1:2]).item() > 0


def test_style_loss_examples():
    l_d, _ = style_losses(torch.ones(4), torch.zeros(5))
    assert l_d.item() == 0.0
    _, l_g = style_losses(torch.rand(4), torch.ones(5))
    assert l_g.item() == 0.0
    _, l_g = style_losses(torch.rand(4), torch.full((5,), 0.5))
    assert l_g.item() == pytest.approx(0.25)


def test_style_loss_empty_batch():
    with pytest.raises(ValueError):
        style_losses(torch.ones(0), torch.ones(3))


def _content_case(n_chars=7, n_samples=3, n_tgt=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    owners = torch.tensor([0, 0, 1, 1, 1, 2, 2])[:n_chars]
    gt = torch.randint(0, 36, (n_chars,), generator=g)
    return owners, gt, torch.randn(n_chars, 36, generator=g), torch.randn(n_tgt, 36, generator=g), \
        torch.randint(0, 36, (n_tgt,), generator=g)


def test_content_prediction_equals_truth_makes_terms_equal():
    owners, gt, logits, tgt_logits, tgt_labels = _content_case()
    l_d, l_g = content_losses(logits, gt, gt, owners, 3, tgt_logits, tgt_labels)
    assert (l_d - F.cross_entropy(tgt_logits, tgt_labels)).item() == pytest.approx(l_g.item(), abs=1e-6)


def test_content_one_hot_correct_gives_zero():
    owners, gt, _, _, tgt_labels = _content_case()
    logits = F.one_hot(gt, 36).float() * 200.0
    tgt_logits = F.one_hot(tgt_labels, 36).float() * 200.0
    l_d, l_g = content_losses(logits, gt, gt, owners, 3, tgt_logits, tgt_labels)
    assert l_d.item() == 0.0 and l_g.item() == 0.0


def test_content_uniform_gives_log_36():
    owners, gt, _, _, tgt_labels = _content_case()
    _, l_g = content_losses(torch.zeros(7, 36), gt, gt, owners, 3, torch.zeros(4, 36), tgt_labels)
    assert l_g.item() == pytest.approx(math.log(36), abs=1e-6)
    assert math.log(36) == pytest.approx(3.5835, abs=1e-4)


def test_content_rejects_label_outside_charset():
    owners, gt, logits, tgt_logits, tgt_labels = _content_case()
    bad = gt.clone()
    bad[0] = 36  # EOS is not a content class
    with pytest.raises(ValueError):
        content_losses(logits, bad, gt, owners, 3, tgt_logits, tgt_labels)


def test_per_sample_normalization():
    logits = torch.zeros(3, 36)
    logits[0, 5] = 10.0
    nll = per_sample_char_nll(logits, torch.tensor([5, 1, 2]), torch.tensor([0, 1, 1]), 2)
    ce = F.cross_entropy(logits, torch.tensor([5, 1, 2]), reduction="none")
    assert torch.allclose(nll, torch.stack([ce[0], ce[1:].mean()]))


def test_split_prediction_term_regroups():
    g = torch.Generator().manual_seed(1)
    for _ in range(20):
        t = int(torch.randint(1, 11, (1,), generator=g))
        log_probs = torch.log_softmax(torch.randn(t, 36, generator=g, dtype=torch.float64), 1)
        gt = torch.randint(0, 36, (t,), generator=g)
        pred = torch.where(torch.rand(t, generator=g) < 0.3, torch.randint(0, 36, (t,), generator=g), gt)
        real, fake, whole = split_prediction_term(log_probs, pred, gt)
        assert abs((real + fake - whole).item()) < 1e-6


def test_generator_gradients_match_finite_differences(charset):
    gen, l_s_g, l_c_g = generator_loss_closures(charset)
    for fn in (l_s_g, l_c_g):
        results = finite_difference_check(fn, list(gen.parameters()), h=1e-7)
        assert max(r for _, _, r in results) < 1e-3


def test_discriminator_loss_touches_only_discriminator(charset):
    gen = Generator((2, 3, 4, 4))
    disc = Discriminator(charset, TINY_DISC)
    fake = resize(gen(torch.rand(2, 1, 64, 256)), (32, 100)).detach()
    E = disc.encode(fake)
    chars = gather_chars(extract_char_features(E, torch.full((2, 3, 25), 1 / 25)), [2, 3])[0]
    l_d, _ = style_losses(disc.style(disc.pool_target(torch.rand(2, 1, 32, 32))).squeeze(1), disc.style(chars).squeeze(1))
    l_d.backward()
    assert all(p.grad is None for p in gen.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in disc.parameters())
