import csv
import math
import random
from types import SimpleNamespace

import pytest
import torch

from oracles import levenshtein_recursive
from sepgan import checkpoint, config
from sepgan.train import (
    METRICS_COLUMNS,
    Corpus,
    filter_batch,
    init_state,
    joint_step,
    lr_at_epoch,
    pretrain_recognizer,
    target_batch,
    train,
    update_beta,
)


def test_filter_examples():
    kept = filter_batch(["HELLO", "HELL", "COOGLE", "HALLA"], ["HELLO", "HELLO", "GOOGLE", "HELLO"])
    assert kept.indices == [0, 2]
    assert kept.preds == ["HELLO", "COOGLE"]
    assert kept.labels == ["HELLO", "GOOGLE"]


def test_filter_may_be_empty_and_slices_images():
    images = torch.arange(3.0)
    assert len(filter_batch(["A", "B", "C"], ["XY", "ZW", "QQ"], images)) == 0
    kept = filter_batch(["AB", "CD", "EF"], ["AB", "XY", "EX"], images)
    assert torch.equal(kept.images, torch.tensor([0.0, 2.0]))


def test_filter_rejects_misaligned():
    with pytest.raises(ValueError):
        filter_batch(["A"], ["A", "B"])


def test_filter_matches_levenshtein_and_keeps_substitutions_only():
    rng = random.Random(0)
    for _ in range(300):
        gt = "".join(rng.choice("ABC") for _ in range(rng.randint(1, 6)))
        pred = "".join(rng.choice("ABC") for _ in range(rng.randint(0, 7)))
        kept = bool(filter_batch([pred], [gt]).indices)
        assert kept == (len(pred) == len(gt) and levenshtein_recursive(pred, gt) <= 1)
        if kept:
            assert sum(a != b for a, b in zip(pred, gt)) <= 1


def test_beta_examples():
    assert update_beta(1.0, 1, 1, 1) == 1.0
    assert update_beta(1.0, 0.5, 0.1, 1.5) == pytest.approx(0.3)
    assert update_beta(1.0, 0.5, 50.0, 0.1) == 1.0
    assert update_beta(1.0, 0.0, 1e-9, 10.0) == 1e-3


def test_beta_keeps_value_on_bad_losses(caplog):
    assert update_beta(0.4, math.nan, 1, 1) == 0.4
    assert update_beta(0.4, 1, math.inf, 1) == 0.4
    assert update_beta(0.4, 0, 0, 0) == 0.4
    assert "beta kept" in caplog.text


def test_lr_schedule():
    assert lr_at_epoch(0.002, 0) == 0.002
    assert lr_at_epoch(0.002, 1) == 0.002
    assert lr_at_epoch(0.002, 2) == pytest.approx(0.0002)
    assert lr_at_epoch(0.002, 5) == pytest.approx(0.002 * 0.01)


# -- joint step --------------------------------------------------------------


@pytest.fixture
def joint(tiny_cfg, single_char_corpus):
    state = init_state(tiny_cfg)
    corpus = Corpus(single_char_corpus)
    x = torch.nn.functional.interpolate(corpus.tensor(range(8)), size=(64, 256), mode="bilinear", align_corners=False)
    labels = corpus.texts[:8]
    tgt, tgt_labels = target_batch(tiny_cfg, state.charset, state.fonts, 0, 8)
    return state, x, labels, tgt, tgt_labels


def _force_predictions(monkeypatch, state, texts):
    monkeypatch.setattr(state.recognizer, "predict", lambda x: [SimpleNamespace(text=t) for t in texts])


def _snapshot(module):
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def _changed(before, module):
    return {n for n, p in module.named_parameters() if not torch.equal(before[n], p)}


def test_empty_filter_steps_recognizer_only(monkeypatch, joint):
    state, x, labels, tgt, tgt_labels = joint
    _force_predictions(monkeypatch, state, ["TOOLONG"] * len(labels))
    state.beta = 0.7
    g, d, r = _snapshot(state.generator), _snapshot(state.discriminator), _snapshot(state.recognizer)
    res = joint_step(state, x, labels, tgt, tgt_labels, k=0.0)
    assert not _changed(g, state.generator)
    assert not _changed(d, state.discriminator)
    assert _changed(r, state.recognizer)
    assert state.beta == 0.7
    assert not res.d_updated and not res.g_updated


def test_beta_one_always_updates_discriminator(monkeypatch, joint):
    state, x, labels, tgt, tgt_labels = joint
    _force_predictions(monkeypatch, state, labels)
    for k in (0.0, 0.5, 0.999999):
        state.beta = 1.0
        d = _snapshot(state.discriminator)
        res = joint_step(state, x, labels, tgt, tgt_labels, k=k)
        assert res.d_updated and res.g_updated
        assert _changed(d, state.discriminator)


def test_discriminator_paused_when_k_exceeds_beta(monkeypatch, joint):
    state, x, labels, tgt, tgt_labels = joint
    _force_predictions(monkeypatch, state, labels)
    state.beta = 0.3
    d, g = _snapshot(state.discriminator), _snapshot(state.generator)
    res = joint_step(state, x, labels, tgt, tgt_labels, k=0.5)
    assert not res.d_updated and res.g_updated
    assert not _changed(d, state.discriminator)
    assert _changed(g, state.generator)


def test_alternating_updates_are_disjoint(monkeypatch, joint):
    state, x, labels, tgt, tgt_labels = joint
    _force_predictions(monkeypatch, state, labels)
    modules = {"generator": state.generator, "discriminator": state.discriminator, "recognizer": state.recognizer}
    touched = {}

    for name, opt in state.optimizers.items():
        def wrapped(*args, _name=name, _step=opt.step, **kw):
            before = {m: _snapshot(mod) for m, mod in modules.items()}
            out = _step(*args, **kw)
            touched[_name] = {m for m, mod in modules.items() if _changed(before[m], mod)}
            return out
        monkeypatch.setattr(opt, "step", wrapped)

    state.beta = 1.0
    joint_step(state, x, labels, tgt, tgt_labels, k=0.0)
    assert touched == {"discriminator": {"discriminator"}, "generator": {"generator"}, "recognizer": {"recognizer"}}


def test_beta_follows_step_losses(monkeypatch, joint):
    state, x, labels, tgt, tgt_labels = joint
    # one substitution per word keeps every sample but makes P differ from GT
    subs = [("B" if t[0] != "B" else "C") + t[1:] for t in labels]
    _force_predictions(monkeypatch, state, subs)
    for _ in range(3):
        prev = state.beta
        res = joint_step(state, x, labels, tgt, tgt_labels, k=0.0)
        assert 0.0 < state.beta <= 1.0
        assert state.beta == update_beta(prev, res.l_s, res.l_cd, res.l_cg)


def test_equal_content_losses_give_beta_one(monkeypatch, joint):
    state, x, labels, tgt, tgt_labels = joint
    _force_predictions(monkeypatch, state, labels)
    state.beta = 0.5
    res = joint_step(state, x, labels, tgt, tgt_labels, k=1.0)
    # P = GT, so L_c_D exceeds L_c_G by the target term and beta clamps to 1
    assert res.l_cd >= res.l_cg
    assert state.beta == 1.0


def test_nan_loss_aborts_with_dump(monkeypatch, joint, tmp_path):
    state, x, labels, tgt, tgt_labels = joint
    monkeypatch.setattr(state.generator, "forward", lambda inp: torch.full_like(inp, math.nan))
    dump = tmp_path / "dump.pt"
    with pytest.raises(FloatingPointError):
        joint_step(state, x, labels, tgt, tgt_labels, k=0.0, dump_path=dump)
    saved = torch.load(dump, weights_only=False)
    assert saved["labels"] == labels and saved["images"].shape == x.shape


# -- loops ------------------------------------------------------------------


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_train_outputs(tiny_cfg, tiny_corpus, tmp_path):
    cfg = {**tiny_cfg, "data": str(tiny_corpus), "sample_interval": 3}
    state = train(cfg, tmp_path / "run")
    rows = _rows(tmp_path / "run" / "metrics.csv")
    assert rows[0] == METRICS_COLUMNS
    assert len(rows) - 1 == cfg["iterations"] // cfg["log_interval"]
    assert all(0.0 < float(r[5]) <= 1.0 for r in rows[1:])
    assert (tmp_path / "run" / "metrics.png").stat().st_size > 0
    assert sorted(p.name for p in (tmp_path / "run" / "samples").iterdir()) == ["3.png", "6.png"]
    manifest = checkpoint.read_manifest(tmp_path / "run" / "ckpt" / "6")
    assert manifest["config_hash"] == config.config_hash(cfg)
    assert set(manifest["parts"]) == {"recognizer", "generator", "discriminator"}
    assert manifest["iteration"] == state.iteration == 6
    assert (tmp_path / "run" / "pretrain" / "ckpt" / "4").is_dir()


def test_train_is_deterministic_and_resumable(tiny_cfg, tiny_corpus, tmp_path):
    cfg = {**tiny_cfg, "data": str(tiny_corpus)}
    full = train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()

    # resume b from its mid-run checkpoint and finish again
    resumed = train({**cfg, "resume": str(tmp_path / "b" / "ckpt" / "4")}, tmp_path / "b")
    assert (tmp_path / "b" / "metrics.csv").read_bytes() == a
    assert resumed.iteration == full.iteration
    assert resumed.beta == full.beta
    mid = checkpoint.read_manifest(tmp_path / "a" / "ckpt" / "4")
    row = [r for r in _rows(tmp_path / "a" / "metrics.csv") if r[0] == "4"][0]
    assert repr(mid["beta"]) == row[5] and mid["iteration"] == 4


def test_pretrain_resume_continues_count(tiny_cfg, tiny_corpus, tmp_path):
    cfg = {**tiny_cfg, "data": str(tiny_corpus)}
    state = pretrain_recognizer(cfg, tmp_path / "p", iterations=4)
    assert state.iteration == 4
    state = pretrain_recognizer({**cfg, "resume": str(tmp_path / "p" / "ckpt")}, tmp_path / "p", iterations=6)
    assert state.iteration == 6
    rows = _rows(tmp_path / "p" / "pretrain_metrics.csv")
    assert [r[0] for r in rows[1:]] == ["2", "4", "6"]


def test_pretrain_from_scratch_equals_resumed(tiny_cfg, tiny_corpus, tmp_path):
    cfg = {**tiny_cfg, "data": str(tiny_corpus)}
    straight = pretrain_recognizer(cfg, tmp_path / "s", iterations=6)
    pretrain_recognizer(cfg, tmp_path / "r", iterations=4)
    resumed = pretrain_recognizer({**cfg, "resume": str(tmp_path / "r" / "ckpt")}, tmp_path / "r", iterations=6)
    for a, b in zip(straight.recognizer.state_dict().values(), resumed.recognizer.state_dict().values()):
        assert torch.equal(a, b)
