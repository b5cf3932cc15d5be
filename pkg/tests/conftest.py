import time

import numpy as np
import pytest
import torch

from sepgan import config
from sepgan.charset import Charset
from sepgan.synth import build_corpus, discover_fonts

ACCEPTANCE = []

TINY = dict(
    backbone="tiny",
    hidden_size=32,
    attn_size=16,
    gen_channels="4,8,16,16",
    disc_channels="4,8,8,8,8,8,8",
    batch_size=8,
    log_interval=2,
    ckpt_interval=4,
    sample_interval=0,
    pretrain_iters=4,
    iterations=6,
)


def record(name, passed, detail=""):
    ACCEPTANCE.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
        terminalreporter.write_line(f"{status:8s} {name}  {detail}")


@pytest.fixture(scope="session")
def charset():
    return Charset()


@pytest.fixture(scope="session")
def fonts(charset):
    return discover_fonts(charset)


@pytest.fixture
def tiny_cfg():
    return config.make(**TINY)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = config.make(noise=0.5, seed=3, min_label_len=2, max_label_len=5)
    build_corpus(root, 24, "train", cfg, force=True)
    return root


@pytest.fixture(scope="session")
def tiny_eval_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_eval")
    cfg = config.make(noise=0.5, seed=13, min_label_len=2, max_label_len=5)
    build_corpus(root, 20, "eval", cfg, force=True)
    return root


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_corpus):
    """Output directory of a short tiny-model training run."""
    from sepgan.train import train

    out = tmp_path_factory.mktemp("tiny_run")
    train(config.make(**TINY, data=str(tiny_corpus)), out)
    return out


@pytest.fixture(scope="session")
def single_char_corpus(tmp_path_factory):
    """Single-character words: any one-character prediction passes the filter."""
    root = tmp_path_factory.mktemp("single_char")
    cfg = config.make(noise=0.3, seed=5, min_label_len=1, max_label_len=1)
    build_corpus(root, 32, "train", cfg, force=True)
    return root


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Recognizer trained alone on a fixed 64-sample noise-free corpus.

    Stops as soon as word accuracy on the corpus reaches 95%, or after 2000
    iterations. Shared by the acceptance check and the slow recognizer tests.
    """
    from sepgan.train import Corpus, init_state, recognize, recognizer_step, word_accuracy

    root = tmp_path_factory.mktemp("clean64")
    cfg = config.make(noise=0.0, seed=0, batch_size=64)
    build_corpus(root, 64, "train", cfg, force=True)
    corpus = Corpus(root)
    state = init_state(cfg, with_gan=False)
    x = corpus.tensor(range(len(corpus)))
    losses, accs = [], []
    start = time.monotonic()
    for it in range(2000):
        losses.append(recognizer_step(state, x, corpus.texts))
        if (it + 1) % 25 == 0:
            acc = word_accuracy([p.text for p in recognize(state.recognizer, x)], corpus.texts)
            accs.append((it + 1, acc))
            if acc >= 0.95 and losses[-1] < 0.1:
                break
    state.recognizer.eval()
    return {
        "cfg": cfg,
        "corpus": corpus,
        "root": root,
        "state": state,
        "losses": losses,
        "accs": accs,
        "seconds": time.monotonic() - start,
    }


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
