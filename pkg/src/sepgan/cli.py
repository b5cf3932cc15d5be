"""``sepgan`` command line: synth | pretrain | train | eval | generate.

Exit codes: 0 success, 2 bad arguments or configuration, 3 missing files.
Settings resolve as flags > ``--config`` file > defaults.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod

EXIT_OK, EXIT_USAGE, EXIT_MISSING = 0, 2, 3

log = logging.getLogger("sepgan")


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="sepgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a labelled word-image corpus")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--split", choices=["train", "eval"])
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("pretrain", help="train the recognizer alone on source images")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--iters", type=int, dest="pretrain_iters")
    p.add_argument("--resume")

    p = sub.add_parser("train", help="pretrain (optional) and interactive joint training")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--pretrained")
    p.add_argument("--resume")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("eval", help="word accuracy of a checkpoint on a corpus")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["src", "gen", "ensemble", "otsu"], default="gen")
    p.add_argument("--lexicon")
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("generate", help="grid of (source | generated) pairs, or generate given PNGs")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="corpus to draw sample pairs from")
    p.add_argument("--input", nargs="*", default=[], help="PNG files to run through the generator")
    p.add_argument("--k", type=int)
    return parser


def resolve_config(args, flag_keys):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", *flag_keys):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    if args.config and not Path(args.config).exists():
        raise FileNotFoundError(f"config file {args.config} not found")
    try:
        return config_mod.load(args.config, overrides)
    except config_mod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _require_dir(path, what):
    if not path or not Path(path).exists():
        raise FileNotFoundError(f"{what} {path or '(unset)'} not found")


def cmd_synth(args):
    from .synth import build_corpus

    cfg = resolve_config(args, ("n", "noise", "split"))
    manifest = build_corpus(args.out, cfg["n"], cfg["split"], cfg, force=args.force, workers=args.workers)
    print(json.dumps({"count": manifest["count"], "backgrounds": manifest["backgrounds"]}))


def cmd_pretrain(args):
    from .synth import prepare_out_dir
    from .train import pretrain_recognizer

    cfg = resolve_config(args, ("data", "pretrain_iters", "resume"))
    _require_dir(cfg["data"], "corpus")
    if cfg["resume"]:
        _require_dir(cfg["resume"], "checkpoint")
    else:
        prepare_out_dir(args.out, args.force)
    state = pretrain_recognizer(cfg, args.out)
    print(json.dumps({"iteration": state.iteration, "out": args.out}))


def cmd_train(args):
    from .synth import prepare_out_dir
    from .train import train

    cfg = resolve_config(args, ("data", "pretrained", "resume", "iterations"))
    _require_dir(cfg["data"], "corpus")
    for key in ("pretrained", "resume"):
        if cfg[key]:
            _require_dir(cfg[key], "checkpoint")
    if not cfg["resume"]:
        prepare_out_dir(args.out, args.force)
    state = train(cfg, args.out)
    print(json.dumps({"iteration": state.iteration, "beta": state.beta, "out": args.out}))


def cmd_eval(args):
    from .evaluation import evaluate, write_report
    from .synth import prepare_out_dir

    _require_dir(args.ckpt, "checkpoint")
    _require_dir(args.data, "corpus")
    if args.lexicon and not Path(args.lexicon).exists():
        raise FileNotFoundError(f"lexicon {args.lexicon} not found")
    prepare_out_dir(args.out, args.force)
    report = evaluate(args.ckpt, args.data, args.mode, args.lexicon, args.batch_size)
    write_report(report, args.out)
    print(json.dumps(report.accuracy))


def cmd_generate(args):
    import torch
    from PIL import Image

    from . import checkpoint, plotting
    from .synth import load_corpus, prepare_out_dir

    _require_dir(args.ckpt, "checkpoint")
    if not args.data and not args.input:
        raise UsageError("generate needs --data or --input")
    for f in args.input:
        if not Path(f).exists():
            raise FileNotFoundError(f"input {f} not found")
    if args.data:
        _require_dir(args.data, "corpus")
    models, cfg, _ = checkpoint.load_models(args.ckpt, ("generator",))
    run_cfg = resolve_config(args, ("k",))
    gen = models["generator"]
    out = prepare_out_dir(args.out, args.force)

    from .recognizer import resize

    def run(images_u8):
        x = torch.from_numpy(np.stack(images_u8)).float().div_(255.0).unsqueeze(1).to(checkpoint.device())
        x = resize(x, gen.input_size)
        with torch.no_grad():
            y = gen(x)
        return x[:, 0].cpu().numpy(), y[:, 0].cpu().numpy()

    written = {}
    if args.input:
        imgs = [np.asarray(Image.open(f).convert("L")) for f in args.input]
        src, gen_out = run(imgs)
        for f, g in zip(args.input, gen_out):
            written[f] = str(plotting.save_png(g, out / "generated" / Path(f).name))
    else:
        _, _, images = load_corpus(args.data)
        rng = np.random.default_rng(run_cfg["seed"])
        k = min(run_cfg["k"], len(images))
        idx = np.sort(rng.choice(len(images), size=k, replace=False))
        src, gen_out = run(list(images[idx]))
    grid = plotting.pair_grid(src, gen_out)
    path = plotting.save_png(grid, out / "grid.png")
    print(json.dumps({"grid": str(path), "pairs": len(src), "generated": written}))


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"sepgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (UsageError, FileExistsError, ValueError) as exc:
        print(f"sepgan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
