"""Command-line entry point.

Subcommands::

    semvis generate-data --out DIR --scenes N --seed S [--objects 2..3]
    semvis train --data DIR --out CKPT [--config FILE | flags] [--resume CKPT]
    semvis eval-retrieval --ckpt CKPT --data DIR [--folds N]
    semvis eval-pointing --ckpt CKPT --data DIR [--k INT]
    semvis localize --ckpt CKPT --image PATH --text "phrase" --out PREFIX

stdout carries only JSON reports; progress and warnings go to stderr.  Exit
codes: 0 success, 1 runtime failure, 2 usage error.  Every command is
deterministic given its flags.

Flags override config-file keys, which override the defaults below; unknown
config keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .data import Dataset, SceneConfig, generate_dataset, read_dataset, write_dataset
from .errors import DegenerateInputError
from .evaluate import eval_pointing, eval_retrieval
from .localize import LocalizationConfig, activation_maps, heatmap, point, render_heatmap
from .loss import LossConfig
from .model import Model, ModelConfig
from .ppm import read_ppm
from .text import tokenize
from .train import (AdamState, TrainSchedule, load_checkpoint, save_checkpoint, train)

DEFAULTS: dict = {
    # architecture
    "backbone_channels": 64,
    "hidden_channels": [16, 32, 64],
    "adapt_channels": 64,
    "embed_dim": 64,
    "word_dim": 64,
    "sru_layers": 2,
    "pooling": "max_min",
    "visual_dropout": 0.5,
    "sru_dropout": 0.25,
    # objective
    "margin": 0.2,
    "mining": "random",
    # localization
    "top_k": None,
    # schedule
    "epochs": 30,
    "batch_size": 32,
    "lr0": 0.004,
    "halving_until_epoch": 5,
    "freeze_epochs": 2,
    # misc
    "seed": 1,
    "crop_augment": False,
}


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"--config {args.config}: {exc}")
        unknown = sorted(set(file_cfg) - set(DEFAULTS))
        if unknown:
            parser.error(f"--config {args.config}: unknown keys {unknown}")
        cfg.update(file_cfg)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        backbone_channels=int(cfg["backbone_channels"]),
        hidden_channels=tuple(int(c) for c in cfg["hidden_channels"]),
        adapt_channels=int(cfg["adapt_channels"]),
        embed_dim=int(cfg["embed_dim"]),
        word_dim=int(cfg["word_dim"]),
        sru_layers=int(cfg["sru_layers"]),
        pooling=cfg["pooling"],
        visual_dropout=float(cfg["visual_dropout"]),
        sru_dropout=float(cfg["sru_dropout"]),
        margin=float(cfg["margin"]),
        mining=cfg["mining"],
        top_k=None if cfg["top_k"] in (None, -1) else int(cfg["top_k"]),
    )


def _schedule(cfg: dict) -> TrainSchedule:
    return TrainSchedule(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr0=float(cfg["lr0"]),
        halving_until_epoch=int(cfg["halving_until_epoch"]),
        freeze_epochs=int(cfg["freeze_epochs"]),
    )


def _parse_objects(spec: str) -> tuple[int, int]:
    lo, _, hi = spec.partition("..")
    try:
        lo_i = int(lo)
        hi_i = int(hi) if hi else lo_i
    except ValueError:
        raise argparse.ArgumentTypeError(f"--objects expects N or N..M, got {spec!r}") from None
    if not 1 <= lo_i <= hi_i:
        raise argparse.ArgumentTypeError(f"--objects range {spec!r} is empty or non-positive")
    return lo_i, hi_i


def _encode_corpus(model: Model, dataset: Dataset):
    """Eval-mode embeddings of every image and caption; owners map captions to images."""
    images, captions, owners = [], [], []
    for i, scene in enumerate(dataset.scenes):
        x, _ = model.encode_image(scene.image, training=False)
        images.append(x.data)
        for cap in scene.captions:
            captions.append(model.encode_text(cap, training=False).data)
            owners.append(i)
    return np.stack(images), np.stack(captions), owners


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args, parser) -> int:
    lo, hi = args.objects
    cfg = SceneConfig(min_objects=lo, max_objects=hi)
    dataset = generate_dataset(args.scenes, args.seed, cfg)
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.scenes)} scenes to {args.out}", file=sys.stderr)
    return 0


def cmd_train(args, parser) -> int:
    dataset = read_dataset(args.data)
    if args.resume:
        bundle = load_checkpoint(args.resume)
        model, state, sched, seed = bundle.model, bundle.opt_state, bundle.schedule, bundle.seed
        start_epoch = bundle.next_epoch
        if dataset.vocab != model.vocab:
            print("warning: dataset vocabulary differs from checkpoint vocabulary",
                  file=sys.stderr)
    else:
        cfg = _merge_config(args, parser)
        model = Model.initialize(_model_config(cfg), dataset.vocab, int(cfg["seed"]))
        state = AdamState()
        sched = _schedule(cfg)
        seed = int(cfg["seed"])
        start_epoch = 0

    history = train(model, dataset, sched, seed, state=state, start_epoch=start_epoch,
                    log_path=str(args.out) + ".log.jsonl")
    for record in history:
        print(f"epoch {record['epoch']}: loss {record['loss']:.6f} lr {record['lr']:.2e}",
              file=sys.stderr)
    save_checkpoint(args.out, model, state, sched, seed, next_epoch=sched.epochs)
    print(f"checkpoint written to {args.out}", file=sys.stderr)
    return 0


def cmd_eval_retrieval(args, parser) -> int:
    model = load_checkpoint(args.ckpt).model
    dataset = read_dataset(args.data)
    images, captions, owners = _encode_corpus(model, dataset)

    folds = max(1, args.folds)
    n = images.shape[0]
    bounds = np.linspace(0, n, folds + 1).astype(int)
    cap_reports, img_reports = [], []
    owners_arr = np.asarray(owners)
    for f in range(folds):
        lo, hi = bounds[f], bounds[f + 1]
        keep = (owners_arr >= lo) & (owners_arr < hi)
        sim = images[lo:hi] @ captions[keep].T
        cap_r, img_r = eval_retrieval(sim, owners_arr[keep] - lo)
        cap_reports.append(cap_r)
        img_reports.append(img_r)

    def averaged(reports):
        return {"direction": reports[0].direction,
                "r_at": {str(r): float(np.mean([rep.r_at[r] for rep in reports]))
                         for r in sorted(reports[0].r_at)},
                "median_rank": float(np.mean([rep.median_rank for rep in reports]))}

    print(json.dumps({"caption_retrieval": averaged(cap_reports),
                      "image_retrieval": averaged(img_reports)}, sort_keys=True))
    return 0


def cmd_eval_pointing(args, parser) -> int:
    model = load_checkpoint(args.ckpt).model
    dataset = read_dataset(args.data)
    k = args.k if args.k is not None else model.cfg.effective_top_k()
    report = eval_pointing(model, dataset.regions(), LocalizationConfig(top_k=k))
    out = report.to_dict()
    out["k"] = k
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_localize(args, parser) -> int:
    model = load_checkpoint(args.ckpt).model
    image = read_ppm(args.image)
    try:
        token_ids = tokenize(args.text, model.vocab)
    except DegenerateInputError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    if all(t == 0 for t in token_ids):
        print(f"warning: every word of {args.text!r} is out of vocabulary; "
              "localizing the <unk> embedding", file=sys.stderr)

    _, stack = model.encode_image(image, training=False)
    maps = activation_maps(stack, model.visual.proj.weight)
    embedding = model.encode_text(token_ids, training=False)
    cfg = LocalizationConfig(top_k=model.cfg.effective_top_k())
    hm = heatmap(maps, embedding, cfg, image.shape[1:], image.shape[1] // maps.shape[1])
    px, py = point(hm)
    render_heatmap(hm, image, args.out)
    payload = {"x": px, "y": py, "heat_max": float(hm.values.max())}
    with open(f"{args.out}.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
    print(json.dumps(payload, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file with configuration keys (flags win)")
    for key, default in DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        if key == "hidden_channels":
            sub.add_argument(flag, type=lambda s: [int(c) for c in s.split(",")],
                             default=None, help=f"comma-separated (default {default})")
        elif isinstance(default, bool):
            sub.add_argument(flag, action="store_const", const=True, default=None,
                             help=f"(default {default})")
        elif key in ("pooling", "mining"):
            sub.add_argument(flag, type=str, default=None, help=f"(default {default})")
        elif isinstance(default, float):
            sub.add_argument(flag, type=float, default=None, help=f"(default {default})")
        else:
            sub.add_argument(flag, type=int, default=None, help=f"(default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semvis",
                                     description="joint image/text embedding at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("generate-data", help="write a synthetic captioned-scene dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--scenes", type=int, required=True)
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--objects", type=_parse_objects, default=(2, 3),
                     help="object count or range, e.g. 2 or 2..3")
    gen.set_defaults(func=cmd_generate_data)

    tr = subs.add_parser("train", help="train a model on a dataset directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", help="continue from a checkpoint (its stored config wins)")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    er = subs.add_parser("eval-retrieval", help="cross-modal retrieval report (JSON on stdout)")
    er.add_argument("--ckpt", required=True)
    er.add_argument("--data", required=True)
    er.add_argument("--folds", type=int, default=1)
    er.set_defaults(func=cmd_eval_retrieval)

    ep = subs.add_parser("eval-pointing", help="pointing game report (JSON on stdout)")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--k", type=int, default=None, help="override the number of maps used")
    ep.set_defaults(func=cmd_eval_pointing)

    loc = subs.add_parser("localize", help="heatmap + peak for a phrase in an image")
    loc.add_argument("--ckpt", required=True)
    loc.add_argument("--image", required=True)
    loc.add_argument("--text", required=True)
    loc.add_argument("--out", required=True, help="output prefix for .pgm/.ppm/.json")
    loc.set_defaults(func=cmd_localize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
