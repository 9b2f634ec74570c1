"""Command-line entry point: ``mocgan <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing
prerequisite (the message names the stage to run first).  Failures print one
line ``error: <ErrorClass>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import torch
import yaml

from .checkpoint import CheckpointError
from .config import Config, ConfigError, desk_config, dump_config, load_config
from .manifest import write_manifest

log = logging.getLogger("mocgan")

DATA_ENV = "MOCGAN_DATA"
TE_FILE, DAMSM_FILE, GAN_FILE, METRICS_FILE = "text_encoder.pt", "phrase_damsm.pt", "mocgan.pt", "metrics.jsonl"


class UsageError(Exception):
    pass


class PrerequisiteError(Exception):
    def __init__(self, stage: str, detail: str):
        super().__init__(f"{detail}; run `{stage}` first")
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key] = yaml.safe_load(raw)
    return out


def build_config(args) -> Config:
    """defaults (or the desk preset) < config file < --set flags < command flags."""
    base = desk_config() if getattr(args, "preset", None) == "desk" else Config()
    cfg = load_config(getattr(args, "config", None), _parse_set(getattr(args, "set", None)), base)
    flags = {}
    data_dir = getattr(args, "data_dir", None) or os.environ.get(DATA_ENV)
    if data_dir:
        flags["data.data_dir"] = data_dir
    for flag, key in (("min_objects", "data.min_objects"), ("max_objects", "data.max_objects"),
                      ("min_area_frac", "data.min_area_frac"), ("seed", "train.seed"),
                      ("iterations", "train.iterations")):
        if getattr(args, flag, None) is not None:
            flags[key] = getattr(args, flag)
    return load_config(None, flags, cfg) if flags else cfg


def _run_dir(args, cfg: Config) -> Path:
    path = Path(args.run_dir) if args.run_dir else Path(cfg.data.data_dir) / "runs" / "default"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _set_threads(cfg: Config):
    if cfg.train.threads:
        torch.set_num_threads(cfg.train.threads)


def _open_dataset(cfg: Config, split: str = "train"):
    from .data.dataset import SceneDataset

    root = Path(cfg.data.data_dir)
    if not (root / "splits" / f"{split}.json").exists():
        raise PrerequisiteError("prepare-data", f"no prepared split {split!r} under {root}")
    return SceneDataset(root, split, resolutions=cfg.data.resolutions,
                        max_caption_len=cfg.data.max_caption_len, seed=cfg.train.seed)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(stage, f"missing checkpoint {path}")
    return path


# ---- commands ---------------------------------------------------------------------


def cmd_make_synthetic(args, started):
    from .data.synthetic import make_synthetic_dataset

    out = args.out or os.environ.get(DATA_ENV)
    if not out:
        raise UsageError("--out (or $%s) is required" % DATA_ENV)
    path = make_synthetic_dataset(args.n_images, args.n_categories, args.vocab_size, args.seed, out)
    cfg = build_config(args)
    write_manifest(path, "make-synthetic", cfg, {"dataset": path}, started, "manifest_make-synthetic.json")
    print(path)


def cmd_prepare_data(args, started):
    from .data.dataset import build_splits

    cfg = build_config(args)
    d = cfg.data
    train, val, test = build_splits(
        d.data_dir, cfg.train.seed, d.min_objects, d.max_objects, d.min_area_frac, d.split_ratio,
        d.val_size, d.test_size, d.glove_path or None, d.embed_dim,
    )
    splits = Path(d.data_dir) / "splits"
    write_manifest(splits, "prepare-data", cfg, {"splits": splits}, started)
    print(json.dumps({"train": len(train), "val": len(val), "test": len(test)}))


def cmd_pretrain_text(args, started):
    from .training import pretrain_text_encoder

    cfg = build_config(args)
    _set_threads(cfg)
    ds = _open_dataset(cfg)
    run = _run_dir(args, cfg)
    res = pretrain_text_encoder(cfg, ds, run / TE_FILE, args.steps, run / METRICS_FILE)
    write_manifest(run, "pretrain-text", cfg, {"checkpoint": res.path, "metrics": run / METRICS_FILE}, started,
                   "manifest_pretrain-text.json")
    print(res.path)


def cmd_pretrain_damsm(args, started):
    from .training import pretrain_phrase_damsm

    cfg = build_config(args)
    _set_threads(cfg)
    ds = _open_dataset(cfg)
    run = _run_dir(args, cfg)
    te = _require(run / TE_FILE, "pretrain-text")
    res = pretrain_phrase_damsm(cfg, ds, te, run / DAMSM_FILE, args.steps, run / METRICS_FILE)
    write_manifest(run, "pretrain-damsm", cfg, {"checkpoint": res.path, "metrics": run / METRICS_FILE}, started,
                   "manifest_pretrain-damsm.json")
    print(res.path)


def cmd_train(args, started):
    from .training import Trainer

    cfg = build_config(args)
    _set_threads(cfg)
    ds = _open_dataset(cfg)
    run = _run_dir(args, cfg)
    ckpt = run / GAN_FILE
    if args.resume:
        trainer = Trainer.resume(_require(Path(args.resume), "train"), ds, run)
        cfg = trainer.cfg
        if args.iterations is not None:
            trainer.cfg.train.iterations = args.iterations
    else:
        dm = _require(run / DAMSM_FILE, "pretrain-damsm")
        te = _require(run / TE_FILE, "pretrain-text")
        trainer = Trainer(cfg, ds, te, dm, run)
    n = trainer.cfg.train.iterations - trainer.step
    trainer.run(max(n, 0), ckpt, run / METRICS_FILE)
    trainer.save(ckpt)
    write_manifest(run, "train", trainer.cfg, {"checkpoint": ckpt, "metrics": run / METRICS_FILE}, started,
                   "manifest_train.json")
    print(ckpt)


def _load_model(path: str):
    from .training import load_generator_checkpoint

    p = Path(path)
    if not p.exists():
        raise PrerequisiteError("train", f"missing checkpoint {p}")
    return load_generator_checkpoint(p)


def cmd_generate(args, started):
    from .evaluation import emit_sample_grid, to_pil
    from .inference import generate, parse_boxes, query_batch

    model, cfg, vocab, _ = _load_model(args.checkpoint)
    objects = [o.strip() for o in args.objects.split(",") if o.strip()]
    boxes = parse_boxes(args.boxes) if args.boxes else None
    if args.box_source == "ground_truth" and boxes is None:
        raise UsageError("--box-source ground_truth needs --boxes")
    batch = query_batch(vocab, model.categories, objects, args.caption, cfg.data.max_caption_len, boxes)
    n_stages = args.stages or cfg.model.n_stages
    if not 1 <= n_stages <= cfg.model.n_stages:
        raise UsageError(f"--stages must be in [1, {cfg.model.n_stages}]")
    images, used = generate(model, batch, args.seed, n_stages, args.box_source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    for i, img in enumerate(images):
        path = out / f"sample_stage{i}_{img.shape[-1]}.png"
        to_pil(img[0]).save(path, format="PNG")
        artifacts[f"stage{i}"] = path
    (out / "boxes.json").write_text(json.dumps({"objects": objects, "boxes": used.tolist()}, indent=1))
    artifacts["boxes"] = out / "boxes.json"
    if args.grid:
        grid, _ = emit_sample_grid([{"caption": args.caption, "objects": objects, "images": [im[0] for im in images]}],
                                   out / "grid.png")
        artifacts["grid"] = grid
    cfg.train.seed = args.seed
    write_manifest(out, "generate", cfg, artifacts, started, "manifest_generate.json")
    for path in artifacts.values():
        print(path)


def cmd_evaluate(args, started):
    from .data.dataset import collate
    from .evaluation import (ActivationStats, classify, emit_sample_grid, fid, inception_score,
                             load_classifier, save_classifier, train_classifier)
    from .inference import generate

    model, cfg, vocab, _ = _load_model(args.checkpoint)
    if args.data_dir or os.environ.get(DATA_ENV):
        cfg.data.data_dir = args.data_dir or os.environ[DATA_ENV]
    ds = _open_dataset(cfg, args.split)
    ds.vocab = vocab
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    res = cfg.model.base_resolution * 2 ** (cfg.model.n_stages - 1)

    clf_path = Path(args.classifier) if args.classifier else out / "classifier.pt"
    if clf_path.exists():
        clf = load_classifier(clf_path)
    else:
        clf = train_classifier(_open_dataset(cfg, "train"), steps=args.classifier_steps, seed=args.seed)
        save_classifier(clf, clf_path)

    n = min(args.n_images, len(ds))
    reals, fakes, rows = [], [], []
    for start in range(0, n, 16):
        examples = [ds.load_example(i) for i in range(start, min(start + 16, n))]
        batch = collate([e for e in examples if e is not None])
        images, _ = generate(model, batch, args.seed + start, box_source=args.box_source)
        reals.append(batch["images"][res] if res in batch["images"] else batch["images"][max(batch["images"])])
        fakes.append(images[-1])
        if len(rows) < 4:
            for b in range(min(4 - len(rows), len(batch["cap_lens"]))):
                caption = " ".join(vocab.decode(batch["captions"][b]))
                names = [model.categories[int(l)] for l in batch["labels"][batch["obj_to_img"] == b]]
                rows.append({"caption": caption, "objects": names, "images": [im[b] for im in images]})
    real, fake = torch.cat(reals), torch.cat(fakes)
    report = {"checkpoint": str(args.checkpoint), "split": args.split, "n_images": int(len(fake)),
              "box_source": args.box_source}
    p_fake, f_fake = classify(clf, fake)
    if args.metric in ("is", "both"):
        mean, std = inception_score(p_fake, min(args.n_splits, len(p_fake)))
        report["inception_score"] = {"mean": mean, "std": std}
    if args.metric in ("fid", "both"):
        _, f_real = classify(clf, real)
        report["fid"] = fid(ActivationStats.from_activations(f_real), ActivationStats.from_activations(f_fake))
        report["real_inception_score"] = inception_score(classify(clf, real)[0], min(args.n_splits, len(real)))[0]
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=1))
    grid, _ = emit_sample_grid(rows, out / "samples.png")
    write_manifest(out, "evaluate", cfg, {"report": report_path, "grid": grid, "classifier": clf_path}, started,
                   "manifest_evaluate.json")
    print(json.dumps(report))


def cmd_config_dump(args, started):
    sys.stdout.write(dump_config(build_config(args)))


# ---- parser -------------------------------------------------------------------------


def _common(p, data=True, run=False):
    p.add_argument("--config", help="YAML config file (layered over the defaults)")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper",
                   help="base defaults: full-size model or the CPU-sized desk preset")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    if data:
        p.add_argument("--data-dir", help=f"dataset root (default: ${DATA_ENV} or data.data_dir)")
    if run:
        p.add_argument("--run-dir", help="directory for checkpoints, metrics and manifests")
    p.add_argument("--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mocgan", description="Text-and-objects to image generation with implicit phrase graphs.")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("make-synthetic", help="write the toy shapes dataset")
    _common(p, data=False)
    p.add_argument("--out", help=f"output directory (default: ${DATA_ENV})")
    p.add_argument("--n-images", type=int, default=512)
    p.add_argument("--n-categories", type=int, default=8)
    p.add_argument("--vocab-size", type=int, default=64)
    p.set_defaults(func=cmd_make_synthetic, seed=0)

    p = sub.add_parser("prepare-data", help="filter annotations, split, build the vocabulary")
    _common(p)
    p.add_argument("--min-objects", type=int)
    p.add_argument("--max-objects", type=int)
    p.add_argument("--min-area-frac", type=float)
    p.set_defaults(func=cmd_prepare_data)

    for name, func, what in (("pretrain-text", cmd_pretrain_text, "text encoder (word-level matching)"),
                             ("pretrain-damsm", cmd_pretrain_damsm, "implicit graph (phrase-level matching)")):
        p = sub.add_parser(name, help=f"pretrain the {what}")
        _common(p, run=True)
        p.add_argument("--steps", type=int, help="number of optimizer steps")
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="adversarial training")
    _common(p, run=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate an image from objects and a caption")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--objects", required=True, help='comma-separated category names, e.g. "a,b"')
    p.add_argument("--caption", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stages", type=int, help="number of generator stages to run")
    p.add_argument("--box-source", choices=("predicted", "ground_truth"), default="predicted")
    p.add_argument("--boxes", help='normalized boxes "x0,y0,x1,y1;..." for --box-source ground_truth')
    p.add_argument("--out", default="samples")
    p.add_argument("--grid", action="store_true", help="also write grid.png")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="IS / FID with the desk-scale classifier")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--metric", default="both", choices=("is", "fid", "both"))
    p.add_argument("--n-images", type=int, default=256)
    p.add_argument("--n-splits", type=int, default=10)
    p.add_argument("--box-source", choices=("predicted", "ground_truth"), default="predicted")
    p.add_argument("--data-dir")
    p.add_argument("--classifier", help="saved classifier; trained on the train split when absent")
    p.add_argument("--classifier-steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    for name in ("config-dump", "config"):
        p = sub.add_parser(name, help="print the effective configuration")
        _common(p, data=True)
        if name == "config":
            p.add_argument("--dump", action="store_true", required=True)
        p.set_defaults(func=cmd_config_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .inference import QueryError
    from .training import MissingPrerequisiteError

    started = dt.datetime.now()
    try:
        args.func(args, started)
    except (UsageError, ConfigError, QueryError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (PrerequisiteError, MissingPrerequisiteError) as exc:
        print(f"error: MissingPrerequisite: {exc}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
