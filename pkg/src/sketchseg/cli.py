"""Command-line entry point binding every pipeline stage.

Config files are flat ``key=value`` lines whose keys match the long flag
names (dashes or underscores); explicit flags override file values. Every
subcommand honours ``--seed`` and writes only under its ``--out`` path.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import EncoderConfig
from .checkpoints import CheckpointError
from .data import (
    DatasetError,
    GeneratorConfig,
    VectorSketch,
    generate_shapes_world,
    load_sketchy_format,
    save_dataset,
)
from .inference import (
    RefineParams,
    evaluate_protocol,
    mean_foreground_fraction,
    segment_gallery,
    validate_report,
    wrong_class_foreground,
)
from .losses import LossWeights
from .sbir import CriticTrainConfig, FrozenCritic, train_critic
from .trainer import Segmenter, TrainConfig, TrainError, fit

REGIME_ALIASES = {"category": "category", "fine": "fine_grained", "fine_grained": "fine_grained"}


def _read_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {path} not found")
    out = {}
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"malformed config line (want key=value): {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Pre-scan for --config and fold its values in as parser defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    values = _read_config_file(known.config)
    if values:
        usable = {a.dest for a in parser._actions}
        parser.set_defaults(**{k: v for k, v in values.items() if k in usable})
    return argv


def _encoder_config(args, hw: tuple[int, int]) -> EncoderConfig:
    return EncoderConfig(
        input_size=hw,
        patch_size=int(args.patch_size),
        embed_dim=int(args.embed_dim),
        depth=int(args.depth),
        heads=int(args.heads),
        trainable_scope=args.scope,
        learning_rate=float(args.lr),
    )


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = GeneratorConfig(
        num_classes=int(args.classes),
        per_class=int(args.per_class),
        canvas=int(args.canvas),
        association=REGIME_ALIASES[args.association],
        unseen_classes=int(args.unseen),
        compose_pairs=bool(args.compose),
    )
    dataset = generate_shapes_world(cfg, seed=int(args.seed))
    manifest = save_dataset(dataset, args.out, config=cfg, seed=int(args.seed))
    print(f"wrote {len(dataset.pairs)} pairs under {args.out} (manifest {manifest})")
    return 0


def cmd_train_sbir(args) -> int:
    regime = REGIME_ALIASES[args.regime]
    dataset = load_sketchy_format(args.data, association=regime)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = CriticTrainConfig(
        epochs=int(args.epochs),
        batch_size=int(args.batch_size),
        lr=float(args.lr),
        seed=int(args.seed),
    )
    ckpt = out / f"critic_{regime}.ckpt"
    _, stats = train_critic(dataset, regime, cfg, checkpoint_path=ckpt)
    print(f"critic saved to {ckpt}; held-out recall@1 ({stats['recall_level']}) = "
          f"{stats['recall_at_1']:.3f} over {stats['held_out_pairs']} pairs")
    return 0


def _train_config(args, hw: tuple[int, int]) -> TrainConfig:
    regime = REGIME_ALIASES[args.regime]
    return TrainConfig(
        regime=regime,
        epochs=int(args.epochs),
        batch_size=int(args.batch_size),
        lr=float(args.lr),
        weights=LossWeights(
            infonce=float(args.lambda_infonce),
            sbir=float(args.lambda_sbir),
            unpaired=float(args.lambda_unpaired),
            reg=float(args.lambda_reg),
        ),
        tau=float(args.tau),
        augment_rate=float(args.augment_rate),
        seed=int(args.seed),
        encoder=_encoder_config(args, hw),
    )


def cmd_train_seg(args) -> int:
    regime = REGIME_ALIASES[args.regime]
    dataset = load_sketchy_format(args.data, association=regime)
    hw = dataset.pairs[0][1].pixels.shape[:2]
    config = _train_config(args, hw)
    segmenter, history = fit(
        dataset, config, critic=args.critic, out_dir=args.out, resume_from=args.resume
    )
    final = segmenter.save(Path(args.out) / f"seg_{regime}_final.ckpt")
    print(f"trained {len(history)} epochs; final checkpoint {final}")
    return 0


def cmd_infer(args) -> int:
    model = Segmenter.from_checkpoint(args.checkpoint)
    sketch = VectorSketch.from_json(Path(args.sketch).read_text())
    sketch.validate()
    gallery_dir = Path(args.gallery)
    photo_files = sorted(
        [p for p in gallery_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")]
    )
    if not photo_files:
        raise FileNotFoundError(f"no images in gallery {gallery_dir}")
    photos = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in photo_files]
    result = segment_gallery(
        sketch,
        photos,
        model,
        postprocess=not args.no_crf,
        binarize_threshold=float(args.threshold),
        refine_params=RefineParams(threshold=float(args.threshold)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for entry, src in zip(result.entries, photo_files):
        mask_path = out / f"{src.stem}_mask.png"
        Image.fromarray(entry.mask * 255).save(mask_path)
        index.append({"photo": src.name, "mask": mask_path.name, "confidence": entry.confidence})
    (out / "results.json").write_text(json.dumps(index, indent=2))
    print(f"wrote {len(index)} masks to {out}")
    return 0


def cmd_eval(args) -> int:
    model = Segmenter.from_checkpoint(args.checkpoint)
    dataset = load_sketchy_format(args.dataset, association=model.regime)
    report = evaluate_protocol(model, dataset, postprocess=bool(args.crf))
    obj = report.to_dict()
    validate_report(obj)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(obj, indent=2, sort_keys=True))
    if report.hiou is None:
        print("warning: unseen split empty; hIoU not defined", file=sys.stderr)
    print(json.dumps({k: obj[k] for k in ("miou_seen", "miou_unseen", "hiou", "pacc")}))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(checkpoint=args.checkpoint, data_dir=args.data_dir)
    uvicorn.run(app, host=args.host, port=int(args.port))
    return 0


DROP_CHOICES = ("unpaired", "reg", "infonce", "partition")


def cmd_ablate(args) -> int:
    regime = REGIME_ALIASES[args.regime]
    dataset = load_sketchy_format(args.data, association=regime)
    hw = dataset.pairs[0][1].pixels.shape[:2]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in str(args.seeds).split(",")]

    def run(seed: int, drop: str | None):
        ns = argparse.Namespace(**vars(args))
        ns.seed = seed
        config = _train_config(ns, hw)
        if drop == "unpaired":
            config.weights.unpaired = 0.0
        elif drop == "reg":
            config.weights.reg = 0.0
        elif drop == "infonce":
            config.weights.infonce = 0.0
        elif drop == "partition":
            config.augment_rate = 0.0
        segmenter, _ = fit(dataset, config, critic=args.critic, out_dir=None)
        seen = dataset.eval_pairs("seen_test")
        report = evaluate_protocol(segmenter, dataset)
        return {
            "miou_seen": report.miou_seen,
            "miou_unseen": report.miou_unseen,
            "fg_fraction": mean_foreground_fraction(segmenter, seen),
            "wrong_class_fg": wrong_class_foreground(segmenter, dataset, seen, seed=seed),
        }

    results = []
    for seed in seeds:
        full = run(seed, None)
        ablated = run(seed, args.drop)
        results.append({"seed": seed, "full": full, "ablated": ablated})
        print(json.dumps(results[-1]))
    (out / "ablate_report.json").write_text(
        json.dumps({"drop": args.drop, "runs": results}, indent=2)
    )
    print(f"report written to {out / 'ablate_report.json'}")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes corpus")
    p.add_argument("--classes", default=10)
    p.add_argument("--per-class", default=20)
    p.add_argument("--canvas", default=128)
    p.add_argument("--unseen", default=2)
    p.add_argument("--association", default="category", choices=list(REGIME_ALIASES))
    p.add_argument("--compose", action="store_true")
    p.add_argument("--seed", default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-sbir", help="train and freeze a retrieval critic")
    p.add_argument("--data", required=True)
    p.add_argument("--regime", required=True, choices=list(REGIME_ALIASES))
    p.add_argument("--epochs", default=20)
    p.add_argument("--batch-size", default=16)
    p.add_argument("--lr", default=1e-3)
    p.add_argument("--seed", default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_sbir)

    def add_seg_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--regime", required=True, choices=list(REGIME_ALIASES))
        p.add_argument("--critic", required=True)
        p.add_argument("--epochs", default=40)
        p.add_argument("--batch-size", default=16)
        p.add_argument("--lr", default=3e-4)
        p.add_argument("--tau", default=0.1)
        p.add_argument("--augment-rate", default=0.5)
        p.add_argument("--lambda-infonce", default=1.0)
        p.add_argument("--lambda-sbir", default=1.0)
        p.add_argument("--lambda-unpaired", default=1.0)
        p.add_argument("--lambda-reg", default=1.0)
        p.add_argument("--patch-size", default=8)
        p.add_argument("--embed-dim", default=128)
        p.add_argument("--depth", default=6)
        p.add_argument("--heads", default=4)
        p.add_argument("--scope", default="all", choices=("norm_layers_only", "all", "frozen"))
        p.add_argument("--seed", default=0)
        p.add_argument("--config")

    p = sub.add_parser("train-seg", help="train the segmenter against a frozen critic")
    add_seg_flags(p)
    p.add_argument("--resume")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("infer", help="segment a gallery directory with one sketch")
    p.add_argument("--sketch", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", default=0.5)
    p.add_argument("--no-crf", action="store_true")
    p.add_argument("--seed", default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="run the seen/unseen evaluation protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--crf", action="store_true")
    p.add_argument("--seed", default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="launch the HTTP inference service")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", default=8000)
    p.add_argument("--seed", default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("ablate", help="train full vs ablated variants and compare")
    add_seg_flags(p)
    p.add_argument("--drop", required=True, choices=DROP_CHOICES)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_defaults(parser, argv)
        args = parser.parse_args(argv)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (DatasetError, TrainError, CheckpointError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
