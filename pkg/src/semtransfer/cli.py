"""Command line front end.

Subcommands: ``transfer`` (train on one image pair), ``invert`` (feature
inversion), ``pca-keys`` (self-similarity PCA maps), ``convert-weights``
(checkpoint to archive conversion).  Exit codes: 0 success, 2 usage error,
3 unreadable or malformed input, 4 numerical failure.
"""

import argparse
import os
import sys
from pathlib import Path

import torch

from . import manifest as run_manifest
from .archive import WeightArchive, convert_vit_checkpoint
from .backbone import Backbone, dump_features, extract_keys, load_backbone
from .config_file import (apply_overrides, augmentation_policy_from,
                          format_config, generator_config_from,
                          inversion_settings_from, load_config_file,
                          loss_weights_from, train_settings_from)
from .descriptors import export_pca_maps, key_self_similarity, selfsim_pca
from .errors import InputError, NumericalError, UsageError
from .image_io import file_sha256, load_image
from .inversion import (FACETS, InversionConfig, capture_target, invert,
                        invert_cls_across_layers)
from .metrics import append_report, evaluate_transfer
from .trainer import TrainConfig, resume as resume_training, train

WEIGHTS_ENV = "SEMTRANSFER_WEIGHTS"
CONFIG_SNAPSHOT = "config.snapshot"


def _weights_path(args) -> Path:
    path = args.weights or os.environ.get(WEIGHTS_ENV)
    if not path:
        raise UsageError(
            f"no weights archive given; pass --weights or set {WEIGHTS_ENV}"
        )
    return Path(path)


def _load_backbone(args) -> Backbone:
    path = _weights_path(args)
    if not path.is_file():
        raise InputError(f"weights archive not found: {path}")
    return load_backbone(WeightArchive.load(path))


def _merged_config(args) -> dict:
    cfg = load_config_file(args.config) if args.config else {}
    return apply_overrides(cfg, args.set or [])


def _add_common(p):
    p.add_argument("--weights", help=f"weights archive (.npz); default ${WEIGHTS_ENV}")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a single config entry (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semtransfer",
        description="Semantic appearance transfer between a single image pair",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transfer", help="train a generator on one image pair")
    p.add_argument("--structure", required=True, help="structure source image")
    p.add_argument("--appearance", required=True, help="appearance target image")
    _add_common(p)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--ablate", action="append", choices=["app", "structure", "id"],
                   help="drop a loss term (repeatable)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the newest checkpoint in --out")
    p.add_argument("--runs", type=int, default=1,
                   help="independent runs with consecutive seeds")
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("invert", help="reconstruct an image from its features")
    p.add_argument("--image", required=True)
    _add_common(p)
    p.add_argument("--layer", type=int, default=None, help="1-based layer (default deepest)")
    p.add_argument("--facet", choices=list(FACETS), default="keys")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--stop-ratio", type=float, default=None,
                   help="stop once distance falls to this fraction of the start")
    p.add_argument("--pixel-baseline", action="store_true",
                   help="optimize pixels directly instead of the image prior")
    p.add_argument("--across-layers", action="store_true",
                   help="invert the class token at every layer")

    p = sub.add_parser("pca-keys", help="principal component maps of key self-similarity")
    p.add_argument("--image", required=True)
    _add_common(p)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--dump-features", action="store_true",
                   help="also write the raw per-layer feature arrays")

    p = sub.add_parser("convert-weights", help="convert a ViT checkpoint to an archive")
    p.add_argument("--source", required=True, help="torch checkpoint (.pth)")
    p.add_argument("--out", required=True, help="archive path (.npz)")
    p.add_argument("--num-heads", type=int, default=None,
                   help="attention head count when the checkpoint does not imply it")
    return parser


def _effective_train_cfg(args, cfg: dict):
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    if args.iterations is not None:
        cfg.setdefault("train", {})["total_iterations"] = args.iterations
    if args.deterministic:
        cfg.setdefault("train", {})["deterministic"] = True
    for term in args.ablate or []:
        cfg.setdefault("loss", {})[f"disable_{term}"] = True
    settings = train_settings_from(cfg)
    return TrainConfig(weights=loss_weights_from(cfg), **settings)


def _snapshot_text(cfg: dict, train_cfg: TrainConfig, weights: Path) -> str:
    """Complete effective configuration, re-parseable by the loader."""
    full = {section: dict(values) for section, values in cfg.items()}
    full.setdefault("backbone", {})["archive"] = str(weights)
    t = full.setdefault("train", {})
    for key in ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
                "total_iterations", "clean_pair_period", "feature_resize",
                "seed", "checkpoint_period", "log_period", "deterministic"):
        t[key] = getattr(train_cfg, key)
    lo = full.setdefault("loss", {})
    lo["alpha"] = train_cfg.weights.alpha
    lo["beta"] = train_cfg.weights.beta
    for term in ("app", "structure", "id"):
        lo[f"disable_{term}"] = getattr(train_cfg, f"disable_{term}")
    return format_config(full)


def _cmd_transfer(args) -> int:
    structure_img = load_image(args.structure)
    appearance_img = load_image(args.appearance)
    backbone = _load_backbone(args)
    cfg = _merged_config(args)
    out_root = Path(args.out)

    if args.resume:
        if args.runs != 1:
            raise UsageError("--resume and --runs are mutually exclusive")
        result = resume_training(out_root, backbone, structure_img, appearance_img,
                                 total_iterations=args.iterations)
        report = evaluate_transfer(backbone, structure_img, appearance_img,
                                   result.final_image)
        append_report(result.run_dir, report)
        _print_report(result, report)
        return 0

    base = _effective_train_cfg(args, cfg)
    for k in range(args.runs):
        run_dir = out_root if args.runs == 1 else out_root / f"seed_{base.seed + k}"
        run_dir.mkdir(parents=True, exist_ok=True)
        settings = {**vars(base)}
        settings["seed"] = base.seed + k
        weights = settings.pop("weights")
        train_cfg = TrainConfig(weights=weights, **settings)
        (run_dir / CONFIG_SNAPSHOT).write_text(
            _snapshot_text(cfg, train_cfg, _weights_path(args)))
        run_manifest.append_event(
            run_dir, "inputs",
            structure=str(args.structure), structure_sha256=file_sha256(args.structure),
            appearance=str(args.appearance), appearance_sha256=file_sha256(args.appearance),
            weights_checksum=backbone.load_checksum,
        )
        result = train(structure_img, appearance_img, train_cfg, backbone, run_dir,
                       generator_config=generator_config_from(cfg, train_cfg.seed + 1),
                       policy=augmentation_policy_from(cfg))
        report = evaluate_transfer(backbone, structure_img, appearance_img,
                                   result.final_image)
        append_report(run_dir, report)
        _print_report(result, report)
    return 0


def _print_report(result, report):
    print(f"final output: {result.run_dir / 'outputs' / 'final.png'}")
    print(f"appearance distance {report.appearance_distance:.4f} "
          f"(baseline {report.appearance_baseline:.4f}, "
          f"improved={report.appearance_improved})")
    print(f"structure distance {report.structure_distance:.4f} "
          f"(baseline {report.structure_baseline:.4f}, "
          f"preserved={report.structure_preserved})")


def _cmd_invert(args) -> int:
    image = load_image(args.image)
    backbone = _load_backbone(args)
    cfg = _merged_config(args)
    settings = inversion_settings_from(cfg)
    if args.iterations is not None:
        settings["iterations"] = args.iterations
    if args.stop_ratio is not None:
        settings["stop_ratio"] = args.stop_ratio
    if args.pixel_baseline:
        settings["pixel_baseline"] = True
    config = InversionConfig(seed=args.seed or 0, **settings)
    out = Path(args.out)

    if args.across_layers:
        results = invert_cls_across_layers(backbone, image, config, run_dir=out)
        for layer, res in sorted(results.items()):
            print(f"layer {layer}: best distance {res.best_distance:.5f} "
                  f"({100 * res.reached_ratio:.1f}% of initial)")
        return 0

    target = capture_target(backbone, image, layer=args.layer, facet=args.facet,
                            feature_resize=config.feature_resize)
    result = invert(backbone, target, config, run_dir=out)
    print(f"best distance {result.best_distance:.5f} "
          f"({100 * result.reached_ratio:.1f}% of initial) "
          f"after {result.stopped_at} iterations")
    return 0


def _cmd_pca_keys(args) -> int:
    image = load_image(args.image)
    backbone = _load_backbone(args)
    layer = args.layer if args.layer is not None else backbone.num_layers
    if not 1 <= layer <= backbone.num_layers:
        raise UsageError(f"layer {layer} out of range 1..{backbone.num_layers}")
    if args.components < 1:
        raise UsageError("--components must be >= 1")
    with torch.no_grad():
        x = backbone.preprocess(image)
        feats = backbone.forward_features(x, [layer])
    gh = x.shape[-2] // backbone.config.patch_size
    gw = x.shape[-1] // backbone.config.patch_size
    keys = extract_keys(feats, layer)[0]
    sim = key_self_similarity(keys, source_layer=layer, grid=(gh, gw))
    components = selfsim_pca(sim, args.components, grid=(gh, gw))
    out = export_pca_maps(components, args.out)
    if components.degenerate:
        print("warning: similarity spectrum is flat; maps carry no signal",
              file=sys.stderr)
    if args.dump_features:
        dump_features(feats, Path(args.out) / "features")
    print(f"wrote {args.components} component maps to {out}")
    return 0


def _cmd_convert_weights(args) -> int:
    source = Path(args.source)
    if not source.is_file():
        raise InputError(f"checkpoint not found: {source}")
    archive = convert_vit_checkpoint(source, num_heads=args.num_heads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    archive.save(out)
    print(f"wrote archive {out} ({archive.parameter_count} parameters, "
          f"checksum {archive.checksum()[:16]})")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "transfer": _cmd_transfer,
        "invert": _cmd_invert,
        "pca-keys": _cmd_pca_keys,
        "convert-weights": _cmd_convert_weights,
    }
    try:
        return handlers[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
