"""Command-line entry point: ``jdrl {train,eval,infer,synth-data,dump-kernels}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional, get_type_hints

import torch

from . import kernels as K
from .config import TrainingConfig
from .data import (IMAGE_SUFFIXES, GeneratorConfig, generate_dataset, read_image, to_image, to_tensor,
                   write_image)
from .errors import JDRLError
from .flow import available_estimators, estimate_flow, get_estimator

log = logging.getLogger("jdrl")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One override flag per config key; ``--no_mask`` and ``--no-mask`` both work."""
    group = parser.add_argument_group("config overrides")
    hints = get_type_hints(TrainingConfig)
    for f in fields(TrainingConfig):
        names = {f"--{f.name}", f"--{f.name.replace('_', '-')}"}
        if f.name == "lam":
            names.add("--lambda")
        kind = hints[f.name]
        if kind is bool:
            group.add_argument(*sorted(names), dest=f.name, nargs="?", const=True, type=_parse_bool, default=None)
        else:
            conv = {int: int, float: float}.get(kind, str)
            group.add_argument(*sorted(names), dest=f.name, type=conv, default=None)


def config_from_args(args) -> TrainingConfig:
    base = TrainingConfig.from_file(args.config).to_dict() if args.config else {}
    for f in fields(TrainingConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            base[f.name] = value
    return TrainingConfig.from_dict(base)


def _images_in(path: Path) -> List[Path]:
    if path.is_dir():
        return [p for p in sorted(path.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    return [path]


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import train

    config = config_from_args(args)
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    config.to_file(Path(config.out_dir) / "config.yaml")
    trainer = train(config, resume=args.resume, force=args.force)
    print(f"trained to epoch {trainer.epoch}; checkpoints in {config.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_directories, write_report

    estimator = get_estimator(args.estimator) if args.mode != "gt" else None
    report = evaluate_directories(args.pred_dir, args.gt_dir, args.mode, estimator,
                                  metadata={"estimator": args.estimator, "mode": args.mode})
    write_report(report, args.out)
    for mode, agg in report.aggregate().items():
        print(f"{mode}: PSNR {agg['psnr']:.3f}  SSIM {agg['ssim']:.4f}  MAE {agg['mae']:.5f}  (n={agg['count']})")
    if report.flagged:
        print(f"flagged (estimator failed): {', '.join(report.flagged)}")
    return 0


def cmd_infer(args) -> int:
    from .trainer import infer, load_deblur_network

    net = load_deblur_network(args.checkpoint)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _images_in(Path(args.input)):
        pred = infer(net, to_tensor(read_image(path)), tile=args.tile, overlap=args.overlap, halo=args.halo)
        write_image(out_dir / f"{path.stem}.png", to_image(pred.clamp(0, 1)), bits=args.bits)
        log.info("wrote %s", out_dir / f"{path.stem}.png")
    return 0


def cmd_synth_data(args) -> int:
    cfg = {}
    if args.config:
        import yaml
        with open(args.config) as fh:
            cfg = yaml.safe_load(fh) or {}
    for key in ("count", "size", "radius_family", "radius_min", "radius_max", "kind", "zoom", "jitter",
                "test_fraction", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    if args.shift is not None:
        cfg["shift"] = tuple(args.shift)
    if "shift" in cfg:
        cfg["shift"] = tuple(cfg["shift"])
    records = generate_dataset(args.out, GeneratorConfig(**cfg))
    print(f"wrote {len(records)} pairs to {args.out}")
    return 0


def _parse_pixel(text: str):
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pixel must be 'y,x', got {text!r}") from None
    return y, x


def cmd_dump_kernels(args) -> int:
    from .debug import dump_flow, dump_kernels, dump_stack
    from .deformation import calibration_mask
    from .reblur import assemble_reblur_stack, normalize_weights
    from .trainer import build_components

    ckpt = torch.load(args.checkpoint, map_location="cpu", weights_only=False)
    config = TrainingConfig.from_dict(ckpt["config"])
    nets = build_components(config)
    for name, net in nets.items():
        net.load_state_dict(ckpt["components"][name])
        net.eval()
    blurry = to_tensor(read_image(args.blurry))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        pred = nets["deblur"](blurry)
        seeds = nets["kpn"](pred, blurry)
        if config.no_isotropic:
            bank = K.FreeFormKernelBank(seeds, config.m, config.normalization)
        else:
            bank = K.IsotropicKernelBank(seeds, config.m, config.normalization)
        h, w = bank.spatial_shape
        for y, x in args.pixel:
            if not (0 <= y < h and 0 <= x < w):
                raise SystemExit(f"pixel {y},{x} outside the {h}x{w} image")
        dump_kernels(bank, args.pixel, out)
        if args.stack:
            dump_stack(assemble_reblur_stack(pred, bank), normalize_weights(nets["wpn"](pred, blurry)), out)
        if args.sharp:
            estimator = get_estimator(args.estimator or config.estimator)
            sharp = to_tensor(read_image(args.sharp))
            for prefix, src, tgt in (("flow_fwd", sharp, pred), ("flow_bwd", pred, sharp)):
                flow = estimate_flow(src, tgt, estimator)
                dump_flow(flow, calibration_mask(flow, config.lam), out, prefix=prefix)
    print(f"wrote dumps to {out}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jdrl", description="Misalignment-tolerant defocus deblurring.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a deblurring network")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against (deformed) ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--mode", choices=("gt", "deformed_gt", "both"), default="both")
    p.add_argument("--estimator", default="pyramid_lk", choices=available_estimators())
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="deblur images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--overlap", type=int, default=32)
    p.add_argument("--halo", type=int, default=None, help="context pixels around each tile (default: overlap)")
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth-data", help="generate a synthetic misaligned pair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML generator config")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--radius-family", dest="radius_family", choices=("constant", "ramp", "smooth"))
    p.add_argument("--radius-min", dest="radius_min", type=float)
    p.add_argument("--radius-max", dest="radius_max", type=float)
    p.add_argument("--kind", choices=("shift", "zoom", "compose"))
    p.add_argument("--shift", type=float, nargs=2, metavar=("DX", "DY"))
    p.add_argument("--zoom", type=float)
    p.add_argument("--jitter", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("dump-kernels", help="export per-pixel kernels and other intermediates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--blurry", required=True)
    p.add_argument("--pixel", type=_parse_pixel, action="append", required=True, help="'y,x'; repeatable")
    p.add_argument("--out", required=True)
    p.add_argument("--stack", action="store_true", help="also dump reblur levels and weight maps")
    p.add_argument("--sharp", help="sharp target; dumps color-coded flows and calibration masks")
    p.add_argument("--estimator", choices=available_estimators())
    p.set_defaults(func=cmd_dump_kernels)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except JDRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
