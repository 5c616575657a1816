"""``mvseg`` command line: gen, train, encode-priors, eval, params, overlays, experiment.

Exit codes: 0 success, 1 user error (bad flags, invalid config, missing
files), 2 internal error.
"""
import argparse
import logging
import shutil
import sys
import traceback
from pathlib import Path

import torch

from . import datastore, metrics, overlay, phantom, trainer
from .config import load_config, phantom_section, phantom_settings, write_config
from .errors import ConfigError, InputError, MVSegError, NotFoundError
from .mv_unet import MVUNet, MVUNetConfig, count_conv_weights

log = logging.getLogger("mvseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for internal errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seeded(args, default=0):
    seed = args.seed if args.seed is not None else default
    torch.manual_seed(seed)
    return seed


def _checkpoint_path(path):
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"checkpoint not found: {path}")
    return path


def _snapshot(out, args, cfg, extra=None):
    """Record the fully resolved configuration next to the outputs."""
    resolved = {k: dict(v) for k, v in cfg.items()}
    resolved.setdefault("trainer", {})
    cli = {k: v for k, v in vars(args).items() if k != "func" and v is not None}
    resolved["trainer"].update({f"cli_{k}": v if not isinstance(v, Path) else str(v)
                                for k, v in cli.items()})
    if extra:
        for section, values in extra.items():
            resolved.setdefault(section, {}).update(values)
    return write_config(resolved, Path(out) / "resolved_config.ini")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    cfg = load_config(args.config)
    ranges, view, extras = phantom_settings(cfg)
    n = args.n if args.n is not None else extras["n_subjects"]
    seed = _seeded(args, extras["seed"])
    split = args.split_fraction if args.split_fraction is not None else extras["split_fraction"]
    out = Path(args.out)
    existed = out.exists() and any(out.iterdir())
    try:
        manifest = phantom.generate_dataset(n, seed, out, ranges, view, split, overwrite=args.force)
    except BaseException:
        # never leave a half-written dataset behind
        if out.exists() and (args.force or not existed):
            shutil.rmtree(out, ignore_errors=True)
        raise
    extras = {"n_subjects": n, "seed": seed, "split_fraction": split}
    _snapshot(out, args, cfg, {"phantom": phantom_section(ranges, view, extras)})
    n_train = len(manifest.split_ids("train"))
    print(f"wrote {len(manifest.entries)} subjects to {out} "
          f"({n_train} train / {len(manifest.entries) - n_train} test); config {manifest.config_hash[:12]}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    overrides = dict(data=args.data, out=args.out, seed=args.seed, fraction=args.fraction,
                     epochs=args.epochs, batch=args.batch, lr=args.lr, priors=args.priors,
                     max_steps=args.max_steps, resume=args.resume or None)
    config = trainer.TrainConfig.from_sections(cfg, args.model, **overrides)
    if not config.data:
        raise ConfigError("no dataset given (--data or [trainer] data)")
    if not config.out:
        raise ConfigError("no output directory given (--out or [trainer] out)")
    torch.manual_seed(config.seed)
    if config.model == "shape_mae":
        result = trainer.train_shape_mae(config)
    else:
        if config.model == "mv_unet" and not config.priors:
            raise ConfigError("mv_unet needs a prior cache: pass --priors <dir> "
                              "(written by `mvseg encode-priors`)")
        result = trainer.train_segmenter(config)
    _snapshot(config.out, args, cfg, {"trainer": config.to_dict()})
    print(f"{config.model}: {len(result.curve)} epochs, final loss {result.curve[-1][1]:.5f}; "
          f"checkpoints in {result.out_dir}")
    return 0


def cmd_encode_priors(args):
    from .shape_mae import encode_priors

    _seeded(args)
    ckpt = datastore.load_checkpoint(_checkpoint_path(args.ckpt))
    if ckpt.kind != "shape_mae":
        raise ConfigError(f"{args.ckpt} holds a {ckpt.kind} model, not shape_mae")
    manifest = datastore.read_manifest(args.data)
    written, failures = encode_priors(manifest, ckpt, args.out)
    _snapshot(args.out, args, {})
    print(f"wrote {len(written)} prior files to {args.out}")
    for sid, msg in sorted(failures.items()):
        print(f"  failed {sid}: {msg}", file=sys.stderr)
    return 1 if failures else 0


def cmd_eval(args):
    _seeded(args)
    manifest = datastore.read_manifest(args.data)
    report = trainer.evaluate_checkpoint(_checkpoint_path(args.model_ckpt), manifest, args.split,
                                         args.priors)
    print(metrics.render_table([(report.model_id, len(manifest.split_ids("train")), report)]), end="")
    for sid, msg in sorted(report.failures.items()):
        print(f"  excluded {sid}: {msg}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_text(), encoding="utf-8")
        _snapshot(out, args, {})
    return 0


def cmd_params(args):
    cfg = MVUNetConfig(base_filters=args.base_filters, fuse_enabled=args.model == "mv_unet")
    model = MVUNet(cfg)
    total = count_conv_weights(model)
    fuse = count_conv_weights(model.fuse) if model.fuse is not None else 0
    print(f"{args.model}: {total} conv weights ({total / 1e6:.2f}M)"
          + (f", of which fuse block {fuse}" if fuse else ""))
    return 0


def cmd_overlays(args):
    _seeded(args)
    manifest = datastore.read_manifest(args.data)
    ckpt = datastore.load_checkpoint(_checkpoint_path(args.model_ckpt))
    predictor = trainer.SegmenterPredictor(trainer.model_from_checkpoint(ckpt))
    ids = manifest.split_ids(args.split)[:args.n]
    if len(ids) < args.n:
        raise InputError(f"split {args.split!r} has only {len(ids)} subjects (asked for {args.n})")
    out = Path(args.out)
    written = []
    for sid in ids:
        subject = manifest.load(sid)
        codes = None
        if predictor.needs_priors:
            if not args.priors:
                raise ConfigError("mv_unet overlays need --priors")
            path = datastore.priors_path(args.priors, sid)
            if not path.exists():
                raise NotFoundError(f"priors missing for {sid}: {path}")
            codes = datastore.read_priors(path, code_dim=path.stat().st_size // 16)
        written += overlay.write_overlays(subject, predictor(subject, codes), out)
    _snapshot(out, args, {})
    print(f"wrote {len(written)} overlay images to {out}")
    return 0


def cmd_experiment(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.epochs is not None:
        overrides = {m: {"epochs": args.epochs} for m in ("shape_mae", "mv_unet", "unet2d")}
    seeds = args.seeds if args.seeds else [_seeded(args)]
    reports, failures, table = trainer.run_experiment(args.data, args.out, args.models, args.fractions,
                                                      seeds, cfg, args.split, overrides)
    _snapshot(args.out, args, cfg)
    print(table, end="")
    for cell, msg in sorted(failures.items()):
        print(f"  cell {cell} failed: {msg}", file=sys.stderr)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="mvseg", description="Multi-view shape-prior cardiac segmentation toolkit.")
    parser.add_argument("--seed", type=int, default=None, help="global random seed")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (overrides global)")
        p.set_defaults(func=func)
        return p

    p = command("gen", cmd_gen, "generate a phantom dataset")
    p.add_argument("--n", type=int, default=None, help="number of subjects (>= 5)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--split-fraction", type=float, default=None, help="fraction of subjects in train")
    p.add_argument("--config", default=None, help="INI config with a [phantom] section")
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    p = command("train", cmd_train, "train shape_mae, mv_unet or unet2d")
    p.add_argument("--model", required=True, help="one of: " + ", ".join(datastore.MODEL_KINDS))
    p.add_argument("--config", default=None, help="INI config ([trainer], [shape_mae], [segmenter])")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--out", default=None, help="run output directory")
    p.add_argument("--fraction", type=float, default=None, help="fraction of training subjects used")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--priors", default=None, help="prior cache directory (mv_unet)")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")

    p = command("encode-priors", cmd_encode_priors, "write shape-code priors for every subject")
    p.add_argument("--ckpt", required=True, help="Shape MAE checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="prior cache directory")

    p = command("eval", cmd_eval, "evaluate a segmenter checkpoint per apex/mid/base region")
    p.add_argument("--model-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--priors", default=None, help="prior cache directory (mv_unet)")
    p.add_argument("--out", default=None, help="directory for report.json")

    p = command("params", cmd_params, "count convolution weights")
    p.add_argument("--model", required=True, choices=("mv_unet", "unet2d"))
    p.add_argument("--base-filters", type=int, default=16)

    p = command("overlays", cmd_overlays, "write contour overlays for apex/mid/base slices")
    p.add_argument("--model-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=3, help="number of subjects")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--priors", default=None)

    p = command("experiment", cmd_experiment, "run the model x fraction x seed matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--models", nargs="+", default=["unet2d", "mv_unet"], choices=("unet2d", "mv_unet"))
    p.add_argument("--fractions", nargs="+", type=float, default=[0.1])
    p.add_argument("--seeds", nargs="+", type=int, default=None)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--epochs", type=int, default=None, help="override epochs for every stage")
    p.add_argument("--config", default=None)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MVSegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
