"""Command-line entry point: ``bilateral-vit <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__

logger = logging.getLogger("bilateral_vit")


def _positive_int(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _overrides(args) -> dict:
    ov = {"network": {}, "training": {}, "data": {}}
    if getattr(args, "variant", None):
        from .types import parse_variant

        ov["network"]["variant"] = parse_variant(args.variant).value
    if getattr(args, "input_size", None):
        ov["network"]["input_size"] = args.input_size
    for name in ("epochs", "batch_size", "seed"):
        if getattr(args, name, None) is not None:
            ov["training"][name] = getattr(args, name)
    if getattr(args, "vessel_source", None):
        ov["data"]["vessel_source"] = args.vessel_source
    if getattr(args, "vessel_checkpoint", None):
        ov["data"]["vessel_checkpoint"] = args.vessel_checkpoint
    if getattr(args, "no_augment", False):
        ov["data"]["augment"] = False
    return ov


def _split(samples, data_cfg, seed):
    from .datasets import make_split

    if data_cfg.split_scheme == "manifest" and any(s.split == "test" for s in samples):
        return make_split(samples, "manifest")
    if data_cfg.split_scheme == "manifest" and all(s.split in (None, "train") for s in samples):
        return list(samples), []
    return make_split(samples, "ratio", seed=seed, frac=data_cfg.split_frac)


def cmd_make_synth(args):
    from .datasets import synth_dataset

    out = Path(args.out)
    ds = synth_dataset(args.n, args.size, args.seed, out_dir=out, test_fraction=args.test_fraction,
                       dataset_tag=out.resolve().name)
    print(f"wrote {len(ds.samples)} samples and {ds.manifest_path}")


def cmd_train(args):
    from .datasets import load_dataset
    from .pipeline import load_run_config, new_run_dir, resolve_cache_dir, train_run

    config = load_run_config(args.config, _overrides(args))
    samples, report = load_dataset(args.data)
    train_samples, val_samples = _split(samples, config.data, config.training.seed)
    run_dir = Path(args.run_dir) if args.run_dir else new_run_dir(args.out, config)
    cache_dir = resolve_cache_dir(config.data, args.data, args.cache_dir)
    _, result = train_run(train_samples, config, run_dir, val_samples, cache_dir, resume=args.resume)
    print(f"run dir: {run_dir}")
    print(f"final train loss {result.final_loss:.4f} after {result.iterations} iterations")


def cmd_predict(args):
    from .datasets import load_dataset
    from .inference import predict, write_predictions
    from .network import load_model, read_checkpoint
    from .pipeline import DataConfig, make_vessel_provider, resolve_cache_dir

    payload = read_checkpoint(args.checkpoint)
    model = load_model(args.checkpoint)
    data_cfg = DataConfig(**payload.get("data_config", {}))
    provider = make_vessel_provider(model.config.variant, data_cfg,
                                     resolve_cache_dir(data_cfg, args.data, args.cache_dir))
    norm = payload.get("normalization", {})
    samples, _ = load_dataset(args.data, split=args.split)
    kwargs = {"mean": norm["mean"], "std": norm["std"]} if norm else {}
    preds = [predict(model, s, vessel_provider=provider, **kwargs) for s in samples]
    write_predictions(preds, args.out)
    print(f"wrote {len(preds)} predictions to {args.out}")


def cmd_eval(args):
    from .datasets import load_dataset
    from .evaluation import format_table
    from .pipeline import DataConfig, evaluate_checkpoint, resolve_cache_dir
    from .types import EvalThresholds

    samples, _ = load_dataset(args.data)
    split = args.split
    if split is None and any(s.split == "test" for s in samples):
        split = "test"
    if split is not None and split != "all":
        samples = [s for s in samples if s.split == split]
    thresholds = EvalThresholds.preset(args.thresholds)
    if args.predictions:
        from .evaluation import emit_report, evaluate
        from .inference import read_predictions

        preds = read_predictions(args.predictions)
        report = evaluate(preds, samples, thresholds, train_dataset=args.train_tag,
                          test_dataset=samples[0].dataset_tag if samples else None)
        files = emit_report(report, args.report_dir)
    else:
        cache_dir = resolve_cache_dir(DataConfig(), args.data, args.cache_dir)
        report, files = evaluate_checkpoint(args.checkpoint, samples, thresholds, args.report_dir,
                                            cache_dir=cache_dir)
    print(format_table(report), end="")
    for f in files:
        print(f"wrote {f}")


def cmd_ablate(args):
    from .datasets import load_dataset
    from .evaluation import format_comparison
    from .pipeline import (RunConfig, evaluate_checkpoint, load_run_config, resolve_cache_dir,
                           run_is_complete, train_run)
    from .types import EvalThresholds, Variant

    base = load_run_config(args.config, _overrides(args))
    samples, _ = load_dataset(args.data)
    train_samples, test_samples = _split(samples, base.data, base.training.seed)
    if not test_samples:
        test_samples = train_samples
    run_dir = Path(args.run_dir) if args.run_dir else Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = resolve_cache_dir(base.data, args.data, args.cache_dir)
    thresholds = EvalThresholds.preset(args.thresholds)
    split_record = {"train": [s.id for s in train_samples], "test": [s.id for s in test_samples]}
    (run_dir / "split.json").write_text(json.dumps(split_record, indent=1))

    reports = {}
    for variant in Variant:
        cfg = RunConfig(network=base.network.replace(variant=variant), training=base.training, data=base.data)
        vdir = run_dir / variant.value
        if run_is_complete(vdir, cfg.training.epochs):
            logger.info("%s already trained; skipping", variant.value)
        else:
            resume = (vdir / "last.pt").is_file()
            train_run(train_samples, cfg, vdir, (), cache_dir, resume=resume)
        report, _ = evaluate_checkpoint(vdir / "last.pt", test_samples, thresholds, vdir / "report",
                                        cache_dir=cache_dir)
        reports[variant.label] = report
    table = format_comparison(reports)
    (run_dir / "ablation.txt").write_text(table)
    (run_dir / "ablation.json").write_text(json.dumps({
        name: {"accuracy": {str(m): r.accuracy(m) for m in r.thresholds.multipliers},
               "mean_pixel_error": r.mean_pixel_error}
        for name, r in reports.items()
    }, indent=1))
    print(table, end="")


def cmd_train_vessels(args):
    from .pipeline import load_run_config
    from .vessels import load_drive_pairs, train_vessel_model

    config = load_run_config(args.config, _overrides(args))
    pairs = load_drive_pairs(args.data)
    _, result = train_vessel_model(pairs, config.network, config.training, out_dir=args.out,
                                   resume=args.resume, seed=config.training.seed)
    print(f"vessel model checkpoint: {result.last_checkpoint}")


def cmd_cache_vessels(args):
    from .datasets import load_dataset
    from .network import load_model
    from .preprocessing import preprocess_image
    from .vessels import VesselCache, vessel_map_from_model

    model = load_model(args.checkpoint)
    samples, _ = load_dataset(args.data)
    cache = VesselCache(args.cache_dir)
    for s in samples:
        image01, _ = preprocess_image(s.load_image(), args.input_size)
        cache.put(s.dataset_tag, s.id, vessel_map_from_model(model, image01))
    print(f"cached {len(samples)} vessel maps under {cache.root}")


def cmd_show_config(args):
    from .pipeline import load_run_config

    print(yaml.safe_dump(load_run_config(args.config, _overrides(args)).to_dict(), sort_keys=False), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bilateral-vit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp, data_help="dataset directory containing manifest.csv"):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--data", required=True, help=data_help)
        sp.add_argument("--variant", help="vit_plain | vit_vb_plain | vit_vb_mff | vit_vbfundus_mff")
        sp.add_argument("--input-size", type=_positive_int)
        sp.add_argument("--epochs", type=_positive_int)
        sp.add_argument("--batch-size", type=_positive_int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--vessel-source", choices=("cache", "model", "synthetic"))
        sp.add_argument("--vessel-checkpoint")
        sp.add_argument("--cache-dir", help="vessel-map cache (default: $BILATERAL_CACHE or <data>/vessel_cache)")
        sp.add_argument("--no-augment", action="store_true")
        sp.add_argument("--run-dir", help="exact run directory (reuse to resume)")

    sp = sub.add_parser("make-synth", help="generate a synthetic dataset")
    sp.add_argument("--n", type=_positive_int, required=True)
    sp.add_argument("--size", type=_positive_int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--test-fraction", type=float, default=0.25)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_synth)

    sp = sub.add_parser("train", help="train one model")
    run_flags(sp)
    sp.add_argument("--out", default="runs", help="parent directory for timestamped run dirs")
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="write per-sample fovea predictions (JSON lines)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--cache-dir")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="evaluate a checkpoint (or a predictions file) under the R rule")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="JSON-lines predictions to score instead of running a model")
    sp.add_argument("--train-tag", help="training-dataset name for reports built from --predictions")
    sp.add_argument("--data", required=True)
    sp.add_argument("--thresholds", choices=("messidor", "palm"), default="messidor")
    sp.add_argument("--report-dir", required=True)
    sp.add_argument("--split", help="manifest split to score (default: test if present; 'all' for every row)")
    sp.add_argument("--cache-dir")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare all four variants")
    run_flags(sp)
    sp.add_argument("--out", required=True, help="ablation run directory")
    sp.add_argument("--thresholds", choices=("messidor", "palm"), default="messidor")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("train-vessels", help="train a vessel segmentation model on DRIVE-layout data")
    run_flags(sp, data_help="directory with images/ and 1st_manual/")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train_vessels)

    sp = sub.add_parser("cache-vessels", help="fill the vessel cache from a vessel model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--input-size", type=_positive_int, default=512)
    sp.add_argument("--cache-dir", required=True)
    sp.set_defaults(func=cmd_cache_vessels)

    sp = sub.add_parser("show-config", help="print the resolved run config")
    sp.add_argument("--config")
    sp.add_argument("--variant")
    sp.add_argument("--input-size", type=_positive_int)
    sp.add_argument("--epochs", type=_positive_int)
    sp.add_argument("--batch-size", type=_positive_int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        if args.verbose:
            logger.exception("command failed")
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"bilateral-vit {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
