#!/usr/bin/env python3
"""
rledx command line: phantom generation, training, FCN conversion, diagnosis,
evaluation experiments and benchmarks.

    python rledx.py gen-data --set data.n=100
    python rledx.py train-localizer --manifest runs/<run>/data
    python rledx.py evaluate --manifest runs/<run>/data --threads 4

Every command writes into a fresh run directory named by timestamp and seed,
starting with a snapshot of the resolved configuration. Exit codes: 0 success,
1 invalid input/config, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from errors import InvalidArgumentError, RledxError
from run_config import RunConfig, clinical_scale, load_config, resolve_threads, save_config

logger = logging.getLogger("rledx")

THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
VARIANT_NAMES = ("RL+FCN+RLE", "RL+CNN", "CNN")


def setup_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="[%(levelname)s] %(message)s", stream=sys.stderr, force=True)


def pin_threads(threads: int):
    """BLAS pools read these at import time, so this runs before numpy is loaded"""
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(threads)


def make_run_dir(cfg: RunConfig, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(cfg.output_dir) / f"{stamp}-{command}-seed{cfg.seed}"
    suffix = 1
    while run_dir.exists():
        suffix += 1
        run_dir = Path(cfg.output_dir) / f"{stamp}-{command}-seed{cfg.seed}-{suffix}"
    run_dir.mkdir(parents=True)
    save_config(cfg, run_dir / "config.txt")
    return run_dir


def parse_triple(text: str, name: str):
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise InvalidArgumentError(f"--{name} expects x,y,z integers, got {text!r}") from None
    if len(values) != 3:
        raise InvalidArgumentError(f"--{name} expects three values, got {text!r}")
    return values


def parse_int_list(text: str, name: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidArgumentError(f"--{name} expects comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, run_dir: Path, threads: int) -> int:
    from phantom_gen import PhantomSpec, generate_dataset

    out_dir = Path(args.out) if args.out else run_dir / "data"
    spec = PhantomSpec.from_config(cfg.phantom, cfg.seed)
    manifest = generate_dataset(spec, cfg.data.n, cfg.data.positive_fraction, cfg.data.folds,
                                cfg.seed, out_dir, threads)
    print(f"[INFO] {len(manifest)} phantoms ({manifest.positives()} positive) in {out_dir}")
    return 0


def _entries(args, cfg: RunConfig):
    from phantom_gen import DatasetManifest

    manifest = DatasetManifest.load(args.manifest)
    if args.fold is None:
        return manifest, manifest.entries, []
    if args.fold not in manifest.folds:
        raise InvalidArgumentError(f"fold {args.fold} not in manifest folds {manifest.folds}")
    train_entries, test_entries = manifest.split(args.fold)
    return manifest, train_entries, test_entries


def cmd_train_localizer(args, cfg: RunConfig, run_dir: Path, threads: int) -> int:
    from rl_localizer import evaluate_localization, train_actor_critic

    _, train_entries, test_entries = _entries(args, cfg)
    net, _ = train_actor_critic(train_entries, cfg, run_dir / "localizer_train.csv",
                                val_entries=test_entries or None)
    net.save(run_dir / "localizer.rnnp")
    evaluate_localization(test_entries or train_entries, net, cfg, out_path=run_dir / "localization_errors.csv")
    print(f"[INFO] Localizer saved to {run_dir / 'localizer.rnnp'}")
    return 0


def cmd_train_classifier(args, cfg: RunConfig, run_dir: Path, threads: int) -> int:
    from patch_classifier import cross_validate, train, train_fold, write_metrics_csv

    manifest, _, _ = _entries(args, cfg)
    if args.fold is not None:
        row, model = train_fold(manifest, args.fold, cfg, out_dir=run_dir)
        write_metrics_csv([row], run_dir / "classifier_metrics.csv")
    else:
        rows = cross_validate(manifest, cfg, out_dir=run_dir)
        write_metrics_csv(rows, run_dir / "classifier_metrics.csv")
        model = train(manifest.entries, cfg, log_path=run_dir / "classifier_train.csv")
    model.save(run_dir / "classifier.rnnp")
    print(f"[INFO] Classifier saved to {run_dir / 'classifier.rnnp'}")
    return 0


def cmd_convert_fcn(args, cfg: RunConfig, run_dir: Path, threads: int) -> int:
    from fcn_scoremap import convert_to_fcn
    from patch_classifier import ClassifierModel

    fcn = convert_to_fcn(ClassifierModel.load(args.classifier))
    out = Path(args.out) if args.out else run_dir / "fcn.rnnp"
    fcn.save(out)
    print(f"[INFO] FCN (f={fcn.upsampling}) saved to {out}")
    return 0


def _load_fcn(args):
    from fcn_scoremap import FcnModel, convert_to_fcn
    from patch_classifier import ClassifierModel

    if args.fcn:
        return FcnModel.load(args.fcn)
    if args.classifier:
        return convert_to_fcn(ClassifierModel.load(args.classifier))
    raise InvalidArgumentError("diagnose needs --fcn or --classifier")


def cmd_diagnose(args, cfg: RunConfig, run_dir: Path, threads: int) -> int:
    from rl_localizer import PolicyValueNet
    from rle_diagnosis import diagnose
    from volume_core import load_volume

    volume = load_volume(args.volume)
    fcn = _load_fcn(args)
    base = parse_triple(args.base, "base") if args.base else None
    if base is None and not args.localizer:
        raise InvalidArgumentError("diagnose needs --localizer or --base")
    localizer = PolicyValueNet.load(args.localizer) if args.localizer else None
    result = diagnose(volume, localizer, fcn, cfg, base=base)
    record = result.export(run_dir)
    print(f"[INFO] S_f={result.final_score:.6g} at {result.minimum} "
          f"(x_apx={tuple(result.localized_base)}, fallback={result.fallback}) -> {record}")
    return 0


def cmd_evaluate(args, cfg: RunConfig, run_dir: Path, threads: int) -> int:
    from phantom_gen import DatasetManifest
    from rle_diagnosis import ModelBundle, Variant, evaluate_pipeline, train_bundle, write_summary_csv

    manifest = DatasetManifest.load(args.manifest)
    variants = [Variant(v) for v in (args.variants.split(",") if args.variants else VARIANT_NAMES)]
    bundles = {}
    for fold in manifest.folds:
        models_dir = Path(args.models) / f"fold{fold}" if args.models else None
        if models_dir is not None and models_dir.is_dir():
            bundles[fold] = ModelBundle.load(models_dir)
        else:
            train_entries, _ = manifest.split(fold)
            logger.info(f"Training models for fold {fold} on {len(train_entries)} phantoms")
            bundles[fold] = train_bundle(train_entries, cfg, variants, run_dir / f"fold{fold}")
    results = [evaluate_pipeline(manifest, bundles, v, cfg, threads, out_dir=run_dir) for v in variants]
    write_summary_csv(results, run_dir / "evaluation.csv")
    for r in results:
        row = r.summary_row()
        print(f"[INFO] {row[0]}: AUC {row[1]:.3f} +/- {row[2]:.3f}")
    return 0


def cmd_sweep_patch_size(args, cfg: RunConfig, run_dir: Path, threads: int) -> int:
    from patch_classifier import patch_size_sweep
    from phantom_gen import DatasetManifest
    from run_config import write_csv

    manifest = DatasetManifest.load(args.manifest)
    table = patch_size_sweep(manifest, parse_int_list(args.edges, "edges"), cfg)
    write_csv(run_dir / "patch_size_sweep.csv", ("edge", "mean_auc"), table)
    for edge, auc in table:
        print(f"[INFO] edge {edge}: mean AUC {auc:.3f}")
    return 0


def cmd_bench(args, cfg: RunConfig, run_dir: Path, threads: int) -> int:
    from fcn_scoremap import bench_scoremap
    from patch_classifier import ClassifierModel
    from phantom_gen import DatasetManifest
    from rl_localizer import PolicyValueNet, localize
    from volume_core import Region, octant_region

    manifest = DatasetManifest.load(args.manifest)
    if not 0 <= args.index < len(manifest):
        raise InvalidArgumentError(f"--index {args.index} outside the manifest (0..{len(manifest) - 1})")
    entry = manifest.entries[args.index]
    volume = entry.load()
    model = ClassifierModel.load(args.classifier)
    region = Region.centered(entry.truth.base, (args.extent,) * 3).clip(volume.dims)
    localize_fn = None
    if args.localizer:
        net = PolicyValueNet.load(args.localizer)
        octant = octant_region(volume.dims, cfg.phantom.octant)
        localize_fn = lambda: localize(volume, net, octant, cfg.rl.max_steps, cfg.rl.tail_k)
    report = bench_scoremap(model, volume, region, cfg.fcn.upsample, localize_fn=localize_fn)
    report.write_csv(run_dir / "bench.csv")
    print(f"[INFO] sliding {report.sliding_seconds:.2f}s vs fcn {report.fcn_seconds:.2f}s ({report.ratio:.1f}x)")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-localizer": cmd_train_localizer,
    "train-classifier": cmd_train_classifier,
    "convert-fcn": cmd_convert_fcn,
    "diagnose": cmd_diagnose,
    "evaluate": cmd_evaluate,
    "sweep-patch-size": cmd_sweep_patch_size,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--clinical-scale", action="store_true", help="start from the clinical-scale preset")
    common.add_argument("--threads", type=int, help="worker threads (default: $RLEDX_THREADS or 1)")
    common.add_argument("--verbose", action="store_true")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="rledx", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a phantom dataset and manifest")
    p.add_argument("--out", help="dataset directory (default: <run>/data)")

    for name in ("train-localizer", "train-classifier"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--manifest", required=True)
        p.add_argument("--fold", type=int, help="hold this fold out")

    p = sub.add_parser("convert-fcn", parents=[common])
    p.add_argument("--classifier", required=True)
    p.add_argument("--out")

    p = sub.add_parser("diagnose", parents=[common])
    p.add_argument("--volume", required=True)
    p.add_argument("--localizer")
    p.add_argument("--classifier")
    p.add_argument("--fcn")
    p.add_argument("--base", help="x,y,z; skips localization")

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANT_NAMES)}")
    p.add_argument("--models", help="directory of fold<k>/ model bundles; trained when absent")

    p = sub.add_parser("sweep-patch-size", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--edges", default="31,63")

    p = sub.add_parser("bench", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--localizer")
    p.add_argument("--index", type=int, default=0, help="manifest entry to benchmark on")
    p.add_argument("--extent", type=int, default=64)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        cfg = load_config(args.config, args.set)
        if args.clinical_scale:
            cfg = clinical_scale(cfg)
        threads = resolve_threads(args.threads, cfg)
        pin_threads(threads)
        run_dir = make_run_dir(cfg, args.command)
        logger.info(f"{args.command}: run directory {run_dir} ({threads} thread(s))")
        return COMMANDS[args.command](args, cfg, run_dir, threads)
    except RledxError as e:
        logger.error(str(e))
        if args.verbose:
            logger.exception("details")
        return e.exit_code
    except (OSError, KeyError) as e:
        logger.error(f"input error: {e}")
        if args.verbose:
            logger.exception("details")
        return 1
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        if args.verbose:
            logger.exception("details")
        return 2


if __name__ == "__main__":
    sys.exit(main())
