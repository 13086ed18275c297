#!/usr/bin/env python3
"""Run the multi-seed phantom experiments (method ordering, patch-size trend,
localization error, perturbation robustness, score-map speedup) and save a
JSON report."""
import json
import os
import sys
import time

# Ensure repo root is on sys.path so the rledx modules can be imported
repo_root = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if repo_root not in sys.path:
    sys.path.insert(0, repo_root)

import numpy as np

from fcn_scoremap import bench_scoremap
from patch_classifier import patch_size_sweep
from phantom_gen import PhantomSpec, generate_dataset
from rl_localizer import error_table, localization_errors
from rle_diagnosis import Variant, diagnose, evaluate_pipeline, train_bundle
from run_config import load_config, resolve_threads
from volume_core import Region

SEEDS = [0, 1, 2]
PERTURBATION = 6


def perturbation_gaps(entries, bundle, cfg, rng):
    """|S_f(perturbed base) - S_f(true base)| per held-out phantom"""
    gaps = []
    for entry in entries:
        volume = entry.load()
        truth = np.asarray(entry.truth.base)
        delta = rng.integers(-PERTURBATION, PERTURBATION + 1, size=3)
        if np.linalg.norm(delta) > PERTURBATION:
            delta = np.round(delta * PERTURBATION / np.linalg.norm(delta)).astype(int)
        clean = diagnose(volume, None, bundle.fcn, cfg, base=truth).final_score
        moved = diagnose(volume, None, bundle.fcn, cfg, base=truth + delta).final_score
        gaps.append(abs(moved - clean))
    return gaps


def run_seed(seed, overrides, out_root, threads):
    cfg = load_config(None, overrides + [f"seed={seed}"])
    data_dir = os.path.join(out_root, f"seed{seed}", "data")
    spec = PhantomSpec.from_config(cfg.phantom, seed)
    manifest = generate_dataset(spec, cfg.data.n, cfg.data.positive_fraction, cfg.data.folds, seed,
                                data_dir, threads)
    variants = list(Variant)
    bundles = {}
    for fold in manifest.folds:
        train_entries, _ = manifest.split(fold)
        print(f"[PROGRESS] seed {seed}: training fold {fold}")
        bundles[fold] = train_bundle(train_entries, cfg, variants,
                                     os.path.join(out_root, f"seed{seed}", f"fold{fold}"))

    results = {v.value: evaluate_pipeline(manifest, bundles, v, cfg, threads) for v in variants}
    entry = {"seed": seed, "variants": {}}
    for name, metrics in results.items():
        row = metrics.summary_row()
        entry["variants"][name] = {"auc_mean": row[1], "auc_sd": row[2],
                                   "sensitivity_mean": row[3], "specificity_mean": row[5]}

    first_fold = manifest.folds[0]
    _, held_out = manifest.split(first_fold)
    bundle = bundles[first_fold]
    table = error_table(localization_errors(held_out, bundle.localizer, cfg))
    entry["localization"] = {k: vars(v) for k, v in table.items()}

    gaps = perturbation_gaps(held_out, bundle, cfg, np.random.default_rng(seed))
    entry["robustness_median_gap"] = float(np.median(gaps))

    sweep = patch_size_sweep(manifest, [31, 63], cfg)
    entry["patch_size_sweep"] = {str(edge): auc for edge, auc in sweep}

    volume = held_out[0].load()
    region = Region.centered(held_out[0].truth.base, (64, 64, 64)).clip(volume.dims)
    report = bench_scoremap(bundle.classifier, volume, region, cfg.fcn.upsample, fcn=bundle.fcn)
    entry["bench"] = {"sliding_seconds": report.sliding_seconds, "fcn_seconds": report.fcn_seconds,
                      "ratio": report.ratio}
    return entry


def main():
    overrides = [arg for arg in sys.argv[1:] if "=" in arg]
    threads = resolve_threads()
    out_root = os.path.join(repo_root, "runs", f"experiments-{time.strftime('%Y%m%d-%H%M%S')}")
    os.makedirs(out_root, exist_ok=True)

    results = []
    for seed in SEEDS:
        print(f"[INFO] Running seed {seed}")
        try:
            results.append(run_seed(seed, overrides, out_root, threads))
        except Exception as e:
            print(f"[ERROR] seed {seed} failed: {e}")
            results.append({"seed": seed, "error": str(e)})

    out_path = os.path.join(out_root, "experiments.json")
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump({"generated_at": time.time(), "seeds": results}, f, indent=2)

    print(f"Saved {len(results)} seed results to {out_path}")


if __name__ == "__main__":
    main()
