#!/usr/bin/env python3
"""
Diagnosis from regions of low entropy (RLE).

Pipeline per volume:
    localize the appendiceal base with the RL agent
    -> crop the neighborhood of patch centres around it
    -> dense score map from the FCN
    -> binary entropy map
    -> threshold + 6-connected components, one minimum per component
    -> pick the minimum with the lowest distance-weighted entropy
    -> final score = classifier score at that minimum
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import ndimage

from errors import DomainError, InvalidArgumentError, NoCandidateError
from fcn_scoremap import FcnModel, LatticeMap, convert_to_fcn
from patch_classifier import (ClassifierModel, FoldMetrics, fold_metrics, octant_patch, predict,
                              train, train_whole_octant, write_metrics_csv)
from phantom_gen import DatasetManifest, ManifestEntry
from rl_localizer import PolicyValueNet, localize, train_actor_critic
from run_config import RunConfig, format_number, parallel_map, write_csv
from volume_core import Region, Volume3D, VoxelCoord, extract_patch, octant_region, write_sidecar

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
DOMAIN_SLACK = 1e-9
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)

CANDIDATE_COLUMNS = ("x", "y", "z", "entropy", "score", "weighted_entropy", "component_size")
SUMMARY_COLUMNS = ("variant", "auc_mean", "auc_sd", "sensitivity_mean", "sensitivity_sd",
                   "specificity_mean", "specificity_sd")


class ScoreMapper(Protocol):
    def score_map(self, volume: Volume3D, region: Region, u: int) -> LatticeMap:
        ...


@dataclass(frozen=True)
class RleCandidate:
    minimum: VoxelCoord
    index: Tuple[int, int, int]
    entropy_at_min: float
    score_at_min: float
    component_size: int
    weighted_entropy: float = float("nan")
    # x-fastest flat position on the lattice, used for tie-breaks
    order: int = 0


@dataclass
class DiagnosisResult:
    localized_base: VoxelCoord
    candidates: List[RleCandidate]
    chosen: Optional[int]
    final_score: float
    score_map: LatticeMap
    entropy_map: LatticeMap
    fallback: bool = False

    @property
    def minimum(self) -> Optional[VoxelCoord]:
        return None if self.chosen is None else self.candidates[self.chosen].minimum

    def export(self, out_dir, stem: str = "diagnosis") -> Path:
        out_dir = Path(out_dir)
        record = {
            "x_apx": ",".join(map(str, self.localized_base)),
            "x_min": "none" if self.minimum is None else ",".join(map(str, self.minimum)),
            "final_score": format_number(self.final_score),
            "fallback": str(self.fallback).lower(),
            "candidates": len(self.candidates),
            "chosen": "none" if self.chosen is None else self.chosen,
        }
        path = write_sidecar(out_dir / f"{stem}.txt", record)
        write_csv(out_dir / f"{stem}_candidates.csv", CANDIDATE_COLUMNS,
                  ([*c.minimum, c.entropy_at_min, c.score_at_min, c.weighted_entropy, c.component_size]
                   for c in self.candidates))
        self.score_map.save(out_dir / f"{stem}_score.rvol")
        self.entropy_map.save(out_dir / f"{stem}_entropy.rvol")
        return path


def entropy_map(scores: LatticeMap, eps: float = PROB_EPS, base: Optional[float] = None) -> LatticeMap:
    """Binary entropy of each score, natural log unless base is given"""
    s = np.asarray(scores.values, dtype=np.float64)
    if np.any(s < -DOMAIN_SLACK) or np.any(s > 1.0 + DOMAIN_SLACK) or not np.all(np.isfinite(s)):
        bad = s[~((s >= -DOMAIN_SLACK) & (s <= 1.0 + DOMAIN_SLACK))]
        raise DomainError(f"score outside [0, 1]: {bad.flat[0] if bad.size else 'non-finite'}")
    s = np.clip(s, eps, 1.0 - eps)
    e = -s * np.log(s) - (1.0 - s) * np.log(1.0 - s)
    if base is not None:
        e = e / math.log(base)
    return scores.with_values(e)


def smooth_entropy(entropy: LatticeMap, sigma: float) -> LatticeMap:
    if sigma <= 0:
        return entropy
    return entropy.with_values(ndimage.gaussian_filter(entropy.values, sigma=sigma, mode="nearest"))


def detect_rle(entropy: LatticeMap, tau: float, min_size: int = 2,
               scores: Optional[LatticeMap] = None) -> List[RleCandidate]:
    """One candidate per 6-connected component of E < tau, at its first minimum in lattice order"""
    if tau <= 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    e = np.asarray(entropy.values, dtype=np.float64)
    if e.size == 0:
        raise InvalidArgumentError("entropy map is empty")
    labels, count = ndimage.label(e < tau, structure=SIX_CONNECTED)
    if count == 0:
        return []
    flat_labels = labels.ravel(order="F")
    flat_e = e.ravel(order="F")
    sizes = np.bincount(flat_labels, minlength=count + 1)
    candidates = []
    for comp in range(1, count + 1):
        if sizes[comp] < min_size:
            continue
        members = np.flatnonzero(flat_labels == comp)
        pos = int(members[np.argmin(flat_e[members])])
        idx = tuple(int(i) for i in np.unravel_index(pos, e.shape, order="F"))
        score = float(scores.values[idx]) if scores is not None else float("nan")
        candidates.append(RleCandidate(entropy.coord(idx), idx, float(e[idx]), score, int(sizes[comp]),
                                       float(e[idx]), pos))
    candidates.sort(key=lambda c: c.order)
    return candidates


def weigh_candidates(candidates: Sequence[RleCandidate], x_apx, rho: float) -> List[RleCandidate]:
    """W = E * (1 + |x_min - x_apx| / rho)"""
    if rho <= 0:
        raise InvalidArgumentError(f"rho must be positive, got {rho}")
    return [replace(c, weighted_entropy=c.entropy_at_min * (1.0 + _distance(c.minimum, x_apx) / rho))
            for c in candidates]


def _distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


def select_candidate(candidates: Sequence[RleCandidate], x_apx, rho: float) -> int:
    """Index of the minimal weighted entropy; ties go to the nearer, then the earlier lattice point"""
    if not candidates:
        raise NoCandidateError("no region of low entropy to select from")
    weighted = weigh_candidates(candidates, x_apx, rho)
    keys = [(c.weighted_entropy, _distance(c.minimum, x_apx), c.order) for c in weighted]
    return min(range(len(keys)), key=keys.__getitem__)


def neighborhood_regions(volume: Volume3D, x_apx, neighborhood, patch_edge: int) -> Tuple[Region, Region]:
    """(patch-centre neighborhood, FCN input region grown by half a patch), both clipped"""
    centres = Region.centered(x_apx, neighborhood).clip(volume.dims)
    half = (patch_edge - 1) // 2
    grown = Region(centres.origin.shifted((-half,) * 3), tuple(e + 2 * half for e in centres.extent))
    return centres, grown.clip(volume.dims)


def diagnose(volume: Volume3D, localizer, fcn: ScoreMapper, cfg: RunConfig, base=None) -> DiagnosisResult:
    """
    Full pipeline on one volume. base overrides the localizer's answer (used
    for annotated-base and perturbation experiments).
    """
    if base is None:
        region = octant_region(volume.dims, cfg.phantom.octant)
        base = localize(volume, localizer, region, cfg.rl.max_steps, cfg.rl.tail_k)
    x_apx = VoxelCoord(*(int(c) for c in base))
    patch_edge = getattr(fcn, "patch_edge", 1)
    centres, fcn_region = neighborhood_regions(volume, x_apx, cfg.rle.neighborhood, patch_edge)
    scores = fcn.score_map(volume, fcn_region, cfg.fcn.upsample)
    entropy = smooth_entropy(entropy_map(scores), cfg.rle.smoothing_sigma)
    candidates = detect_rle(entropy, cfg.rle.tau, cfg.rle.min_size, scores)
    rho = cfg.rle.rho if cfg.rle.rho is not None else max(cfg.rle.neighborhood) / 2.0
    if not candidates:
        score = scores.value_at(x_apx)
        logger.debug(f"no RLE near {tuple(x_apx)}; falling back to the nearest lattice score {score:.4f}")
        return DiagnosisResult(x_apx, [], None, score, scores, entropy, fallback=True)
    weighted = weigh_candidates(candidates, x_apx, rho)
    chosen = select_candidate(candidates, x_apx, rho)
    return DiagnosisResult(x_apx, weighted, chosen, weighted[chosen].score_at_min, scores, entropy)


class Variant(str, Enum):
    RL_FCN_RLE = "RL+FCN+RLE"
    RL_CNN = "RL+CNN"
    CNN = "CNN"


@dataclass
class ModelBundle:
    localizer: Optional[PolicyValueNet] = None
    classifier: Optional[ClassifierModel] = None
    fcn: Optional[FcnModel] = None
    octant_classifier: Optional[ClassifierModel] = None

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        if self.localizer is not None:
            self.localizer.save(out_dir / "localizer.rnnp")
        if self.classifier is not None:
            self.classifier.save(out_dir / "classifier.rnnp")
        if self.fcn is not None:
            self.fcn.save(out_dir / "fcn.rnnp")
        if self.octant_classifier is not None:
            self.octant_classifier.save(out_dir / "octant_classifier.rnnp")
        return out_dir

    @classmethod
    def load(cls, out_dir) -> "ModelBundle":
        out_dir = Path(out_dir)

        def maybe(name, loader):
            path = out_dir / name
            return loader(path) if path.is_file() else None

        bundle = cls(maybe("localizer.rnnp", PolicyValueNet.load), maybe("classifier.rnnp", ClassifierModel.load),
                     maybe("fcn.rnnp", FcnModel.load), maybe("octant_classifier.rnnp", ClassifierModel.load))
        if bundle.fcn is None and bundle.classifier is not None:
            bundle.fcn = convert_to_fcn(bundle.classifier)
        return bundle


def train_bundle(entries: Sequence[ManifestEntry], cfg: RunConfig, variants: Sequence[Variant],
                 out_dir=None) -> ModelBundle:
    variants = [Variant(v) for v in variants]
    bundle = ModelBundle()
    if any(v in (Variant.RL_FCN_RLE, Variant.RL_CNN) for v in variants):
        log = Path(out_dir) / "localizer_train.csv" if out_dir is not None else None
        bundle.localizer, _ = train_actor_critic(entries, cfg, log)
        log = Path(out_dir) / "classifier_train.csv" if out_dir is not None else None
        bundle.classifier = train(entries, cfg, log_path=log)
        bundle.fcn = convert_to_fcn(bundle.classifier)
    if Variant.CNN in variants:
        bundle.octant_classifier = train_whole_octant(entries, cfg)
    if out_dir is not None:
        bundle.save(out_dir)
    return bundle


def variant_score(variant: Variant, volume: Volume3D, bundle: ModelBundle, cfg: RunConfig,
                  base=None) -> float:
    variant = Variant(variant)
    if variant == Variant.CNN:
        return predict(bundle.octant_classifier, octant_patch(volume, cfg.phantom.octant,
                                                              bundle.octant_classifier.patch_edge))
    if base is None:
        region = octant_region(volume.dims, cfg.phantom.octant)
        base = localize(volume, bundle.localizer, region, cfg.rl.max_steps, cfg.rl.tail_k)
    if variant == Variant.RL_CNN:
        return predict(bundle.classifier, extract_patch(volume, base, bundle.classifier.patch_edge))
    fcn = bundle.fcn if bundle.fcn is not None else convert_to_fcn(bundle.classifier)
    return diagnose(volume, bundle.localizer, fcn, cfg, base=base).final_score


@dataclass
class PipelineMetrics:
    variant: Variant
    folds: List[FoldMetrics] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)

    def _stat(self, name: str) -> Tuple[float, float]:
        values = np.array([getattr(f, name) for f in self.folds], dtype=np.float64)
        return float(values.mean()), float(values.std())

    def summary_row(self) -> List:
        row = [self.variant.value]
        for name in ("auc", "sensitivity", "specificity"):
            row.extend(self._stat(name))
        return row


def evaluate_pipeline(manifest: DatasetManifest, bundles: Dict[int, ModelBundle], variant: Variant,
                      cfg: RunConfig, threads: int = 1, use_truth_base: bool = False,
                      out_dir=None) -> PipelineMetrics:
    """Fold-wise test scores and metrics of one variant; bundles maps fold id -> trained models"""
    variant = Variant(variant)
    if len(manifest) == 0:
        raise InvalidArgumentError(f"manifest {manifest.root} has no entries")
    result = PipelineMetrics(variant)
    for fold in manifest.folds:
        if fold not in bundles:
            raise InvalidArgumentError(f"no trained models for fold {fold}")
        _, test_entries = manifest.split(fold)

        def score(entry: ManifestEntry) -> float:
            base = entry.truth.base if use_truth_base else None
            return variant_score(variant, entry.load(), bundles[fold], cfg, base)

        scores = parallel_map(score, test_entries, threads)
        labels = [int(e.truth.label) for e in test_entries]
        row, roc = fold_metrics(fold, scores, labels)
        result.folds.append(row)
        result.scores.extend(scores)
        result.labels.extend(labels)
        logger.info(f"{variant.value} fold {fold}: AUC {row.auc:.3f}")
        if out_dir is not None:
            slug = variant.value.replace("+", "_").lower()
            roc.write_csv(Path(out_dir) / f"roc_{slug}_fold{fold}.csv")
    if out_dir is not None:
        slug = variant.value.replace("+", "_").lower()
        write_metrics_csv(result.folds, Path(out_dir) / f"metrics_{slug}.csv")
    return result


def write_summary_csv(results: Sequence[PipelineMetrics], path) -> Path:
    return write_csv(path, SUMMARY_COLUMNS, (r.summary_row() for r in results))
