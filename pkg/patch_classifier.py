#!/usr/bin/env python3
"""
Patch classifier: three conv(3, 8) + relu + pool(2, 2) blocks, then
fc(4) + relu + fc(2) + softmax, applied to one appendix-centred patch per
volume. Class 1 is appendicitis.

Evaluation helpers compute ROC curves, pair-counting AUC and the Youden
operating point; patch_size_sweep reruns fold-wise training over a list of
patch edges.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn import metrics

from errors import DimensionError, InvalidArgumentError, TrainingError, UndefinedMetricError
from nn_engine import LayerSpec, Network, SGD, load_params, save_params, softmax, softmax_xent_forward_backward
from phantom_gen import DatasetManifest, Label, ManifestEntry
from run_config import RunConfig, write_csv
from volume_core import Patch, Region, Volume3D, extract_patch, octant_region, read_sidecar, write_sidecar

logger = logging.getLogger(__name__)

APPENDICITIS = int(Label.APPENDICITIS)
NUM_CLASSES = 2
CONV_BLOCKS = 3
CONV_CHANNELS = 8
HIDDEN_UNITS = 4

METRICS_COLUMNS = ("fold", "auc", "sensitivity", "specificity", "threshold")
ROC_COLUMNS = ("threshold", "fpr", "tpr")


@dataclass
class ClassifierModel:
    network: Network
    patch_edge: int
    padding: str = "same"
    config: Dict[str, str] = field(default_factory=dict)

    @property
    def feature_extent(self) -> int:
        """Spatial extent M' entering the first fully-connected layer"""
        return self.network.shapes[3 * CONV_BLOCKS][1]

    @property
    def fc_input(self) -> int:
        return int(np.prod(self.network.shapes[3 * CONV_BLOCKS]))

    def save(self, path) -> Path:
        path = save_params(path, self.network)
        meta = {"model": "classifier", "patch_edge": self.patch_edge, "padding": self.padding}
        meta.update(self.config)
        write_sidecar(Path(path).with_suffix(".txt"), meta)
        return path

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        meta = read_sidecar(Path(path).with_suffix(".txt"))
        model = build_architecture(int(meta["patch_edge"]), meta.get("padding", "same"))
        load_params(path, model.network)
        model.config = {k: v for k, v in meta.items() if k not in ("model", "patch_edge", "padding")}
        return model


def architecture_specs(padding: str = "same") -> List[LayerSpec]:
    specs = []
    for _ in range(CONV_BLOCKS):
        specs += [LayerSpec.conv(3, CONV_CHANNELS, padding), LayerSpec.relu(), LayerSpec.pool(2, 2)]
    specs += [LayerSpec.fc(HIDDEN_UNITS), LayerSpec.relu(), LayerSpec.fc(NUM_CLASSES), LayerSpec.softmax()]
    return specs


def build_architecture(patch_edge: int, padding: str = "same", seed: int = 0, dtype=np.float32) -> ClassifierModel:
    if patch_edge < 15 or patch_edge % 2 == 0:
        raise InvalidArgumentError(f"patch edge must be odd and >= 15, got {patch_edge}")
    try:
        net = Network(architecture_specs(padding), (1, patch_edge, patch_edge, patch_edge),
                      seed=seed, dtype=dtype, name="clf")
    except DimensionError as e:
        raise InvalidArgumentError(f"patch edge {patch_edge} too small for {padding} padding: {e}") from None
    return ClassifierModel(net, patch_edge, padding)


def _as_batch(model: ClassifierModel, patches) -> np.ndarray:
    if isinstance(patches, Patch):
        patches = [patches]
    arrays = [p.data if isinstance(p, Patch) else np.asarray(p) for p in patches]
    batch = np.stack(arrays) if arrays else np.zeros((0,) + (model.patch_edge,) * 3, dtype=np.float32)
    if batch.shape[1:] != (model.patch_edge,) * 3:
        raise DimensionError(f"patch shape {batch.shape[1:]} does not match model edge {model.patch_edge}")
    return batch[:, None]


def predict_batch(model: ClassifierModel, patches, chunk: int = 16) -> np.ndarray:
    batch = _as_batch(model, patches)
    scores = np.empty(batch.shape[0], dtype=np.float64)
    for lo in range(0, batch.shape[0], chunk):
        logits = model.network.logits(batch[lo:lo + chunk], record=False).astype(np.float64)
        scores[lo:lo + chunk] = softmax(logits)[:, APPENDICITIS]
    return scores


def predict(model: ClassifierModel, patch) -> float:
    """Softmax probability of appendicitis for one patch of edge M"""
    return float(predict_batch(model, [patch])[0])


def annotated_patch(entry: ManifestEntry, edge: int, volume: Optional[Volume3D] = None) -> Patch:
    volume = volume if volume is not None else entry.load()
    return extract_patch(volume, entry.truth.base, edge)


def class_weights(labels: np.ndarray, enabled: bool = True) -> np.ndarray:
    """Per-sample inverse-frequency weights with mean 1"""
    if not enabled:
        return np.ones(len(labels))
    counts = np.bincount(labels, minlength=NUM_CLASSES).astype(np.float64)
    per_class = np.where(counts > 0, len(labels) / (NUM_CLASSES * np.maximum(counts, 1)), 0.0)
    return per_class[labels]


def fit(model: ClassifierModel, patches: np.ndarray, labels: np.ndarray, cfg: RunConfig,
        log_path=None) -> List[Tuple[int, float, float]]:
    """Trains model in place on (N, M, M, M) patches; returns (epoch, loss, accuracy) rows"""
    clf = cfg.clf
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise InvalidArgumentError("no training patches")
    x = patches[:, None].astype(model.network.dtype)
    weights = class_weights(labels, clf.class_weighting)
    optimizer = SGD(model.network, clf.lr, clf.momentum)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.clf_seed(), 2])))
    batch_size = n if clf.batch_size <= 0 else min(clf.batch_size, n)
    micro = max(1, clf.micro_batch)
    history = []
    started = time.time()
    for epoch in range(1, clf.epochs + 1):
        order = np.arange(n) if batch_size == n else rng.permutation(n)
        total_loss, correct = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            optimizer.zero_grad()
            for mlo in range(0, len(idx), micro):
                part = idx[mlo:mlo + micro]
                logits = model.network.logits(x[part]).astype(np.float64)
                loss, probs, grad = softmax_xent_forward_backward(
                    logits, labels[part], weights[part], normalizer=len(idx))
                if not math.isfinite(loss):
                    raise TrainingError(f"classifier training diverged at epoch {epoch}")
                model.network.backward(grad)
                total_loss += loss * len(idx)
                correct += int(np.sum(probs.argmax(axis=1) == labels[part]))
            try:
                optimizer.step()
            except TrainingError as e:
                raise TrainingError(f"epoch {epoch}: {e}") from None
        row = (epoch, total_loss / n, correct / n)
        history.append(row)
        if epoch == 1 or epoch % 10 == 0 or epoch == clf.epochs:
            logger.info(f"[epoch {epoch}/{clf.epochs}] loss {row[1]:.4f} acc {row[2]:.3f} "
                        f"({time.time() - started:.0f}s)")
    if log_path is not None:
        write_csv(log_path, ("epoch", "loss", "accuracy"), history)
    return history


def train(entries: Sequence[ManifestEntry], cfg: RunConfig, patch_edge: Optional[int] = None,
          log_path=None) -> ClassifierModel:
    """One annotated base-centred patch per training volume"""
    edge = patch_edge or cfg.clf.patch_edge
    if not entries:
        raise InvalidArgumentError("classifier training needs at least one manifest entry")
    model = build_architecture(edge, cfg.clf.padding, seed=cfg.clf_seed())
    patches = np.stack([annotated_patch(e, edge).data for e in entries])
    labels = np.array([int(e.truth.label) for e in entries])
    assert len(patches) == len(entries), "one patch per training volume"
    logger.info(f"Training classifier M={edge} on {len(entries)} patches "
                f"({int(labels.sum())} positive)")
    fit(model, patches, labels, cfg, log_path)
    model.config = {"lr": cfg.clf.lr, "epochs": cfg.clf.epochs, "seed": cfg.clf_seed()}
    return model


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    trapezoid_auc: float

    def write_csv(self, path) -> Path:
        return write_csv(path, ROC_COLUMNS, zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


@dataclass(frozen=True)
class OperatingPoint:
    sensitivity: float
    specificity: float
    threshold: float


def pairwise_auc(scores, labels) -> float:
    """P(score_pos > score_neg) with ties credited 0.5"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError(f"AUC needs both classes, got {pos.size} positive and {neg.size} negative")
    greater = np.sum(pos[:, None] > neg[None, :])
    ties = np.sum(pos[:, None] == neg[None, :])
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def compute_roc_auc(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    auc = pairwise_auc(scores, labels)
    fpr, tpr, thresholds = metrics.roc_curve(labels, scores, drop_intermediate=False)
    return RocCurve(fpr, tpr, thresholds, auc, float(metrics.auc(fpr, tpr)))


def optimal_operating_point(roc: RocCurve) -> OperatingPoint:
    """Maximum Youden J; ties go to the lower threshold (score >= threshold is positive)"""
    j = roc.tpr - roc.fpr
    best = int(np.flatnonzero(j == j.max())[-1])
    return OperatingPoint(float(roc.tpr[best]), float(1.0 - roc.fpr[best]), float(roc.thresholds[best]))


@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    auc: float
    sensitivity: float
    specificity: float
    threshold: float

    def row(self):
        return [self.fold, self.auc, self.sensitivity, self.specificity, self.threshold]


def fold_metrics(fold: int, scores, labels) -> Tuple[FoldMetrics, RocCurve]:
    roc = compute_roc_auc(scores, labels)
    op = optimal_operating_point(roc)
    return FoldMetrics(fold, roc.auc, op.sensitivity, op.specificity, op.threshold), roc


def write_metrics_csv(rows: Sequence[FoldMetrics], path) -> Path:
    return write_csv(path, METRICS_COLUMNS, (r.row() for r in rows))


def score_annotated(model: ClassifierModel, entries: Sequence[ManifestEntry]) -> np.ndarray:
    return predict_batch(model, [annotated_patch(e, model.patch_edge) for e in entries])


def train_fold(manifest: DatasetManifest, fold: int, cfg: RunConfig, patch_edge: Optional[int] = None,
               out_dir=None) -> Tuple[FoldMetrics, ClassifierModel]:
    """Train on every other fold and score the annotated patches of this one"""
    train_entries, test_entries = manifest.split(fold)
    log_path = Path(out_dir) / f"clf_fold{fold}_train.csv" if out_dir is not None else None
    model = train(train_entries, cfg, patch_edge, log_path)
    scores = score_annotated(model, test_entries)
    labels = [int(e.truth.label) for e in test_entries]
    row, roc = fold_metrics(fold, scores, labels)
    logger.info(f"fold {fold}: AUC {row.auc:.3f} sens {row.sensitivity:.3f} spec {row.specificity:.3f}")
    if out_dir is not None:
        model.save(Path(out_dir) / f"classifier_fold{fold}.rnnp")
        roc.write_csv(Path(out_dir) / f"roc_clf_fold{fold}.csv")
    return row, model


def cross_validate(manifest: DatasetManifest, cfg: RunConfig, patch_edge: Optional[int] = None,
                   out_dir=None) -> List[FoldMetrics]:
    return [train_fold(manifest, fold, cfg, patch_edge, out_dir)[0] for fold in manifest.folds]


def patch_size_sweep(manifest: DatasetManifest, edges: Sequence[int], cfg: RunConfig) -> List[Tuple[int, float]]:
    """(edge, mean fold AUC) per requested edge, in request order"""
    table = []
    for edge in edges:
        rows = cross_validate(manifest, cfg, patch_edge=edge)
        mean_auc = float(np.mean([r.auc for r in rows]))
        logger.info(f"patch edge {edge}: mean AUC {mean_auc:.3f}")
        table.append((int(edge), mean_auc))
    return table


def octant_cube(region: Region) -> Tuple[Tuple[int, int, int], int]:
    """Centre and edge of the largest odd cube centred in a region"""
    edge = min(region.extent)
    edge = edge if edge % 2 == 1 else edge - 1
    center = tuple(o + e // 2 for o, e in zip(region.origin, region.extent))
    return center, edge


def octant_patch(volume: Volume3D, octant: str, edge: int) -> Patch:
    center, _ = octant_cube(octant_region(volume.dims, octant))
    return extract_patch(volume, center, edge)


def train_whole_octant(entries: Sequence[ManifestEntry], cfg: RunConfig) -> ClassifierModel:
    """Same architecture fed the whole target octant instead of an appendix patch"""
    first = entries[0].load()
    _, edge = octant_cube(octant_region(first.dims, cfg.phantom.octant))
    model = build_architecture(edge, cfg.clf.padding, seed=cfg.clf_seed())
    patches = np.stack([octant_patch(e.load(), cfg.phantom.octant, edge).data for e in entries])
    labels = np.array([int(e.truth.label) for e in entries])
    logger.info(f"Training whole-octant classifier on {len(entries)} cubes of edge {edge}")
    fit(model, patches, labels, cfg)
    return model
