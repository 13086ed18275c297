import numpy as np
import pytest

from errors import DimensionError, InvalidArgumentError, UndefinedMetricError
from patch_classifier import (ClassifierModel, build_architecture, class_weights, compute_roc_auc, cross_validate, fit,
                              fold_metrics, octant_cube, optimal_operating_point, pairwise_auc, patch_size_sweep,
                              predict, predict_batch, score_annotated, train)
from phantom_gen import DatasetManifest
from run_config import build_config
from volume_core import Region


def _with_clf(cfg, **changes):
    return build_config({**cfg.model_dump(), "clf": {**cfg.clf.model_dump(), **changes}})


@pytest.mark.parametrize("edge, extent, fc_input", [(75, 9, 5832), (31, 3, 216), (15, 1, 8)])
def test_architecture_shapes(edge, extent, fc_input):
    model = build_architecture(edge)
    assert model.feature_extent == extent
    assert model.fc_input == fc_input
    assert model.network.output_shape == (2,)


def test_architecture_75_layer_table():
    shapes = build_architecture(75).network.shapes
    assert [s[1] for s in shapes[1:10]] == [75, 75, 37, 37, 37, 18, 18, 18, 9]
    assert shapes[10:] == [(4,), (4,), (2,), (2,)]


@pytest.mark.parametrize("edge, padding", [(13, "same"), (16, "same"), (15, "valid")])
def test_architecture_rejects_bad_edges(edge, padding):
    with pytest.raises(InvalidArgumentError):
        build_architecture(edge, padding)


def test_zero_logits_predict_one_half(rng):
    model = build_architecture(15)
    last = model.network.param_layers()[-1]
    last.w[:] = 0.0
    last.b[:] = 0.0
    assert predict(model, rng.standard_normal((15, 15, 15))) == pytest.approx(0.5)
    with pytest.raises(DimensionError):
        predict(model, np.zeros((17, 17, 17)))


def test_predict_batch_matches_single(rng):
    model = build_architecture(15, seed=3)
    patches = rng.standard_normal((5, 15, 15, 15)).astype(np.float32)
    batch = predict_batch(model, patches, chunk=2)
    single = [predict(model, p) for p in patches]
    np.testing.assert_allclose(batch, single, rtol=1e-5)
    assert np.all((batch >= 0) & (batch <= 1))
    assert all(layer._cache is None for layer in model.network.layers)


def test_class_weights_have_unit_mean():
    w = class_weights(np.array([0, 0, 0, 1]))
    np.testing.assert_allclose(w, [2 / 3, 2 / 3, 2 / 3, 2.0])
    assert w.mean() == pytest.approx(1.0)
    assert class_weights(np.array([0, 1]), enabled=False).tolist() == [1.0, 1.0]


def test_auc_examples():
    assert pairwise_auc([0.9, 0.1], [1, 0]) == 1.0
    assert pairwise_auc([0.1, 0.9], [1, 0]) == 0.0
    assert pairwise_auc([0.5, 0.5, 0.5], [1, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        pairwise_auc([0.2, 0.3], [1, 1])


@pytest.mark.parametrize("seed", range(5))
def test_pair_counting_matches_trapezoid(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, size=30) / 4.0
    labels = np.r_[[0, 1], rng.integers(0, 2, size=28)]
    roc = compute_roc_auc(scores, labels)
    assert roc.auc == pytest.approx(roc.trapezoid_auc, abs=1e-12)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)


def test_youden_on_perfect_separation():
    op = optimal_operating_point(compute_roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]))
    assert (op.sensitivity, op.specificity, op.threshold) == (1.0, 1.0, 0.8)


def test_youden_matches_brute_force():
    scores = np.array([0.4, 0.1, 0.6, 0.2, 0.5, 0.3])
    labels = np.array([1, 0, 1, 1, 1, 0])
    best = None
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        j = pred[labels == 1].mean() - pred[labels == 0].mean()
        if best is None or j >= best[0]:
            best = (j, t, pred[labels == 1].mean(), 1 - pred[labels == 0].mean())
    op = optimal_operating_point(compute_roc_auc(scores, labels))
    assert op.threshold == best[1]
    assert op.sensitivity == pytest.approx(best[2]) and op.specificity == pytest.approx(best[3])
    assert (op.sensitivity, op.specificity, op.threshold) == (0.75, 1.0, 0.4)


def test_fold_metrics_row():
    row, roc = fold_metrics(3, [0.2, 0.9, 0.4], [0, 1, 1])
    assert row.fold == 3 and row.auc == 1.0
    assert row.row()[0] == 3
    assert len(roc.thresholds) == len(roc.fpr)


def test_zero_learning_rate_leaves_weights(tiny_config, rng):
    cfg = _with_clf(tiny_config, lr=0.0)
    model = build_architecture(15, seed=1)
    before = [l.w.copy() for l in model.network.param_layers()]
    patches = rng.standard_normal((4, 15, 15, 15)).astype(np.float32)
    history = fit(model, patches, np.array([0, 1, 0, 1]), cfg)
    assert [h[0] for h in history] == [1, 2]
    for a, layer in zip(before, model.network.param_layers()):
        np.testing.assert_array_equal(a, layer.w)


def test_micro_batches_accumulate_to_the_full_batch_gradient(tiny_config, rng):
    patches = rng.standard_normal((5, 15, 15, 15)).astype(np.float32)
    labels = np.array([0, 1, 1, 0, 1])
    grads = []
    for micro in (1, 5):
        cfg = _with_clf(tiny_config, lr=0.0, epochs=1, micro_batch=micro)
        model = build_architecture(15, seed=2, dtype=np.float64)
        fit(model, patches, labels, cfg)
        grads.append([l.dw.copy() for l in model.network.param_layers()])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_train_and_score_on_phantoms(tiny_config, tiny_dataset, tmp_path):
    model = train(tiny_dataset.entries, tiny_config, log_path=tmp_path / "clf.csv")
    scores = score_annotated(model, tiny_dataset.entries)
    assert scores.shape == (6,) and np.all((scores >= 0) & (scores <= 1))
    path = model.save(tmp_path / "classifier.rnnp")
    back = ClassifierModel.load(path)
    assert back.patch_edge == 15
    np.testing.assert_array_equal(score_annotated(back, tiny_dataset.entries), scores)
    assert (tmp_path / "clf.csv").read_text().startswith("epoch,loss,accuracy\n")


def test_cross_validate_writes_fold_outputs(tiny_config, tiny_dataset, tmp_path):
    manifest = DatasetManifest.load(tiny_dataset.root)
    rows = cross_validate(manifest, tiny_config, out_dir=tmp_path)
    assert [r.fold for r in rows] == [0, 1]
    assert all(0.0 <= r.auc <= 1.0 for r in rows)
    assert (tmp_path / "roc_clf_fold1.csv").exists()
    assert (tmp_path / "classifier_fold0.rnnp").exists()
    assert patch_size_sweep(manifest, [], tiny_config) == []


def test_octant_cube_is_odd_and_centred():
    center, edge = octant_cube(Region((0, 16, 16), (16, 16, 16)))
    assert edge == 15 and center == (8, 24, 24)


@pytest.mark.slow
def test_learns_separable_patches(tiny_config, rng):
    cfg = _with_clf(tiny_config, lr=0.05, momentum=0.0, epochs=60)
    patches = rng.normal(0.2, 0.02, size=(8, 15, 15, 15)).astype(np.float32)
    labels = np.array([0, 1] * 4)
    patches[labels == 1, 5:10, 5:10, 5:10] += 0.6
    best = 0.0
    # a net this small can start with every hidden unit dead
    for seed in range(3):
        model = build_architecture(15, seed=seed)
        fit(model, patches, labels, cfg)
        best = max(best, float(np.mean((predict_batch(model, patches) >= 0.5) == labels)))
    assert best == 1.0
