import math

import numpy as np
import pytest

from errors import DomainError, InvalidArgumentError, NoCandidateError
from fcn_scoremap import LatticeMap, convert_to_fcn
from patch_classifier import build_architecture
from phantom_gen import DatasetManifest
from rle_diagnosis import (ModelBundle, RleCandidate, Variant, detect_rle, diagnose, entropy_map, evaluate_pipeline,
                           neighborhood_regions, select_candidate, smooth_entropy, variant_score, weigh_candidates,
                           write_summary_csv)
from run_config import build_config
from volume_core import Region, Volume3D, VoxelCoord

TAU = 0.3 * math.log(2.0)


def _lattice(values, origin=(0, 0, 0), stride=1):
    return LatticeMap(np.asarray(values, dtype=np.float64), origin, (stride,) * 3)


def _with_rle(cfg, **changes):
    return build_config({**cfg.model_dump(), "rle": {**cfg.rle.model_dump(), **changes}})


class StubMapper:
    """Unit-stride score map: 0.5 everywhere except the given points"""

    patch_edge = 1

    def __init__(self, overrides=None):
        self.overrides = overrides or {}
        self.regions = []

    def score_map(self, volume, region, u):
        self.regions.append(region)
        values = np.full(region.extent, 0.5)
        for coord, score in self.overrides.items():
            local = tuple(c - o for c, o in zip(coord, region.origin))
            values[local] = score
        return LatticeMap(values, region.origin, (1, 1, 1), region)


def _candidate(minimum, entropy, order=0):
    return RleCandidate(VoxelCoord(*minimum), (0, 0, 0), entropy, 0.9, 3, order=order)


def test_entropy_examples():
    e = entropy_map(_lattice([[[0.5, 0.2, 0.8, 0.0, 1.0]]])).values[0, 0]
    assert e[0] == pytest.approx(math.log(2.0))
    assert e[1] == pytest.approx(e[2])
    assert e[3] == pytest.approx(1.712e-6, rel=1e-3)
    assert e[3] == pytest.approx(e[4], rel=1e-6)
    assert np.all(e > 0) and np.all(e <= math.log(2.0) + 1e-12)


def test_entropy_rejects_scores_outside_unit_interval():
    with pytest.raises(DomainError):
        entropy_map(_lattice([[[0.5, 1.5]]]))
    with pytest.raises(DomainError):
        entropy_map(_lattice([[[np.nan]]]))


def test_entropy_keeps_lattice_geometry():
    scores = _lattice(np.full((2, 3, 4), 0.3), origin=(5, 6, 7), stride=4)
    e = entropy_map(scores)
    assert e.origin == scores.origin and e.stride == scores.stride and e.shape == (2, 3, 4)


def test_uniform_low_entropy_is_one_component():
    scores = _lattice(np.full((4, 4, 4), 0.01))
    candidates = detect_rle(entropy_map(scores), TAU, scores=scores)
    assert len(candidates) == 1
    assert candidates[0].component_size == 64
    assert candidates[0].index == (0, 0, 0)
    assert candidates[0].score_at_min == pytest.approx(0.01)


def test_two_basins_are_two_components():
    values = np.full((7, 3, 3), 0.02)
    values[3] = 0.5
    values[1, 1, 1] = 0.001
    values[5, 2, 0] = 0.999
    candidates = detect_rle(entropy_map(_lattice(values)), TAU)
    assert sorted(c.index for c in candidates) == [(1, 1, 1), (5, 2, 0)]
    assert [c.order for c in candidates] == sorted(c.order for c in candidates)
    assert all(c.component_size == 27 for c in candidates)


def test_no_low_entropy_means_no_candidates():
    assert detect_rle(entropy_map(_lattice(np.full((3, 3, 3), 0.5))), TAU) == []
    with pytest.raises(InvalidArgumentError):
        detect_rle(entropy_map(_lattice(np.full((3, 3, 3), 0.5))), 0.0)


def test_min_size_drops_isolated_points():
    values = np.full((5, 5, 5), 0.5)
    values[2, 2, 2] = 0.99
    entropy = entropy_map(_lattice(values))
    assert detect_rle(entropy, TAU) == []
    assert len(detect_rle(entropy, TAU, min_size=1)) == 1


def test_ties_go_to_first_point_in_x_fastest_order():
    values = np.full((3, 3, 3), 0.5)
    values[2, 0, 0] = values[0, 1, 0] = 0.05
    values[1, 0, 0] = values[1, 1, 0] = 0.05
    candidates = detect_rle(entropy_map(_lattice(values)), TAU)
    assert len(candidates) == 1 and candidates[0].index == (1, 0, 0)


def test_log_base_does_not_change_detection():
    values = np.random.default_rng(3).uniform(0.0, 1.0, size=(6, 6, 6))
    scores = _lattice(values)
    natural = detect_rle(entropy_map(scores), TAU, scores=scores)
    bits = detect_rle(entropy_map(scores, base=2.0), TAU / math.log(2.0), scores=scores)
    assert [c.index for c in natural] == [c.index for c in bits]


def test_smoothing_is_optional():
    entropy = entropy_map(_lattice(np.random.default_rng(0).uniform(size=(4, 4, 4))))
    assert smooth_entropy(entropy, 0.0) is entropy
    smoothed = smooth_entropy(entropy, 1.0)
    assert smoothed.values.std() < entropy.values.std()


def test_select_prefers_low_weighted_entropy():
    a = _candidate((10, 10, 10), 0.1, order=1)
    b = _candidate((40, 10, 10), 0.05, order=0)
    # W_a = 0.1, W_b = 0.05 * (1 + 30 / 10) = 0.2
    assert select_candidate([a, b], (10, 10, 10), rho=10.0) == 0
    assert select_candidate([b], (10, 10, 10), rho=10.0) == 0
    weighted = weigh_candidates([a, b], (10, 10, 10), rho=10.0)
    assert weighted[1].weighted_entropy == pytest.approx(0.2)


def test_select_breaks_ties_by_distance():
    far = _candidate((20, 0, 0), 0.0, order=0)
    near = _candidate((2, 0, 0), 0.0, order=5)
    assert select_candidate([far, near], (0, 0, 0), rho=10.0) == 1
    with pytest.raises(NoCandidateError):
        select_candidate([], (0, 0, 0), rho=10.0)


def test_neighborhood_regions_are_clipped():
    volume = Volume3D(np.zeros((32, 32, 32)))
    centres, grown = neighborhood_regions(volume, (2, 2, 2), (8, 8, 8), 15)
    assert centres == Region((0, 0, 0), (6, 6, 6))
    assert grown == Region((0, 0, 0), (13, 13, 13))
    centres, grown = neighborhood_regions(volume, (16, 16, 16), (8, 8, 8), 15)
    assert centres.origin == (12, 12, 12) and grown.origin == (5, 5, 5) and grown.extent == (22, 22, 22)


def test_diagnose_picks_the_confident_spike(tiny_config):
    cfg = _with_rle(tiny_config, min_size=1)
    volume = Volume3D(np.zeros((16, 16, 16)))
    mapper = StubMapper({(9, 8, 7): 1.0})
    result = diagnose(volume, None, mapper, cfg, base=(8, 8, 8))
    assert mapper.regions == [Region((4, 4, 4), (8, 8, 8))]
    assert result.final_score == 1.0
    assert result.minimum == VoxelCoord(9, 8, 7)
    assert not result.fallback and len(result.candidates) == 1


def test_diagnose_falls_back_without_candidates(tiny_config):
    volume = Volume3D(np.zeros((16, 16, 16)))
    result = diagnose(volume, None, StubMapper(), tiny_config, base=(8, 8, 8))
    assert result.fallback and result.minimum is None
    assert result.final_score == 0.5


def test_diagnosis_export(tiny_config, tmp_path):
    cfg = _with_rle(tiny_config, min_size=1)
    volume = Volume3D(np.zeros((16, 16, 16)))
    result = diagnose(volume, None, StubMapper({(8, 8, 8): 0.0}), cfg, base=(8, 8, 8))
    record = result.export(tmp_path, "case").read_text()
    assert "x_apx=8,8,8" in record and "final_score=0" in record
    lines = (tmp_path / "case_candidates.csv").read_text().splitlines()
    assert lines[0] == "x,y,z,entropy,score,weighted_entropy,component_size"
    assert lines[1].startswith("8,8,8,")
    assert LatticeMap.load(tmp_path / "case_score.rvol").shape == (8, 8, 8)
    assert (tmp_path / "case_entropy.rvol").exists()


def _untrained_bundle():
    classifier = build_architecture(15, seed=1)
    return ModelBundle(classifier=classifier, fcn=convert_to_fcn(classifier),
                       octant_classifier=build_architecture(15, seed=2))


def test_variant_scores_are_probabilities(tiny_config, tiny_dataset):
    entry = tiny_dataset.entries[0]
    volume = entry.load()
    bundle = _untrained_bundle()
    for variant in Variant:
        score = variant_score(variant, volume, bundle, tiny_config, base=entry.truth.base)
        assert 0.0 <= score <= 1.0


def test_evaluate_pipeline_on_annotated_bases(tiny_config, tiny_dataset, tmp_path):
    bundles = {fold: _untrained_bundle() for fold in tiny_dataset.folds}
    results = [evaluate_pipeline(tiny_dataset, bundles, v, tiny_config, threads=2, use_truth_base=True,
                                 out_dir=tmp_path) for v in (Variant.RL_CNN, Variant.RL_FCN_RLE)]
    assert [len(r.folds) for r in results] == [2, 2]
    assert len(results[0].scores) == 6
    assert (tmp_path / "metrics_rl_cnn.csv").exists()
    assert (tmp_path / "roc_rl_fcn_rle_fold0.csv").exists()
    lines = write_summary_csv(results, tmp_path / "summary.csv").read_text().splitlines()
    assert lines[1].startswith("RL+CNN,") and len(lines[1].split(",")) == 7


def test_evaluate_pipeline_rejects_empty_manifest(tiny_config, tmp_path):
    with pytest.raises(InvalidArgumentError):
        evaluate_pipeline(DatasetManifest([], root=tmp_path), {}, Variant.CNN, tiny_config)


def test_bundle_round_trip(tmp_path):
    bundle = _untrained_bundle()
    bundle.save(tmp_path)
    back = ModelBundle.load(tmp_path)
    assert back.localizer is None
    assert back.classifier.patch_edge == 15 and back.fcn.pools == 3
    for a, b in zip(bundle.fcn.network.param_layers(), back.fcn.network.param_layers()):
        np.testing.assert_array_equal(a.w, b.w)
