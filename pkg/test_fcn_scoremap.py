import numpy as np
import pytest

from errors import ConversionError, DimensionError, FormatError, InvalidArgumentError
from fcn_scoremap import (FcnModel, LatticeMap, OffsetSchedule, backtrack_position, bench_scoremap, convert_to_fcn,
                          dense_score_map, fcn_forward, lattice_extent, layer_chain, sliding_window_oracle)
from nn_engine import LayerKind, LayerSpec, Network
from patch_classifier import ClassifierModel, build_architecture, predict, predict_batch
from volume_core import Region, Volume3D, VoxelCoord, extract_patch, read_sidecar, write_sidecar


def _noise_volume(rng, edge):
    return Volume3D(rng.random((edge, edge, edge)).astype(np.float32))


def _valid_convs(fcn):
    return [l for l in fcn.network.layers if l.kind == LayerKind.CONV3D and l.spec.padding == "valid"]


def test_conversion_kernel_shapes_for_75():
    fcn = convert_to_fcn(build_architecture(75))
    first, second = _valid_convs(fcn)
    assert first.w.shape == (4, 8, 9, 9, 9)
    assert second.w.shape == (2, 4, 1, 1, 1)
    assert fcn.upsampling == 8
    assert all(l.kind != LayerKind.SOFTMAX for l in fcn.network.layers)


@pytest.mark.parametrize("seed", range(20))
def test_conversion_keeps_native_output(seed):
    edge, padding = [(15, "same"), (31, "same"), (23, "valid"), (31, "valid")][seed % 4]
    model = build_architecture(edge, padding=padding, seed=seed)
    fcn = convert_to_fcn(model)
    patch = np.random.default_rng(seed).standard_normal((edge, edge, edge)).astype(np.float32)
    native = model.network.logits(patch[None, None])
    converted = fcn.network.forward(patch[None, None])
    assert converted.shape == (1, 2, 1, 1, 1)
    np.testing.assert_array_equal(converted[:, :, 0, 0, 0], native)


def test_conversion_rejects_unsupported_pooling():
    net = Network([LayerSpec.conv(3, 2), LayerSpec.pool(3, 3), LayerSpec.fc(2), LayerSpec.softmax()], (1, 9, 9, 9))
    with pytest.raises(ConversionError):
        convert_to_fcn(ClassifierModel(net, 9))


def test_backtrack_examples():
    assert backtrack_position((5, 5, 5), [(2, 2)]) == VoxelCoord(10, 10, 10)
    assert backtrack_position((0, 0, 0), [(1, 3)]) == VoxelCoord(1, 1, 1)
    assert backtrack_position((2, 3, 4), [(2, 2)] * 3) == VoxelCoord(16, 24, 32)


def test_layer_chain_backtracks_to_the_pass_stride():
    fcn = convert_to_fcn(build_architecture(15))
    chain = layer_chain(fcn.network)
    assert chain == [(1, 1), (2, 2), (1, 1), (2, 2), (1, 1), (2, 2), (1, 1), (1, 1)]
    for o in [(0, 0, 0), (1, 2, 3), (4, 0, 7)]:
        assert backtrack_position(o, chain) == VoxelCoord(*(8 * c for c in o))


def test_backtrack_is_monotone_and_injective():
    chain = [(1, 3), (2, 2), (1, 3), (2, 2), (1, 1)]
    xs = [backtrack_position((i, 0, 0), chain).x for i in range(20)]
    assert all(b > a for a, b in zip(xs, xs[1:]))


def test_offset_schedule():
    schedule = OffsetSchedule(8, 2)
    assert schedule.offsets == (0, 4) and schedule.step == 4
    assert len(schedule.combinations()) == 8
    assert OffsetSchedule(8, 1).offsets == (0,)
    for bad in (3, 16, 0):
        with pytest.raises(InvalidArgumentError):
            OffsetSchedule(8, bad)


def test_lattice_extent():
    assert lattice_extent(15, 15, 8) == 1
    assert lattice_extent(23, 15, 8) == 2
    assert lattice_extent(14, 15, 8) == 0


def test_fcn_forward_single_patch_equals_predict(rng):
    model = build_architecture(15, seed=1)
    fcn = convert_to_fcn(model)
    volume = _noise_volume(rng, 20)
    region = Region((2, 3, 4), (15, 15, 15))
    lattice = fcn_forward(fcn, volume, region)
    assert lattice.shape == (1, 1, 1)
    assert lattice.origin == VoxelCoord(9, 10, 11)
    expected = predict(model, extract_patch(volume, lattice.origin, 15))
    assert lattice.values[0, 0, 0] == pytest.approx(expected, rel=1e-6)


def test_fcn_forward_two_positions(rng):
    fcn = convert_to_fcn(build_architecture(15))
    volume = _noise_volume(rng, 24)
    lattice = fcn_forward(fcn, volume, Region((0, 0, 0), (23, 23, 23)))
    assert lattice.shape == (2, 2, 2)
    assert lattice.coord((1, 1, 1)) == VoxelCoord(15, 15, 15)
    with pytest.raises(DimensionError):
        fcn_forward(fcn, volume, Region((0, 0, 0), (14, 20, 20)))


def test_dense_map_without_upsampling_is_one_pass(rng):
    fcn = convert_to_fcn(build_architecture(15, seed=2))
    volume = _noise_volume(rng, 24)
    region = Region((0, 0, 0), (24, 24, 24))
    dense = dense_score_map(fcn, volume, region, u=1)
    single = fcn_forward(fcn, volume, region)
    np.testing.assert_array_equal(dense.values, single.values)
    assert dense.origin == single.origin and dense.stride == (8, 8, 8)
    with pytest.raises(InvalidArgumentError):
        dense_score_map(fcn, volume, region, u=3)


def test_dense_map_fuses_offset_passes(rng):
    fcn = convert_to_fcn(build_architecture(15, seed=2))
    volume = _noise_volume(rng, 24)
    region = Region((0, 0, 0), (24, 24, 24))
    dense = dense_score_map(fcn, volume, region, u=2, threads=2)
    assert dense.shape == (3, 3, 3) and dense.stride == (4, 4, 4)
    shifted = fcn_forward(fcn, volume, region, offset=(4, 0, 4))
    np.testing.assert_array_equal(dense.values[1::2, 0::2, 1::2], shifted.values)
    assert dense.coord((1, 0, 1)) == shifted.coord((0, 0, 0))


def test_valid_padding_dense_map_matches_sliding_window(rng):
    model = build_architecture(23, padding="valid", seed=6)
    fcn = convert_to_fcn(model)
    volume = _noise_volume(rng, 36)
    region = Region((2, 1, 3), (31, 31, 31))
    dense = dense_score_map(fcn, volume, region, u=2)
    oracle = sliding_window_oracle(model, volume, region, stride=4)
    assert dense.shape == oracle.shape == (3, 3, 3)
    assert dense.origin == oracle.origin
    np.testing.assert_allclose(dense.values, oracle.values, atol=1e-5)


def test_full_upsampling_matches_stride_one_sliding_window(rng):
    model = build_architecture(23, padding="valid", seed=11)
    fcn = convert_to_fcn(model)
    volume = _noise_volume(rng, 32)
    region = Region((1, 0, 2), (30, 30, 30))
    dense = dense_score_map(fcn, volume, region, u=fcn.upsampling)
    oracle = sliding_window_oracle(model, volume, region, stride=1)
    assert dense.stride == (1, 1, 1) and dense.shape == oracle.shape == (8, 8, 8)
    assert dense.origin == oracle.origin == VoxelCoord(12, 11, 13)
    np.testing.assert_allclose(dense.values, oracle.values, rtol=0, atol=1e-6)


def test_oracle_on_constant_region_is_constant():
    model = build_architecture(15, seed=8)
    volume = Volume3D(np.full((30, 30, 30), 0.3, dtype=np.float32))
    oracle = sliding_window_oracle(model, volume, Region((0, 0, 0), (30, 30, 30)), stride=5)
    assert oracle.shape == (4, 4, 4)
    np.testing.assert_allclose(oracle.values, oracle.values[0, 0, 0], rtol=1e-6)
    single = predict_batch(model, [np.full((15, 15, 15), 0.3, dtype=np.float32)])[0]
    assert oracle.values[0, 0, 0] == pytest.approx(single)


def test_lattice_map_lookup_and_round_trip(tmp_path, rng):
    lattice = LatticeMap(rng.random((3, 4, 5)), (7, 7, 7), (4, 4, 4), Region((0, 0, 0), (30, 30, 30)))
    assert lattice.nearest_index((9, 7, 100)) == (1, 0, 4)
    assert lattice.nearest_index((-50, 8, 12)) == (0, 0, 1)
    assert lattice.coords()[2, 1, 0].tolist() == [15, 11, 7]
    path = lattice.save(tmp_path / "map.rvol")
    meta = read_sidecar(path.with_suffix(".txt"))
    assert {k: meta[k] for k in ("origin_x", "origin_y", "origin_z", "stride_x", "stride_y", "stride_z")} == {
        "origin_x": "7", "origin_y": "7", "origin_z": "7", "stride_x": "4", "stride_y": "4", "stride_z": "4"}
    back = LatticeMap.load(path)
    np.testing.assert_allclose(back.values, lattice.values, rtol=1e-6)
    assert back.origin == lattice.origin and back.stride == lattice.stride and back.region == lattice.region


def test_fcn_model_save_load(tmp_path, rng):
    fcn = convert_to_fcn(build_architecture(15, seed=9))
    back = FcnModel.load(fcn.save(tmp_path / "fcn.rnnp"))
    assert back.patch_edge == 15 and back.pools == 3
    volume = _noise_volume(rng, 20)
    region = Region((0, 0, 0), (20, 20, 20))
    np.testing.assert_array_equal(back.score_map(volume, region).values, fcn.score_map(volume, region).values)


def test_bench_report(tmp_path, rng):
    model = build_architecture(15, seed=1)
    volume = _noise_volume(rng, 24)
    calls = []
    report = bench_scoremap(model, volume, Region((0, 0, 0), (24, 24, 24)), u=2,
                            localize_fn=lambda: calls.append(1))
    assert calls == [1]
    assert [r[1] for r in report.rows] == ["rl", "sliding_window", "fcn"]
    assert report.sliding_seconds > 0 and report.fcn_seconds > 0 and report.ratio > 0
    lines = report.write_csv(tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0] == "step,method,extent,seconds" and lines[2].startswith("score_map,sliding_window,24x24x24,")


def test_lattice_map_per_axis_sidecar_keys(tmp_path):
    path = LatticeMap(np.zeros((2, 2, 2)), (7, 8, 9), (4, 2, 1)).save(tmp_path / "scores.rvol")
    assert read_sidecar(path.with_suffix(".txt")) == {
        "origin_x": "7", "stride_x": "4", "origin_y": "8", "stride_y": "2", "origin_z": "9", "stride_z": "1"}
    back = LatticeMap.load(path)
    assert back.origin == VoxelCoord(7, 8, 9) and back.stride == (4, 2, 1) and back.region is None
    write_sidecar(path.with_suffix(".txt"), {"origin_x": 7, "origin_y": 8, "stride_x": 4, "stride_y": 2, "stride_z": 1})
    with pytest.raises(FormatError, match="origin_z"):
        LatticeMap.load(path)


@pytest.mark.slow
def test_fcn_is_ten_times_faster_than_sliding_window(rng):
    model = build_architecture(31, seed=3)
    volume = _noise_volume(rng, 64)
    report = bench_scoremap(model, volume, Region((0, 0, 0), (64, 64, 64)), u=8)
    assert report.ratio >= 10.0
