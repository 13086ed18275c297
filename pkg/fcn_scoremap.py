#!/usr/bin/env python3
"""
Dense score maps from the patch classifier.

The classifier's fully-connected layers are rewritten as valid convolutions
(a pure reshape of the weights), so the network accepts any region at least
one patch wide and emits one score per patch position on a lattice of stride
f = 2^pools. Shifted passes at offsets 0, f/u, 2f/u, ... are fused by index
into a lattice of stride f/u.

Lattice placement: output o of a pass at offset v over a region starting at
r sits at r + v + f*o + (M-1)/2, the centre of the patch it scores.
"""

import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ConversionError, DimensionError, FormatError, InvalidArgumentError
from nn_engine import LayerKind, LayerSpec, Network, load_params, save_params, softmax
from patch_classifier import APPENDICITIS, ClassifierModel, build_architecture, predict_batch
from run_config import parallel_map, write_csv
from volume_core import Region, Volume3D, VoxelCoord, extract_patch, load_volume, read_sidecar, save_volume, write_sidecar

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ("step", "method", "extent", "seconds")
AXES = ("x", "y", "z")


@dataclass
class FcnModel:
    network: Network
    patch_edge: int
    pools: int
    padding: str = "same"

    @property
    def upsampling(self) -> int:
        return 2 ** self.pools

    def save(self, path) -> Path:
        path = save_params(path, self.network)
        write_sidecar(Path(path).with_suffix(".txt"), {
            "model": "fcn", "patch_edge": self.patch_edge, "pools": self.pools, "padding": self.padding})
        return path

    @classmethod
    def load(cls, path) -> "FcnModel":
        meta = read_sidecar(Path(path).with_suffix(".txt"))
        fcn = convert_to_fcn(build_architecture(int(meta["patch_edge"]), meta.get("padding", "same")))
        load_params(path, fcn.network)
        return fcn

    def score_map(self, volume: Volume3D, region: Region, u: int = 1, threads: int = 1) -> "LatticeMap":
        return dense_score_map(self, volume, region, u, threads)


@dataclass
class LatticeMap:
    """Values on a strided lattice; point idx sits at origin + stride*idx in the parent volume"""
    values: np.ndarray
    origin: VoxelCoord
    stride: Tuple[int, int, int]
    region: Optional[Region] = None

    def __post_init__(self):
        self.origin = VoxelCoord(*(int(c) for c in self.origin))
        self.stride = tuple(int(s) for s in self.stride)
        if min(self.stride) < 1:
            raise InvalidArgumentError(f"lattice stride must be >= 1, got {self.stride}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    def coord(self, idx) -> VoxelCoord:
        return VoxelCoord(*(o + s * int(i) for o, s, i in zip(self.origin, self.stride, idx)))

    def coords(self) -> np.ndarray:
        """(X, Y, Z, 3) parent coordinates of every lattice point"""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.stride, self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def nearest_index(self, coord) -> Tuple[int, int, int]:
        idx = []
        for c, o, s, n in zip(coord, self.origin, self.stride, self.shape):
            i = int(np.floor((int(c) - o) / s + 0.5))
            idx.append(min(max(i, 0), n - 1))
        return tuple(idx)

    def value_at(self, coord) -> float:
        return float(self.values[self.nearest_index(coord)])

    def with_values(self, values: np.ndarray) -> "LatticeMap":
        return LatticeMap(values, self.origin, self.stride, self.region)

    def save(self, path) -> Path:
        path = save_volume(Volume3D(self.values.astype(np.float32)), path)
        meta = {}
        for axis, o, s in zip(AXES, self.origin, self.stride):
            meta[f"origin_{axis}"] = o
            meta[f"stride_{axis}"] = s
        if self.region is not None:
            meta["region_origin"] = ",".join(map(str, self.region.origin))
            meta["region_extent"] = ",".join(map(str, self.region.extent))
        write_sidecar(Path(path).with_suffix(".txt"), meta)
        return path

    @classmethod
    def load(cls, path) -> "LatticeMap":
        grid = load_volume(path)
        sidecar = Path(path).with_suffix(".txt")
        meta = read_sidecar(sidecar)

        def axis_triple(key):
            try:
                return tuple(int(meta[f"{key}_{axis}"]) for axis in AXES)
            except KeyError as e:
                raise FormatError(sidecar, e.args[0], "missing") from None
            except ValueError as e:
                raise FormatError(sidecar, key, str(e)) from None

        def triple(key):
            return tuple(int(v) for v in meta[key].split(","))

        region = Region(triple("region_origin"), triple("region_extent")) if "region_origin" in meta else None
        return cls(np.array(grid.data, dtype=np.float64), axis_triple("origin"), axis_triple("stride"), region)


@dataclass(frozen=True)
class OffsetSchedule:
    f: int
    u: int
    offsets: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.u < 1 or self.f % self.u != 0 or self.u & (self.u - 1):
            raise InvalidArgumentError(f"upsampling {self.u} must be a power of two dividing {self.f}")
        object.__setattr__(self, "offsets", tuple(i * (self.f // self.u) for i in range(self.u)))

    @property
    def step(self) -> int:
        return self.f // self.u

    def combinations(self) -> List[Tuple[Tuple[int, int, int], Tuple[int, int, int]]]:
        """(per-axis slot index, per-axis offset) for all u^3 passes"""
        slots = range(self.u)
        return [(idx, tuple(self.offsets[i] for i in idx)) for idx in itertools.product(slots, slots, slots)]


def _conv_from_dense(w: np.ndarray, in_shape: Tuple[int, ...], name: str) -> np.ndarray:
    """(N, O) dense weights over an x-fastest (C, X, X, X) input -> (O, C, X, X, X) kernel"""
    c = in_shape[0]
    extent = in_shape[1] if len(in_shape) == 4 else 1
    if len(in_shape) == 4 and len(set(in_shape[1:])) != 1:
        raise ConversionError(f"{name}: input {in_shape} is not cubic")
    if w.shape[0] != c * extent ** 3:
        raise ConversionError(f"{name}: input length {w.shape[0]} is not {extent}^3 * {c}")
    return w.reshape(c, extent, extent, extent, w.shape[1]).transpose(4, 0, 3, 2, 1)


def convert_to_fcn(model: ClassifierModel) -> FcnModel:
    src = model.network
    specs, weights = [], []
    shape = src.input_shape
    pools = 0
    for i, layer in enumerate(src.layers):
        in_shape = src.shapes[i]
        if layer.kind == LayerKind.SOFTMAX:
            continue
        if layer.kind == LayerKind.FC:
            kernel = _conv_from_dense(layer.w, in_shape if len(in_shape) == 4 else (in_shape[0],), layer.name)
            specs.append(LayerSpec.conv(kernel.shape[2], kernel.shape[0], "valid"))
            weights.append((kernel, layer.b))
            continue
        if layer.kind == LayerKind.MAXPOOL3D:
            if layer.spec.kernel != 2 or layer.spec.stride != 2:
                raise ConversionError(f"{layer.name}: only 2x2x2 stride-2 pooling converts")
            pools += 1
        specs.append(layer.spec)
        weights.append((layer.w, layer.b) if layer.has_params else None)
    net = Network(specs, shape, dtype=src.dtype, name="fcn")
    for dst, wb in zip(net.layers, weights):
        if wb is not None:
            dst.w = wb[0].astype(src.dtype, copy=True)
            dst.b = wb[1].astype(src.dtype, copy=True)
            dst.zero_grad()
    logger.debug(f"Converted classifier M={model.patch_edge} to FCN with f={2 ** pools}")
    return FcnModel(net, model.patch_edge, pools, model.padding)


def layer_chain(net: Network) -> List[Tuple[int, int]]:
    """(stride, kernel) per spatial layer; same-padded convolutions add no shift"""
    chain = []
    for layer in net.layers:
        if layer.kind == LayerKind.CONV3D:
            k = 1 if layer.spec.padding == "same" else layer.spec.kernel
            chain.append((layer.spec.stride, k))
        elif layer.kind == LayerKind.MAXPOOL3D:
            chain.append((layer.spec.stride, layer.spec.kernel))
    return chain


def backtrack_position(x_out, chain: Sequence[Tuple[int, int]]) -> VoxelCoord:
    """x = d*x' + floor((k-1)/2), applied from the last layer back to the first"""
    x = np.asarray(x_out, dtype=np.int64)
    for d, k in reversed(list(chain)):
        x = d * x + (k - 1) // 2
    return VoxelCoord(*(int(v) for v in x))


def lattice_extent(length: int, patch_edge: int, step: int) -> int:
    return (length - patch_edge) // step + 1 if length >= patch_edge else 0


def _pass_scores(fcn: FcnModel, block: np.ndarray) -> np.ndarray:
    out = fcn.network.forward(block[None, None], record=False).astype(np.float64)
    probs = softmax(np.moveaxis(out[0], 0, -1))[..., APPENDICITIS]
    counts = [lattice_extent(n, fcn.patch_edge, fcn.upsampling) for n in block.shape]
    return probs[:counts[0], :counts[1], :counts[2]]


def fcn_forward(fcn: FcnModel, volume: Volume3D, region: Region, offset=(0, 0, 0)) -> LatticeMap:
    region = region.clip(volume.dims)
    offset = VoxelCoord(*(int(v) for v in offset))
    block = volume.data[region.slices()][offset.x:, offset.y:, offset.z:]
    for axis, n in zip("xyz", block.shape):
        if n < fcn.patch_edge:
            raise DimensionError(f"fcn_forward: axis {axis}: region extent {n} after offset is below patch edge {fcn.patch_edge}")
    f = fcn.upsampling
    # the whole network acts as one stride-f operator with an M-wide kernel
    first = backtrack_position((0, 0, 0), [(f, fcn.patch_edge)])
    origin = VoxelCoord(*(r + v + c for r, v, c in zip(region.origin, offset, first)))
    return LatticeMap(_pass_scores(fcn, block), origin, (f, f, f), region)


def dense_score_map(fcn: FcnModel, volume: Volume3D, region: Region, u: int = 1, threads: int = 1) -> LatticeMap:
    schedule = OffsetSchedule(fcn.upsampling, u)
    region = region.clip(volume.dims)
    s = schedule.step
    extent = tuple(lattice_extent(n, fcn.patch_edge, s) for n in region.extent)
    if min(extent) < 1:
        raise DimensionError(f"region {region.extent} is smaller than the patch edge {fcn.patch_edge}")
    passes = [(idx, off) for idx, off in schedule.combinations()
              if all(n - o >= fcn.patch_edge for n, o in zip(region.extent, off))]
    maps = parallel_map(lambda p: fcn_forward(fcn, volume, region, p[1]), passes, threads)
    fused = np.full(extent, np.nan)
    for (idx, _), part in zip(passes, maps):
        target = fused[idx[0]::u, idx[1]::u, idx[2]::u]
        if target.shape != part.values.shape:
            raise DimensionError(f"offset pass {idx} produced {part.values.shape}, lattice slot holds {target.shape}")
        target[...] = part.values
    if np.isnan(fused).any():
        raise DimensionError("offset passes left lattice points unfilled")
    half = (fcn.patch_edge - 1) // 2
    origin = VoxelCoord(*(o + half for o in region.origin))
    return LatticeMap(fused, origin, (s, s, s), region)


def sliding_window_oracle(model: ClassifierModel, volume: Volume3D, region: Region, stride: int,
                          chunk: int = 16) -> LatticeMap:
    """Naive reference: classify the patch at every stride-th centre of the region"""
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    region = region.clip(volume.dims)
    m = model.patch_edge
    extent = tuple(lattice_extent(n, m, stride) for n in region.extent)
    if min(extent) < 1:
        raise DimensionError(f"region {region.extent} is smaller than the patch edge {m}")
    half = (m - 1) // 2
    origin = VoxelCoord(*(o + half for o in region.origin))
    lattice = LatticeMap(np.zeros(extent), origin, (stride, stride, stride), region)
    indices = list(np.ndindex(*extent))
    values = np.empty(len(indices))
    for lo in range(0, len(indices), chunk):
        patches = [extract_patch(volume, lattice.coord(idx), m) for idx in indices[lo:lo + chunk]]
        values[lo:lo + chunk] = predict_batch(model, patches)
    lattice.values = values.reshape(extent)
    return lattice


@dataclass
class BenchReport:
    rows: List[Tuple[str, str, str, float]] = field(default_factory=list)

    def seconds(self, method: str) -> float:
        return next(r[3] for r in self.rows if r[1] == method)

    @property
    def sliding_seconds(self) -> float:
        return self.seconds("sliding_window")

    @property
    def fcn_seconds(self) -> float:
        return self.seconds("fcn")

    @property
    def ratio(self) -> float:
        return self.sliding_seconds / max(self.fcn_seconds, 1e-12)

    def write_csv(self, path) -> Path:
        return write_csv(path, BENCH_COLUMNS, self.rows)


def bench_scoremap(model: ClassifierModel, volume: Volume3D, region: Region, u: int = 1,
                   fcn: Optional[FcnModel] = None, localize_fn=None) -> BenchReport:
    """Wall time of the sliding-window oracle vs the FCN on the same lattice, single-threaded"""
    fcn = fcn if fcn is not None else convert_to_fcn(model)
    region = region.clip(volume.dims)
    label = "x".join(map(str, region.extent))
    report = BenchReport()
    if localize_fn is not None:
        started = time.perf_counter()
        localize_fn()
        report.rows.append(("localization", "rl", label, time.perf_counter() - started))
    started = time.perf_counter()
    sliding_window_oracle(model, volume, region, fcn.upsampling // u)
    report.rows.append(("score_map", "sliding_window", label, time.perf_counter() - started))
    started = time.perf_counter()
    dense_score_map(fcn, volume, region, u, threads=1)
    report.rows.append(("score_map", "fcn", label, time.perf_counter() - started))
    logger.info(f"score map {label}: sliding {report.sliding_seconds:.2f}s, fcn {report.fcn_seconds:.2f}s "
                f"({report.ratio:.1f}x)")
    return report
