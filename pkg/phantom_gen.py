#!/usr/bin/env python3
"""
Seeded synthetic phantoms standing in for abdominal CT.

Each phantom holds a soft-tissue body, a wide "caecum" tube crossing the
target octant, and a thin "appendix" tube opening from the caecum wall. The
junction voxel (the appendiceal base) is the localization target. Inflamed
phantoms get a thicker, brighter appendix; nothing else depends on the label.

PRNG: numpy Generator(PCG64) seeded from SeedSequence([seed, index, stream]),
stream 0 for geometry and 1 for noise, so both are portable and independent
of the class label. Gaussian noise comes from Generator.standard_normal.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import GenerationError, InvalidArgumentError, ManifestError
from run_config import PhantomConfig, parallel_map
from volume_core import Region, Volume3D, VoxelCoord, load_volume, octant_region, save_volume

logger = logging.getLogger(__name__)

BODY_INTENSITY = 0.15
CAECUM_INTENSITY = 0.45
APPENDIX_INTENSITY = 0.55

GEOMETRY_STREAM = 0
NOISE_STREAM = 1
MAX_ATTEMPTS = 256

MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = ("path", "label", "base_x", "base_y", "base_z",
                    "centroid_x", "centroid_y", "centroid_z", "fold_id")


class Label(IntEnum):
    NORMAL = 0
    APPENDICITIS = 1


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (96, 96, 96)
    seed: int = 0
    appendix_radius_normal: float = 2.0
    appendix_radius_inflamed: float = 4.0
    appendix_length: int = 16
    caecum_radius: float = 6.0
    intensity_delta: float = 0.25
    noise_sigma: float = 0.05
    distractor_count: int = 2
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    octant: str = "-++"

    def __post_init__(self):
        if self.appendix_radius_normal < 1:
            raise InvalidArgumentError("appendix_radius_normal must be >= 1")
        if self.appendix_radius_inflamed <= self.appendix_radius_normal:
            raise InvalidArgumentError("appendix_radius_inflamed must exceed appendix_radius_normal")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise InvalidArgumentError(f"phantom dims must be >= 32 per axis, got {self.dims}")
        if self.distractor_count < 0:
            raise InvalidArgumentError("distractor_count must be >= 0")

    @classmethod
    def from_config(cls, cfg: PhantomConfig, seed: int) -> "PhantomSpec":
        return cls(seed=seed, **cfg.model_dump())

    def target_octant(self) -> Region:
        return octant_region(self.dims, self.octant)


@dataclass(frozen=True)
class GroundTruth:
    label: Label
    base: VoxelCoord
    centroid: VoxelCoord


@dataclass(frozen=True)
class Tube:
    start: np.ndarray
    end: np.ndarray
    radius: float
    intensity: float


@dataclass(frozen=True)
class PhantomGeometry:
    """Label-independent layout; the appendix radius/intensity is chosen at render time"""
    base: VoxelCoord
    direction: np.ndarray
    caecum: Tube
    appendix_end: np.ndarray
    distractors: List[Tube] = field(default_factory=list)

    @property
    def centroid(self) -> VoxelCoord:
        mid = np.asarray(self.base, dtype=np.float64) + 0.5 * (self.appendix_end - np.asarray(self.base))
        return VoxelCoord(*(int(v) for v in np.floor(mid + 0.5)))


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index, stream])))


def _unit(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm


def _box_hits_region(lo: np.ndarray, hi: np.ndarray, region: Region) -> bool:
    return all(l < u and h >= o for l, h, o, u in zip(lo, hi, region.origin, region.upper))


def draw_geometry(spec: PhantomSpec, seed_offset: int) -> PhantomGeometry:
    rng = _rng(spec.seed, seed_offset, GEOMETRY_STREAM)
    octant = spec.target_octant()
    length = spec.appendix_length
    if length >= min(octant.extent):
        raise GenerationError(
            f"appendix_length {length} does not fit the target octant extent {octant.extent}")

    lo = np.array(octant.origin) + np.array(octant.extent) // 4
    hi = np.array(octant.origin) + (3 * np.array(octant.extent)) // 4
    upper = np.array(octant.upper)
    origin = np.array(octant.origin)
    for _ in range(MAX_ATTEMPTS):
        base = rng.integers(lo, hi + 1)
        direction = _unit(rng)
        tip = base + length * direction
        if np.all(tip >= origin + 1) and np.all(tip <= upper - 2):
            break
    else:
        raise GenerationError(f"no appendix placement inside {octant} after {MAX_ATTEMPTS} attempts")

    # caecum axis runs perpendicular to the appendix, with the base on its wall
    axis = np.cross(direction, _unit(rng))
    axis /= max(np.linalg.norm(axis), 1e-12)
    center = base - spec.caecum_radius * direction
    reach = float(max(spec.dims))
    caecum = Tube(center - reach * axis, center + reach * axis, spec.caecum_radius, CAECUM_INTENSITY)

    others = [s for s in _all_octants() if s != spec.octant]
    distractors = []
    for k in range(spec.distractor_count):
        for _ in range(MAX_ATTEMPTS):
            region = octant_region(spec.dims, others[int(rng.integers(len(others)))])
            start = rng.uniform(np.array(region.origin), np.array(region.upper) - 1)
            d = _unit(rng)
            span = rng.uniform(0.75, 1.25) * length
            radius = rng.uniform(spec.appendix_radius_normal, spec.appendix_radius_inflamed)
            intensity = APPENDIX_INTENSITY + rng.uniform(0.0, spec.intensity_delta)
            end = start + span * d
            box_lo = np.minimum(start, end) - radius - 1
            box_hi = np.maximum(start, end) + radius + 1
            if not _box_hits_region(box_lo, box_hi, octant):
                distractors.append(Tube(start, end, radius, intensity))
                break
        else:
            raise GenerationError(f"distractor {k} could not be kept out of the target octant")

    return PhantomGeometry(VoxelCoord(*(int(v) for v in base)), direction, caecum, tip, distractors)


def _all_octants() -> List[str]:
    return [a + b + c for a in "-+" for b in "-+" for c in "-+"]


def tube_mask(dims, start, end, radius: float) -> np.ndarray:
    """Voxels whose centre lies within radius of the segment start-end"""
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    mask = np.zeros(dims, dtype=bool)
    lo = np.maximum(np.floor(np.minimum(start, end) - radius), 0).astype(int)
    hi = np.minimum(np.ceil(np.maximum(start, end) + radius) + 1, dims).astype(int)
    if np.any(hi <= lo):
        return mask
    grid = np.stack(np.meshgrid(*(np.arange(l, h) for l, h in zip(lo, hi)), indexing="ij"), axis=-1)
    seg = end - start
    denom = float(seg @ seg)
    rel = grid - start
    t = np.clip(rel @ seg / denom, 0.0, 1.0) if denom > 0 else np.zeros(grid.shape[:-1])
    dist = np.linalg.norm(rel - t[..., None] * seg, axis=-1)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = dist <= radius
    return mask


def body_mask(dims) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, d) / 0.96 for d in dims]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij", sparse=True)
    return gx ** 2 + gy ** 2 + gz ** 2 <= 1.0


def appendix_tube(spec: PhantomSpec, geometry: PhantomGeometry, label: Label) -> Tube:
    inflamed = label == Label.APPENDICITIS
    radius = spec.appendix_radius_inflamed if inflamed else spec.appendix_radius_normal
    intensity = APPENDIX_INTENSITY + (spec.intensity_delta if inflamed else 0.0)
    return Tube(np.asarray(geometry.base, dtype=np.float64), geometry.appendix_end, radius, intensity)


def render_phantom(spec: PhantomSpec, geometry: PhantomGeometry, label: Label, seed_offset: int) -> Volume3D:
    dims = tuple(spec.dims)
    data = np.zeros(dims, dtype=np.float64)
    data[body_mask(dims)] = BODY_INTENSITY
    for tube in [geometry.caecum, *geometry.distractors, appendix_tube(spec, geometry, label)]:
        data[tube_mask(dims, tube.start, tube.end, tube.radius)] = tube.intensity
    noise = _rng(spec.seed, seed_offset, NOISE_STREAM).standard_normal(dims)
    data += spec.noise_sigma * noise
    np.clip(data, 0.0, 1.0, out=data)
    return Volume3D(data.astype(np.float32), spec.spacing)


def generate_phantom(spec: PhantomSpec, label: Label, seed_offset: int = 0) -> Tuple[Volume3D, GroundTruth]:
    label = Label(int(label))
    geometry = draw_geometry(spec, seed_offset)
    volume = render_phantom(spec, geometry, label, seed_offset)
    truth = GroundTruth(label, geometry.base, geometry.centroid)
    return volume, truth


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    truth: GroundTruth
    fold: int

    def load(self) -> Volume3D:
        return load_volume(self.path)


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    seed: int = 0
    octant: str = "-++"
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def folds(self) -> List[int]:
        return sorted({e.fold for e in self.entries})

    def positives(self) -> int:
        return sum(1 for e in self.entries if e.truth.label == Label.APPENDICITIS)

    def split(self, fold: int) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
        train = [e for e in self.entries if e.fold != fold]
        test = [e for e in self.entries if e.fold == fold]
        return train, test

    def validate(self, deep: bool = False) -> None:
        if not self.entries:
            raise ManifestError(f"{self.root / MANIFEST_NAME}: manifest has no entries")
        seen = set()
        for entry in self.entries:
            key = str(Path(entry.path).resolve())
            if key in seen:
                raise ManifestError(f"duplicate manifest path {entry.path}")
            seen.add(key)
            if not Path(entry.path).is_file():
                raise ManifestError(f"manifest volume missing: {entry.path}")
            if deep:
                entry.load()

    def save(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# rledx-manifest seed={self.seed} octant={self.octant}",
                 "#" + "\t".join(MANIFEST_COLUMNS)]
        for e in self.entries:
            rel = Path(e.path)
            try:
                rel = rel.resolve().relative_to(path.parent.resolve())
            except ValueError:
                pass
            row = [rel.as_posix(), str(int(e.truth.label)), *map(str, e.truth.base),
                   *map(str, e.truth.centroid), str(e.fold)]
            lines.append("\t".join(row))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ManifestError(f"{path}: cannot read manifest: {e}") from e
        seed, octant = 0, "-++"
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("seed="):
                        seed = int(token[5:])
                    elif token.startswith("octant="):
                        octant = token[7:]
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
            try:
                label = Label(int(cols[1]))
                nums = [int(c) for c in cols[2:]]
            except ValueError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            vol_path = Path(cols[0])
            if not vol_path.is_absolute():
                vol_path = path.parent / vol_path
            truth = GroundTruth(label, VoxelCoord(*nums[0:3]), VoxelCoord(*nums[3:6]))
            entries.append(ManifestEntry(vol_path, truth, nums[6]))
        manifest = cls(entries, seed=seed, octant=octant, root=path.parent)
        manifest.validate()
        return manifest


def stratified_folds(labels: Sequence[int], folds: int) -> List[int]:
    """Round-robin fold ids, positives first, negatives continuing the cycle"""
    fold_ids = [0] * len(labels)
    positives = [i for i, lab in enumerate(labels) if lab == Label.APPENDICITIS]
    negatives = [i for i, lab in enumerate(labels) if lab != Label.APPENDICITIS]
    for k, i in enumerate(positives):
        fold_ids[i] = k % folds
    for k, i in enumerate(negatives):
        fold_ids[i] = (len(positives) + k) % folds
    return fold_ids


def assign_labels(n: int, positive_fraction: float, seed: int) -> List[Label]:
    n_pos = int(math.floor(n * positive_fraction + 0.5))
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed]))).permutation(n)
    labels = [Label.NORMAL] * n
    for i in perm[:n_pos]:
        labels[int(i)] = Label.APPENDICITIS
    return labels


def generate_dataset(spec: PhantomSpec, n: int, positive_fraction: float, folds: int, seed: int,
                     out_dir, threads: int = 1) -> DatasetManifest:
    if not (n >= folds >= 2):
        raise InvalidArgumentError(f"need n >= folds >= 2, got n={n}, folds={folds}")
    if not 0.0 < positive_fraction < 1.0:
        raise InvalidArgumentError(f"positive_fraction must lie in (0, 1), got {positive_fraction}")
    out_dir = Path(out_dir)
    spec = replace(spec, seed=seed)
    labels = assign_labels(n, positive_fraction, seed)
    fold_ids = stratified_folds(labels, folds)

    def build(i: int) -> ManifestEntry:
        volume, truth = generate_phantom(spec, labels[i], seed_offset=i)
        path = save_volume(volume, out_dir / f"phantom_{i:04d}.rvol")
        return ManifestEntry(path, truth, fold_ids[i])

    logger.info(f"Generating {n} phantoms ({sum(labels)} positive) into {out_dir}")
    entries = parallel_map(build, range(n), threads)
    manifest = DatasetManifest(entries, seed=seed, octant=spec.octant, root=out_dir)
    manifest.save()
    logger.info(f"Manifest written: {out_dir / MANIFEST_NAME}")
    return manifest


def label_counts(entries: Sequence[ManifestEntry]) -> Dict[Label, int]:
    counts = {Label.NORMAL: 0, Label.APPENDICITIS: 0}
    for e in entries:
        counts[e.truth.label] += 1
    return counts
