#!/usr/bin/env python3
"""
Volume and coordinate types shared by every rledx module.

Arrays are indexed [x, y, z]; on disk and in flattened form x runs fastest
(Fortran order). Volumes are immutable once built.

RVOL file layout (little-endian):
    b"RVOL", version u8 (=1), nx ny nz u32, sx sy sz f32 (mm), nx*ny*nz f32
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Tuple

import numpy as np

from errors import FormatError, InvalidArgumentError

logger = logging.getLogger(__name__)

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
_HEADER = struct.Struct("<4sB3I3f")
# keeps a corrupt header from asking for a multi-terabyte allocation
MAX_VOXELS = 2 ** 31 - 1

PAD_VALUE = 0.0


class VoxelCoord(NamedTuple):
    x: int
    y: int
    z: int

    def shifted(self, delta) -> "VoxelCoord":
        return VoxelCoord(*(int(c) + int(d) for c, d in zip(self, delta)))


@dataclass(frozen=True)
class Volume3D:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume intensities must be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise InvalidArgumentError(f"spacing must be three positive values, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def crop(self, region: "Region") -> "Volume3D":
        """Sub-volume for a region already clipped to this volume"""
        return Volume3D(self.data[region.slices()], self.spacing)


@dataclass(frozen=True)
class Patch:
    center: VoxelCoord
    edge: int
    data: np.ndarray


@dataclass(frozen=True)
class Region:
    origin: VoxelCoord
    extent: Tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", VoxelCoord(*(int(c) for c in self.origin)))
        extent = tuple(int(e) for e in self.extent)
        if len(extent) != 3 or min(extent) < 1:
            raise InvalidArgumentError(f"region extent must be >= 1 per axis, got {self.extent}")
        object.__setattr__(self, "extent", extent)

    @property
    def upper(self) -> Tuple[int, int, int]:
        """Exclusive upper corner"""
        return tuple(o + e for o, e in zip(self.origin, self.extent))

    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, u) for o, u in zip(self.origin, self.upper))

    def contains(self, coord) -> bool:
        return all(o <= c < u for c, o, u in zip(coord, self.origin, self.upper))

    def clamp(self, coord) -> VoxelCoord:
        return VoxelCoord(*(min(max(int(c), o), u - 1) for c, o, u in zip(coord, self.origin, self.upper)))

    def clip(self, dims) -> "Region":
        lo = [max(o, 0) for o in self.origin]
        hi = [min(u, d) for u, d in zip(self.upper, dims)]
        if any(h <= l for l, h in zip(lo, hi)):
            raise InvalidArgumentError(f"region {self} does not overlap a volume of dims {tuple(dims)}")
        return Region(VoxelCoord(*lo), tuple(h - l for l, h in zip(lo, hi)))

    @classmethod
    def centered(cls, center, extent) -> "Region":
        origin = VoxelCoord(*(int(c) - int(e) // 2 for c, e in zip(center, extent)))
        return cls(origin, tuple(extent))


def extract_patch(v: Volume3D, center, edge: int) -> Patch:
    """Cubic block of odd edge centred at center, zero outside the volume"""
    if edge < 1 or edge % 2 == 0:
        raise InvalidArgumentError(f"patch edge must be odd and >= 1, got {edge}")
    center = VoxelCoord(*(int(c) for c in center))
    block = np.full((edge, edge, edge), PAD_VALUE, dtype=np.float32)
    half = edge // 2
    src, dst = [], []
    for c, dim in zip(center, v.dims):
        lo, hi = c - half, c + half + 1
        s_lo, s_hi = max(lo, 0), min(hi, dim)
        if s_hi <= s_lo:
            return Patch(center, edge, block)
        src.append(slice(s_lo, s_hi))
        dst.append(slice(s_lo - lo, s_hi - lo))
    block[tuple(dst)] = v.data[tuple(src)]
    return Patch(center, edge, block)


def octant_region(dims, octant: str = "-++") -> Region:
    if len(octant) != 3 or any(s not in "+-" for s in octant):
        raise InvalidArgumentError(f"octant must be three '+'/'-' signs, got {octant!r}")
    extent = tuple(int(math.ceil(d / 2)) for d in dims)
    origin = VoxelCoord(*(0 if s == "-" else d - e for s, d, e in zip(octant, dims, extent)))
    return Region(origin, extent)


def lower_right_octant(v: Volume3D, octant: str = "-++") -> Region:
    """Target octant of the phantom convention (minimal x, maximal y and z)"""
    return octant_region(v.dims, octant)


def save_volume(v: Volume3D, path) -> Path:
    path = Path(path)
    header = _HEADER.pack(RVOL_MAGIC, RVOL_VERSION, *v.dims, *v.spacing)
    payload = np.asarray(v.data, dtype="<f4").tobytes(order="F")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + payload)
    except OSError as e:
        raise OSError(f"{path}: cannot write volume: {e}") from e
    return path


def load_volume(path) -> Volume3D:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"{path}: cannot read volume: {e}") from e
    if len(raw) < _HEADER.size:
        raise FormatError(path, "header", f"{len(raw)} bytes, need {_HEADER.size}")
    magic, version, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != RVOL_MAGIC:
        raise FormatError(path, "magic", f"expected {RVOL_MAGIC!r}, got {magic!r}")
    if version != RVOL_VERSION:
        raise FormatError(path, "version", f"expected {RVOL_VERSION}, got {version}")
    for name, d in (("nx", nx), ("ny", ny), ("nz", nz)):
        if d < 1:
            raise FormatError(path, name, "dimension must be >= 1")
    count = nx * ny * nz
    if count > MAX_VOXELS:
        raise FormatError(path, "dims", f"{nx}x{ny}x{nz} overflows the voxel limit")
    for name, s in (("sx", sx), ("sy", sy), ("sz", sz)):
        if not (math.isfinite(s) and s > 0):
            raise FormatError(path, name, f"spacing must be positive, got {s}")
    payload = len(raw) - _HEADER.size
    if payload < 4 * count:
        raise FormatError(path, "payload", f"truncated: {payload} bytes, need {4 * count}")
    if payload > 4 * count:
        raise FormatError(path, "payload", f"{payload - 4 * count} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    data = data.reshape((nx, ny, nz), order="F")
    if not np.all(np.isfinite(data)):
        raise FormatError(path, "payload", "non-finite intensity")
    return Volume3D(data, (sx, sy, sz))


def write_sidecar(path, values: Dict) -> Path:
    """key=value text file, one key per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={value}" for key, value in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_sidecar(path) -> Dict[str, str]:
    path = Path(path)
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(path, f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
