#!/usr/bin/env python3
"""
Run configuration for rledx.

All tunables live in one pydantic model, namespaced per module
(phantom.*, data.*, rl.*, clf.*, fcn.*, rle.*). On disk the config is a flat
key=value text file so snapshots diff cleanly:

    # desk-scale run
    seed=7
    rl.gamma=0.95
    phantom.dims=96,96,96
"""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator

from errors import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "RLEDX_THREADS"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PhantomConfig(_Section):
    dims: Tuple[int, int, int] = (96, 96, 96)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    appendix_radius_normal: float = 2.0
    appendix_radius_inflamed: float = 4.0
    appendix_length: int = 16
    caecum_radius: float = 6.0
    intensity_delta: float = 0.25
    noise_sigma: float = 0.05
    distractor_count: int = 2
    # sign per axis: '-' low half, '+' high half
    octant: str = "-++"


class DataConfig(_Section):
    n: int = 100
    positive_fraction: float = 0.36
    folds: int = 5


class RlConfig(_Section):
    gamma: float = 0.95
    n_step: int = 5
    lr: float = 0.002
    momentum: float = 0.9
    entropy_weight: float = 0.01
    value_weight: float = 0.5
    window_edge: int = 15
    max_steps: int = 120
    tail_k: int = 10
    seed: Optional[int] = None
    num_envs: int = 16
    iterations: int = 3000
    eval_every: int = 100
    terminal_radius: float = 1.0

    @field_validator("window_edge")
    @classmethod
    def _odd_window(cls, v: int) -> int:
        if v < 1 or v % 2 == 0:
            raise ValueError("window_edge must be a positive odd integer")
        return v

    @field_validator("gamma")
    @classmethod
    def _gamma_range(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        return v


class ClfConfig(_Section):
    patch_edge: int = 31
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 150
    # 0 = full batch (gradient accumulated over micro batches)
    batch_size: int = 0
    micro_batch: int = 8
    padding: str = "same"
    class_weighting: bool = True
    seed: Optional[int] = None

    @field_validator("patch_edge")
    @classmethod
    def _odd_edge(cls, v: int) -> int:
        if v < 15 or v % 2 == 0:
            raise ValueError("patch_edge must be odd and >= 15")
        return v

    @field_validator("padding")
    @classmethod
    def _padding_mode(cls, v: str) -> str:
        if v not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")
        return v


class FcnConfig(_Section):
    upsample: int = 2

    @field_validator("upsample")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v < 1 or v & (v - 1):
            raise ValueError("upsample must be a power of two")
        return v


class RleConfig(_Section):
    tau: float = 0.3 * math.log(2.0)
    min_size: int = 2
    rho: Optional[float] = None
    neighborhood: Tuple[int, int, int] = (48, 48, 32)
    smoothing_sigma: float = 0.0

    @field_validator("tau")
    @classmethod
    def _tau_range(cls, v: float) -> float:
        if not 0.0 < v < math.log(2.0):
            raise ValueError("tau must lie in (0, ln 2)")
        return v


class RunConfig(_Section):
    seed: int = 0
    threads: Optional[int] = None
    output_dir: str = "runs"
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    rl: RlConfig = Field(default_factory=RlConfig)
    clf: ClfConfig = Field(default_factory=ClfConfig)
    fcn: FcnConfig = Field(default_factory=FcnConfig)
    rle: RleConfig = Field(default_factory=RleConfig)

    def rl_seed(self) -> int:
        return self.seed if self.rl.seed is None else self.rl.seed

    def clf_seed(self) -> int:
        return self.seed if self.clf.seed is None else self.clf.seed


def clinical_scale(cfg: Optional[RunConfig] = None) -> RunConfig:
    """Switch a config to the clinical-scale settings (512-voxel volumes)"""
    cfg = (cfg or RunConfig()).model_copy(deep=True)
    cfg.phantom.dims = (512, 512, 476)
    cfg.phantom.spacing = (0.6, 0.6, 1.0)
    cfg.rl.window_edge = 51
    cfg.rl.max_steps = 300
    cfg.clf.patch_edge = 75
    cfg.rle.neighborhood = (120, 120, 70)
    cfg.fcn.upsample = 4
    return cfg


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if "," in raw:
        return [part.strip() for part in raw.split(",")]
    return raw


def parse_flat(lines: Iterable[str], source: str = "<config>") -> Dict:
    """Turn key=value lines into the nested dict RunConfig validates"""
    nested: Dict = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        parts = key.strip().split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{source}:{lineno}: {key.strip()} collides with a scalar key")
        node[parts[-1]] = _parse_value(raw)
    return nested


def _merge(base: Dict, extra: Dict) -> Dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def build_config(nested: Dict, source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(nested)
    except PydanticValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"{source}: {problems}") from None


def load_config(path: Optional[Path] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    nested: Dict = {}
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config: {e}") from e
        nested = parse_flat(text.splitlines(), str(path))
        source = str(path)
    if overrides:
        nested = _merge(nested, parse_flat(overrides, "--set"))
    return build_config(nested, source)


def _flatten(model: BaseModel, prefix: str = "") -> List[Tuple[str, str]]:
    rows = []
    for name in type(model).model_fields:
        value = getattr(model, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            rows.extend(_flatten(value, key + "."))
        elif value is None:
            rows.append((key, "none"))
        elif isinstance(value, (tuple, list)):
            rows.append((key, ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)))
        elif isinstance(value, float):
            rows.append((key, repr(value)))
        else:
            rows.append((key, str(value)))
    return rows


def dump_config(cfg: RunConfig) -> str:
    lines = ["# rledx resolved configuration"]
    lines += [f"{key}={value}" for key, value in sorted(_flatten(cfg))]
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path


def resolve_threads(cli_value: Optional[int] = None, cfg: Optional[RunConfig] = None) -> int:
    if cli_value is not None:
        threads = cli_value
    elif cfg is not None and cfg.threads is not None:
        threads = cfg.threads
    else:
        env = os.environ.get(THREADS_ENV)
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    return threads


def format_number(value) -> str:
    """CSV cell text: floats with 6 significant digits, '.' decimal"""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])
    return path


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Order-preserving map; threads=1 runs inline"""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
