#!/usr/bin/env python3
"""
Small numpy neural-network engine: 3D convolution, 3D max-pooling,
fully-connected, ReLU and softmax layers with analytic backward passes,
SGD with momentum, finite-difference gradient checks and a binary
parameter format.

Tensors are numpy arrays shaped (batch, channel, x, y, z) for spatial layers
and (batch, units) after the first fully-connected layer. Flattening into a
fully-connected layer runs x fastest, then y, z, channel.

RNNP file layout (little-endian):
    b"RNNP", version u8 (=1), layer count u32,
    per layer: kind u8, ndim u8, shape u32 * ndim, bias length u32,
               f32 weights (C order), f32 biases
"""

import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DimensionError, FormatError, InvalidArgumentError, StateError, TrainingError

logger = logging.getLogger(__name__)

RNNP_MAGIC = b"RNNP"
RNNP_VERSION = 1
_FILE_HEADER = struct.Struct("<4sBI")


class LayerKind(IntEnum):
    CONV3D = 1
    MAXPOOL3D = 2
    FC = 3
    RELU = 4
    SOFTMAX = 5


SPATIAL_KINDS = (LayerKind.CONV3D, LayerKind.MAXPOOL3D)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    kernel: int = 1
    stride: int = 1
    units: int = 0
    padding: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kernel < 1 or self.stride < 1:
            raise InvalidArgumentError(f"{self.kind.name.lower()}: kernel and stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise InvalidArgumentError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.kind in (LayerKind.CONV3D, LayerKind.FC) and self.units < 1:
            raise InvalidArgumentError(f"{self.kind.name.lower()}: units must be >= 1")

    @classmethod
    def conv(cls, kernel: int, units: int, padding: str = "same", stride: int = 1) -> "LayerSpec":
        return cls(LayerKind.CONV3D, kernel=kernel, stride=stride, units=units, padding=padding)

    @classmethod
    def pool(cls, kernel: int = 2, stride: int = 2) -> "LayerSpec":
        return cls(LayerKind.MAXPOOL3D, kernel=kernel, stride=stride)

    @classmethod
    def fc(cls, units: int) -> "LayerSpec":
        return cls(LayerKind.FC, units=units)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def softmax(cls) -> "LayerSpec":
        return cls(LayerKind.SOFTMAX)


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------

def _pad_amounts(k: int, padding: str) -> Tuple[int, int]:
    if padding == "valid":
        return 0, 0
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _im2col(xp: np.ndarray, k: int, d: int) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Rows are output voxels, columns run (channel, kz, ky, kx) with kx fastest"""
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::d, ::d, ::d]
    b, c, ox, oy, oz = win.shape[:5]
    cols = win.transpose(0, 2, 3, 4, 1, 7, 6, 5).reshape(b * ox * oy * oz, c * k ** 3)
    return cols, (ox, oy, oz)


def _conv_matrix(w: np.ndarray) -> np.ndarray:
    o, c, k = w.shape[0], w.shape[1], w.shape[2]
    return w.transpose(1, 4, 3, 2, 0).reshape(c * k ** 3, o)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1,
                   padding: str = "same", name: str = "conv3d") -> np.ndarray:
    """x (B, C, X, Y, Z), w (O, C, k, k, k), b (O,) -> (B, O, X', Y', Z')"""
    out, _ = _conv3d(x, w, b, stride, padding, name)
    return out


def _conv3d(x, w, b, stride, padding, name):
    if x.ndim != 5:
        raise DimensionError(f"{name}: expected (batch, channel, x, y, z) input, got shape {x.shape}")
    if stride < 1:
        raise InvalidArgumentError(f"{name}: stride must be >= 1")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"{name}: axis channel: input has {x.shape[1]}, weights expect {w.shape[1]}")
    k = w.shape[2]
    lo, hi = _pad_amounts(k, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi), (lo, hi))) if lo or hi else x
    for axis, extent in zip("xyz", xp.shape[2:]):
        if extent < k:
            raise DimensionError(f"{name}: axis {axis}: extent {extent} smaller than kernel {k}")
    cols, (ox, oy, oz) = _im2col(xp, k, stride)
    out = cols @ _conv_matrix(w) + b
    out = out.reshape(x.shape[0], ox, oy, oz, w.shape[0]).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(out), (cols, xp.shape, (lo, hi))


def maxpool3d_forward(x: np.ndarray, k: int = 2, d: int = 2, name: str = "maxpool3d") -> np.ndarray:
    out, _ = _maxpool3d(x, k, d, name)
    return out


def _maxpool3d(x, k, d, name):
    if x.ndim != 5:
        raise DimensionError(f"{name}: expected (batch, channel, x, y, z) input, got shape {x.shape}")
    for axis, extent in zip("xyz", x.shape[2:]):
        if extent < k:
            raise DimensionError(f"{name}: axis {axis}: extent {extent} smaller than pool kernel {k}")
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))[:, :, ::d, ::d, ::d]
    flat = win.transpose(0, 1, 2, 3, 4, 7, 6, 5).reshape(*win.shape[:5], k ** 3)
    # argmax returns the first maximum: ties go to the lowest x-fastest index
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool3d_backward(gout, arg, x_shape, k, d):
    b, c, ox, oy, oz = gout.shape
    _, _, nx, ny, nz = x_shape
    kx, ky, kz = arg % k, (arg // k) % k, arg // (k * k)
    ix = np.arange(ox).reshape(1, 1, ox, 1, 1) * d + kx
    iy = np.arange(oy).reshape(1, 1, 1, oy, 1) * d + ky
    iz = np.arange(oz).reshape(1, 1, 1, 1, oz) * d + kz
    bc = np.arange(b * c).reshape(b, c, 1, 1, 1)
    flat = ((bc * nx + ix) * ny + iy) * nz + iz
    gin = np.bincount(flat.ravel(), weights=gout.ravel(), minlength=int(np.prod(x_shape)))
    return gin.reshape(x_shape).astype(gout.dtype, copy=False)


def flatten_xfast(x: np.ndarray) -> np.ndarray:
    """(B, C, X, Y, Z) -> (B, C*X*Y*Z) with x fastest"""
    return x.transpose(0, 1, 4, 3, 2).reshape(x.shape[0], -1)


def unflatten_xfast(x2d: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    b, c, nx, ny, nz = shape
    return x2d.reshape(b, c, nz, ny, nx).transpose(0, 1, 4, 3, 2)


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, name: str = "fc") -> np.ndarray:
    """Affine map; x is a length-N vector or a (B, N) batch, w is (N, N')"""
    single = x.ndim == 1
    x2d = x[None, :] if single else x
    if x2d.ndim != 2 or x2d.shape[1] != w.shape[0]:
        raise DimensionError(f"{name}: axis units: input has {x2d.shape[-1]}, weights expect {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"{name}: bias length {b.shape} does not match {w.shape[1]} outputs")
    out = x2d @ w + b
    return out[0] if single else out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent_forward_backward(logits: np.ndarray, label, weights: Optional[np.ndarray] = None,
                                  normalizer: Optional[float] = None):
    """
    Cross-entropy of softmax(logits) against integer labels.

    A 1-D logits vector gives loss and gradient p - onehot. For a (B, K) batch
    the loss is sum(w_i * loss_i) / normalizer (default B) and the gradient is
    scaled the same way.
    """
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape[0] != z.shape[0]:
        raise DimensionError(f"softmax_xent: {labels.shape[0]} labels for a batch of {z.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise InvalidArgumentError(f"softmax_xent: label outside [0, {z.shape[1]})")
    w = np.ones(z.shape[0], dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    norm = float(z.shape[0] if normalizer is None else normalizer)
    logp = log_softmax(z)
    probs = np.exp(logp)
    rows = np.arange(z.shape[0])
    loss = float(np.sum(-logp[rows, labels] * w) / norm)
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad *= (w / norm)[:, None]
    if single:
        return loss, probs[0], grad[0]
    return loss, probs, grad


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    kind: LayerKind

    def __init__(self, spec: LayerSpec, name: str):
        self.spec = spec
        self.name = name
        self.w: Optional[np.ndarray] = None
        self.b: Optional[np.ndarray] = None
        self.dw: Optional[np.ndarray] = None
        self.db: Optional[np.ndarray] = None
        self._cache = None

    @property
    def has_params(self) -> bool:
        return self.w is not None

    def zero_grad(self):
        if self.has_params:
            self.dw = np.zeros_like(self.w)
            self.db = np.zeros_like(self.b)

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        return self._cache

    def forward(self, x: np.ndarray, record: bool = True) -> np.ndarray:
        """record=False skips the backward cache and drops any stale one"""
        raise NotImplementedError

    def backward(self, gout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv3D(Layer):
    kind = LayerKind.CONV3D

    def forward(self, x, record=True):
        out, (cols, xp_shape, pads) = _conv3d(x, self.w, self.b, self.spec.stride, self.spec.padding, self.name)
        self._cache = (cols, xp_shape, pads, x.shape) if record else None
        return out

    def backward(self, gout):
        cols, xp_shape, (lo, _), x_shape = self._require_cache()
        o, c, k = self.w.shape[0], self.w.shape[1], self.w.shape[2]
        d = self.spec.stride
        b, _, ox, oy, oz = gout.shape
        g2d = gout.transpose(0, 2, 3, 4, 1).reshape(-1, o)
        dw = (cols.T @ g2d).reshape(c, k, k, k, o).transpose(4, 0, 3, 2, 1)
        self.dw += dw
        self.db += g2d.sum(axis=0)
        gcols = (g2d @ _conv_matrix(self.w).T).reshape(b, ox, oy, oz, c, k, k, k)
        gxp = np.zeros(xp_shape, dtype=gout.dtype)
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    gxp[:, :, dx:dx + d * ox:d, dy:dy + d * oy:d, dz:dz + d * oz:d] += \
                        gcols[..., dz, dy, dx].transpose(0, 4, 1, 2, 3)
        nx, ny, nz = x_shape[2:]
        return gxp[:, :, lo:lo + nx, lo:lo + ny, lo:lo + nz]


class MaxPool3D(Layer):
    kind = LayerKind.MAXPOOL3D

    def forward(self, x, record=True):
        out, arg = _maxpool3d(x, self.spec.kernel, self.spec.stride, self.name)
        self._cache = (arg, x.shape) if record else None
        return out

    def backward(self, gout):
        arg, x_shape = self._require_cache()
        return _maxpool3d_backward(gout, arg, x_shape, self.spec.kernel, self.spec.stride)


class Dense(Layer):
    kind = LayerKind.FC

    def forward(self, x, record=True):
        x_shape = x.shape
        x2d = flatten_xfast(x) if x.ndim == 5 else x
        self._cache = (x2d, x_shape) if record else None
        return fc_forward(x2d, self.w, self.b, self.name)

    def backward(self, gout):
        x2d, x_shape = self._require_cache()
        self.dw += x2d.T @ gout
        self.db += gout.sum(axis=0)
        gin = gout @ self.w.T
        return unflatten_xfast(gin, x_shape) if len(x_shape) == 5 else gin


class ReLU(Layer):
    kind = LayerKind.RELU

    def forward(self, x, record=True):
        mask = x > 0
        self._cache = mask if record else None
        return x * mask

    def backward(self, gout):
        return gout * self._require_cache()


class Softmax(Layer):
    kind = LayerKind.SOFTMAX

    def forward(self, x, record=True):
        p = softmax(x)
        self._cache = p if record else None
        return p

    def backward(self, gout):
        p = self._require_cache()
        return p * (gout - np.sum(gout * p, axis=-1, keepdims=True))


_LAYER_TYPES = {cls.kind: cls for cls in (Conv3D, MaxPool3D, Dense, ReLU, Softmax)}


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """
    Sequential stack of layers built from LayerSpecs.

    input_shape is (channels, x, y, z) for spatial inputs or (units,) for a
    stack of fully-connected layers.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Tuple[int, ...], seed: int = 0,
                 dtype=np.float32, name: str = "net"):
        self.specs = list(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        self.name = name
        self.layers: List[Layer] = []
        self.shapes: List[Tuple[int, ...]] = [self.input_shape]
        self._ran: Optional[int] = None
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
        self._build(rng)

    def _build(self, rng):
        shape = self.input_shape
        seen_fc = False
        for i, spec in enumerate(self.specs):
            layer_name = f"{self.name}.{spec.kind.name.lower()}{i}"
            layer = _LAYER_TYPES[spec.kind](spec, layer_name)
            if spec.kind in SPATIAL_KINDS:
                if seen_fc or len(shape) != 4:
                    raise InvalidArgumentError(f"{layer_name}: spatial layer after a fully-connected layer")
                shape = self._spatial_shape(spec, shape, layer_name)
                if spec.kind == LayerKind.CONV3D:
                    c, k = self.shapes[-1][0], spec.kernel
                    layer.w = glorot_uniform(rng, (spec.units, c, k, k, k), c * k ** 3,
                                             spec.units * k ** 3, self.dtype)
                    layer.b = np.zeros(spec.units, dtype=self.dtype)
            elif spec.kind == LayerKind.FC:
                seen_fc = True
                n_in = int(np.prod(shape))
                layer.w = glorot_uniform(rng, (n_in, spec.units), n_in, spec.units, self.dtype)
                layer.b = np.zeros(spec.units, dtype=self.dtype)
                shape = (spec.units,)
            layer.zero_grad()
            self.layers.append(layer)
            self.shapes.append(shape)

    @staticmethod
    def _spatial_shape(spec: LayerSpec, shape, layer_name):
        c, dims = shape[0], shape[1:]
        k, d = spec.kernel, spec.stride
        out = []
        for axis, extent in zip("xyz", dims):
            if spec.kind == LayerKind.CONV3D and spec.padding == "same":
                extent = extent + k - 1
            if extent < k:
                raise DimensionError(f"{layer_name}: axis {axis}: extent {extent} smaller than kernel {k}")
            out.append((extent - k) // d + 1)
        channels = spec.units if spec.kind == LayerKind.CONV3D else c
        return (channels, *out)

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.shapes[-1]

    def param_layers(self) -> List[Layer]:
        return [l for l in self.layers if l.has_params]

    def _run(self, x: np.ndarray, depth: int, record: bool) -> np.ndarray:
        out = np.asarray(x, dtype=self.dtype)
        if out.shape[1:] != self.input_shape and out.ndim == len(self.input_shape) + 1:
            # fully convolutional use: spatial extents may differ from the build shape
            if not all(l.kind in SPATIAL_KINDS + (LayerKind.RELU,) for l in self.layers[:depth]):
                raise DimensionError(f"{self.name}: input shape {out.shape[1:]} != {self.input_shape}")
        for layer in self.layers[:depth]:
            out = layer.forward(out, record)
        self._ran = depth if record else None
        return out

    def forward(self, x: np.ndarray, record: bool = True) -> np.ndarray:
        return self._run(x, len(self.layers), record)

    def logits(self, x: np.ndarray, record: bool = True) -> np.ndarray:
        """Forward pass stopping before a trailing softmax"""
        depth = len(self.layers)
        if depth and self.layers[-1].kind == LayerKind.SOFTMAX:
            depth -= 1
        return self._run(x, depth, record)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        """Accumulates parameter gradients; returns the input gradient"""
        if self._ran is None:
            raise StateError(f"{self.name}: backward called before forward")
        g = np.asarray(gout, dtype=self.dtype)
        for layer in reversed(self.layers[:self._ran]):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


def gradient_check(net: Network, x: np.ndarray, seed: int = 0, eps: float = 1e-6,
                   samples: int = 12) -> Dict[str, float]:
    """
    Worst relative error between analytic and central-difference gradients of
    the scalar sum(forward(x) * r) for a fixed random r. Run on float64
    networks; keys are layer names plus "input".
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=net.dtype).copy()
    out = net.forward(x)
    r = rng.standard_normal(out.shape).astype(net.dtype)

    def loss() -> float:
        return float(np.sum(net.forward(x) * r))

    net.zero_grad()
    net.forward(x)
    gx = net.backward(r)
    analytic = {l.name: (l.dw.copy(), l.db.copy()) for l in net.param_layers()}

    def rel(a: float, n: float) -> float:
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    def max_rel_error(arr: np.ndarray, grad: np.ndarray) -> float:
        worst = 0.0
        flat_idx = rng.choice(arr.size, size=min(samples, arr.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            keep = arr[idx]
            arr[idx] = keep + eps
            up = loss()
            arr[idx] = keep - eps
            down = loss()
            arr[idx] = keep
            worst = max(worst, rel(float(grad[idx]), (up - down) / (2 * eps)))
        return worst

    errors = {}
    for layer in net.param_layers():
        dw, db = analytic[layer.name]
        errors[layer.name] = max(max_rel_error(layer.w, dw), max_rel_error(layer.b, db))
    errors["input"] = max_rel_error(x, gx)
    return errors


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float, momentum: float,
             velocity: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """In place: v <- momentum*v + g, p <- p - lr*v"""
    if lr < 0:
        raise InvalidArgumentError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {name}")
    for name, p in params.items():
        v = velocity.get(name)
        v = grads[name].copy() if v is None else momentum * v + grads[name]
        velocity[name] = v
        p -= (lr * v).astype(p.dtype, copy=False)
    return params


class SGD:
    """Momentum SGD over the parameter layers of one or more networks"""

    def __init__(self, nets: Union[Network, Sequence[Network]], lr: float, momentum: float = 0.9):
        self.nets = [nets] if isinstance(nets, Network) else list(nets)
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, scale: float = 1.0):
        params, grads = {}, {}
        for layer in (l for net in self.nets for l in net.param_layers()):
            params[layer.name + ".w"] = layer.w
            params[layer.name + ".b"] = layer.b
            grads[layer.name + ".w"] = layer.dw * scale
            grads[layer.name + ".b"] = layer.db * scale
        sgd_step(params, grads, self.lr, self.momentum, self.velocity)

    def zero_grad(self):
        for net in self.nets:
            net.zero_grad()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _layers_of(target) -> List[Layer]:
    if isinstance(target, Network):
        return list(target.layers)
    layers = []
    for item in target:
        layers.extend(item.layers if isinstance(item, Network) else [item])
    return layers


def save_params(path, target) -> Path:
    path = Path(path)
    layers = _layers_of(target)
    chunks = [_FILE_HEADER.pack(RNNP_MAGIC, RNNP_VERSION, len(layers))]
    for layer in layers:
        w = np.zeros(0, dtype="<f4") if layer.w is None else np.asarray(layer.w, dtype="<f4")
        b = np.zeros(0, dtype="<f4") if layer.b is None else np.asarray(layer.b, dtype="<f4")
        shape = () if layer.w is None else w.shape
        chunks.append(struct.pack("<BB", int(layer.kind), len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(struct.pack("<I", b.size))
        chunks.append(w.tobytes(order="C"))
        chunks.append(b.tobytes(order="C"))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
    except OSError as e:
        raise OSError(f"{path}: cannot write parameters: {e}") from e
    return path


def read_params(path) -> List[Tuple[LayerKind, Optional[np.ndarray], Optional[np.ndarray]]]:
    """Raw (kind, weights, biases) records of an RNNP file"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"{path}: cannot read parameters: {e}") from e
    if len(raw) < _FILE_HEADER.size:
        raise FormatError(path, "header", f"{len(raw)} bytes, need {_FILE_HEADER.size}")
    magic, version, count = _FILE_HEADER.unpack_from(raw)
    if magic != RNNP_MAGIC:
        raise FormatError(path, "magic", f"expected {RNNP_MAGIC!r}, got {magic!r}")
    if version != RNNP_VERSION:
        raise FormatError(path, "version", f"expected {RNNP_VERSION}, got {version}")
    pos = _FILE_HEADER.size
    records = []

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(path, what, "truncated")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    for i in range(count):
        kind_byte, ndim = struct.unpack("<BB", take(2, f"layer {i} kind"))
        try:
            kind = LayerKind(kind_byte)
        except ValueError:
            raise FormatError(path, f"layer {i} kind", f"unknown kind {kind_byte}") from None
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"layer {i} shape"))
        (nbias,) = struct.unpack("<I", take(4, f"layer {i} bias length"))
        nw = int(np.prod(shape)) if ndim else 0
        w = np.frombuffer(take(4 * nw, f"layer {i} weights"), dtype="<f4").reshape(shape) if ndim else None
        b = np.frombuffer(take(4 * nbias, f"layer {i} biases"), dtype="<f4").copy() if ndim else None
        records.append((kind, None if w is None else w.copy(), b))
    if pos != len(raw):
        raise FormatError(path, "payload", f"{len(raw) - pos} trailing bytes")
    return records


def load_params(path, target) -> None:
    """Fill the layers of target (a Network or a sequence of them) from path"""
    layers = _layers_of(target)
    records = read_params(path)
    if len(records) != len(layers):
        raise FormatError(path, "layer count", f"file has {len(records)}, network has {len(layers)}")
    for i, (layer, (kind, w, b)) in enumerate(zip(layers, records)):
        if kind != layer.kind:
            raise FormatError(path, f"layer {i} kind", f"file has {kind.name}, network has {layer.kind.name}")
        if layer.has_params:
            if w is None or w.shape != layer.w.shape or b.shape != layer.b.shape:
                got = None if w is None else w.shape
                raise FormatError(path, f"layer {i} shape", f"file has {got}, network expects {layer.w.shape}")
            layer.w = w.astype(layer.w.dtype)
            layer.b = b.astype(layer.b.dtype)
            layer.zero_grad()
