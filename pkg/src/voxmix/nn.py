"""Minimal differentiable-kernel stack on dense numpy arrays.

Every layer implements an explicit analytic backward pass; there is no
tape.  The network here is small and fixed, and explicit backwards keep
the gradient-check surface enumerable.  Training runs in float32,
verification in float64.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

# Sigmoid outputs are clipped into (0, 1) by this margin; the backward pass
# reports zero gradient for clipped units so analytic and finite-difference
# derivatives agree.
SIGMOID_CLIP = 1e-7


class NumericError(RuntimeError):
    """A non-finite value surfaced where the math requires finite ones."""


class ParamStore:
    """Named parameter tensors with paired gradient buffers, optimizer
    slots, and a global step counter."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def slot(self, kind: str, name: str) -> np.ndarray:
        per_kind = self.slots.setdefault(kind, {})
        if name not in per_kind:
            per_kind[name] = np.zeros_like(self.params[name])
        return per_kind[name]

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, value in self.params.items():
            dup.params[name] = value.copy()
            dup.grads[name] = self.grads[name].copy()
        dup.slots = {kind: {n: a.copy() for n, a in per.items()}
                     for kind, per in self.slots.items()}
        dup.step = self.step
        return dup


# ---------------------------------------------------------------------------
# Convolution kernels, generic over spatial rank
# ---------------------------------------------------------------------------

def _strided_windows(x: np.ndarray, kernel: Sequence[int], stride: int) -> np.ndarray:
    rank = len(kernel)
    win = sliding_window_view(x, kernel, axis=tuple(range(2, 2 + rank)))
    sub = (slice(None), slice(None)) + (slice(None, None, stride),) * rank
    return win[sub]


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                 stride: int, pad: int):
    """x: (N, Cin, *S); w: (Cout, Cin, *K). Returns (y, cache)."""
    rank = x.ndim - 2
    if pad:
        x = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * rank)
    win = _strided_windows(x, w.shape[2:], stride)
    axes_win = [1] + list(range(2 + rank, 2 + 2 * rank))
    axes_w = [1] + list(range(2, 2 + rank))
    y = np.tensordot(win, w, axes=(axes_win, axes_w))
    y = np.moveaxis(y, -1, 1)
    y += b.reshape((1, -1) + (1,) * rank)
    return y, (x, win)


def conv_backward(dy: np.ndarray, cache, w: np.ndarray, stride: int, pad: int):
    xp, win = cache
    rank = dy.ndim - 2
    spatial = list(range(2, 2 + rank))
    dw = np.tensordot(dy, win, axes=([0] + spatial, [0] + spatial))
    db = dy.sum(axis=tuple([0] + spatial))
    dxp = np.zeros_like(xp)
    out_shape = dy.shape[2:]
    for idx in np.ndindex(*w.shape[2:]):
        w_slice = w[(slice(None), slice(None)) + idx]          # (Cout, Cin)
        contrib = np.tensordot(dy, w_slice, axes=([1], [0]))   # (N, *So, Cin)
        contrib = np.moveaxis(contrib, -1, 1)
        sl = tuple(slice(idx[d], idx[d] + out_shape[d] * stride, stride)
                   for d in range(rank))
        dxp[(slice(None), slice(None)) + sl] += contrib
    if pad:
        inner = tuple(slice(pad, dxp.shape[2 + d] - pad) for d in range(rank))
        dx = dxp[(slice(None), slice(None)) + inner]
    else:
        dx = dxp
    return dx, dw, db


def conv_transpose_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                           stride: int, pad: int):
    """x: (N, Cin, *S); w: (Cin, Cout, *K). Output spatial extent is
    (S - 1) * stride + K - 2 * pad."""
    rank = x.ndim - 2
    n = x.shape[0]
    c_out = w.shape[1]
    kernel = w.shape[2:]
    in_shape = x.shape[2:]
    full = tuple((in_shape[d] - 1) * stride + kernel[d] for d in range(rank))
    ypad = np.zeros((n, c_out) + full, dtype=x.dtype)
    for idx in np.ndindex(*kernel):
        w_slice = w[(slice(None), slice(None)) + idx]         # (Cin, Cout)
        contrib = np.tensordot(x, w_slice, axes=([1], [0]))   # (N, *S, Cout)
        contrib = np.moveaxis(contrib, -1, 1)
        sl = tuple(slice(idx[d], idx[d] + in_shape[d] * stride, stride)
                   for d in range(rank))
        ypad[(slice(None), slice(None)) + sl] += contrib
    if pad:
        inner = tuple(slice(pad, full[d] - pad) for d in range(rank))
        y = ypad[(slice(None), slice(None)) + inner].copy()
    else:
        y = ypad
    y += b.reshape((1, -1) + (1,) * rank)
    return y, (x,)


def conv_transpose_backward(dy: np.ndarray, cache, w: np.ndarray,
                            stride: int, pad: int):
    (x,) = cache
    rank = dy.ndim - 2
    kernel = w.shape[2:]
    if pad:
        dy_pad = np.pad(dy, [(0, 0), (0, 0)] + [(pad, pad)] * rank)
    else:
        dy_pad = dy
    win = _strided_windows(dy_pad, kernel, stride)   # (N, Cout, *S, *K)
    axes_win = [1] + list(range(2 + rank, 2 + 2 * rank))
    axes_w = [1] + list(range(2, 2 + rank))
    dx = np.tensordot(win, w, axes=(axes_win, axes_w))
    dx = np.moveaxis(dx, -1, 1)
    spatial = list(range(2, 2 + rank))
    dw = np.tensordot(x, win, axes=([0] + spatial, [0] + spatial))
    db = dy.sum(axis=tuple([0] + spatial))
    return dx, dw, db


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base: layers cache what their backward pass needs on `self`."""

    param_names: tuple[str, ...] = ()

    def init_params(self, store: ParamStore, rng: np.random.Generator,
                    dtype=TRAIN_DTYPE) -> None:
        pass

    def forward(self, x: np.ndarray, store: ParamStore) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, store: ParamStore) -> np.ndarray:
        raise NotImplementedError


def _he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _bias_init(n: int, dtype) -> np.ndarray:
    # Small positive offset keeps narrow ReLU chains from dying at init.
    return np.full(n, 0.01, dtype=dtype)


class Dense(Layer):
    def __init__(self, name: str, n_in: int, n_out: int):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.param_names = (f"{name}.w", f"{name}.b")

    def init_params(self, store, rng, dtype=TRAIN_DTYPE):
        store.add(self.param_names[0],
                  _he_init(rng, (self.n_in, self.n_out), self.n_in, dtype))
        store.add(self.param_names[1], _bias_init(self.n_out, dtype))

    def forward(self, x, store):
        self._x = x
        return x @ store.params[self.param_names[0]] + store.params[self.param_names[1]]

    def backward(self, dy, store):
        store.grads[self.param_names[0]] += self._x.T @ dy
        store.grads[self.param_names[1]] += dy.sum(axis=0)
        return dy @ store.params[self.param_names[0]].T


class _ConvBase(Layer):
    kind = "conv"

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, pad: int = 0):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.param_names = (f"{name}.w", f"{name}.b")

    def _w_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    def init_params(self, store, rng, dtype=TRAIN_DTYPE):
        shape = self._w_shape()
        fan_in = self.c_in * self.kernel ** self.rank
        store.add(self.param_names[0], _he_init(rng, shape, fan_in, dtype))
        store.add(self.param_names[1], _bias_init(self.c_out, dtype))


class Conv2d(_ConvBase):
    rank = 2

    def _w_shape(self):
        return (self.c_out, self.c_in) + (self.kernel,) * 2

    def forward(self, x, store):
        y, self._cache = conv_forward(x, store.params[self.param_names[0]],
                                      store.params[self.param_names[1]],
                                      self.stride, self.pad)
        return y

    def backward(self, dy, store):
        dx, dw, db = conv_backward(dy, self._cache,
                                   store.params[self.param_names[0]],
                                   self.stride, self.pad)
        store.grads[self.param_names[0]] += dw
        store.grads[self.param_names[1]] += db
        return dx


class Conv3d(Conv2d):
    rank = 3

    def _w_shape(self):
        return (self.c_out, self.c_in) + (self.kernel,) * 3


class ConvTranspose3d(_ConvBase):
    rank = 3

    def _w_shape(self):
        return (self.c_in, self.c_out) + (self.kernel,) * 3

    def init_params(self, store, rng, dtype=TRAIN_DTYPE):
        # Fan-in of the equivalent gather: every output voxel reads
        # c_in * k^3 / stride^3 inputs.
        shape = self._w_shape()
        fan_in = max(1, self.c_in * self.kernel ** 3 // self.stride ** 3)
        store.add(self.param_names[0], _he_init(rng, shape, fan_in, dtype))
        store.add(self.param_names[1], _bias_init(self.c_out, dtype))

    def forward(self, x, store):
        y, self._cache = conv_transpose_forward(
            x, store.params[self.param_names[0]],
            store.params[self.param_names[1]], self.stride, self.pad)
        return y

    def backward(self, dy, store):
        dx, dw, db = conv_transpose_backward(
            dy, self._cache, store.params[self.param_names[0]],
            self.stride, self.pad)
        store.grads[self.param_names[0]] += dw
        store.grads[self.param_names[1]] += db
        return dx


class ReLU(Layer):
    # When set (by the verification harness), forward records how close the
    # pre-activations come to the kink at zero.
    record_margins = False

    def forward(self, x, store):
        self._mask = x > 0
        if ReLU.record_margins:
            self.last_min_abs = float(np.min(np.abs(x))) if x.size else np.inf
        return np.where(self._mask, x, 0)

    def backward(self, dy, store):
        return np.where(self._mask, dy, 0)


class Sigmoid(Layer):
    def forward(self, x, store):
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-x))
        lo = x.dtype.type(SIGMOID_CLIP)
        hi = x.dtype.type(1.0 - SIGMOID_CLIP)
        self._inside = (s > lo) & (s < hi)
        self._out = np.clip(s, lo, hi)
        return self._out

    def backward(self, dy, store):
        return np.where(self._inside, dy * self._out * (1.0 - self._out), 0)


class Flatten(Layer):
    def forward(self, x, store):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, store):
        return dy.reshape(self._shape)


class Reshape(Layer):
    """Reshape each sample to a fixed per-sample shape."""

    def __init__(self, sample_shape: tuple[int, ...]):
        self.sample_shape = sample_shape

    def forward(self, x, store):
        self._shape = x.shape
        return x.reshape((x.shape[0],) + self.sample_shape)

    def backward(self, dy, store):
        return dy.reshape(self._shape)


class GlobalAvgPool2d(Layer):
    """(N, C, H, W) -> (N, C); the adaptive pooling used by the no-prior
    network variant."""

    def forward(self, x, store):
        self._hw = x.shape[2] * x.shape[3]
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy, store):
        scale = dy / self._hw
        return np.broadcast_to(scale[:, :, None, None], self._shape).copy()


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        names: list[str] = []
        for layer in self.layers:
            names.extend(layer.param_names)
        self.param_names = tuple(names)

    def init_params(self, store, rng, dtype=TRAIN_DTYPE):
        for layer in self.layers:
            layer.init_params(store, rng, dtype)

    def forward(self, x, store):
        for layer in self.layers:
            x = layer.forward(x, store)
        return x

    def backward(self, dy, store):
        for layer in reversed(self.layers):
            dy = layer.backward(dy, store)
        return dy


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"                 # adam | sgd
    lr: float = 1e-3
    # (prefix, lr) overrides; first matching prefix wins.
    groups: tuple[tuple[str, float], ...] = ()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Optimizer:
    def __init__(self, store: ParamStore, config: OptimizerConfig):
        self.store = store
        self.config = config

    def lr_for(self, name: str) -> float:
        for prefix, lr in self.config.groups:
            if name.startswith(prefix):
                return lr
        return self.config.lr

    def step(self) -> None:
        raise NotImplementedError

    def _check_finite(self, name: str, grad: np.ndarray) -> None:
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")


class Adam(Optimizer):
    """Adaptive-moment update with bias correction and per-group rates."""

    def step(self) -> None:
        cfg = self.config
        self.store.step += 1
        t = self.store.step
        c1 = 1.0 - cfg.beta1 ** t
        c2 = 1.0 - cfg.beta2 ** t
        for name, p in self.store.params.items():
            g = self.store.grads[name]
            self._check_finite(name, g)
            m = self.store.slot("m", name)
            v = self.store.slot("v", name)
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            p -= p.dtype.type(self.lr_for(name)) * update
            g[...] = 0


class SGD(Optimizer):
    def step(self) -> None:
        self.store.step += 1
        for name, p in self.store.params.items():
            g = self.store.grads[name]
            self._check_finite(name, g)
            p -= p.dtype.type(self.lr_for(name)) * g
            g[...] = 0


def make_optimizer(store: ParamStore, config: OptimizerConfig) -> Optimizer:
    if config.kind == "adam":
        return Adam(store, config)
    if config.kind == "sgd":
        return SGD(store, config)
    raise ValueError(f"unknown optimizer kind {config.kind!r}")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float
    worst_name: str
    per_name: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e} "
                f"(worst: {self.worst_name}, tolerance {self.tolerance:.1e})")


def grad_check(fn: Callable[[dict[str, np.ndarray]],
                            tuple[float, dict[str, np.ndarray]]],
               arrays: dict[str, np.ndarray],
               tolerance: float = 1e-4, probes: int = 20,
               step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare fn's analytic gradients with central finite differences.

    `fn(arrays)` returns (loss, grads) with one gradient per entry of
    `arrays`.  Arrays should be float64 for the comparison to be
    meaningful at the default tolerance.  Each tensor gets at least
    min(size, probes) randomly probed coordinates.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    _, grads = fn(arrays)
    max_rel = 0.0
    worst = ""
    per_name: dict[str, float] = {}
    for name in arrays:
        arr = arrays[name]
        analytic = grads[name]
        if analytic.shape != arr.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        flat = arr.reshape(-1)
        count = min(probes, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        worst_here = 0.0
        for k in picks:
            original = flat[k]
            flat[k] = original + step
            loss_plus, _ = fn(arrays)
            flat[k] = original - step
            loss_minus, _ = fn(arrays)
            flat[k] = original
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[k])
            rel = abs(a - numeric) / max(1e-6, abs(a) + abs(numeric))
            worst_here = max(worst_here, rel)
        per_name[name] = worst_here
        if worst_here >= max_rel:
            max_rel = worst_here
            worst = name
    return GradCheckReport(tolerance, max_rel, worst, per_name)


# ---------------------------------------------------------------------------
# Checkpoint serialization
#
# Binary layout (little endian):
#   magic "VXNN", u32 version,
#   u32 metadata length, metadata JSON (utf-8),
#   u32 entry count, then per entry:
#     u16 name length, name bytes, u8 ndim, u32 * ndim dims,
#   then the float32 payloads concatenated in entry order.
# Entries cover parameters and optimizer slots ("slot.<kind>.<name>").
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"VXNN"
_CKPT_VERSION = 1


def save_checkpoint(path, store: ParamStore, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["step"] = store.step
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    entries: list[tuple[str, np.ndarray]] = []
    for name, value in store.params.items():
        entries.append((name, value))
    for kind in sorted(store.slots):
        for name in store.slots[kind]:
            entries.append((f"slot.{kind}.{name}", store.slots[kind][name]))
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", _CKPT_VERSION))
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(entries)))
    for name, value in entries:
        if value.dtype != np.float32:
            raise ValueError(f"checkpoints hold float32 tensors; {name!r} is "
                             f"{value.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
    for _, value in entries:
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)
    if view.read(4) != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", view.read(4))
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", view.read(4))
    metadata = json.loads(view.read(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", view.read(4))
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", view.read(2))
        name = view.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", view.read(1))
        dims = struct.unpack(f"<{ndim}I", view.read(4 * ndim))
        shapes.append((name, dims))
    store = ParamStore()
    for name, dims in shapes:
        size = int(np.prod(dims)) if dims else 1
        raw = view.read(4 * size)
        if len(raw) != 4 * size:
            raise ValueError(f"{path}: truncated payload for {name!r}")
        value = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        if name.startswith("slot."):
            _, kind, pname = name.split(".", 2)
            store.slots.setdefault(kind, {})[pname] = value
        else:
            store.add(name, value)
    store.step = int(metadata.get("step", 0))
    return store, metadata
