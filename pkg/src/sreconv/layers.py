"""Layers with hand-written forward and backward passes.

Every layer exposes ``forward(x, train) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)``, where ``grads`` maps the layer's
parameter names to gradient arrays.  A cache is consumed by exactly one
backward call.

The forward paths that sit on the equivariant chain (SRE convolution, 1x1
convolution, pooling, eval-mode batch norm, ReLU, the head) produce
bit-identical per-pixel results under exact grid symmetries; see
``tensor.orbit_sum`` and ``tensor.contract``.  Backward passes only need to be
correct and deterministic, so they use BLAS freely.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernel as K
from .errors import CacheError, ShapeError
from .tensor import (
    contract,
    orbit_partition,
    orbit_sum,
    pad,
    resolve_dtype,
    symmetric_spatial_sum,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LayerCache:
    owner: Any
    data: Any
    consumed: bool = False

    def take(self, owner):
        if self.owner is not owner:
            raise CacheError("cache belongs to a different layer")
        if self.consumed:
            raise CacheError("cache already consumed by a backward pass")
        self.consumed = True
        return self.data


class Layer:
    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def _cache(self, data):
        return LayerCache(self, data)


def _spatial(x, d):
    if x.ndim != d + 2:
        raise ShapeError(f"expected [N, C] + {d} spatial axes, got shape {x.shape}")
    return x.shape[2:]


def _shift(q, r, spatial):
    return (Ellipsis,) + tuple(slice(r + o, r + o + n) for o, n in zip(q, spatial))


def correlate(x: np.ndarray, weight: np.ndarray, bias=None):
    """Same-size cross-correlation with a dense kernel (im2col + GEMM).

    Returns ``(y, cols)``; ``cols`` is the ``[N, C_in*k**d, P]`` patch matrix.
    Each sample goes through its own GEMM of fixed shape, so results do not
    depend on batch composition.
    """
    d = weight.ndim - 2
    spatial = _spatial(x, d)
    c_out, c_in, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, got {x.shape[1]}")
    xp = pad(x, k // 2, 0, d)
    n = x.shape[0]
    p = int(np.prod(spatial))
    spatial_axes = tuple(range(2, 2 + d))
    win = sliding_window_view(xp, (k,) * d, axis=spatial_axes)
    # [N, C, *spatial, *window] -> [N, C, *window, *spatial]
    order = (0, 1) + tuple(range(2 + d, 2 + 2 * d)) + spatial_axes
    cols = np.ascontiguousarray(win.transpose(order)).reshape(n, c_in * k**d, p)
    y = np.matmul(weight.reshape(c_out, -1).astype(x.dtype), cols)
    if bias is not None:
        y += bias.reshape(1, -1, 1).astype(x.dtype)
    return y.reshape((n, c_out) + tuple(spatial)), cols


def correlate_macs(x_shape, weight_shape) -> int:
    """Multiply-adds performed by :func:`correlate` for these operand shapes."""
    c_out = weight_shape[0]
    inner = int(np.prod(weight_shape[1:]))
    n, p = x_shape[0], int(np.prod(x_shape[2:]))
    return n * c_out * inner * p


def correlate_backward(dy, cols, weight):
    """Gradients of :func:`correlate` w.r.t. input, weight and bias."""
    d = weight.ndim - 2
    n, c_out = dy.shape[:2]
    dy2 = dy.reshape(n, c_out, -1)
    dw = np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    # the input gradient is a correlation with the spatially flipped,
    # channel-transposed kernel
    flipped = np.flip(weight, axis=tuple(range(2, 2 + d))).swapaxes(0, 1)
    dx, _ = correlate(dy, np.ascontiguousarray(flipped).astype(dy.dtype))
    return dx, dw, dy2.sum(axis=(0, 2))


class SreConv(Layer):
    """Symmetric rotation-equivariant convolution, stride 1, zero same-padding.

    The forward pass never materialises the kernel: it sums the input over
    each band's cells first (orbit by orbit) and then applies ``theta`` per
    pixel, which is ``theta @ m`` applied to every patch, re-associated.
    """

    kind = "sre"

    def __init__(self, c_in, c_out, k, dims=2, rng=None, dtype="f32"):
        self.spec = K.BandSpec(int(k), int(dims))
        self.index = K.build_index_matrix(self.spec)
        self.c_in, self.c_out = int(c_in), int(c_out)
        w = K.init_band_weights(self.spec, self.c_in, self.c_out, rng, dtype)
        self.theta, self.bias = w.theta, w.bias
        self._dense = None

    def params(self):
        return {"theta": self.theta, "bias": self.bias}

    @property
    def weights(self) -> K.BandWeights:
        return K.BandWeights(self.theta, self.bias)

    def kernel(self) -> np.ndarray:
        return K.expand_kernel(self.index, self.theta)

    def precompute(self) -> np.ndarray:
        """Expand and keep the full kernel for dense inference."""
        key = self.theta.tobytes()
        if self._dense is None or self._dense[0] != key:
            self._dense = (key, self.kernel())
        return self._dense[1]

    def band_sums(self, x: np.ndarray) -> np.ndarray:
        d = self.spec.d
        spatial = _spatial(x, d)
        if x.shape[1] != self.c_in:
            raise ShapeError(f"layer expects {self.c_in} input channels, got {x.shape[1]}")
        r = self.spec.radius
        xp = pad(x, r, 0, d)
        out = np.zeros((x.shape[0], self.c_in, self.spec.b) + tuple(spatial), dtype=x.dtype)
        for j, orbits in enumerate(self.index.band_orbits):
            acc = None
            for orbit in orbits:
                s = orbit_sum([xp[_shift(q, r, spatial)] for q in orbit], d)
                acc = s if acc is None else acc + s
            if acc is not None:
                out[:, :, j] = acc
        return out

    def forward(self, x, train=False):
        bands = self.band_sums(x)
        n, c_in, b = bands.shape[:3]
        spatial = bands.shape[3:]
        flat = bands.reshape((n, c_in * b) + spatial)
        skip = [ci * b + j for ci in range(c_in) for j in self.index.empty_bands]
        w = self.theta.reshape(self.c_out, c_in * b).astype(x.dtype)
        y = contract(w, flat, skip)
        y += self.bias.reshape((1, -1) + (1,) * len(spatial))
        return y, self._cache(bands)

    def forward_dense(self, x, kernel=None):
        """Inference through the precomputed dense kernel (FLOP-parity path)."""
        kern = self.precompute() if kernel is None else kernel
        y, _ = correlate(x, kern, self.bias)
        return y

    def inference_macs(self, x_shape) -> int:
        return correlate_macs(x_shape, self.precompute().shape)

    def backward(self, dy, cache):
        bands = cache.take(self)
        n, c_in, b = bands.shape[:3]
        spatial = bands.shape[3:]
        p = int(np.prod(spatial))
        dy2 = dy.reshape(n, self.c_out, p)
        b2 = bands.reshape(n, c_in * b, p)
        dtheta = np.tensordot(dy2, b2, axes=([0, 2], [0, 2])).reshape(self.theta.shape)
        dbias = dy2.sum(axis=(0, 2))
        w = self.theta.reshape(self.c_out, c_in * b).astype(dy.dtype)
        dbands = np.matmul(w.T, dy2).reshape((n, c_in, b) + spatial)
        r = self.spec.radius
        dxp = np.zeros((n, c_in) + tuple(s + 2 * r for s in spatial), dtype=dy.dtype)
        for j, orbits in enumerate(self.index.band_orbits):
            for orbit in orbits:
                for q in orbit:
                    dxp[_shift(q, r, spatial)] += dbands[:, :, j]
        dx = dxp[(Ellipsis,) + tuple(slice(r, r + s) for s in spatial)]
        return np.ascontiguousarray(dx), {"theta": dtheta.astype(self.theta.dtype),
                                          "bias": dbias.astype(self.bias.dtype)}


class Conv(Layer):
    """Standard dense convolution with the same geometry as :class:`SreConv`."""

    kind = "standard"

    def __init__(self, c_in, c_out, k, dims=2, rng=None, dtype="f32"):
        self.spec = K.BandSpec(int(k), int(dims))
        self.c_in, self.c_out = int(c_in), int(c_out)
        dt = resolve_dtype(dtype)
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        s = K.init_scale(self.c_in, self.spec.cells)
        self.weight = rng.uniform(-s, s, size=(self.c_out, self.c_in) + self.spec.shape).astype(dt)
        self.bias = np.zeros(self.c_out, dtype=dt)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def kernel(self):
        return self.weight

    def forward(self, x, train=False):
        y, cols = correlate(x, self.weight, self.bias)
        return y, self._cache(cols)

    def inference_macs(self, x_shape) -> int:
        return correlate_macs(x_shape, self.weight.shape)

    def backward(self, dy, cache):
        cols = cache.take(self)
        dx, dw, dbias = correlate_backward(dy, cols, self.weight)
        return dx, {"weight": dw.astype(self.weight.dtype),
                                          "bias": dbias.astype(self.bias.dtype)}


class PointwiseConv(Layer):
    """1x1 convolution (per-pixel channel mixing), stride 1."""

    def __init__(self, c_in, c_out, rng=None, dtype="f32"):
        dt = resolve_dtype(dtype)
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        s = K.init_scale(int(c_in), 1)
        self.weight = rng.uniform(-s, s, size=(int(c_out), int(c_in))).astype(dt)
        self.bias = np.zeros(int(c_out), dtype=dt)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        if x.ndim < 3 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"pointwise conv expects {self.weight.shape[1]} channels, got {x.shape}")
        y = contract(self.weight.astype(x.dtype), x)
        y += self.bias.reshape((1, -1) + (1,) * (x.ndim - 2))
        return y, self._cache(x)

    def backward(self, dy, cache):
        x = cache.take(self)
        n, c_in = x.shape[:2]
        x2 = x.reshape(n, c_in, -1)
        dy2 = dy.reshape(n, dy.shape[1], -1)
        dw = np.tensordot(dy2, x2, axes=([0, 2], [0, 2]))
        dbias = dy2.sum(axis=(0, 2))
        dx = np.matmul(self.weight.T.astype(dy.dtype), dy2).reshape(x.shape)
        return dx, {"weight": dw.astype(self.weight.dtype), "bias": dbias.astype(self.bias.dtype)}


class AvgPool(Layer):
    """Non-overlapping 2-window average pooling (stride 2) on even grids."""

    def __init__(self, dims=2, window=2):
        if window != 2:
            raise ValueError("only window=2 is supported")
        self.d = int(dims)
        self.window = window
        cells = list(itertools.product((-1, 1), repeat=self.d))
        (self._orbit,) = orbit_partition(cells)

    def forward(self, x, train=False):
        d = self.d
        spatial = _spatial(x, d)
        if any(s % 2 for s in spatial):
            raise ShapeError(f"average pooling needs even spatial extents, got {spatial}")
        shape = x.shape[:2]
        for s in spatial:
            shape += (s // 2, 2)
        xr = x.reshape(shape)

        def cell(u):
            idx = [slice(None), slice(None)]
            for c in u:
                idx += [slice(None), (c + 1) // 2]
            return xr[tuple(idx)]

        total = orbit_sum([cell(u) for u in self._orbit], d)
        y = total * x.dtype.type(1.0 / 2**d)
        return y, self._cache(x.shape)

    def backward(self, dy, cache):
        x_shape = cache.take(self)
        d = self.d
        g = dy * dy.dtype.type(1.0 / 2**d)
        for a in range(d):
            g = np.repeat(g, 2, axis=2 + a)
        return g.reshape(x_shape), {}


class GlobalAvgPool(Layer):
    """Spatial mean per channel: ``[N, C, ...] -> [N, C]``."""

    def __init__(self, dims=2):
        self.d = int(dims)

    def forward(self, x, train=False):
        spatial = _spatial(x, self.d)
        count = int(np.prod(spatial))
        y = symmetric_spatial_sum(x, self.d) / x.dtype.type(count)
        return y, self._cache(x.shape)

    def backward(self, dy, cache):
        x_shape = cache.take(self)
        count = int(np.prod(x_shape[2:]))
        g = (dy / dy.dtype.type(count)).reshape(dy.shape + (1,) * self.d)
        return np.broadcast_to(g, x_shape).copy(), {}


class ReLU(Layer):
    def forward(self, x, train=False):
        return np.maximum(x, 0), self._cache(x > 0)

    def backward(self, dy, cache):
        mask = cache.take(self)
        return dy * mask, {}


class BatchNorm(Layer):
    """Per-channel normalisation over the batch and spatial axes."""

    def __init__(self, channels, dtype="f32", eps=BN_EPS, momentum=BN_MOMENTUM):
        dt = resolve_dtype(dtype)
        self.gamma = np.ones(channels, dtype=dt)
        self.beta = np.zeros(channels, dtype=dt)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, train=False):
        if x.ndim < 2 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batch norm expects {self.gamma.shape[0]} channels, got {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        if not train:
            inv = 1.0 / np.sqrt(self.running_var.astype(x.dtype) + x.dtype.type(self.eps))
            scale = self.gamma.astype(x.dtype) * inv
            shift = self.beta.astype(x.dtype) - self.running_mean.astype(x.dtype) * scale
            y = x * scale.reshape(bs) + shift.reshape(bs)
            return y, self._cache(("eval", x, inv))
        count = x.size // x.shape[1]
        if count < 2:
            raise ShapeError("batch norm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        y = xhat * self.gamma.reshape(bs).astype(x.dtype) + self.beta.reshape(bs).astype(x.dtype)
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * mean
        self.running_var[...] = (1 - m) * self.running_var + m * var
        return y, self._cache(("train", xhat, inv))

    def backward(self, dy, cache):
        mode, a, inv = cache.take(self)
        axes = (0,) + tuple(range(2, dy.ndim))
        bs = self._bshape(dy)
        gamma = self.gamma.astype(dy.dtype)
        if mode == "eval":
            x = a
            xhat = (x - self.running_mean.astype(dy.dtype).reshape(bs)) * inv.reshape(bs)
            dgamma = np.sum(dy * xhat, axis=axes)
            dbeta = np.sum(dy, axis=axes)
            dx = dy * (gamma * inv).reshape(bs)
        else:
            xhat = a
            count = dy.size // dy.shape[1]
            dgamma = np.sum(dy * xhat, axis=axes)
            dbeta = np.sum(dy, axis=axes)
            dxhat = dy * gamma.reshape(bs)
            dx = (inv.reshape(bs) / count) * (
                count * dxhat
                - np.sum(dxhat, axis=axes).reshape(bs)
                - xhat * np.sum(dxhat * xhat, axis=axes).reshape(bs)
            )
        return dx, {"gamma": dgamma.astype(self.gamma.dtype), "beta": dbeta.astype(self.beta.dtype)}


class Linear(Layer):
    """Classifier head: ``logits = x @ W.T + bias``."""

    def __init__(self, features, classes, rng=None, dtype="f32"):
        dt = resolve_dtype(dtype)
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        s = 1.0 / np.sqrt(features)
        self.weight = rng.uniform(-s, s, size=(int(classes), int(features))).astype(dt)
        self.bias = np.zeros(int(classes), dtype=dt)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"linear expects [N, {self.weight.shape[1]}], got {x.shape}")
        y = contract(self.weight.astype(x.dtype), x) + self.bias.astype(x.dtype)
        return y, self._cache(x)

    def backward(self, dy, cache):
        x = cache.take(self)
        dw = dy.T @ x
        dx = dy @ self.weight.astype(dy.dtype)
        return dx, {"weight": dw.astype(self.weight.dtype), "bias": dy.sum(axis=0).astype(self.bias.dtype)}


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)  # [(name, layer)]

    def _collect(self, attr):
        out = {}
        for name, layer in self.layers:
            for key, value in getattr(layer, attr)().items():
                out[f"{name}.{key}"] = value
        return out

    def params(self):
        return self._collect("params")

    def buffers(self):
        return self._collect("buffers")

    def forward(self, x, train=False):
        caches = []
        for _, layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        return x, self._cache(caches)

    def backward(self, dy, cache):
        caches = cache.take(self)
        grads = {}
        for (name, layer), c in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(dy, c)
            for key, value in g.items():
                grads[f"{name}.{key}"] = value
        return dy, grads


class Residual(Sequential):
    """``y = x + body(x)``; only used when the body keeps the channel count."""

    def forward(self, x, train=False):
        h, c = super().forward(x, train)
        return x + h, c

    def backward(self, dy, cache):
        dx, grads = super().backward(dy, cache)
        return dx + dy, grads
