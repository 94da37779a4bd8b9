"""Symmetric kernel construction.

A k x k (or k x k x k) kernel is described by ``b = k // 2 + 2`` band weights.
Cells are binned by their Euclidean distance from the kernel centre into ``b``
equal-width annuli, cells outside the inscribed circle/sphere are dropped, and
a fixed binary index matrix ``m`` of shape ``[b, k**d]`` maps band weights to
kernel cells, so the flattened kernel is ``theta @ m``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidKernelSizeError, ShapeError
from .tensor import matmul, orbit_partition, resolve_dtype

# keeps the farthest cell inside band b-1
BIN_EPS = 1e-9


def band_count(k: int) -> int:
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise InvalidKernelSizeError(f"kernel size must be a positive odd integer, got {k!r}")
    return int(k) // 2 + 2


@dataclass(frozen=True)
class BandSpec:
    k: int
    d: int = 2

    def __post_init__(self):
        band_count(self.k)
        if self.d not in (2, 3):
            raise ValueError(f"spatial dimensionality must be 2 or 3, got {self.d}")

    @property
    def b(self) -> int:
        return band_count(self.k)

    @property
    def radius(self) -> int:
        return self.k // 2

    @property
    def cells(self) -> int:
        return self.k**self.d

    @property
    def shape(self) -> tuple:
        return (self.k,) * self.d


def _offsets(spec: BandSpec) -> np.ndarray:
    r = spec.radius
    return np.array(list(itertools.product(range(-r, r + 1), repeat=spec.d)), dtype=np.int64)


def distance_matrix(spec: BandSpec) -> np.ndarray:
    """Euclidean distance of every cell from the kernel centre, in cell units."""
    offs = _offsets(spec).astype(np.float64)
    return np.sqrt(np.sum(offs**2, axis=1)).reshape(spec.shape)


@dataclass(frozen=True, eq=False)
class IndexMatrix:
    """Fixed binary band-to-cell map ``m`` (``[b, k**d]``) plus derived lookups."""

    spec: BandSpec
    m: np.ndarray = field(repr=False)
    band_of: np.ndarray = field(repr=False)  # per flattened cell, -1 for dropped corners

    @property
    def active(self) -> int:
        return int(np.count_nonzero(self.band_of >= 0))

    @property
    def band_sizes(self) -> np.ndarray:
        return self.m.sum(axis=1).astype(np.int64)

    @property
    def empty_bands(self) -> list:
        return [j for j, n in enumerate(self.band_sizes) if n == 0]

    def band_map(self) -> np.ndarray:
        return self.band_of.reshape(self.spec.shape)

    @property
    def band_orbits(self) -> list:
        """Per band, the symmetry orbits of its kernel offsets (see tensor.orbit_sum)."""
        return _band_orbits(self.spec)


def _bin_cells(spec: BandSpec) -> np.ndarray:
    dist = distance_matrix(spec).ravel()
    b = spec.b
    d_max = float(dist.max())
    if d_max == 0.0:
        band = np.zeros(dist.shape, dtype=np.int64)
    else:
        band = np.minimum(b - 1, np.floor(dist * b / (d_max + BIN_EPS))).astype(np.int64)
    band[dist > spec.radius] = -1
    return band


@lru_cache(maxsize=None)
def _cached_index(spec: BandSpec) -> IndexMatrix:
    band = _bin_cells(spec)
    m = np.zeros((spec.b, spec.cells), dtype=np.float64)
    keep = np.flatnonzero(band >= 0)
    m[band[keep], keep] = 1.0
    m.setflags(write=False)
    band.setflags(write=False)
    return IndexMatrix(spec, m, band)


def build_index_matrix(spec: BandSpec) -> IndexMatrix:
    return _cached_index(spec)


@lru_cache(maxsize=None)
def _band_orbits(spec: BandSpec) -> list:
    band = _bin_cells(spec)
    offs = _offsets(spec)
    out = []
    for j in range(spec.b):
        members = [tuple(o) for o in offs[band == j]]
        out.append(orbit_partition(members) if members else [])
    return out


@dataclass
class BandWeights:
    theta: np.ndarray  # [C_out, C_in, b]
    bias: np.ndarray  # [C_out]


def expand_kernel(idx: IndexMatrix, w) -> np.ndarray:
    """Full kernel ``[C_out, C_in, k, ...]`` from band weights (``theta @ m``)."""
    theta = w.theta if isinstance(w, BandWeights) else np.asarray(w)
    if theta.ndim != 3 or theta.shape[2] != idx.spec.b:
        raise ShapeError(f"expected theta [C_out, C_in, {idx.spec.b}], got {theta.shape}")
    c_out, c_in, b = theta.shape
    flat = matmul(theta.reshape(c_out * c_in, b), idx.m.astype(theta.dtype))
    return flat.reshape((c_out, c_in) + idx.spec.shape)


def kernel_param_count(c_in: int, c_out: int, spec: BandSpec, with_bias: bool = True) -> int:
    return c_out * c_in * spec.b + (c_out if with_bias else 0)


def standard_param_count(c_in: int, c_out: int, spec: BandSpec, with_bias: bool = True) -> int:
    return c_out * c_in * spec.cells + (c_out if with_bias else 0)


def init_scale(c_in: int, n_active: int) -> float:
    return float(np.sqrt(6.0 / (c_in * n_active)))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def init_band_weights(spec: BandSpec, c_in: int, c_out: int, seed=0, dtype="f32") -> BandWeights:
    """Uniform fan-in init over the active (non-corner) cells; zero bias."""
    idx = build_index_matrix(spec)
    s = init_scale(c_in, idx.active)
    dt = resolve_dtype(dtype)
    theta = _rng(seed).uniform(-s, s, size=(c_out, c_in, spec.b)).astype(dt)
    return BandWeights(theta, np.zeros(c_out, dtype=dt))
