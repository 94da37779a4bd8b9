"""Dense-array primitives used by every other module.

Arrays are plain ``numpy.ndarray`` values, row-major, channel-first
(``[N, C, H, W]`` or ``[N, C, D, H, W]``).  Everything here is a pure function.

Two pieces matter for exactness:

* ``matmul`` / ``contract`` accumulate in a fixed left-to-right order that does
  not depend on the position of an output element, so the result for one pixel
  never depends on where that pixel sits in the batch or the image.
* ``orbit_sum`` adds a set of values that a grid symmetry permutes among
  themselves in an order the symmetry cannot change.  In 2D the members are
  laid out as a pairing tree (antipodal pairs, then the two quarter-turn
  cosets); addition is commutative, so any element of D4 maps the tree onto
  itself and the rounded result is bit-identical.  The 3D octahedral group
  is not a 2-group, so there the members are sorted before summation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with a fixed accumulation order per output element."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for t in range(a.shape[1]):
        out += a[:, t, None] * b[None, t, :]
    return out


def contract(weights: np.ndarray, x: np.ndarray, skip: Iterable[int] = ()) -> np.ndarray:
    """Channel contraction ``y[n, o, ...] = sum_t weights[o, t] * x[n, t, ...]``.

    The sum over ``t`` runs left to right; indices in ``skip`` (known all-zero
    inputs) are left out.  This is the per-pixel linear map behind the SRE
    convolution, the 1x1 convolution and the classifier head.
    """
    if weights.ndim != 2 or x.ndim < 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"contract shape mismatch: {weights.shape} vs {x.shape}")
    skip = set(skip)
    n_out = weights.shape[0]
    spatial = x.shape[2:]
    bshape = (1, n_out) + (1,) * len(spatial)
    out = np.zeros((x.shape[0], n_out) + spatial, dtype=np.result_type(weights, x))
    tmp = np.empty_like(out)
    for t in range(weights.shape[1]):
        if t in skip:
            continue
        np.multiply(weights[:, t].reshape(bshape), x[:, t : t + 1], out=tmp)
        out += tmp
    return out


def pad(x: np.ndarray, amount: int, value=0, ndim_spatial: int | None = None) -> np.ndarray:
    """Constant-pad the trailing ``ndim_spatial`` axes (all axes by default)."""
    if amount < 0:
        raise ShapeError("pad amount must be >= 0")
    x = np.asarray(x)
    d = x.ndim if ndim_spatial is None else ndim_spatial
    if d > x.ndim:
        raise ShapeError(f"cannot pad {d} spatial axes of a {x.ndim}-d array")
    if amount == 0:
        return x.copy()
    widths = [(0, 0)] * (x.ndim - d) + [(amount, amount)] * d
    return np.pad(x, widths, mode="constant", constant_values=value)


def reduce_mean(x: np.ndarray, axes) -> np.ndarray:
    x = np.asarray(x)
    axes = tuple(a % x.ndim for a in np.atleast_1d(axes))
    if any(x.shape[a] == 0 for a in axes):
        raise ShapeError("mean over an empty axis")
    return np.mean(x, axis=axes, dtype=x.dtype)


# ---------------------------------------------------------------------------
# grid symmetries


@dataclass(frozen=True)
class GridSymmetry:
    """A signed axis permutation acting on the trailing ``d`` axes.

    ``apply`` transposes the spatial axes by ``perm`` and then reverses every
    axis whose sign is -1.  On centred coordinates this is the linear map
    ``v[a] = signs[a] * u[perm[a]]``.  For d=2 the 8 elements form D4, for d=3
    the 48 elements form the full octahedral group.
    """

    perm: tuple
    signs: tuple
    name: str = ""

    @property
    def d(self) -> int:
        return len(self.perm)

    @property
    def matrix(self) -> np.ndarray:
        m = np.zeros((self.d, self.d), dtype=np.int64)
        for a, (p, s) in enumerate(zip(self.perm, self.signs)):
            m[a, p] = s
        return m

    @classmethod
    def from_matrix(cls, m) -> "GridSymmetry":
        m = np.asarray(m)
        perm = tuple(int(np.flatnonzero(row)[0]) for row in m)
        signs = tuple(int(m[a, p]) for a, p in enumerate(perm))
        return cls(perm, signs)

    @property
    def is_identity(self) -> bool:
        return self.perm == tuple(range(self.d)) and all(s == 1 for s in self.signs)

    def inverse(self) -> "GridSymmetry":
        return GridSymmetry.from_matrix(self.matrix.T)

    def compose(self, other: "GridSymmetry") -> "GridSymmetry":
        """``self ∘ other``: apply ``other`` first."""
        return GridSymmetry.from_matrix(self.matrix @ other.matrix)

    def act(self, offset) -> tuple:
        return tuple(int(v) for v in self.matrix @ np.asarray(offset))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        d = self.d
        if x.ndim < d:
            raise ShapeError(f"{d}-d symmetry applied to a {x.ndim}-d array")
        lead = x.ndim - d
        spatial = x.shape[lead:]
        for a, p in enumerate(self.perm):
            if spatial[a] != spatial[p]:
                raise ShapeError(f"rotation needs equal spatial extents, got {spatial}")
        axes = tuple(range(lead)) + tuple(lead + p for p in self.perm)
        y = np.transpose(x, axes)
        flips = tuple(lead + a for a, s in enumerate(self.signs) if s < 0)
        if flips:
            y = np.flip(y, axis=flips)
        return np.ascontiguousarray(y)


def grid_transform(x: np.ndarray, g: GridSymmetry) -> np.ndarray:
    """Apply an exact grid symmetry (pure cell permutation) to ``x``."""
    return g.apply(x)


IDENTITY2 = GridSymmetry((0, 1), (1, 1), "identity")
ROT90 = GridSymmetry((1, 0), (1, -1), "rot90")
HFLIP = GridSymmetry((0, 1), (1, -1), "hflip")
VFLIP = GridSymmetry((0, 1), (-1, 1), "vflip")


def rot90(x: np.ndarray, k: int = 1) -> np.ndarray:
    """Rotate the last two axes clockwise by ``k`` quarter turns."""
    return np.ascontiguousarray(np.rot90(x, -k, axes=(-2, -1)))


def rotation90(d: int, axis: int = 0, k: int = 1) -> GridSymmetry:
    """Quarter-turn rotation as a GridSymmetry.

    In 2D ``axis`` is ignored and the result matches :func:`rot90`.  In 3D the
    rotation acts in the plane of the two axes other than ``axis``.
    """
    if d == 2:
        plane = (0, 1)
    elif d == 3:
        plane = tuple(a for a in range(3) if a != axis)
    else:
        raise ValueError("d must be 2 or 3")
    g = GridSymmetry(tuple(range(d)), (1,) * d)
    m = np.eye(d, dtype=np.int64)
    i, j = plane
    m[i, i] = m[j, j] = 0
    m[i, j] = 1
    m[j, i] = -1
    step = GridSymmetry.from_matrix(m)
    for _ in range(k % 4):
        g = step.compose(g)
    return GridSymmetry(g.perm, g.signs, f"rot90x{k % 4}" if d == 2 else f"rot90x{k % 4}@{axis}")


@lru_cache(maxsize=None)
def symmetry_group(d: int) -> tuple:
    """All signed axis permutations on ``d`` axes, identity first."""
    if d not in (1, 2, 3):
        raise ValueError("d must be 1, 2 or 3")
    elems = []
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1, -1), repeat=d):
            elems.append(GridSymmetry(tuple(perm), tuple(signs)))
    elems.sort(key=lambda g: (not g.is_identity,))
    if d == 2:
        names = {
            ((0, 1), (1, 1)): "identity",
            ((1, 0), (1, -1)): "rot90",
            ((0, 1), (-1, -1)): "rot180",
            ((1, 0), (-1, 1)): "rot270",
            ((0, 1), (1, -1)): "hflip",
            ((0, 1), (-1, 1)): "vflip",
            ((1, 0), (1, 1)): "transpose",
            ((1, 0), (-1, -1)): "antitranspose",
        }
        elems = [GridSymmetry(g.perm, g.signs, names[(g.perm, g.signs)]) for g in elems]
    else:
        elems = [GridSymmetry(g.perm, g.signs, f"p{''.join(map(str, g.perm))}"
                              f"s{''.join('+' if s > 0 else '-' for s in g.signs)}") for g in elems]
    return tuple(elems)


# ---------------------------------------------------------------------------
# symmetric summation


def _neg(v) -> tuple:
    return tuple(-c for c in v)


def orbit_members(offset: Sequence[int]) -> tuple:
    """The orbit of an integer offset, ordered for :func:`orbit_sum`."""
    v = tuple(int(c) for c in offset)
    d = len(v)
    orbit = {g.act(v) for g in symmetry_group(d)}
    if d != 2:
        return tuple(sorted(orbit))
    r = ROT90.matrix
    f = HFLIP.matrix
    rv = tuple(int(c) for c in r @ v)
    if len(orbit) == 1:
        leaves = [v]
    elif len(orbit) == 4:
        leaves = [v, _neg(v), rv, _neg(rv)]
    else:
        fv = tuple(int(c) for c in f @ v)
        rfv = tuple(int(c) for c in r @ fv)
        leaves = [v, _neg(v), rv, _neg(rv), fv, _neg(fv), rfv, _neg(rfv)]
    assert set(leaves) == orbit and len(leaves) == len(orbit)
    return tuple(leaves)


def orbit_partition(offsets: Iterable[Sequence[int]]) -> list:
    """Split a symmetric set of offsets into orbits, in a canonical order.

    Orbits are ordered by squared norm and then by their smallest member, so
    the order is a property of the set, not of how it was enumerated.
    """
    remaining = {tuple(int(c) for c in o) for o in offsets}
    orbits = []
    while remaining:
        rep = min(remaining, key=lambda v: (sum(c * c for c in v), v))
        members = orbit_members(rep)
        if not set(members) <= remaining:
            raise ValueError("offset set is not closed under the symmetry group")
        remaining -= set(members)
        orbits.append(members)
    orbits.sort(key=lambda o: (sum(c * c for c in o[0]), min(o)))
    return orbits


def orbit_sum(members: Sequence[np.ndarray], d: int) -> np.ndarray:
    """Sum arrays that a grid symmetry permutes, invariantly to that permutation.

    ``members`` must be in :func:`orbit_members` order.
    """
    n = len(members)
    if d == 2 and n in (1, 4, 8):
        if n == 1:
            return members[0].copy()
        q0 = (members[0] + members[1]) + (members[2] + members[3])
        if n == 4:
            return q0
        q1 = (members[4] + members[5]) + (members[6] + members[7])
        return q0 + q1
    stacked = np.sort(np.stack(members), axis=0)
    out = stacked[0].copy()
    for i in range(1, n):
        out += stacked[i]
    return out


@lru_cache(maxsize=64)
def grid_orbit_plan(shape: tuple) -> tuple:
    """Orbits of the cells of a square/cubic grid, as flat-index arrays.

    Returns a tuple of ``(positions, index_array)`` groups, one per orbit size;
    ``positions`` gives each orbit's slot in the canonical orbit order.
    """
    d = len(shape)
    n = shape[0]
    if any(s != n for s in shape):
        raise ShapeError(f"grid orbits need equal extents, got {shape}")
    # doubled, centred coordinates keep even grids on integers
    coords = [2 * i - (n - 1) for i in range(n)]
    cells = list(itertools.product(coords, repeat=d))
    orbits = orbit_partition(cells)
    strides = [n ** (d - 1 - a) for a in range(d)]

    def flat(u):
        return sum(((c + n - 1) // 2) * s for c, s in zip(u, strides))

    groups = {}
    for pos, orbit in enumerate(orbits):
        groups.setdefault(len(orbit), []).append((pos, [flat(u) for u in orbit]))
    plan = []
    for size in sorted(groups):
        entries = groups[size]
        plan.append((np.array([p for p, _ in entries]), np.array([f for _, f in entries])))
    return tuple(plan), len(orbits)


def symmetric_spatial_sum(x: np.ndarray, d: int) -> np.ndarray:
    """Sum over the trailing ``d`` axes, bit-invariant under grid symmetries."""
    spatial = x.shape[-d:]
    lead = x.shape[:-d]
    flat = x.reshape(lead + (-1,))
    if len(set(spatial)) != 1:
        return np.sum(flat, axis=-1)
    plan, n_orbits = grid_orbit_plan(tuple(spatial))
    sums = np.empty(lead + (n_orbits,), dtype=x.dtype)
    for positions, idx in plan:
        gathered = flat[..., idx]
        members = [gathered[..., i] for i in range(idx.shape[1])]
        sums[..., positions] = orbit_sum(members, d)
    out = sums[..., 0].copy()
    for i in range(1, n_orbits):
        out += sums[..., i]
    return out
