"""Accuracy, rotated/reflected test protocols, equivariance error and feature-map export."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .data import circular_mask, reflect_image, rotate_image, rotate_volume
from .errors import ShapeError, UnsupportedProtocolError
from .layers import Conv, SreConv
from .network import Network
from .pgm import to_uint8, write_pgm
from .tensor import GridSymmetry

ROTATION_STEP_2D = 10
ROTATION_STEP_3D = 30
MASK_RADIUS = 0.45


def accuracy(logits, labels) -> float:
    """Multi-class: argmax == label (ties go to the lowest index).

    Multi-label (labels shaped like the logits, K > 1): mean over all N*K
    entries of ``(sigmoid(z) > 0.5) == target``, i.e. ``z > 0``.
    """
    z = np.asarray(logits)
    y = np.asarray(labels)
    if len(z) != len(y):
        raise ShapeError(f"{len(y)} labels for {len(z)} rows of logits")
    if len(z) == 0:
        return float("nan")
    if y.ndim == 2 and y.shape == z.shape and z.shape[1] > 1:
        return float(np.mean((z > 0) == (y != 0)))
    return float(np.mean(np.argmax(z, axis=1) == y.reshape(len(y), -1)[:, 0]))


@dataclass
class ProtocolResult:
    protocol: str
    transforms: list  # descriptors, one per entry of ``accuracies``
    accuracies: list
    mean: float
    original: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _result(protocol, net, x, labels, transforms, batch_size):
    original = accuracy(net.predict(x, batch_size), labels)
    accs = [accuracy(net.predict(fn(x), batch_size), labels) for _, fn in transforms]
    return ProtocolResult(protocol, [desc for desc, _ in transforms], accs,
                          float(np.mean(accs)), original)


def rotation_transforms(dims: int) -> list:
    """(descriptor, fn) pairs for the rotated test set, in a fixed order."""
    if dims == 2:
        return [({"kind": "rotate", "angle": a},
                 lambda x, a=a: rotate_image(x, a))
                for a in range(0, 360, ROTATION_STEP_2D)]
    if dims == 3:
        out = [({"kind": "rotate", "axis": None, "angle": 0}, lambda x: x)]
        for axis in range(3):
            for a in range(ROTATION_STEP_3D, 360, ROTATION_STEP_3D):
                out.append(({"kind": "rotate", "axis": axis, "angle": a},
                            lambda x, axis=axis, a=a: rotate_volume(x, axis, a)))
        return out
    raise ShapeError(f"unsupported dims {dims}")


def original_protocol(net: Network, x, labels, batch_size=256) -> ProtocolResult:
    return _result("orig", net, x, labels, [({"kind": "identity"}, lambda v: v)], batch_size)


def rotated_protocol(net: Network, x, labels, dims=None, batch_size=256) -> ProtocolResult:
    """36 copies at 0, 10, ..., 350 degrees in 2D; 34 copies in 3D
    (the original plus 30, ..., 330 degrees about each axis separately)."""
    dims = net.config.dims if dims is None else dims
    return _result("rotated", net, x, labels, rotation_transforms(dims), batch_size)


def reflected_protocol(net: Network, x, labels, batch_size=256) -> ProtocolResult:
    if net.config.dims != 2:
        raise UnsupportedProtocolError("the reflected protocol is defined for 2D data only")
    transforms = [({"kind": "reflect", "axis": ax}, lambda v, ax=ax: reflect_image(v, ax))
                  for ax in ("horizontal", "vertical")]
    return _result("reflected", net, x, labels, transforms, batch_size)


def run_protocol(name: str, net: Network, x, labels, batch_size=256) -> ProtocolResult:
    if name == "orig":
        return original_protocol(net, x, labels, batch_size)
    if name == "rotated":
        return rotated_protocol(net, x, labels, batch_size=batch_size)
    if name == "reflected":
        return reflected_protocol(net, x, labels, batch_size)
    raise UnsupportedProtocolError(f"unknown protocol {name!r}")


# -- equivariance measurement ----------------------------------------------


def _transform_pair(net: Network, g):
    """Forward and inverse spatial transforms for a symmetry or an angle."""
    if isinstance(g, GridSymmetry):
        inv = g.inverse()
        return g.apply, inv.apply
    if net.config.dims != 2:
        raise ShapeError("angle-based transforms are only defined in 2D")
    angle = float(g)
    return (lambda v: rotate_image(v, angle)), (lambda v: rotate_image(v, -angle))


def _masked_error(f, f_rot) -> float:
    mask = circular_mask(f.shape[2:], MASK_RADIUS)
    f = f.astype(np.float64)
    num = float(np.abs(f - f_rot)[..., mask].mean())
    if num == 0.0:
        return 0.0
    den = float(np.abs(f)[..., mask].mean())
    return num / den if den > 0 else float("inf")


def equivariance_error(net: Network, x, g, layer: int = 0) -> float:
    """Masked mean |f - g^-1 f(g x)| divided by masked mean |f|.

    ``f`` is the eval-mode output of body unit ``layer``; ``g`` is a
    GridSymmetry or a 2D angle in degrees.
    """
    fwd, inv = _transform_pair(net, g)
    f = net.features(x, layer)
    return _masked_error(f, inv(net.features(fwd(x), layer)))


def layer_equivariance_errors(net: Network, x, g) -> list:
    """``equivariance_error`` for every body unit, from one pair of forwards."""
    fwd, inv = _transform_pair(net, g)
    plain = net.unit_outputs(x)
    moved = net.unit_outputs(fwd(x))
    return [_masked_error(f, inv(m)) for f, m in zip(plain, moved)]


def first_conv_map(net: Network, x) -> np.ndarray:
    """Channel-averaged output of the network's first spatial convolution."""
    convs = net.conv_layers()
    if not convs:
        raise ShapeError("network has no spatial convolution")
    layer = convs[0][1]
    assert isinstance(layer, (SreConv, Conv))
    y, _ = layer.forward(net._standardize(x), False)
    return y.mean(axis=1)


@dataclass
class FeaturePanels:
    angles: list
    panels: np.ndarray  # [A, H, W], masked, raw scale
    mask: np.ndarray = field(repr=False)
    files: list = field(default_factory=list)

    def pairwise_mad(self, relative: bool = False) -> float:
        """Mean over panel pairs of the masked mean absolute difference.

        With ``relative`` the value is divided by the mean masked |panel|,
        which makes nets with different activation scales comparable.
        """
        vals = self.panels[:, self.mask].astype(np.float64)
        if len(vals) < 2:
            return 0.0
        mad = float(np.mean([np.abs(a - b).mean() for a, b in combinations(vals, 2)]))
        if relative:
            scale = float(np.abs(vals).mean())
            return mad / scale if scale > 0 else 0.0
        return mad


def export_feature_maps(net: Network, x, angles, out_dir=None, prefix="panel") -> FeaturePanels:
    """Rotate ``x`` (one 2D image, ``[C, H, W]`` or ``[1, C, H, W]``) by each
    angle, take the channel-averaged first-layer feature map, rotate it back
    and apply the circular mask.  With ``out_dir`` each panel is written as an
    8-bit PGM (min-max scaled per panel) plus one JSON sidecar of raw stats."""
    if net.config.dims != 2:
        raise UnsupportedProtocolError("feature-map export is defined for 2D networks")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or len(x) != 1:
        raise ShapeError(f"expected a single image [C, H, W], got {x.shape}")
    angles = [float(a) for a in angles]
    mask = circular_mask(x.shape[2:], MASK_RADIUS)
    panels = []
    for a in angles:
        fmap = first_conv_map(net, rotate_image(x, a))[0]
        fmap = rotate_image(fmap, -a)
        panels.append(np.where(mask, fmap, 0).astype(fmap.dtype))
    result = FeaturePanels(angles, np.stack(panels), mask)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stats = []
        for a, p in zip(angles, result.panels):
            name = f"{prefix}_{a:g}.pgm"
            inside = p[mask].astype(np.float64)
            write_pgm(out / name, to_uint8(p))
            result.files.append(str(out / name))
            stats.append({"angle": a, "file": name, "min": float(inside.min()),
                          "max": float(inside.max()), "mean": float(inside.mean()),
                          "std": float(inside.std())})
        sidecar = {"mask_radius": MASK_RADIUS, "panels": stats,
                   "pairwise_mad": result.pairwise_mad(),
                   "pairwise_mad_relative": result.pairwise_mad(relative=True)}
        (out / f"{prefix}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return result
