"""Dataset I/O, synthetic datasets and evaluation-time geometric transforms.

The NPY reader is written against the published format (v1.0/2.0): a
``\\x93NUMPY`` magic, a version pair, a little-endian header length and a
Python-literal header dict.  Every malformed stream raises a subclass of
``NpyError``; nothing else escapes.
"""
from __future__ import annotations

import ast
import io
import struct
import warnings
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import (
    ArchiveError,
    DatasetNotFoundError,
    MissingKeyError,
    NpyBadMagicError,
    NpyHeaderError,
    NpyLengthMismatchError,
    NpyUnsupportedDtypeError,
    ShapeError,
)
from .tensor import HFLIP, VFLIP, rot90, rotation90

NPY_MAGIC = b"\x93NUMPY"
SUPPORTED_DESCR = {"|u1": np.dtype("u1"), "<i8": np.dtype("<i8"), "<f4": np.dtype("<f4")}
MEDMNIST_KEYS = ("train_images", "train_labels", "val_images", "val_labels",
                 "test_images", "test_labels")
MAX_NPY_ELEMENTS = 1 << 40


@dataclass(eq=False)
class NpyArray:
    descr: str
    shape: tuple
    fortran_order: bool
    payload: bytes = field(repr=False)  # row-major bytes, as stored in C order

    @property
    def dtype(self) -> np.dtype:
        return SUPPORTED_DESCR[self.descr]

    @property
    def array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=self.dtype).reshape(self.shape)


def _parse_header(text: str) -> tuple:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # escape-sequence warnings on junk input
            header = ast.literal_eval(text)
    except Exception as exc:  # literal_eval can raise almost anything on junk
        raise NpyHeaderError(f"header is not a Python literal: {type(exc).__name__}") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise NpyHeaderError("header must be a dict with keys descr, fortran_order, shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if not isinstance(fortran, bool):
        raise NpyHeaderError("fortran_order must be a bool")
    if not isinstance(shape, tuple) or not all(
        isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
    ):
        raise NpyHeaderError(f"shape must be a tuple of non-negative ints, got {shape!r}")
    if not isinstance(descr, str) or descr not in SUPPORTED_DESCR:
        raise NpyUnsupportedDtypeError(f"unsupported dtype descriptor {descr!r}")
    return descr, fortran, shape


def read_npy(data: bytes) -> NpyArray:
    data = bytes(data)
    if len(data) < 6 or data[:6] != NPY_MAGIC:
        raise NpyBadMagicError("missing \\x93NUMPY magic")
    if len(data) < 8:
        raise NpyHeaderError("truncated version field")
    major = data[6]
    if major == 1:
        if len(data) < 10:
            raise NpyHeaderError("truncated header length")
        (hlen,) = struct.unpack("<H", data[8:10])
        start = 10
    elif major in (2, 3):
        if len(data) < 12:
            raise NpyHeaderError("truncated header length")
        (hlen,) = struct.unpack("<I", data[8:12])
        start = 12
    else:
        raise NpyHeaderError(f"unsupported NPY version {major}.{data[7]}")
    if len(data) < start + hlen:
        raise NpyHeaderError("header extends past end of stream")
    raw = data[start : start + hlen]
    try:
        text = raw.decode("utf-8" if major == 3 else "latin1")
    except UnicodeDecodeError:
        raise NpyHeaderError("header is not valid text") from None
    descr, fortran, shape = _parse_header(text)
    count = 1
    for s in shape:
        count *= s
    if count > MAX_NPY_ELEMENTS:
        raise NpyLengthMismatchError(f"element count {count} exceeds the supported maximum")
    dtype = SUPPORTED_DESCR[descr]
    payload = data[start + hlen :]
    if len(payload) != count * dtype.itemsize:
        raise NpyLengthMismatchError(
            f"payload has {len(payload)} bytes, shape {shape} needs {count * dtype.itemsize}")
    if fortran and len(shape) > 1:
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
        payload = np.ascontiguousarray(arr).tobytes()
    return NpyArray(descr, shape, fortran, payload)


def write_npy(array) -> bytes:
    """Serialise a supported array as NPY v1.0 (C order, 64-byte aligned header)."""
    arr = np.asarray(array)
    descr = next((k for k, v in SUPPORTED_DESCR.items() if v == arr.dtype.newbyteorder("<")
                  or v == arr.dtype), None)
    if descr is None:
        raise NpyUnsupportedDtypeError(f"cannot write dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=SUPPORTED_DESCR[descr], order="C")
    shape = repr(tuple(int(s) for s in arr.shape))
    text = "{'descr': %r, 'fortran_order': False, 'shape': %s, }" % (descr, shape)
    total = len(NPY_MAGIC) + 4 + len(text) + 1
    text += " " * (-total % 64) + "\n"
    head = text.encode("latin1")
    return NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(head)) + head + arr.tobytes()


def read_npz(path) -> dict:
    """Members of an NPZ archive, keyed by name without the ``.npy`` suffix."""
    out = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for info in zf.infolist():
                name = info.filename
                key = name[:-4] if name.endswith(".npy") else name
                out[key] = read_npy(zf.read(info))
    except (zipfile.BadZipFile, zlib.error, EOFError, NotImplementedError) as exc:
        raise ArchiveError(f"corrupt NPZ archive: {exc}") from None
    return out


def write_npz(path, arrays: dict, compress: bool = False):
    method = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(path, "w", compression=method) as zf:
        for name, value in arrays.items():
            payload = write_npy(value.array if isinstance(value, NpyArray) else value)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        payload, compress_type=method)
    return Path(path)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    splits: dict  # name -> (images uint8, labels)
    dims: int = 2
    num_classes: int = 2
    multilabel: bool = False

    def split(self, name):
        try:
            return self.splits[name]
        except KeyError:
            raise MissingKeyError(f"dataset has no {name!r} split") from None


def _infer_dims(images: np.ndarray) -> int:
    if images.ndim == 3:
        return 2
    if images.ndim == 4:
        return 2 if images.shape[-1] in (1, 3) and images.shape[1] != images.shape[-1] else 3
    if images.ndim == 5:
        return 3
    raise ShapeError(f"cannot interpret image array of shape {images.shape}")


def dataset_from_arrays(arrays: dict, dims: int | None = None) -> LabeledDataset:
    missing = [k for k in MEDMNIST_KEYS if k not in arrays]
    if missing:
        raise MissingKeyError(f"archive lacks required keys: {missing}")
    get = {k: (v.array if isinstance(v, NpyArray) else np.asarray(v)) for k, v in arrays.items()}
    splits = {}
    for split in ("train", "val", "test"):
        images, labels = get[f"{split}_images"], get[f"{split}_labels"]
        if len(images) != len(labels):
            raise ShapeError(f"{split}: {len(images)} images but {len(labels)} labels")
        splits[split] = (images, labels.astype(np.int64))
    train_labels = splits["train"][1]
    multilabel = train_labels.ndim == 2 and train_labels.shape[1] > 1
    num_classes = train_labels.shape[1] if multilabel else int(
        max(lab.max() if lab.size else 0 for _, lab in splits.values()) + 1)
    return LabeledDataset(splits, dims or _infer_dims(splits["train"][0]), num_classes, multilabel)


def load_dataset(path, dims: int | None = None) -> LabeledDataset:
    """Load a MedMNIST-layout NPZ archive."""
    path = Path(path)
    if not path.is_file():
        raise DatasetNotFoundError(f"dataset file not found: {path}")
    return dataset_from_arrays(read_npz(path), dims)


def save_dataset(ds: LabeledDataset, path, compress: bool = False):
    arrays = {}
    for split in ("train", "val", "test"):
        images, labels = ds.split(split)
        arrays[f"{split}_images"] = images
        arrays[f"{split}_labels"] = labels.reshape(len(labels), -1).astype("<i8")
    return write_npz(path, arrays, compress)


def to_network_input(images, dims: int) -> np.ndarray:
    """uint8 images (channels last or absent) -> float32 ``[N, C, ...]`` in [0, 1]."""
    x = np.asarray(images)
    if x.ndim == dims + 1:
        x = x[:, None]
    elif x.ndim == dims + 2:
        x = np.moveaxis(x, -1, 1)
    else:
        raise ShapeError(f"cannot map images of shape {x.shape} to {dims}D network input")
    if x.dtype == np.uint8:
        return (x.astype(np.float32) / np.float32(255.0))
    return x.astype(np.float32)


def normalization_stats(x: np.ndarray):
    """Per-channel mean and std of ``[N, C, ...]`` data."""
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes, dtype=np.float64)
    std = x.std(axis=axes, dtype=np.float64)
    return mean, np.maximum(std, 1e-8)


# -- synthetic data ----------------------------------------------------------

SHAPES = ("bar", "cross", "ring", "disk")
EDGE_SIGMA = 2.0  # pixels at size 32
NOISE_SIGMA = 1.5


def _box_sdf(px, py, hx, hy):
    qx = np.abs(px) - hx
    qy = np.abs(py) - hy
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    return outside + np.minimum(np.maximum(qx, qy), 0)


def _render_shape(kind, size, rng):
    """One soft-edged shape image in [0, 1] at a random, unrotated position."""
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    extent = rng.uniform(0.17, 0.24) * size
    width = rng.uniform(0.08, 0.11) * size
    reach = extent * (np.sqrt(2) if kind in ("cross", "bar") else 1.0) + 2 * EDGE_SIGMA * size / 32
    slack = 0.42 * size - reach
    r = rng.uniform(0, max(slack, 0))
    phi = rng.uniform(0, 2 * np.pi)
    cy, cx = c + r * np.sin(phi), c + r * np.cos(phi)
    py, px = yy - cy, xx - cx
    if kind == "disk":
        sdf = np.hypot(px, py) - extent
    elif kind == "ring":
        sdf = np.abs(np.hypot(px, py) - (extent - width / 2)) - width / 2
    elif kind == "cross":
        sdf = np.minimum(_box_sdf(px, py, extent, width / 2), _box_sdf(px, py, width / 2, extent))
    elif kind == "bar":
        sdf = _box_sdf(px, py, width / 2, extent)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    # band-limited edges keep bilinear resampling error small
    img = gaussian_filter(np.clip(0.5 - sdf, 0.0, 1.0), EDGE_SIGMA * size / 32)
    return rng.uniform(0.6, 1.0) * img / max(img.max(), 1e-12)


def _render_blob(label, num_classes, size, rng):
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = size / 8
    r = rng.uniform(0, 0.2 * size)
    phi = rng.uniform(0, 2 * np.pi)
    cy, cx = c + r * np.sin(phi), c + r * np.cos(phi)
    level = 0.25 + 0.7 * label / max(num_classes - 1, 1) + rng.uniform(-0.05, 0.05)
    return level * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def _make_split(kind, count, size, num_classes, rng):
    labels = np.arange(count) % num_classes
    labels = labels[rng.permutation(count)]
    images = np.empty((count, size, size), dtype=np.uint8)
    for i, lab in enumerate(labels):
        if kind == "blobs":
            img = _render_blob(lab, num_classes, size, rng)
        else:
            img = _render_shape(SHAPES[lab], size, rng)
        noise = gaussian_filter(rng.normal(0.0, 1.0, size=img.shape), NOISE_SIGMA)
        img = img + 0.03 * noise / noise.std()
        images[i] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return images, labels.reshape(-1, 1).astype(np.int64)


def make_synthetic_dataset(kind="oriented-shapes", n=600, size=32, num_classes=3, seed=0,
                           n_val=None, n_test=None) -> LabeledDataset:
    """Desk-scale stand-in for a MedMNIST archive.

    ``n`` is the training-split size; labels cycle through the classes, so
    every class gets ``n // num_classes`` samples (exactly, when divisible).

    * ``blobs``: one Gaussian blob whose brightness encodes the class
      (separable by mean intensity).
    * ``oriented-shapes``: bar / cross / ring / disk, drawn axis-aligned at a
      random position.  Class identity does not change under rotation.
    """
    if size % 4:
        raise ValueError("size must be divisible by 4")
    if kind not in ("blobs", "oriented-shapes"):
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    if kind == "oriented-shapes" and not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"oriented-shapes supports 2..{len(SHAPES)} classes")
    if n // num_classes < 10:
        raise ValueError("need at least 10 training samples per class")
    n_val = n // 4 if n_val is None else n_val
    n_test = n // 4 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    splits = {name: _make_split(kind, count, size, num_classes, rng)
              for name, count in (("train", n), ("val", n_val), ("test", n_test))}
    return LabeledDataset(splits, 2, num_classes, False)


# -- geometric transforms -----------------------------------------------------


def _quarter_turns(angle: float):
    q = angle / 90.0
    k = round(q)
    return int(k) % 4 if abs(q - k) < 1e-12 else None


def _rotate_plane(x, angle, axes, fill):
    """Bilinear rotation of ``x`` in the plane of ``axes``.

    Output cell ``u`` (centred coordinates) samples the input at ``R u`` with
    ``R = [[cos, -sin], [sin, cos]]``; at 90 degrees this is exactly ``rot90``.
    """
    a0, a1 = axes
    moved = np.moveaxis(np.asarray(x), (a0, a1), (-2, -1))
    n0, n1 = moved.shape[-2:]
    t = np.deg2rad(angle)
    cos, sin = np.cos(t), np.sin(t)
    u0, u1 = np.meshgrid(np.arange(n0) - (n0 - 1) / 2, np.arange(n1) - (n1 - 1) / 2,
                         indexing="ij")
    coords = np.stack([cos * u0 - sin * u1 + (n0 - 1) / 2, sin * u0 + cos * u1 + (n1 - 1) / 2])
    planes = moved.reshape(-1, n0, n1).astype(np.float64)
    out = np.empty(planes.shape, dtype=np.float64)
    for i, plane in enumerate(planes):
        out[i] = map_coordinates(plane, coords, order=1, mode="grid-constant", cval=fill)
    out = np.moveaxis(out.reshape(moved.shape), (-2, -1), (a0, a1))
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def rotate_image(x, angle_degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate the last two axes about the image centre (bilinear, zero fill).

    Multiples of 90 degrees are exact cell permutations.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError("rotate_image needs at least 2 axes")
    k = _quarter_turns(angle_degrees)
    if k is not None:
        return rot90(x, k) if k else x.copy()
    return _rotate_plane(x, angle_degrees, (x.ndim - 2, x.ndim - 1), fill)


def rotate_volume(x, axis: int, angle_degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate the last three axes about spatial ``axis`` (trilinear, zero fill)."""
    x = np.asarray(x)
    if x.ndim < 3 or len(set(x.shape[-3:])) != 1:
        raise ShapeError(f"rotate_volume needs a cubic volume, got {x.shape}")
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    k = _quarter_turns(angle_degrees)
    if k is not None:
        return rotation90(3, axis, k).apply(x) if k else x.copy()
    lead = x.ndim - 3
    a0, a1 = (lead + a for a in range(3) if a != axis)
    return _rotate_plane(x, angle_degrees, (a0, a1), fill)


def reflect_image(x, axis: str = "horizontal") -> np.ndarray:
    if axis == "horizontal":
        return HFLIP.apply(x)
    if axis == "vertical":
        return VFLIP.apply(x)
    raise ValueError("axis must be 'horizontal' or 'vertical'")


def circular_mask(shape, radius_frac: float = 0.45) -> np.ndarray:
    """Boolean mask of cells within ``radius_frac * min(shape)`` of the centre."""
    grids = np.meshgrid(*[np.arange(s) - (s - 1) / 2 for s in shape], indexing="ij")
    dist = np.sqrt(sum(g**2 for g in grids))
    return dist <= radius_frac * min(shape)
