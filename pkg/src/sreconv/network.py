"""Fully convolutional SRE-CNN builder, whole-network passes and checkpoints.

Layout::

    input standardisation
    stem:   conv(k = first stage kernel) -> BN -> ReLU
    stage:  [avg_pool(2) -> 1x1 conv]   (if the stage downsamples)
            blocks of conv -> BN -> ReLU (+ identity shortcut when widths match)
    global average pool -> linear head

Every convolution has stride 1 and same padding, and nothing flattens the
spatial axes before the global pool.  ``conv_kind="standard"`` swaps each SRE
convolution for a dense kernel of the same size and leaves the rest unchanged.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ConfigMismatchError,
    ShapeError,
    StaleCacheError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .layers import (
    AvgPool,
    BatchNorm,
    Conv,
    GlobalAvgPool,
    Linear,
    PointwiseConv,
    ReLU,
    Residual,
    Sequential,
    SreConv,
)
from .tensor import resolve_dtype

DEFAULT_KERNELS = (9, 9, 5, 5)
CONV_KINDS = ("sre", "standard")
LOSS_KINDS = ("cross_entropy", "bce")


@dataclass
class StageConfig:
    channels: int
    kernel_size: int
    blocks: int = 1
    downsample: bool = False


def default_stages():
    widths = (64, 128, 256, 512)
    return [
        StageConfig(w, k, blocks=2, downsample=i > 0)
        for i, (w, k) in enumerate(zip(widths, DEFAULT_KERNELS))
    ]


@dataclass
class NetworkConfig:
    dims: int = 2
    in_channels: int = 1
    stem_channels: int = 64
    stages: list = field(default_factory=default_stages)
    num_classes: int = 2
    residual: bool = True
    conv_kind: str = "sre"
    loss_kind: str = "cross_entropy"
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]

    def validate(self):
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be 'f32' or 'f64'")
        for name in ("in_channels", "stem_channels", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for i, st in enumerate(self.stages):
            if st.kernel_size < 1 or st.kernel_size % 2 == 0:
                raise ConfigError(f"stage {i}: kernel size must be odd, got {st.kernel_size}")
            if st.channels < 1 or st.blocks < 0:
                raise ConfigError(f"stage {i}: invalid channels/blocks")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def kernel_sizes(self) -> list:
        return [s.kernel_size for s in self.stages]


@dataclass
class NetCache:
    units: list
    pool: object
    head: object
    version: int
    consumed: bool = False


class Network:
    def __init__(self, config: NetworkConfig):
        config.validate()
        self.config = config
        self.dtype = resolve_dtype(config.precision)
        self.version = 0
        d = config.dims
        dt = config.precision
        rng = np.random.default_rng(config.seed)

        def conv(c_in, c_out, k):
            cls = SreConv if config.conv_kind == "sre" else Conv
            return cls(c_in, c_out, k, d, rng=rng, dtype=dt)

        self.units = []
        ch = config.in_channels
        if config.stages:
            k0 = config.stages[0].kernel_size
            stem = [("conv", conv(ch, config.stem_channels, k0)),
                    ("bn", BatchNorm(config.stem_channels, dt)), ("relu", ReLU())]
            self.units.append(("stem", Sequential(stem)))
            ch = config.stem_channels
            for si, st in enumerate(config.stages):
                if st.downsample:
                    down = [("pool", AvgPool(d)), ("proj", PointwiseConv(ch, st.channels, rng, dt))]
                    self.units.append((f"stage{si}.down", Sequential(down)))
                    ch = st.channels
                for bi in range(st.blocks):
                    body = [("conv", conv(ch, st.channels, st.kernel_size)),
                            ("bn", BatchNorm(st.channels, dt)), ("relu", ReLU())]
                    unit = Residual(body) if config.residual and ch == st.channels else Sequential(body)
                    self.units.append((f"stage{si}.block{bi}", unit))
                    ch = st.channels
        self.features_out = ch
        self.pool = GlobalAvgPool(d)
        self.head = Linear(ch, config.num_classes, rng, dt)
        self.input_mean = np.zeros(config.in_channels, dtype=self.dtype)
        self.input_std = np.ones(config.in_channels, dtype=self.dtype)

    # -- registry ---------------------------------------------------------

    @property
    def n_downsample(self) -> int:
        return sum(1 for s in self.config.stages if s.downsample)

    def parameters(self) -> dict:
        out = {}
        for name, unit in self.units:
            for key, value in unit.params().items():
                out[f"{name}.{key}"] = value
        for key, value in self.head.params().items():
            out[f"head.{key}"] = value
        return out

    def buffers(self) -> dict:
        out = {"input.mean": self.input_mean, "input.std": self.input_std}
        for name, unit in self.units:
            for key, value in unit.buffers().items():
                out[f"{name}.{key}"] = value
        return out

    def conv_layers(self) -> list:
        """(name, layer) for every spatial (non-1x1) convolution, in order."""
        out = []
        for name, unit in self.units:
            for sub, layer in unit.layers:
                if isinstance(layer, (SreConv, Conv)):
                    out.append((f"{name}.{sub}", layer))
        return out

    def set_normalization(self, mean, std):
        self.input_mean[...] = np.asarray(mean, dtype=self.dtype)
        self.input_std[...] = np.asarray(std, dtype=self.dtype)

    def mark_updated(self):
        """Invalidate outstanding forward caches after a parameter update."""
        self.version += 1

    # -- passes -----------------------------------------------------------

    def check_input(self, x):
        d = self.config.dims
        if x.ndim != d + 2:
            raise ShapeError(f"expected input [N, C] + {d} spatial axes, got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        spatial = x.shape[2:]
        if len(set(spatial)) != 1:
            raise ShapeError(f"input must be square/cubic, got {spatial}")
        factor = 2**self.n_downsample
        if spatial[0] % factor:
            raise ShapeError(f"spatial extent {spatial[0]} not divisible by {factor}")

    def _standardize(self, x):
        x = np.asarray(x, dtype=self.dtype)
        self.check_input(x)
        bs = (1, -1) + (1,) * self.config.dims
        return (x - self.input_mean.reshape(bs)) / self.input_std.reshape(bs)

    def forward(self, x, mode="eval"):
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        train = mode == "train"
        h = self._standardize(x)
        caches = []
        for _, unit in self.units:
            h, c = unit.forward(h, train)
            caches.append(c)
        pooled, pc = self.pool.forward(h, train)
        logits, hc = self.head.forward(pooled, train)
        return logits, NetCache(caches, pc, hc, self.version)

    def backward(self, dlogits, cache: NetCache) -> dict:
        if cache.version != self.version:
            raise StaleCacheError("forward cache predates the latest parameter update")
        if cache.consumed:
            raise StaleCacheError("forward cache already consumed")
        cache.consumed = True
        dlogits = np.asarray(dlogits, dtype=self.dtype)
        grads = {}
        dh, g = self.head.backward(dlogits, cache.head)
        grads.update({f"head.{k}": v for k, v in g.items()})
        dh, _ = self.pool.backward(dh, cache.pool)
        for (name, unit), c in zip(reversed(self.units), reversed(cache.units)):
            dh, g = unit.backward(dh, c)
            grads.update({f"{name}.{k}": v for k, v in g.items()})
        return {name: grads[name] for name in self.parameters()}

    def features(self, x, layer: int = 0) -> np.ndarray:
        """Eval-mode output of body unit ``layer`` (0 = stem)."""
        if not 0 <= layer < len(self.units):
            raise IndexError(f"layer index {layer} out of range (0..{len(self.units) - 1})")
        h = self._standardize(x)
        for _, unit in self.units[: layer + 1]:
            h, _ = unit.forward(h, False)
        return h

    def unit_outputs(self, x) -> list:
        """Eval-mode output of every body unit, in order."""
        h = self._standardize(x)
        out = []
        for _, unit in self.units:
            h, _ = unit.forward(h, False)
            out.append(h)
        return out

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits, batched (results do not depend on the batch size)."""
        out = []
        for i in range(0, len(x), batch_size):
            logits, _ = self.forward(x[i : i + batch_size], "eval")
            out.append(logits)
        if not out:
            return np.zeros((0, self.config.num_classes), dtype=self.dtype)
        return np.concatenate(out)


def build_network(cfg: NetworkConfig) -> Network:
    return Network(cfg)


def network_forward(net: Network, x, mode="eval"):
    return net.forward(x, mode)


def network_backward(net: Network, dlogits, cache: NetCache) -> dict:
    return net.backward(dlogits, cache)


def count_parameters(net: Network) -> dict:
    layers = {}
    for name, value in net.parameters().items():
        layer = name.rsplit(".", 1)[0]
        layers[layer] = layers.get(layer, 0) + int(value.size)
    return {"total": sum(layers.values()), "layers": layers}


# ---------------------------------------------------------------------------
# checkpoints
#
#   b"SREC" | version u8 | header length u32 LE | JSON header | payloads
#   header = {"config": {...}, "tensors": [{name, dtype, shape, byte_offset}]}

MAGIC = b"SREC"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def checkpoint_bytes(net: Network) -> bytes:
    tag = net.config.precision
    table = []
    chunks = []
    offset = 0
    for name, value in {**net.parameters(), **net.buffers()}.items():
        raw = np.ascontiguousarray(value, dtype=_DTYPES[tag]).tobytes()
        table.append({"name": name, "dtype": tag, "shape": list(value.shape), "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": net.config.to_dict(), "tensors": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(header)) + header + b"".join(chunks)


def save_checkpoint(net: Network, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(checkpoint_bytes(net))
    os.replace(tmp, path)
    return path


def parse_checkpoint(data: bytes, dims: int | None = None) -> Network:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    if len(data) < 9:
        raise TruncatedCheckpointError("checkpoint preamble truncated")
    if data[4] != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {data[4]}")
    (hlen,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + hlen:
        raise TruncatedCheckpointError("checkpoint header truncated")
    try:
        header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
        cfg = NetworkConfig.from_dict(header["config"])
        table = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if dims is not None and cfg.dims != dims:
        raise ConfigMismatchError(f"checkpoint is {cfg.dims}D, expected {dims}D")
    net = Network(cfg)
    payload = memoryview(data)[9 + hlen :]
    targets = {**net.parameters(), **net.buffers()}
    seen = set()
    for entry in table:
        name = entry.get("name")
        if name not in targets:
            raise ConfigMismatchError(f"checkpoint tensor {name!r} has no slot in the network")
        if entry.get("dtype") not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {entry.get('dtype')!r}")
        target = targets[name]
        shape = tuple(entry["shape"])
        if shape != target.shape:
            raise ConfigMismatchError(f"tensor {name}: shape {shape} vs network {target.shape}")
        dt = np.dtype(_DTYPES[entry["dtype"]])
        start = int(entry["byte_offset"])
        end = start + dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if end > len(payload):
            raise TruncatedCheckpointError(f"payload for {name} truncated")
        target[...] = np.frombuffer(payload[start:end], dtype=dt).reshape(shape)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    return net


def load_checkpoint(path, dims: int | None = None) -> Network:
    return parse_checkpoint(Path(path).read_bytes(), dims)
