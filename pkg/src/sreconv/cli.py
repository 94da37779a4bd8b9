"""Command-line front end.

Every command prints exactly one JSON document on stdout; progress and
tables go to stderr.  Exit codes: 0 success, 1 operational error (a JSON
error document with a ``kind``), 2 property violation (equiv-check).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernel as K
from .data import LabeledDataset, load_dataset, make_synthetic_dataset, to_network_input
from .errors import ConfigError, SreError
from .evaluation import layer_equivariance_errors, run_protocol
from .network import (
    NetworkConfig,
    build_network,
    count_parameters,
    load_checkpoint,
)
from .pgm import to_uint8, write_pgm
from .tensor import symmetry_group
from .training import TrainConfig, train_run

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2
SYNTHETIC_PREFIX = "synthetic:"


def _synthetic_defaults():
    return {"n": 600, "size": 32, "num_classes": 3, "seed": 0, "n_val": None, "n_test": None}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    synthetic: dict = field(default_factory=_synthetic_defaults)
    out: str | None = None

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "train": self.train.to_dict(),
                "data": self.data, "synthetic": dict(self.synthetic), "out": self.out}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"network", "train", "data", "synthetic", "out"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        syn = _synthetic_defaults()
        extra = set(d.get("synthetic") or {}) - set(syn)
        if extra:
            raise ConfigError(f"unknown synthetic keys: {sorted(extra)}")
        syn.update(d.get("synthetic") or {})
        return cls(NetworkConfig.from_dict(d.get("network", {})),
                   TrainConfig.from_dict(d.get("train", {})),
                   d.get("data"), syn, d.get("out"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, item: str) -> dict:
    """Apply ``key=value`` to a raw config dict.

    Keys may be qualified (``network.stem_channels``) or bare; a bare key is
    looked up in network, train and synthetic in that order, except ``seed``,
    which sets both the network and the training seed.
    """
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, text = item.split("=", 1)
    value = _parse_value(text)
    sections = {"network": {f.name for f in fields(NetworkConfig)},
                "train": {f.name for f in fields(TrainConfig)},
                "synthetic": set(_synthetic_defaults())}
    if key in ("data", "out"):
        raw[key] = value
        return raw
    if "." in key:
        section, name = key.split(".", 1)
        if section not in sections or name not in sections[section]:
            raise ConfigError(f"unknown config key {key!r}")
        raw.setdefault(section, {})[name] = value
        return raw
    if key == "seed":
        raw.setdefault("network", {})["seed"] = value
        raw.setdefault("train", {})["seed"] = value
        return raw
    for section, names in sections.items():
        if key in names:
            raw.setdefault(section, {})[key] = value
            return raw
    raise ConfigError(f"unknown config key {key!r}")


def raw_config(args) -> dict:
    """Config file plus flag overrides, before defaults are filled in."""
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in getattr(args, "override", None) or []:
        apply_override(raw, item)
    if getattr(args, "seed", None) is not None:
        apply_override(raw, f"seed={args.seed}")
    if getattr(args, "data", None):
        raw["data"] = args.data
    if getattr(args, "out", None):
        raw["out"] = args.out
    if getattr(args, "f64", False):
        raw.setdefault("network", {})["precision"] = "f64"
    return raw


def resolve_config(args, raw=None) -> RunConfig:
    cfg = RunConfig.from_dict(raw_config(args) if raw is None else raw)
    cfg.network.validate()
    cfg.train.validate()
    return cfg


def resolve_dataset(cfg: RunConfig, dims: int) -> LabeledDataset:
    if not cfg.data:
        raise ConfigError("no dataset given (use --data PATH or --data synthetic:KIND)")
    if cfg.data.startswith(SYNTHETIC_PREFIX):
        kind = cfg.data[len(SYNTHETIC_PREFIX):]
        try:
            return make_synthetic_dataset(kind, **cfg.synthetic)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synthetic dataset: {exc}") from None
    return load_dataset(cfg.data, dims)


def _stderr(msg: str):
    print(msg, file=sys.stderr)


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> tuple:
    raw = raw_config(args)
    cfg = resolve_config(args, raw)
    if not cfg.out:
        raise ConfigError("train needs an output directory (--out)")
    ds = resolve_dataset(cfg, cfg.network.dims)
    # class count and loss follow the dataset unless set explicitly
    given = raw.get("network", {})
    if "num_classes" not in given:
        cfg.network.num_classes = ds.num_classes
    if "loss_kind" not in given:
        cfg.network.loss_kind = "bce" if ds.multilabel else "cross_entropy"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    net = build_network(cfg.network)
    report = train_run(net, ds, cfg.train, out_dir=out, log=_stderr)
    last = report.records[-1]
    return EXIT_OK, {"command": "train", "out": str(out), "checkpoint": report.checkpoint,
                     "report": str(out / "report.jsonl"), "config": str(out / "config.json"),
                     "epochs": len(report.records), "final": vars(last),
                     "wall_clock_s": report.wall_clock}


def cmd_eval(args) -> tuple:
    cfg = resolve_config(args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    net = load_checkpoint(args.checkpoint)
    ds = resolve_dataset(cfg, net.config.dims)
    images, labels = ds.split(args.split)
    x = to_network_input(images, net.config.dims)
    result = run_protocol(args.protocol, net, x, labels)
    doc = {"command": "eval", "checkpoint": str(args.checkpoint), "split": args.split,
           **result.to_dict()}
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.protocol}_{args.split}.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _stderr(f"{args.protocol}: original {result.original:.4f} mean {result.mean:.4f} "
            f"over {len(result.accuracies)} transform(s)")
    return EXIT_OK, doc


def _grid_text(grid) -> str:
    width = max(len(str(v)) for v in grid.ravel())
    return "\n".join(" ".join(str(v).rjust(width) for v in row) for row in grid)


def cmd_inspect_kernel(args) -> tuple:
    spec = K.BandSpec(args.k, args.dims)
    idx = K.build_index_matrix(spec)
    band_map = idx.band_map()
    kernel = K.expand_kernel(idx, K.init_band_weights(spec, 1, 1, seed=args.seed, dtype="f64"))[0, 0]
    sre = K.kernel_param_count(1, 1, spec, with_bias=False)
    std = K.standard_param_count(1, 1, spec, with_bias=False)
    mid = tuple([spec.radius] * (args.dims - 2))  # central slice for 3D
    _stderr(f"k={spec.k} dims={spec.d} b={spec.b}")
    _stderr(f"band sizes: {idx.band_sizes.tolist()}  (empty: {idx.empty_bands})")
    _stderr("band map (-1 = zeroed corner):" + ("" if args.dims == 2 else " central slice"))
    _stderr(_grid_text(band_map[mid]))
    _stderr(f"weights per kernel: SRE {sre} vs standard {std} (ratio {sre}/{std})")
    files = []
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        shown = np.where(band_map[mid] < 0, 0, band_map[mid] + 1)
        files.append(str(write_pgm(out / f"band_map_k{spec.k}_{spec.d}d.pgm",
                                   to_uint8(shown, 0, spec.b))))
        files.append(str(write_pgm(out / f"kernel_k{spec.k}_{spec.d}d_seed{args.seed}.pgm",
                                   to_uint8(kernel[mid]))))
    doc = {"command": "inspect-kernel", "k": spec.k, "dims": spec.d, "b": spec.b,
           "band_sizes": idx.band_sizes.tolist(), "empty_bands": idx.empty_bands,
           "active_cells": idx.active, "band_map": band_map.tolist(),
           "params": {"sre": sre, "standard": std, "ratio": f"{sre}/{std}",
                      "ratio_value": sre / std},
           "files": files}
    return EXIT_OK, doc


def cmd_equiv_check(args) -> tuple:
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
        if args.f64 and net.config.precision != "f64":
            raise ConfigError("--f64 cannot change the precision of a saved checkpoint")
    else:
        cfg = resolve_config(args)
        net = build_network(cfg.network)
    d = net.config.dims
    size = args.size or (32 if d == 2 else 16)
    rng = np.random.default_rng([args.seed or 0, 1])
    shape = (args.n, net.config.in_channels) + (size,) * d
    x = rng.random(shape).astype(net.dtype)
    logits = net.predict(x)
    rows = []
    worst_logit = 0.0
    argmax_ok = True
    for g in symmetry_group(d):
        lg = net.predict(g.apply(x))
        diff = float(np.abs(lg.astype(np.float64) - logits).max())
        same = bool(np.array_equal(lg.argmax(1), logits.argmax(1)))
        worst_logit = max(worst_logit, diff)
        argmax_ok &= same
        layer_errs = layer_equivariance_errors(net, x, g)
        rows.append({"transform": g.name, "max_logit_diff": diff, "argmax_invariant": same,
                     "layer_errors": layer_errs})
    passed = argmax_ok and worst_logit <= args.tolerance and all(
        e <= args.tolerance for r in rows for e in r["layer_errors"])
    _stderr(f"{'transform':<16}{'max |dlogit|':>14}  argmax  worst layer err")
    for r in rows:
        worst = max(r["layer_errors"], default=0.0)
        _stderr(f"{r['transform']:<16}{r['max_logit_diff']:>14.3e}  "
                f"{'same' if r['argmax_invariant'] else 'DIFF':>6}  {worst:.3e}")
    _stderr("PASS" if passed else f"FAIL (tolerance {args.tolerance:g})")
    doc = {"command": "equiv-check", "conv_kind": net.config.conv_kind,
           "precision": net.config.precision, "n_inputs": args.n, "tolerance": args.tolerance,
           "max_logit_diff": worst_logit, "argmax_invariant": argmax_ok, "passed": passed,
           "transforms": rows}
    return (EXIT_OK if passed else EXIT_VIOLATION), doc


def cmd_params(args) -> tuple:
    cfg = resolve_config(args)
    counts = {}
    for kind in ("sre", "standard"):
        net_cfg = NetworkConfig.from_dict({**cfg.network.to_dict(), "conv_kind": kind})
        counts[kind] = count_parameters(build_network(net_cfg))
    ratio = counts["sre"]["total"] / counts["standard"]["total"]
    _stderr(f"SRE {counts['sre']['total']:,} vs standard {counts['standard']['total']:,} "
            f"parameters (ratio {ratio:.4f})")
    return EXIT_OK, {"command": "params", "network": cfg.network.to_dict(),
                     "sre": counts["sre"], "standard": counts["standard"], "ratio": ratio}


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sreconv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--seed", type=int, help="network and training seed")
        sp.add_argument("--f64", action="store_true", help="64-bit precision")
        sp.add_argument("--out", help="output directory")
        if data:
            sp.add_argument("--data", help="NPZ path or synthetic:blobs|oriented-shapes")

    sp = sub.add_parser("train", help="train a network")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint under a test protocol")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--protocol", choices=("orig", "rotated", "reflected"), default="orig")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("inspect-kernel", help="show the band structure of one kernel size")
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--dims", type=int, choices=(2, 3), default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="directory for PGM images")
    sp.set_defaults(fn=cmd_inspect_kernel)

    sp = sub.add_parser("equiv-check", help="exact-symmetry invariance suite")
    common(sp, data=False)
    sp.add_argument("--checkpoint", help="checkpoint to test (default: fresh network)")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--n", type=int, default=8, help="number of random inputs")
    sp.add_argument("--size", type=int, help="spatial extent of the random inputs")
    sp.set_defaults(fn=cmd_equiv_check)

    sp = sub.add_parser("params", help="parameter counts, SRE vs standard")
    common(sp, data=False)
    sp.set_defaults(fn=cmd_params)
    return p


def _threads() -> int:
    raw = os.environ.get("SRE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SRE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("SRE_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        with threadpool_limits(limits=_threads()):
            code, doc = args.fn(args)
    except SreError as exc:
        code, doc = EXIT_ERROR, {"command": args.command, "error": {"kind": exc.kind,
                                                                    "message": str(exc)}}
    except OSError as exc:
        code, doc = EXIT_ERROR, {"command": args.command, "error": {"kind": "io-error",
                                                                    "message": str(exc)}}
    _stderr(f"[{args.command}] done in {time.perf_counter() - start:.2f}s")
    print(json.dumps(doc, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
