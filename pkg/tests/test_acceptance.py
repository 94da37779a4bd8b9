"""Acceptance suite: one test per criterion, at the stated tolerances and budgets."""
import io
import json
import time

import numpy as np
import pytest

from gradcheck import layer_gradcheck, numeric_grad, rel_error
from sreconv.cli import main
from sreconv.data import make_synthetic_dataset, read_npy, to_network_input, write_npy
from sreconv.errors import NpyError
from sreconv.evaluation import export_feature_maps, reflected_protocol, rotated_protocol
from sreconv.kernel import (
    BandSpec,
    band_count,
    build_index_matrix,
    distance_matrix,
    expand_kernel,
    kernel_param_count,
    standard_param_count,
)
from sreconv.layers import BatchNorm, Conv, Linear, PointwiseConv, SreConv
from sreconv.network import NetworkConfig, StageConfig, build_network, network_backward, network_forward
from sreconv.tensor import symmetry_group
from sreconv.training import TrainConfig, bce_loss, cross_entropy_loss, train_run


def twin_config(kind, precision="f32"):
    return NetworkConfig(dims=2, in_channels=1, stem_channels=8,
                         stages=[StageConfig(8, 9), StageConfig(16, 5, downsample=True)],
                         num_classes=3, conv_kind=kind, precision=precision, seed=0)


def as_f64(net):
    twin = build_network(NetworkConfig.from_dict({**net.config.to_dict(), "precision": "f64"}))
    for name, p in net.parameters().items():
        twin.parameters()[name][...] = p
    for name, b in net.buffers().items():
        twin.buffers()[name][...] = b
    return twin


@pytest.fixture(scope="module")
def shapes_data():
    return make_synthetic_dataset("oriented-shapes", n=2000, size=32, num_classes=3, seed=0,
                                  n_val=300, n_test=500)


@pytest.fixture(scope="module")
def twins(shapes_data):
    """SRE and standard nets trained once on oriented-shapes, plus wall-clock."""
    start = time.perf_counter()
    nets = {}
    for kind in ("sre", "standard"):
        net = build_network(twin_config(kind))
        train_run(net, shapes_data, TrainConfig(lr0=0.02, epochs=20, batch_size=32, seed=0))
        nets[kind] = net
    return nets, time.perf_counter() - start


@pytest.fixture(scope="module")
def test_set(shapes_data):
    images, labels = shapes_data.split("test")
    return to_network_input(images, 2), labels


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_kernel_symmetry():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for d, ks in ((2, (3, 5, 7, 9)), (3, (3, 5))):
        group = symmetry_group(d)
        assert len(group) == (8 if d == 2 else 48)
        for k in ks:
            spec = BandSpec(k, d)
            idx = build_index_matrix(spec)
            outside = distance_matrix(spec) > k // 2
            theta = rng.standard_normal((100, 1, spec.b)).astype(np.float32)
            kern = expand_kernel(idx, theta)
            assert np.all(kern[:, :, outside] == 0)
            for g in group:
                assert np.array_equal(g.apply(kern), kern), (k, d, g.name)
    assert time.perf_counter() - start < 5


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_2_band_and_param_formulas():
    for k in range(1, 16, 2):
        assert band_count(k) == k // 2 + 2
    spec = BandSpec(9, 2)
    assert kernel_param_count(64, 64, spec) == 24_640 == 64 * 64 * 6 + 64
    assert standard_param_count(64, 64, spec) == 331_840 == 64 * 64 * 81 + 64


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_3_gradient_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = {}

    sre = SreConv(2, 3, 5, 2, rng=rng, dtype="f64")
    sre.bias[...] = rng.standard_normal(3)
    errors["sre_conv"] = layer_gradcheck(sre, rng.standard_normal((2, 2, 6, 6)))
    sre3 = SreConv(2, 2, 3, 3, rng=rng, dtype="f64")
    errors["sre_conv_3d"] = layer_gradcheck(sre3, rng.standard_normal((1, 2, 4, 4, 4)))
    pw = PointwiseConv(3, 2, rng=rng, dtype="f64")
    pw.bias[...] = rng.standard_normal(2)
    errors["pointwise"] = layer_gradcheck(pw, rng.standard_normal((2, 3, 4, 4)))
    bn = BatchNorm(3, "f64")
    bn.gamma[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta[...] = rng.standard_normal(3)
    errors["batch_norm"] = layer_gradcheck(bn, rng.standard_normal((2, 3, 4, 4)), train=True)
    lin = Linear(5, 3, rng=rng, dtype="f64")
    lin.bias[...] = rng.standard_normal(3)
    errors["linear"] = layer_gradcheck(lin, rng.standard_normal((4, 5)))

    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    errors["cross_entropy"] = {"z": rel_error(cross_entropy_loss(z, y)[1],
                                              numeric_grad(lambda: cross_entropy_loss(z, y)[0], z))}
    t = rng.integers(0, 2, (5, 4))
    errors["bce"] = {"z": rel_error(bce_loss(z, t)[1], numeric_grad(lambda: bce_loss(z, t)[0], z))}

    cfg = NetworkConfig(stem_channels=2, stages=[StageConfig(2, 3), StageConfig(3, 3, downsample=True)],
                        num_classes=2, precision="f64", seed=0)
    net = build_network(cfg)
    for p in net.parameters().values():
        p += rng.standard_normal(p.shape) * 0.1
    x = rng.random((2, 1, 8, 8))
    w = rng.standard_normal((2, 2))
    logits, cache = network_forward(net, x, "train")
    grads = network_backward(net, w, cache)
    errors["network"] = {
        n: rel_error(grads[n], numeric_grad(lambda: float(np.sum(net.forward(x, "train")[0] * w)), p))
        for n, p in net.parameters().items()}

    worst = max(v for errs in errors.values() for v in errs.values())
    assert worst < 1e-5, errors
    assert time.perf_counter() - start < 60


# -- 4 ---------------------------------------------------------------------------------


def invariance_stats(net, x):
    logits = net.predict(x)
    diffs = np.zeros(len(x))
    argmax_ok = True
    for g in symmetry_group(2):
        lg = net.predict(g.apply(x))
        diffs = np.maximum(diffs, np.abs(lg.astype(np.float64) - logits).max(axis=1))
        argmax_ok &= bool(np.array_equal(lg.argmax(1), logits.argmax(1)))
    return diffs, argmax_ok


def test_criterion_4_logit_invariance(twins):
    nets, _ = twins
    start = time.perf_counter()
    x = np.random.default_rng(4).random((100, 1, 32, 32))
    candidates = {"fresh": build_network(twin_config("sre")), "trained": nets["sre"]}
    for name, net32 in candidates.items():
        diffs, argmax_ok = invariance_stats(net32, x.astype(np.float32))
        assert argmax_ok and diffs.max() <= 1e-4, name
        diffs, argmax_ok = invariance_stats(as_f64(net32), x)
        assert argmax_ok and diffs.max() == 0.0, name
    diffs, _ = invariance_stats(nets["standard"], x.astype(np.float32))
    assert np.mean(diffs > 1e-2) >= 0.9
    assert time.perf_counter() - start < 60


# -- 5 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("shape,k", [((2, 8, 16, 16), 9), ((1, 4, 8, 8, 8), 5), ((3, 16, 7, 7), 3)])
def test_criterion_5_flop_parity(shape, k):
    rng = np.random.default_rng(0)
    c_in, d = shape[1], len(shape) - 2
    sre = SreConv(c_in, 2 * c_in, k, d, rng=rng, dtype="f64")
    std = Conv(c_in, 2 * c_in, k, d, rng=rng, dtype="f64")
    macs = shape[0] * 2 * c_in * c_in * k**d * int(np.prod(shape[2:]))
    assert sre.inference_macs(shape) == std.inference_macs(shape) == macs
    # the precomputed path computes the same function as the factored one
    x = rng.standard_normal(shape)
    np.testing.assert_allclose(sre.forward_dense(x), sre.forward(x)[0], rtol=1e-10, atol=1e-10)


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_6_trend_reproduction(twins, test_set):
    nets, train_seconds = twins
    start = time.perf_counter()
    x, y = test_set
    results = {kind: rotated_protocol(net, x, y) for kind, net in nets.items()}
    sre, std = results["sre"], results["standard"]
    assert sre.original >= 0.85 and std.original >= 0.85, (sre.original, std.original)
    assert sre.original - sre.mean <= 0.05, (sre.original, sre.mean)
    assert std.original - std.mean >= 0.15, (std.original, std.mean)
    assert train_seconds + time.perf_counter() - start < 15 * 60


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_7_reflection_exactness(twins, test_set):
    nets, _ = twins
    res = reflected_protocol(nets["sre"], *test_set)
    assert res.accuracies == [res.original, res.original]
    assert res.mean == res.original


# -- 8 ---------------------------------------------------------------------------------


def fuzz_header(rng, base: bytes) -> bytes:
    data = bytearray(base)
    op = rng.integers(0, 6)
    if op == 0:  # flip bytes inside the header
        for _ in range(rng.integers(1, 6)):
            data[rng.integers(6, min(len(data), 128))] = rng.integers(0, 256)
    elif op == 1:  # truncate
        data = data[: rng.integers(0, len(data))]
    elif op == 2:  # lie about the header length
        data[8:10] = int(rng.integers(0, 65536)).to_bytes(2, "little")
    elif op == 3:  # swap the version
        data[6] = rng.integers(0, 5)
    elif op == 4:  # rewrite a dictionary field
        text = data[10:].split(b"\n", 1)[0].decode("latin1")
        pieces = ["'<f8'", "'|u1'", "'<i8'", "(2, 3)", "(-1,)", "()", "True", "None", "1e9",
                  "[1]", "'x'", "(2**70,)", "{}", "(3, 'a')"]
        keys = ["'descr'", "'shape'", "'fortran_order'", "'extra'"]
        key = keys[rng.integers(0, len(keys))]
        text = "{%s: %s, %s}" % (key, pieces[rng.integers(0, len(pieces))], text[1:])
        head = text.encode("latin1") + b"\n"
        data = data[:8] + len(head).to_bytes(2, "little") + head + data[10 + len(text) + 1 :]
    else:  # random junk header
        head = bytes(rng.integers(0, 256, rng.integers(0, 80)).astype(np.uint8))
        data = data[:8] + len(head).to_bytes(2, "little") + head
    return bytes(data)


def test_criterion_8_parser_robustness():
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    samples = [np.arange(6, dtype=np.uint8).reshape(2, 3),
               np.array([-(2**63), 2**63 - 1, 0], dtype="<i8"),
               np.array([np.nan, -0.0, np.inf, 1.5], dtype="<f4"),
               np.zeros((0, 4), dtype="<f4"), np.array(3, dtype="<i8")]
    for arr in samples:
        buf = io.BytesIO()
        np.save(buf, arr)
        parsed = read_npy(buf.getvalue())
        assert parsed.array.tobytes() == arr.tobytes() and parsed.shape == arr.shape
        assert parsed.array.dtype == arr.dtype
        assert write_npy(parsed.array) == buf.getvalue()
    bases = [write_npy(a) for a in samples]
    outcomes = {"ok": 0, "error": 0}
    for i in range(10_000):
        data = fuzz_header(rng, bases[i % len(bases)])
        try:
            read_npy(data)
            outcomes["ok"] += 1
        except NpyError:
            outcomes["error"] += 1
    assert sum(outcomes.values()) == 10_000 and outcomes["error"] > 5_000
    assert time.perf_counter() - start < 30


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SRE_THREADS", "1")
    config = {"network": {"stem_channels": 4, "num_classes": 3,
                          "stages": [{"channels": 4, "kernel_size": 9},
                                     {"channels": 6, "kernel_size": 5, "downsample": True}]},
              "train": {"epochs": 3, "batch_size": 32},
              "synthetic": {"n": 150, "size": 32, "num_classes": 3}}
    (tmp_path / "cfg.json").write_text(json.dumps(config))
    for run in ("a", "b"):
        code = main(["train", "--config", str(tmp_path / "cfg.json"), "--data", "synthetic:oriented-shapes",
                     "--out", str(tmp_path / run), "--seed", "11"])
        assert code == 0
    capsys.readouterr()
    for name in ("report.jsonl", "checkpoint.srec"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- 10 --------------------------------------------------------------------------------


def test_criterion_10_feature_map_panels(twins, test_set, tmp_path):
    nets, _ = twins
    start = time.perf_counter()
    angles = list(range(0, 360, 60))
    x = test_set[0]
    for i in range(4):
        mad = {kind: export_feature_maps(net, x[i], angles, tmp_path / kind, f"img{i}").pairwise_mad()
               for kind, net in nets.items()}
        assert mad["sre"] < mad["standard"], (i, mad)
    assert time.perf_counter() - start < 60
