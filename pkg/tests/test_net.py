import os

import numpy as np
import pytest

from stereoadapt import autodiff as ad
from stereoadapt.autodiff import Tape, backward, finite_diff_grad
from stereoadapt.data import generate_video, SOURCE_DOMAIN, frame_to_arrays
from stereoadapt.fileio import FormatError, VersionError
from stereoadapt.net import (BNLayer, BNMode, BNStats, Checkpoint,
                             DegenerateBatchError, DispNetTiny,
                             LayoutMismatchError, LRVector, ParamVector,
                             bn_blend, bn_normalize, bn_partial_stats,
                             load_checkpoint, save_checkpoint)

from oracles import loop_channel_stats, relative_error


def test_partial_stats_constant():
    mu, var = bn_partial_stats(np.full((1, 2, 3, 3), 3.0))
    np.testing.assert_array_equal(mu, [3.0, 3.0])
    np.testing.assert_array_equal(var, [0.0, 0.0])


def test_partial_stats_two_point():
    x = np.zeros((1, 1, 1, 2))
    x[0, 0, 0] = [1.0, 3.0]
    mu, var = bn_partial_stats(x)
    assert mu[0] == 2.0 and var[0] == 1.0  # biased divisor m


def test_partial_stats_matches_two_pass_oracle():
    x = np.random.default_rng(0).normal(2.0, 1.5, size=(1, 4, 6, 6))
    mu, var = bn_partial_stats(x)
    mu_ref, var_ref = loop_channel_stats(x)
    np.testing.assert_allclose(mu, mu_ref, atol=1e-12)
    np.testing.assert_allclose(var, var_ref, atol=1e-12)


def test_partial_stats_degenerate():
    with pytest.raises(DegenerateBatchError):
        bn_partial_stats(np.zeros((1, 3, 1, 1)))


def test_blend_endpoints_and_bessel():
    prev = BNStats(np.array([0.0]), np.array([1.0]))
    same = bn_blend(prev, np.array([2.0]), np.array([0.75]), a=0.0, m=4)
    assert same.mean[0] == 0.0 and same.var[0] == 1.0
    full = bn_blend(prev, np.array([2.0]), np.array([0.75]), a=1.0, m=4)
    assert full.mean[0] == 2.0 and full.var[0] == pytest.approx(1.0, abs=1e-15)


def test_blend_scalar_case():
    prev = BNStats(np.array([0.0]), np.array([1.0]))
    out = bn_blend(prev, np.array([2.0]), np.array([0.75]), a=0.5, m=4)
    assert out.mean[0] == pytest.approx(1.0, abs=1e-15)
    assert out.var[0] == pytest.approx(1.0, abs=1e-15)


def test_blend_randomized_matches_scalar_formula():
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = int(rng.integers(1, 5))
        prev = BNStats(rng.normal(size=c), rng.uniform(0.1, 2.0, size=c))
        mu_hat = rng.normal(size=c)
        var_hat = rng.uniform(0.0, 2.0, size=c)
        a = float(rng.uniform(0.0, 1.0))
        m = int(rng.integers(2, 100))
        out = bn_blend(prev, mu_hat, var_hat, a, m)
        for ch in range(c):
            mean_ref = (1 - a) * prev.mean[ch] + a * mu_hat[ch]
            var_ref = (1 - a) * prev.var[ch] + a * (m / (m - 1)) * var_hat[ch]
            assert abs(out.mean[ch] - mean_ref) <= 1e-12
            assert abs(out.var[ch] - var_ref) <= 1e-12
        assert np.all(out.var >= 0)


def test_blend_contract_errors():
    prev = BNStats(np.zeros(1), np.ones(1))
    with pytest.raises(ValueError):
        bn_blend(prev, np.zeros(1), np.zeros(1), a=1.5, m=4)
    with pytest.raises(DegenerateBatchError):
        bn_blend(prev, np.zeros(1), np.zeros(1), a=0.5, m=1)


def test_blend_streaming_converges_to_standard_normal():
    rng = np.random.default_rng(2024)
    stats = BNStats(np.array([0.7]), np.array([3.0]))
    for _ in range(500):
        batch = rng.normal(size=(1, 1, 32, 32))  # m = 1024
        mu, var = bn_partial_stats(batch)
        stats = bn_blend(stats, mu, var, a=0.1, m=1024)
    assert abs(stats.mean[0]) < 0.05
    assert abs(stats.var[0] - 1.0) < 0.05


def test_normalize_identity_and_beta():
    x = ad.constant(np.random.default_rng(3).normal(size=(1, 2, 4, 4)))
    layer = BNLayer(ad.constant(np.ones(2)), ad.constant(np.zeros(2)), eps=1e-12)
    out = bn_normalize(x, BNStats(np.zeros(2), np.ones(2)), layer)
    np.testing.assert_allclose(out.data, x.data, atol=1e-9)

    stats = BNStats(np.array([1.5, -0.5]), np.array([2.0, 3.0]))
    const = np.empty((1, 2, 3, 3))
    const[0, 0] = 1.5
    const[0, 1] = -0.5
    layer = BNLayer(ad.constant(np.ones(2)), ad.constant(np.array([4.0, -1.0])), eps=1e-5)
    out = bn_normalize(ad.constant(const), stats, layer)
    np.testing.assert_allclose(out.data[0, 0], 4.0)
    np.testing.assert_allclose(out.data[0, 1], -1.0)


def test_normalize_matches_scalar_formula():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 2, 2))
    stats = BNStats(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    eps = 1e-5
    out = bn_normalize(ad.constant(x), stats,
                       BNLayer(ad.constant(gamma), ad.constant(beta), eps))
    for n in range(2):
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    ref = gamma[c] * (x[n, c, i, j] - stats.mean[c]) / np.sqrt(stats.var[c] + eps) + beta[c]
                    assert abs(out.data[n, c, i, j] - ref) <= 1e-12


def test_normalize_gradients():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(1, 2, 3, 3))
    g0 = rng.normal(size=2)
    b0 = rng.normal(size=2)
    stats = BNStats(rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))

    def run(xv, gv, bv):
        out = bn_normalize(ad.constant(xv), stats,
                           BNLayer(ad.constant(gv), ad.constant(bv), 1e-5))
        return ad.mean(ad.mul(out, out)).item()

    tape = Tape()
    x, g, b = tape.leaf(x0), tape.leaf(g0), tape.leaf(b0)
    out = bn_normalize(x, stats, BNLayer(g, b, 1e-5))
    backward(tape, ad.mean(ad.mul(out, out)))
    assert relative_error(x.grad, finite_diff_grad(lambda v: run(v, g0, b0), x0)) < 1e-4
    assert relative_error(g.grad, finite_diff_grad(lambda v: run(x0, v, b0), g0)) < 1e-4
    assert relative_error(b.grad, finite_diff_grad(lambda v: run(x0, g0, v), b0)) < 1e-4


def test_param_vector_round_trip():
    model = DispNetTiny(32, 64)
    theta = model.init_params(np.random.default_rng(0))
    rebuilt = ParamVector.from_arrays(theta.layout, theta.unflatten())
    assert np.array_equal(theta.values, rebuilt.values)
    for name, arr in theta.unflatten().items():
        assert arr.shape == dict(theta.layout)[name]


def test_param_vector_length_checks():
    with pytest.raises(LayoutMismatchError):
        ParamVector((("w", (2, 2)),), np.zeros(3))
    with pytest.raises(LayoutMismatchError):
        Checkpoint(ParamVector((("w", (2,)),), np.zeros(2)), LRVector(np.zeros(3)), {})


def test_lr_vector_clamp_and_summary():
    lr = LRVector(np.array([-1.0, 0.5, 2.0])).clamped(0.0)
    assert lr.summary() == (0.0, pytest.approx(2.5 / 3), 2.0)


@pytest.fixture(scope="module")
def small_setup():
    model = DispNetTiny(32, 64)
    theta = model.init_params(np.random.default_rng(1))
    stats = model.init_stats()
    video = generate_video(SOURCE_DOMAIN, 1, (32, 64), seed=11)
    left, right = frame_to_arrays(video.frames[0])
    return model, theta, stats, left, right


def test_forward_output_ranges_and_shapes(small_setup):
    model, theta, stats, left, right = small_setup
    res = model.forward(None, theta, stats, left, right, BNMode.blend(0.1))
    assert res.d_left.shape == (1, 1, 32, 64)
    assert res.d_right.shape == (1, 1, 32, 64)
    assert np.all(res.d_left.data >= 0) and np.all(res.d_left.data <= model.d_max)
    assert set(res.new_stats) == set(model.bn_names)


def test_forward_frozen_deterministic(small_setup):
    model, theta, stats, left, right = small_setup
    a = model.forward(None, theta, stats, left, right, BNMode.frozen())
    b = model.forward(None, theta, stats, left, right, BNMode.frozen())
    assert np.array_equal(a.d_left.data, b.d_left.data)
    assert a.new_stats is stats or all(
        np.array_equal(a.new_stats[k].mean, stats[k].mean) for k in stats)


def test_forward_blend_zero_equals_frozen(small_setup):
    model, theta, stats, left, right = small_setup
    frozen = model.forward(None, theta, stats, left, right, BNMode.frozen())
    blend0 = model.forward(None, theta, stats, left, right, BNMode.blend(0.0))
    assert np.array_equal(frozen.d_left.data, blend0.d_left.data)
    assert np.array_equal(frozen.d_right.data, blend0.d_right.data)


def test_forward_collect_updates_stats(small_setup):
    model, theta, stats, left, right = small_setup
    res = model.forward(None, theta, stats, left, right, BNMode.collect(0.1))
    for name in model.bn_names:
        assert not np.array_equal(res.new_stats[name].mean, stats[name].mean)
        assert np.all(res.new_stats[name].var >= 0)


def test_forward_layout_mismatch(small_setup):
    model, theta, stats, left, right = small_setup
    bad = ParamVector(theta.layout[:-2], theta.values[:-sum(
        int(np.prod(s)) for _, s in theta.layout[-2:])])
    with pytest.raises(LayoutMismatchError):
        model.forward(None, bad, stats, left, right, BNMode.frozen())


def test_checkpoint_round_trip(tmp_path, small_setup):
    model, theta, stats, _, _ = small_setup
    ckpt = Checkpoint(theta, LRVector.constant(len(theta), 1e-4), stats)
    path = os.path.join(tmp_path, "ck.bin")
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.theta.layout == theta.layout
    assert np.array_equal(loaded.theta.values, theta.values)
    assert np.array_equal(loaded.lr.values, ckpt.lr.values)
    for name in stats:
        assert np.array_equal(loaded.stats[name].mean, stats[name].mean)
        assert np.array_equal(loaded.stats[name].var, stats[name].var)


def test_checkpoint_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "junk.bin")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\0" * 16)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path, small_setup):
    model, theta, stats, _, _ = small_setup
    path = os.path.join(tmp_path, "ck.bin")
    save_checkpoint(path, Checkpoint(theta, LRVector.constant(len(theta), 1e-4), stats))
    raw = bytearray(open(path, "rb").read())
    raw[4] = 99
    open(path, "wb").write(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path, small_setup):
    model, theta, stats, _, _ = small_setup
    path = os.path.join(tmp_path, "ck.bin")
    save_checkpoint(path, Checkpoint(theta, LRVector.constant(len(theta), 1e-4), stats))
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:len(raw) // 2])
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert "offset" in str(err.value)
