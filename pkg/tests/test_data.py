import os

import numpy as np
import pytest

from stereoadapt import autodiff as ad
from stereoadapt.data import (SOURCE_DOMAIN, TARGET_DOMAIN, DomainSpec,
                              StereoVideo, frame_to_arrays, generate_video,
                              load_video, save_video)
from stereoadapt.fileio import FormatError, VersionError
from stereoadapt.loss import LossConfig, photometric_loss


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        DomainSpec(depth_min=5.0, depth_max=2.0)


def test_generate_determinism():
    a = generate_video(SOURCE_DOMAIN, 4, (32, 64), seed=3)
    b = generate_video(SOURCE_DOMAIN, 4, (32, 64), seed=3)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.left, fb.left)
        assert np.array_equal(fa.right, fb.right)
        assert np.array_equal(fa.gt_disparity, fb.gt_disparity)
    c = generate_video(SOURCE_DOMAIN, 4, (32, 64), seed=4)
    assert not np.array_equal(a.frames[0].left, c.frames[0].left)


def test_right_view_matches_shifted_left_columns():
    # noise-free, and force integer disparities by rounding the gt per layer
    spec = DomainSpec(noise_sigma=0.0, palette_seed=11)
    video = generate_video(spec, 1, (32, 64), seed=21)
    fr = video.frames[0]
    d = fr.gt_disparity
    errors = []
    for y in range(d.shape[0]):
        for x in range(d.shape[1]):
            dint = d[y, x]
            if abs(dint - round(dint)) > 1e-9:
                continue  # only integer-disparity pixels are exactly sampled
            xs = x + int(round(dint))
            if xs >= d.shape[1] or abs(d[y, min(xs, d.shape[1] - 1)] - dint) > 1e-9:
                continue
            errors.append(np.max(np.abs(fr.right[y, x] - fr.left[y, xs])))
    # integer disparities are rare with random depths; the sampled-lattice
    # identity is exercised more strongly below via warping
    if errors:
        assert max(errors) <= 1e-6


def test_right_view_consistency_via_warp():
    from stereoadapt.loss import warp, RIGHT_TO_LEFT

    spec = DomainSpec(noise_sigma=0.0, palette_seed=12)
    fr = generate_video(spec, 1, (32, 64), seed=22).frames[0]
    left, right = frame_to_arrays(fr)
    gt = ad.constant(fr.gt_disparity[None, None])
    recon = warp(ad.constant(right), gt, RIGHT_TO_LEFT)
    # compare only non-occluded pixels on locally constant disparity, away
    # from the border columns the warp clamps into
    d = fr.gt_disparity
    h, w = d.shape
    flat = np.zeros_like(d, dtype=bool)
    flat[:, 2:-2] = (
        (d[:, 2:-2] == d[:, :-4]) & (d[:, 2:-2] == d[:, 1:-3])
        & (d[:, 2:-2] == d[:, 3:-1]) & (d[:, 2:-2] == d[:, 4:])
    )
    visible = np.ones_like(d, dtype=bool)
    for y in range(h):
        for x in range(w):
            target = x - d[y, x]
            for x2 in range(w):
                if d[y, x2] > d[y, x] + 1e-6 and abs((x2 - d[y, x2]) - target) < 1.5:
                    visible[y, x] = False
                    break
    interior = np.zeros_like(flat)
    dmax = int(np.ceil(d.max())) + 1
    interior[:, dmax:-1] = True
    mask = flat & visible & interior
    err = np.abs(recon.data[0] - left[0]).max(axis=0)
    assert mask.sum() > 100
    # sub-pixel warping of the sampled piecewise-linear texture is exact
    # between texture knots and carries bounded interpolation error at them
    assert err[mask].max() < 0.05
    assert np.median(err[mask]) < 1e-4


def test_disparity_within_bounds():
    for seed in range(5):
        video = generate_video(TARGET_DOMAIN, 2, (32, 64), seed=seed)
        d = video.frames[0].gt_disparity
        assert d.min() >= 0
        assert d.max() <= 48.0
        assert d.max() <= 30.0 / TARGET_DOMAIN.depth_min + 1e-9


def test_temporal_smoothness():
    for seed in (1, 2, 3):
        video = generate_video(TARGET_DOMAIN, 12, (32, 64), seed=seed)
        diffs = [
            np.abs(a.left - b.left).mean()
            for a, b in zip(video.frames, video.frames[1:])
        ]
        assert max(diffs) < 0.1


def test_photometric_self_check():
    cfg = LossConfig()
    for seed in range(3):
        fr = generate_video(TARGET_DOMAIN, 1, (32, 64), seed=300 + seed).frames[0]
        left, right = frame_to_arrays(fr)
        gt = ad.constant(fr.gt_disparity[None, None])
        zero = ad.constant(np.zeros((1, 1, 32, 64)))
        at_gt = photometric_loss(ad.constant(left), ad.constant(right), gt, gt, cfg).item()
        at_zero = photometric_loss(ad.constant(left), ad.constant(right), zero, zero, cfg).item()
        assert at_gt < at_zero


def test_save_load_round_trip(tmp_path):
    video = generate_video(TARGET_DOMAIN, 3, (32, 64), seed=7)
    path = os.path.join(tmp_path, "v.osv")
    save_video(path, video)
    loaded = load_video(path)
    assert loaded.seed == video.seed
    assert loaded.domain == video.domain
    assert len(loaded.frames) == len(video.frames)
    for fa, fb in zip(video.frames, loaded.frames):
        assert np.array_equal(fa.left, fb.left)
        assert np.array_equal(fa.right, fb.right)
        assert np.array_equal(fa.gt_disparity, fb.gt_disparity)
        assert fa.focal_times_baseline == fb.focal_times_baseline


def test_load_rejects_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "bad.osv")
    with open(path, "wb") as fh:
        fh.write(b"WHAT" + b"\0" * 64)
    with pytest.raises(FormatError):
        load_video(path)


def test_load_rejects_bad_version(tmp_path):
    video = generate_video(SOURCE_DOMAIN, 1, (32, 64), seed=1)
    path = os.path.join(tmp_path, "v.osv")
    save_video(path, video)
    raw = bytearray(open(path, "rb").read())
    raw[4] = 9
    open(path, "wb").write(bytes(raw))
    with pytest.raises(VersionError):
        load_video(path)


def test_load_names_offset_on_truncation(tmp_path):
    video = generate_video(SOURCE_DOMAIN, 2, (32, 64), seed=1)
    path = os.path.join(tmp_path, "v.osv")
    save_video(path, video)
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:200])
    with pytest.raises(FormatError) as err:
        load_video(path)
    assert "offset" in str(err.value)


def test_generate_length_contract():
    with pytest.raises(ValueError):
        generate_video(SOURCE_DOMAIN, 0, (32, 64), seed=0)
