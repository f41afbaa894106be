"""Unsupervised stereo reconstruction loss: horizontal warping, SSIM, L1.

The loss never sees ground truth.  Each view is reconstructed from the other
via a differentiable horizontal warp driven by the predicted disparity, and
compared with a weighted sum of mean absolute error and a structural
dissimilarity term.  Reductions are means over pixels so the weighting and
learning rates stay resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RIGHT_TO_LEFT = "right_to_left"
LEFT_TO_RIGHT = "left_to_right"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85
    ssim_window: int = 3
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be positive")


def warp(source, disparity, direction: str) -> Tensor:
    """Resample ``source`` horizontally by per-pixel disparity.

    ``right_to_left`` samples the source at x - d(x), ``left_to_right`` at
    x + d(x), with 1-D bilinear interpolation and clamp-to-border sampling.
    Differentiable w.r.t. both the source image and the disparity map.
    """
    if direction == RIGHT_TO_LEFT:
        sign = -1.0
    elif direction == LEFT_TO_RIGHT:
        sign = 1.0
    else:
        raise ValueError(f"unknown warp direction {direction!r}")

    src, src_t = (source.data, source) if isinstance(source, Tensor) else (np.asarray(source, dtype=np.float64), None)
    disp, disp_t = (disparity.data, disparity) if isinstance(disparity, Tensor) else (np.asarray(disparity, dtype=np.float64), None)
    if src.ndim != 4 or disp.ndim != 4 or disp.shape[1] != 1:
        raise ad.ShapeError(f"warp expects NCHW source and N1HW disparity, got {src.shape} / {disp.shape}")
    n, c, h, w = src.shape
    if disp.shape[0] != n or disp.shape[2:] != (h, w):
        raise ad.ShapeError(f"disparity shape {disp.shape} does not match source {src.shape}")

    xs = np.arange(w).reshape(1, 1, 1, w) + sign * disp  # sample coordinate per pixel
    x0 = np.floor(xs)
    frac = xs - x0
    x0c = np.clip(x0, 0, w - 1).astype(np.intp)
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.intp)
    idx0 = np.broadcast_to(x0c, (n, c, h, w))
    idx1 = np.broadcast_to(x1c, (n, c, h, w))
    v0 = np.take_along_axis(src, idx0, axis=3)
    v1 = np.take_along_axis(src, idx1, axis=3)
    out = (1.0 - frac) * v0 + frac * v1

    parents, grad_fns = [], []
    if src_t is not None:
        def grad_src(g, idx0=idx0, idx1=idx1, frac=frac):
            gs = np.zeros((n, c, h, w))
            ni = np.arange(n).reshape(n, 1, 1, 1)
            ci = np.arange(c).reshape(1, c, 1, 1)
            hi = np.arange(h).reshape(1, 1, h, 1)
            np.add.at(gs, (ni, ci, hi, idx0), (1.0 - frac) * g)
            np.add.at(gs, (ni, ci, hi, idx1), frac * g)
            return gs
        parents.append(src_t)
        grad_fns.append(grad_src)
    if disp_t is not None:
        def grad_disp(g, v0=v0, v1=v1):
            # d out / d disparity = sign * (v1 - v0); shared across channels
            return (sign * (v1 - v0) * g).sum(axis=1, keepdims=True)
        parents.append(disp_t)
        grad_fns.append(grad_disp)
    return ad.apply_op("warp", out, parents, grad_fns)


def _box_filter(x: Tensor, window: int) -> Tensor:
    """Per-channel mean filter of odd size ``window`` (zero-padded, same size)."""
    n, c, h, w = x.shape
    flat = ad.reshape(x, (n * c, 1, h, w))
    kernel = ad.constant(np.full((1, 1, window, window), 1.0 / (window * window)))
    filtered = ad.conv2d(flat, kernel, stride=1, pad=window // 2)
    return ad.reshape(filtered, (n, c, h, w))


def ssim(a, b, cfg: LossConfig) -> Tensor:
    """Per-pixel SSIM map in [-1, 1] with box-filtered local statistics."""
    if not isinstance(a, Tensor):
        a = ad.constant(a)
    if not isinstance(b, Tensor):
        b = ad.constant(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    k = cfg.ssim_window
    mu_a = _box_filter(a, k)
    mu_b = _box_filter(b, k)
    mu_aa = ad.mul(mu_a, mu_a)
    mu_bb = ad.mul(mu_b, mu_b)
    mu_ab = ad.mul(mu_a, mu_b)
    var_a = ad.sub(_box_filter(ad.mul(a, a), k), mu_aa)
    var_b = ad.sub(_box_filter(ad.mul(b, b), k), mu_bb)
    cov = ad.sub(_box_filter(ad.mul(a, b), k), mu_ab)
    num = ad.mul(ad.add(ad.mul(mu_ab, 2.0), cfg.c1), ad.add(ad.mul(cov, 2.0), cfg.c2))
    den = ad.mul(ad.add(ad.add(mu_aa, mu_bb), cfg.c1), ad.add(ad.add(var_a, var_b), cfg.c2))
    return ad.div(num, den)


def _direction_term(reconstruction: Tensor, target, cfg: LossConfig) -> Tensor:
    l1 = ad.mean(ad.absolute(ad.sub(reconstruction, target)))
    dssim = ad.mean(ad.mul(ad.sub(1.0, ssim(reconstruction, target, cfg)), 0.5))
    return ad.add(ad.mul(l1, 1.0 - cfg.alpha), ad.mul(dssim, cfg.alpha))


def photometric_loss(left, right, d_left, d_right, cfg: LossConfig) -> Tensor:
    """Symmetric reconstruction loss over both views.

    ``left``/``right`` are (N,3,H,W) images in [0,1]; ``d_left``/``d_right``
    the (N,1,H,W) disparity maps.  Returns a non-negative scalar tensor.
    """
    recon_left = warp(right, d_left, RIGHT_TO_LEFT)
    recon_right = warp(left, d_right, LEFT_TO_RIGHT)
    return ad.add(
        _direction_term(recon_left, left, cfg),
        _direction_term(recon_right, right, cfg),
    )
