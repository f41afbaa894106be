"""Synthetic stereo video generator with exact ground-truth disparity.

Scenes are layered and fronto-parallel: a textured background plane plus a few
textured rectangles at sampled depths, viewed by a camera that oscillates
horizontally along the baseline.  The right view is the same continuous scene
sampled one disparity to the left, so ground truth is exact by construction
and the per-layer parallax under camera motion is physically consistent
(image shift proportional to disparity).

Rendering styles (texture scale, palette, brightness/contrast, sensor noise,
depth range) live in :class:`DomainSpec`; two stock specs model the source
and the shifted target domain.  All pixel data is quantized to float32 before
leaving the generator so that saving and loading round-trips bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .fileio import FormatError, Reader, VersionError, Writer, atomic_write

VIDEO_MAGIC = b"OMLD"
VIDEO_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    """Rendering style of one domain."""

    texture_scale: float = 6.0
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    palette_seed: int = 7
    depth_min: float = 3.0
    depth_max: float = 30.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.depth_min <= 0 or self.depth_max <= self.depth_min:
            raise ValueError("depth range must satisfy 0 < depth_min < depth_max")
        if self.texture_scale <= 0:
            raise ValueError("texture_scale must be positive")


# stock suites: the target domain shifts palette, tone curve, and noise
SOURCE_DOMAIN = DomainSpec(texture_scale=6.0, brightness=0.0, contrast=1.0,
                           noise_sigma=0.005, palette_seed=7)
TARGET_DOMAIN = DomainSpec(texture_scale=4.0, brightness=0.15, contrast=1.35,
                           noise_sigma=0.02, palette_seed=99)


@dataclass
class StereoFrame:
    """One rectified pair with per-pixel left-view ground-truth disparity."""

    left: np.ndarray        # (H, W, 3) in [0, 1]
    right: np.ndarray       # (H, W, 3)
    gt_disparity: np.ndarray  # (H, W), >= 0
    focal_times_baseline: float


@dataclass
class StereoVideo:
    frames: list[StereoFrame]
    domain: DomainSpec
    seed: int

    def __len__(self) -> int:
        return len(self.frames)


class _Layer:
    """Fronto-parallel textured layer; ``rect`` is None for the background."""

    def __init__(self, disparity: float, grid: np.ndarray, base: np.ndarray,
                 scale: float, rect: tuple[float, float, float, float] | None):
        self.disparity = disparity
        self.grid = grid          # (K, K, 3) periodic value-noise control points
        self.base = base          # (3,) layer tint
        self.scale = scale
        self.rect = rect          # (x0, x1, y0, y1) in world columns/rows

    def texture(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Evaluate the continuous periodic texture at world coords (H, W)."""
        k = self.grid.shape[0]
        u = (xs / self.scale) % k
        v = (ys / self.scale) % k
        u0 = np.floor(u).astype(np.intp)
        v0 = np.floor(v).astype(np.intp)
        fu = (u - u0)[..., None]
        fv = (v - v0)[..., None]
        u1 = (u0 + 1) % k
        v1 = (v0 + 1) % k
        g = self.grid
        tex = ((1 - fv) * ((1 - fu) * g[v0, u0] + fu * g[v0, u1])
               + fv * ((1 - fu) * g[v1, u0] + fu * g[v1, u1]))
        return 0.35 * self.base + 0.65 * tex


def _sample_layers(spec: DomainSpec, rng: np.random.Generator, height: int, width: int,
                   fb: float) -> list[_Layer]:
    tex_rng = np.random.default_rng([spec.palette_seed])
    layers = []
    bg_depth = spec.depth_max * rng.uniform(0.75, 1.0)
    n_rects = int(rng.integers(2, 6))
    depths = np.sort(rng.uniform(spec.depth_min, 0.6 * spec.depth_max, size=n_rects))[::-1]
    for idx, depth in enumerate([bg_depth, *depths]):
        grid = tex_rng.uniform(0.0, 1.0, size=(8, 8, 3))
        base = tex_rng.uniform(0.15, 0.85, size=3)
        if idx == 0:
            rect = None
        else:
            cx = rng.uniform(0.15 * width, 0.85 * width)
            cy = rng.uniform(0.2 * height, 0.8 * height)
            hw = rng.uniform(0.08 * width, 0.22 * width)
            hh = rng.uniform(0.12 * height, 0.3 * height)
            rect = (cx - hw, cx + hw, cy - hh, cy + hh)
        layers.append(_Layer(fb / depth, grid, base, spec.texture_scale, rect))
    return layers


def _render_view(layers: list[_Layer], cam_x: float, height: int, width: int,
                 view_shift: float) -> tuple[np.ndarray, np.ndarray]:
    """Render one view; ``view_shift`` is 0 for left, the disparity for right.

    World column of image column x on a layer with disparity d is
    x + cam_x * d + view_shift(d); rectangles conversely appear shifted by
    -cam_x * d (- d for the right view).
    """
    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)
    ys = np.repeat(rows[:, None], width, axis=1)
    img = np.empty((height, width, 3))
    disp = np.empty((height, width))

    bg = layers[0]
    xs = cols[None, :] + cam_x * bg.disparity + view_shift * bg.disparity
    img[:] = bg.texture(np.repeat(xs, height, axis=0), ys)
    disp[:] = bg.disparity

    for layer in layers[1:]:
        d = layer.disparity
        shift = cam_x * d + view_shift * d
        x0, x1, y0, y1 = layer.rect
        # pixel centers covered by the rectangle in this view
        c0 = max(0, int(np.ceil(x0 - shift)))
        c1 = min(width - 1, int(np.floor(x1 - shift)))
        r0 = max(0, int(np.ceil(y0)))
        r1 = min(height - 1, int(np.floor(y1)))
        if c0 > c1 or r0 > r1:
            continue
        sub_cols = cols[c0:c1 + 1][None, :] + shift
        sub_ys = ys[r0:r1 + 1, c0:c1 + 1]
        img[r0:r1 + 1, c0:c1 + 1] = layer.texture(np.repeat(sub_cols, r1 - r0 + 1, axis=0), sub_ys)
        disp[r0:r1 + 1, c0:c1 + 1] = d
    return img, disp


def generate_video(spec: DomainSpec, length: int, size: tuple[int, int], seed: int,
                   focal_times_baseline: float = 30.0) -> StereoVideo:
    """Render a stereo video with smooth horizontal camera motion.

    Deterministic in (spec, length, size, seed).  Scene geometry and motion
    derive from ``seed``; textures derive from ``spec.palette_seed``.
    """
    if length < 1:
        raise ValueError("video length must be >= 1")
    height, width = size
    rng = np.random.default_rng([seed])
    layers = _sample_layers(spec, rng, height, width, focal_times_baseline)

    amp = rng.uniform(0.3, 0.7)
    period = rng.uniform(30.0, 60.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    frames = []
    for t in range(length):
        cam_x = amp * np.sin(2.0 * np.pi * t / period + phase)
        left, disp = _render_view(layers, cam_x, height, width, view_shift=0.0)
        right, _ = _render_view(layers, cam_x, height, width, view_shift=1.0)
        for img in (left, right):
            img *= spec.contrast
            img += 0.5 - 0.5 * spec.contrast + spec.brightness
        if spec.noise_sigma > 0:
            left = left + rng.normal(0.0, spec.noise_sigma, size=left.shape)
            right = right + rng.normal(0.0, spec.noise_sigma, size=right.shape)
        left = np.clip(left, 0.0, 1.0).astype(np.float32).astype(np.float64)
        right = np.clip(right, 0.0, 1.0).astype(np.float32).astype(np.float64)
        disp = disp.astype(np.float32).astype(np.float64)
        frames.append(StereoFrame(left, right, disp, focal_times_baseline))
    return StereoVideo(frames, spec, seed)


def save_video(path: str, video: StereoVideo) -> None:
    if not video.frames:
        raise ValueError("cannot save an empty video")
    h, w, _ = video.frames[0].left.shape
    fb = video.frames[0].focal_times_baseline
    d = video.domain
    out = Writer()
    out.raw(VIDEO_MAGIC)
    out.pack("<H", VIDEO_VERSION)
    out.pack("<HHI", h, w, len(video.frames))
    out.pack("<d", fb)
    out.pack("<q", video.seed)
    out.pack("<dddd", d.texture_scale, d.brightness, d.contrast, d.noise_sigma)
    out.pack("<q", d.palette_seed)
    out.pack("<dd", d.depth_min, d.depth_max)
    for fr in video.frames:
        out.f32(fr.left)
        out.f32(fr.right)
        out.f32(fr.gt_disparity)
    atomic_write(path, out.getvalue())


def load_video(path: str) -> StereoVideo:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    magic = r.take(4)
    if magic != VIDEO_MAGIC:
        raise FormatError(f"bad video magic {magic!r}", offset=0)
    version = r.unpack("<H")
    if version != VIDEO_VERSION:
        raise VersionError(f"unsupported video version {version}", offset=4)
    h, w, length = r.unpack("<HHI")
    fb = r.unpack("<d")
    seed = r.unpack("<q")
    texture_scale, brightness, contrast, noise_sigma = r.unpack("<dddd")
    palette_seed = r.unpack("<q")
    depth_min, depth_max = r.unpack("<dd")
    spec = DomainSpec(texture_scale, brightness, contrast, noise_sigma,
                      int(palette_seed), depth_min, depth_max)
    frames = []
    for _ in range(length):
        left = r.f32(h * w * 3).reshape(h, w, 3)
        right = r.f32(h * w * 3).reshape(h, w, 3)
        disp = r.f32(h * w).reshape(h, w)
        frames.append(StereoFrame(left, right, disp, fb))
    r.done()
    return StereoVideo(frames, spec, int(seed))


def frame_to_arrays(frame: StereoFrame) -> tuple[np.ndarray, np.ndarray]:
    """HWC images to the (1, 3, H, W) layout the network consumes."""
    left = np.ascontiguousarray(np.moveaxis(frame.left, 2, 0))[None]
    right = np.ascontiguousarray(np.moveaxis(frame.right, 2, 0))[None]
    return left, right


def domain_spec_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(DomainSpec))
