"""Tiny stereo disparity network with switchable batch-norm statistics regimes.

Each BN layer owns running per-channel statistics that can be (a) collected on
source data with an exponential moving average, (b) frozen, or (c) blended
online with the statistics of the incoming frame.  Blending uses a convex
combination with a Bessel-corrected variance term, which keeps the running
variance an unbiased estimate while streaming.

Normalization always treats the running statistics as constants: gradient
flows through the feature map and the affine parameters only, never into the
statistics update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape
from .fileio import FormatError, Reader, VersionError, Writer, atomic_write

CHECKPOINT_MAGIC = b"OMLC"
CHECKPOINT_VERSION = 1


class DegenerateBatchError(ValueError):
    """Fewer than two samples per channel; the variance correction divides by zero."""


class LayoutMismatchError(ValueError):
    """Flat parameter vector does not match the network layout."""


@dataclass
class BNStats:
    """Per-channel running mean and variance of one BN layer."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ValueError(f"mean/var must be matching vectors, got {self.mean.shape} and {self.var.shape}")
        if np.any(self.var < 0):
            raise ValueError("negative variance")

    def copy(self) -> "BNStats":
        return BNStats(self.mean.copy(), self.var.copy())


@dataclass
class BNLayer:
    """Affine BN parameters; gamma/beta may be recorded tensors."""

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class BNMode:
    """Statistics regime for a forward pass: collect, frozen, or blend(a)."""

    kind: str
    a: float = 0.0
    momentum: float = 0.1

    @classmethod
    def collect(cls, momentum: float = 0.1) -> "BNMode":
        return cls("collect", momentum=momentum)

    @classmethod
    def frozen(cls) -> "BNMode":
        return cls("frozen")

    @classmethod
    def blend(cls, a: float) -> "BNMode":
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"blend factor must be in [0, 1], got {a}")
        return cls("blend", a=a)


def bn_partial_stats(features) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance of an NCHW feature map."""
    x = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("expected NCHW features")
    n, c, h, w = x.shape
    m = n * h * w
    if m < 2:
        raise DegenerateBatchError(f"need at least 2 samples per channel, got {m}")
    mu = x.mean(axis=(0, 2, 3))
    var = ((x - mu.reshape(1, c, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return mu, var


def bn_blend(prev: BNStats, mu_hat: np.ndarray, var_hat: np.ndarray, a: float, m: int) -> BNStats:
    """Convex blend of running statistics with the current partial statistics."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"blend factor must be in [0, 1], got {a}")
    if m < 2:
        raise DegenerateBatchError(f"need m >= 2, got {m}")
    mean = (1.0 - a) * prev.mean + a * mu_hat
    var = (1.0 - a) * prev.var + a * (m / (m - 1.0)) * var_hat
    return BNStats(mean, var)


def bn_normalize(x: Tensor, stats: BNStats, layer: BNLayer) -> Tensor:
    """Normalize per channel with fixed statistics, then apply gamma/beta."""
    c = x.shape[1]
    if stats.mean.shape != (c,):
        raise ValueError(f"stats have {stats.mean.shape[0]} channels, features have {c}")
    inv_std = 1.0 / np.sqrt(stats.var + layer.eps)
    centered = ad.sub(x, stats.mean)
    scaled = ad.mul(centered, inv_std)
    return ad.add(ad.mul(scaled, layer.gamma), layer.beta)


class ParamVector:
    """Flat float64 parameter vector plus the layout mapping slices to layers."""

    __slots__ = ("layout", "values")

    def __init__(self, layout, values: np.ndarray):
        self.layout = tuple((name, tuple(shape)) for name, shape in layout)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.shape != (expected,):
            raise LayoutMismatchError(
                f"vector has {self.values.shape} values, layout wants ({expected},)"
            )

    def __len__(self) -> int:
        return self.values.size

    def unflatten(self) -> dict[str, np.ndarray]:
        out = {}
        pos = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[pos:pos + n].reshape(shape)
            pos += n
        return out

    @classmethod
    def from_arrays(cls, layout, arrays: dict[str, np.ndarray]) -> "ParamVector":
        parts = []
        for name, shape in layout:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise LayoutMismatchError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
            parts.append(arr.reshape(-1))
        return cls(layout, np.concatenate(parts) if parts else np.zeros(0))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.layout, values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())


@dataclass
class LRVector:
    """Per-parameter learning rates, same length as the parameter vector."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("learning rates must form a flat vector")

    @classmethod
    def constant(cls, n: int, value: float) -> "LRVector":
        return cls(np.full(n, float(value)))

    def __len__(self) -> int:
        return self.values.size

    def clamped(self, floor: float) -> "LRVector":
        return LRVector(np.maximum(self.values, floor))

    def summary(self) -> tuple[float, float, float]:
        v = self.values
        return float(v.min()), float(v.mean()), float(v.max())

    def copy(self) -> "LRVector":
        return LRVector(self.values.copy())


@dataclass
class ForwardResult:
    d_left: Tensor
    d_right: Tensor
    new_stats: dict[str, BNStats]
    leaves: dict[str, Tensor]


class DispNetTiny:
    """Encoder-decoder disparity network on a 6-channel stereo pair stack.

    Four stride-2 conv+BN+ReLU encoder blocks (16/32/48/64 channels), four
    bilinear-upsample+conv decoder blocks with skip connections, and a 2-channel
    head squashed to [0, d_max] with a sigmoid.  Input height and width must be
    divisible by 16; the output keeps the input resolution.
    """

    ENC_CHANNELS = (16, 32, 48, 64)
    DEC_CHANNELS = (48, 32, 16, 16)

    def __init__(self, height: int, width: int, d_max: float | None = None,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        if height % 16 or width % 16:
            raise ValueError(f"input dims must be divisible by 16, got {height}x{width}")
        self.height = height
        self.width = width
        self.d_max = float(d_max) if d_max is not None else 0.75 * width
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum

        enc = self.ENC_CHANNELS
        dec = self.DEC_CHANNELS
        skips = (enc[2], enc[1], enc[0], 6)
        layout = []
        c_in = 6
        for i, c_out in enumerate(enc, start=1):
            layout.append((f"enc{i}.weight", (c_out, c_in, 3, 3)))
            layout.append((f"enc{i}.bias", (c_out,)))
            layout.append((f"enc{i}.gamma", (c_out,)))
            layout.append((f"enc{i}.beta", (c_out,)))
            c_in = c_out
        for i, (c_out, c_skip) in enumerate(zip(dec, skips), start=1):
            layout.append((f"dec{i}.weight", (c_out, c_in + c_skip, 3, 3)))
            layout.append((f"dec{i}.bias", (c_out,)))
            c_in = c_out
        layout.append(("head.weight", (2, c_in, 3, 3)))
        layout.append(("head.bias", (2,)))
        self.layout = tuple(layout)
        self.bn_names = tuple(f"enc{i}" for i in range(1, 5))
        self.num_params = sum(int(np.prod(s)) for _, s in self.layout)

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        arrays = {}
        for name, shape in self.layout:
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:]))
                arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif name.endswith(".gamma"):
                arrays[name] = np.ones(shape)
            elif name == "head.bias":
                # start in the low-disparity part of the sigmoid
                arrays[name] = np.full(shape, -2.0)
            else:
                arrays[name] = np.zeros(shape)
        return ParamVector.from_arrays(self.layout, arrays)

    def init_stats(self) -> dict[str, BNStats]:
        return {
            name: BNStats(np.zeros(c), np.ones(c))
            for name, c in zip(self.bn_names, self.ENC_CHANNELS)
        }

    def _bn(self, h: Tensor, name: str, stats: dict[str, BNStats], new_stats: dict[str, BNStats],
            leaves: dict[str, Tensor], mode: BNMode) -> Tensor:
        run = stats[name]
        if mode.kind == "frozen":
            use = run
            new_stats[name] = run
        else:
            mu_hat, var_hat = bn_partial_stats(h)
            m = h.shape[0] * h.shape[2] * h.shape[3]
            if mode.kind == "collect":
                use = BNStats(mu_hat, var_hat)
                bessel = m / (m - 1.0)
                new_stats[name] = BNStats(
                    (1.0 - mode.momentum) * run.mean + mode.momentum * mu_hat,
                    (1.0 - mode.momentum) * run.var + mode.momentum * bessel * var_hat,
                )
            elif mode.kind == "blend":
                use = bn_blend(run, mu_hat, var_hat, mode.a, m)
                new_stats[name] = use
            else:
                raise ValueError(f"unknown bn mode {mode.kind!r}")
        layer = BNLayer(leaves[f"{name}.gamma"], leaves[f"{name}.beta"], self.bn_eps)
        return bn_normalize(h, use, layer)

    def forward(self, tape: Tape | None, theta: ParamVector, stats: dict[str, BNStats],
                left: np.ndarray, right: np.ndarray, mode: BNMode) -> ForwardResult:
        """Predict left/right disparities for one stereo pair (or a batch).

        ``left``/``right`` are (N, 3, H, W) arrays.  Returns the recorded
        parameter leaves so the caller can collect gradients after backward.
        """
        if theta.layout != self.layout:
            raise LayoutMismatchError("parameter vector layout does not match this network")
        if left.shape != right.shape or left.ndim != 4 or left.shape[1] != 3:
            raise ValueError(f"expected matching (N,3,H,W) images, got {left.shape} and {right.shape}")

        arrays = theta.unflatten()
        if tape is not None:
            leaves = {name: tape.leaf(arrays[name]) for name, _ in self.layout}
        else:
            leaves = {name: ad.constant(arrays[name]) for name, _ in self.layout}

        new_stats: dict[str, BNStats] = {}
        x = ad.concat_channels(ad.constant(left), ad.constant(right))
        skips = [x]
        h = x
        for i in range(1, 5):
            h = ad.conv2d(h, leaves[f"enc{i}.weight"], leaves[f"enc{i}.bias"], stride=2, pad=1)
            h = self._bn(h, f"enc{i}", stats, new_stats, leaves, mode)
            h = ad.relu(h)
            skips.append(h)
        # skip order for the decoder: enc3, enc2, enc1, raw input
        for i, skip in enumerate([skips[3], skips[2], skips[1], skips[0]], start=1):
            h = ad.upsample_bilinear2x(h)
            h = ad.concat_channels(h, skip)
            h = ad.relu(ad.conv2d(h, leaves[f"dec{i}.weight"], leaves[f"dec{i}.bias"], stride=1, pad=1))
        head = ad.conv2d(h, leaves["head.weight"], leaves["head.bias"], stride=1, pad=1)
        disp = ad.mul(ad.sigmoid(head), self.d_max)
        d_left = ad.slice_channels(disp, 0, 1)
        d_right = ad.slice_channels(disp, 1, 2)
        return ForwardResult(d_left, d_right, new_stats, leaves)


def gradient_vector(layout, leaves: dict[str, Tensor]) -> np.ndarray:
    """Flatten per-layer gradients into layout order (zeros where absent)."""
    parts = []
    for name, shape in layout:
        g = leaves[name].grad
        parts.append(np.zeros(int(np.prod(shape))) if g is None else g.reshape(-1))
    return np.concatenate(parts)


@dataclass
class Checkpoint:
    """Network parameters, per-parameter learning rates, and BN statistics."""

    theta: ParamVector
    lr: LRVector
    stats: dict[str, BNStats]

    def __post_init__(self):
        if len(self.lr) != len(self.theta):
            raise LayoutMismatchError(
                f"lr vector length {len(self.lr)} != theta length {len(self.theta)}"
            )

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.theta.copy(), self.lr.copy(),
                          {k: v.copy() for k, v in self.stats.items()})


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    w = Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.pack("<H", CHECKPOINT_VERSION)
    w.pack("<I", len(ckpt.theta.layout))
    for name, shape in ckpt.theta.layout:
        w.text(name)
        w.pack("<B", len(shape))
        for d in shape:
            w.pack("<I", d)
    w.pack("<I", len(ckpt.stats))
    for name, st in ckpt.stats.items():
        w.text(name)
        w.pack("<I", st.mean.size)
    w.f64(ckpt.theta.values)
    w.f64(ckpt.lr.values)
    for st in ckpt.stats.values():
        w.f64(st.mean)
        w.f64(st.var)
    atomic_write(path, w.getvalue())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    version = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", offset=4)
    n_entries = r.unpack("<I")
    layout = []
    for _ in range(n_entries):
        name = r.text()
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(ndim))
        layout.append((name, shape))
    n_bn = r.unpack("<I")
    bn_meta = [(r.text(), r.unpack("<I")) for _ in range(n_bn)]
    total = sum(int(np.prod(s)) for _, s in layout)
    theta = ParamVector(layout, r.f64(total))
    lr = LRVector(r.f64(total))
    stats = {}
    for name, c in bn_meta:
        mean = r.f64(c)
        var = r.f64(c)
        stats[name] = BNStats(mean, var)
    r.done()
    return Checkpoint(theta, lr, stats)
