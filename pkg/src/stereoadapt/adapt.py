"""Online adaptation engine: Adam with per-parameter rates and meta-updates.

Per frame the engine predicts, scores, optionally refreshes the per-parameter
learning rates by one hyper-gradient step, and then updates the parameters.
The learning-rate gradient comes from a one-step unroll of the previous
parameter update: with theta_t = theta_{t-1} - lr ⊙ u_{t-1} and the Adam
moment buffers held constant, dL_t/dlr = -dL_t/dtheta_t ⊙ u_{t-1}, so it
costs nothing beyond the gradient the parameter update needs anyway.

Four method variants cover the ablation grid: plain fine-tuning, fine-tuning
with meta-learned rates, statistics blending alone, and the full combination.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward
from .data import StereoFrame, StereoVideo, frame_to_arrays
from .fileio import FormatError, Reader, VersionError, Writer, atomic_write
from .loss import LossConfig, photometric_loss
from .net import (BNMode, BNStats, Checkpoint, DispNetTiny, LRVector,
                  ParamVector, gradient_vector)

TRACE_MAGIC = b"OMLT"
TRACE_VERSION = 1
TRACE_COLUMNS = ("frame_idx", "loss", "lr_min", "lr_mean", "lr_max")


def fmt_float(x: float) -> str:
    """Fixed CSV float formatting so reruns are byte-identical."""
    return "%.12g" % x


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m1: np.ndarray
    m2: np.ndarray
    step: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, cfg: AdamConfig = AdamConfig()) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, cfg.beta1, cfg.beta2, cfg.eps)

    def copy(self) -> "AdamState":
        return AdamState(self.m1.copy(), self.m2.copy(), self.step,
                         self.beta1, self.beta2, self.eps)


def adam_direction(grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update direction; the step size is applied outside."""
    if grad.shape != state.m1.shape:
        raise ValueError(f"gradient length {grad.shape} != state length {state.m1.shape}")
    step = state.step + 1
    m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * grad
    m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * grad * grad
    m1_hat = m1 / (1.0 - state.beta1 ** step)
    m2_hat = m2 / (1.0 - state.beta2 ** step)
    direction = m1_hat / (np.sqrt(m2_hat) + state.eps)
    return direction, AdamState(m1, m2, step, state.beta1, state.beta2, state.eps)


def adam_step(theta: ParamVector, grad: np.ndarray, lr, state: AdamState) -> tuple[ParamVector, AdamState]:
    """One Adam update with the scalar step size replaced element-wise by ``lr``."""
    rates = lr.values if isinstance(lr, LRVector) else np.asarray(lr, dtype=np.float64)
    if rates.ndim == 1 and rates.shape != theta.values.shape:
        raise ValueError(f"lr length {rates.shape} != theta length {theta.values.shape}")
    if isinstance(lr, LRVector) and np.any(rates < 0):
        raise ValueError("learning rates must be non-negative")
    direction, new_state = adam_direction(np.asarray(grad, dtype=np.float64), state)
    return theta.with_values(theta.values - rates * direction), new_state


@dataclass(frozen=True)
class AdaptMethod:
    """Ablation switchboard: statistics blending and/or meta-learned rates."""

    use_ofda: bool
    use_meta_lr: bool
    base_lr: float = 1e-4

    NAMES = ("naive", "meta", "ofda", "omla")

    @classmethod
    def from_name(cls, name: str, base_lr: float = 1e-4) -> "AdaptMethod":
        table = {
            "naive": (False, False),
            "meta": (False, True),
            "ofda": (True, False),
            "omla": (True, True),
        }
        if name not in table:
            raise ValueError(f"unknown method {name!r}, expected one of {sorted(table)}")
        ofda, meta = table[name]
        return cls(ofda, meta, base_lr)

    @property
    def name(self) -> str:
        return {(False, False): "naive", (False, True): "meta",
                (True, False): "ofda", (True, True): "omla"}[(self.use_ofda, self.use_meta_lr)]


@dataclass
class FrameRecord:
    """Pre-update prediction and bookkeeping for one processed frame."""

    index: int
    loss: float
    lr_min: float
    lr_mean: float
    lr_max: float
    wall_clock: float
    d_left: np.ndarray | None
    d_right: np.ndarray | None
    theta_pre: np.ndarray | None = None
    stats_pre: dict[str, BNStats] | None = None
    lambda_grad: np.ndarray | None = None


@dataclass
class OnlineTrace:
    frames: list[FrameRecord] = field(default_factory=list)
    final_theta: ParamVector | None = None
    final_stats: dict[str, BNStats] | None = None
    final_lr: LRVector | None = None
    update_dir_sum: np.ndarray | None = None


class StereoObjective:
    """Bundles the disparity network with the reconstruction loss."""

    def __init__(self, model: DispNetTiny, loss_cfg: LossConfig):
        self.model = model
        self.loss_cfg = loss_cfg

    @property
    def layout(self):
        return self.model.layout

    def evaluate(self, tape, theta: ParamVector, stats, frame, mode: BNMode):
        """Returns (loss tensor, prediction, new stats, parameter leaves).

        ``frame`` is a :class:`StereoFrame` or a pre-batched (left, right)
        pair of (N,3,H,W) arrays.
        """
        if isinstance(frame, StereoFrame):
            left, right = frame_to_arrays(frame)
        else:
            left, right = frame
        res = self.model.forward(tape, theta, stats, left, right, mode)
        loss = photometric_loss(left, right, res.d_left, res.d_right, self.loss_cfg)
        pred = (res.d_left.data[0, 0].copy(), res.d_right.data[0, 0].copy())
        return loss, pred, res.new_stats, res.leaves


def _copy_stats(stats: dict[str, BNStats]) -> dict[str, BNStats]:
    return {k: v.copy() for k, v in stats.items()}


def omla(video, theta0: ParamVector, stats0: dict[str, BNStats], lr0: LRVector,
         meta_lr: float, method: AdaptMethod, objective, *,
         blend_a: float = 0.1, adam: AdamConfig = AdamConfig(),
         lr_floor: float = 0.0, record_predictions: bool = True,
         record_states: bool = False) -> OnlineTrace:
    """Adapt online over a frame stream, one update per frame.

    Predictions and losses are recorded before each parameter update.  When
    ``method.use_meta_lr`` is set, the learning-rate vector is refreshed from
    the second frame on by an Adam step of size ``meta_lr`` on the one-step
    unrolled hyper-gradient.  When ``method.use_ofda`` is set, BN statistics
    blend with every incoming frame; otherwise they stay frozen.
    """
    frames = video.frames if isinstance(video, StereoVideo) else list(video)
    if len(frames) == 0:
        raise ValueError("video must contain at least one frame")
    if meta_lr < 0:
        raise ValueError("meta_lr must be >= 0")
    if len(lr0) != len(theta0):
        raise ValueError("lr vector and theta must have the same length")

    theta = theta0.copy()
    stats = _copy_stats(stats0)
    rates = lr0.clamped(lr_floor)
    n = len(theta)
    state_theta = AdamState.zeros(n, adam)
    state_lr = AdamState.zeros(n, adam)
    mode = BNMode.blend(blend_a) if method.use_ofda else BNMode.frozen()

    trace = OnlineTrace()
    update_dir_sum = np.zeros(n)
    prev_dir: np.ndarray | None = None

    for t, frame in enumerate(frames):
        started = time.perf_counter()
        tape = Tape()
        theta_pre = theta.values.copy() if record_states else None
        stats_pre = _copy_stats(stats) if record_states else None

        loss, pred, new_stats, leaves = objective.evaluate(tape, theta, stats, frame, mode)
        loss_value = loss.item()
        backward(tape, loss)
        grad = gradient_vector(objective.layout, leaves)

        lambda_grad = None
        if t > 0 and method.use_meta_lr:
            lambda_grad = -(grad * prev_dir)
            lr_dir, state_lr = adam_direction(lambda_grad, state_lr)
            rates = LRVector(rates.values - meta_lr * lr_dir).clamped(lr_floor)

        lr_min, lr_mean, lr_max = rates.summary()
        direction, state_theta = adam_direction(grad, state_theta)
        theta = theta.with_values(theta.values - rates.values * direction)
        update_dir_sum += direction
        prev_dir = direction
        stats = new_stats

        d_l = d_r = None
        if record_predictions:
            d_l, d_r = pred
        trace.frames.append(FrameRecord(
            index=t, loss=loss_value,
            lr_min=lr_min, lr_mean=lr_mean, lr_max=lr_max,
            wall_clock=time.perf_counter() - started,
            d_left=d_l, d_right=d_r,
            theta_pre=theta_pre, stats_pre=stats_pre,
            lambda_grad=None if lambda_grad is None or not record_states else lambda_grad.copy(),
        ))

    trace.final_theta = theta
    trace.final_stats = stats
    trace.final_lr = rates
    trace.update_dir_sum = update_dir_sum
    return trace


def sidecar_path(csv_path: str) -> str:
    return csv_path + ".disp"


def save_trace(csv_path: str, trace: OnlineTrace) -> None:
    """Write the per-frame CSV and a binary sidecar with the disparity maps.

    The CSV carries the loss and learning-rate summary per frame; the sidecar
    (``<csv>.disp``) additionally stores the pre-update disparity predictions
    as float32 planes so evaluation never has to re-run adaptation.
    """
    lines = [",".join(TRACE_COLUMNS)]
    for fr in trace.frames:
        lines.append(",".join([str(fr.index)] + [fmt_float(v) for v in
                                                 (fr.loss, fr.lr_min, fr.lr_mean, fr.lr_max)]))
    atomic_write(csv_path, ("\n".join(lines) + "\n").encode("utf-8"))

    if any(fr.d_left is None for fr in trace.frames):
        raise ValueError("trace was recorded without predictions")
    h, w = trace.frames[0].d_left.shape
    out = Writer()
    out.raw(TRACE_MAGIC)
    out.pack("<H", TRACE_VERSION)
    out.pack("<HHI", h, w, len(trace.frames))
    for fr in trace.frames:
        out.pack("<dddd", fr.loss, fr.lr_min, fr.lr_mean, fr.lr_max)
        out.f32(fr.d_left)
        out.f32(fr.d_right)
    atomic_write(sidecar_path(csv_path), out.getvalue())


def load_trace(csv_path: str) -> OnlineTrace:
    """Rebuild a trace (losses, rate summaries, float32 disparities) from disk."""
    with open(sidecar_path(csv_path), "rb") as fh:
        r = Reader(fh.read())
    magic = r.take(4)
    if magic != TRACE_MAGIC:
        raise FormatError(f"bad trace magic {magic!r}", offset=0)
    version = r.unpack("<H")
    if version != TRACE_VERSION:
        raise VersionError(f"unsupported trace version {version}", offset=4)
    h, w, n = r.unpack("<HHI")
    trace = OnlineTrace()
    for t in range(n):
        loss, lr_min, lr_mean, lr_max = r.unpack("<dddd")
        d_l = r.f32(h * w).reshape(h, w)
        d_r = r.f32(h * w).reshape(h, w)
        trace.frames.append(FrameRecord(t, loss, lr_min, lr_mean, lr_max, 0.0, d_l, d_r))
    r.done()
    return trace


def run_method(video, checkpoint: Checkpoint, method: AdaptMethod, objective, *,
               meta_lr: float = 1e-7, blend_a: float = 0.1,
               adam: AdamConfig = AdamConfig(), lr_floor: float = 0.0,
               record_states: bool = False) -> OnlineTrace:
    """Configure and run one ablation variant from a checkpoint.

    Methods without meta-learned rates use a constant per-parameter vector at
    ``method.base_lr``; the others start from the checkpoint's rate vector.
    """
    if method.use_meta_lr:
        lr0 = checkpoint.lr.copy()
    else:
        lr0 = LRVector.constant(len(checkpoint.theta), method.base_lr)
    return omla(video, checkpoint.theta, checkpoint.stats, lr0, meta_lr, method,
                objective, blend_a=blend_a, adam=adam, lr_floor=lr_floor,
                record_states=record_states)
