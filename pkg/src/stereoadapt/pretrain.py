"""Source-domain training: offline batch pre-training and meta-pre-training.

Standard pre-training minimizes the reconstruction loss over shuffled
mini-batches while BN layers collect running statistics.  Meta-pre-training
then tunes both the parameters and the per-parameter learning-rate vector so
that a few online adaptation steps on the head of a video reduce the loss on
its following frames: adapt on the first N frames, score the adapted weights
on the next T frames, and accumulate the gradients with respect to the
original parameters over a batch of K videos before one outer update each
for the rate vector and the parameters.

Gradient modes for the outer step:

* ``first_order``: evaluation-frame gradients taken at the adapted weights
  stand in for the gradient at the originals; the rate gradient reuses the
  accumulated inner update directions (one-step-unroll style).
* ``full_unroll``: central finite differences through the entire inner
  adaptation.  Exact up to quadrature error, affordable only for tiny models.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .adapt import AdamConfig, AdamState, AdaptMethod, adam_direction, omla
from .autodiff import Tape, backward, finite_diff_grad
from .data import StereoVideo, frame_to_arrays
from .net import BNMode, Checkpoint, LRVector, ParamVector, gradient_vector

GRAD_MODES = ("first_order", "full_unroll")


@dataclass(frozen=True)
class MetaConfig:
    """Meta-pre-training step shape and rates."""

    k: int = 8                    # videos per meta-batch
    n_adapt: int = 4              # inner adaptation frames
    t_eval: int = 3               # evaluation frames after adaptation
    lambda_theta: float = 1e-5    # outer rate for the parameters
    lambda_lambda: float = 1e-5   # outer rate for the learning-rate vector
    inner_meta_lr: float = 1e-5   # rate-vector step size inside the inner run
    blend_a: float = 0.1
    lr_floor: float = 0.0
    grad_mode: str = "first_order"
    adam: AdamConfig = AdamConfig()

    def __post_init__(self):
        if self.k < 1 or self.n_adapt < 1 or self.t_eval < 1:
            raise ValueError("k, n_adapt and t_eval must all be >= 1")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")


def standard_pretrain(frames, objective, epochs: int, rng: np.random.Generator, *,
                      lr_schedule: tuple[float, float] = (1e-4, 5e-5),
                      batch_size: int = 4, base_lr: float = 1e-4,
                      adam: AdamConfig = AdamConfig(),
                      init_theta: ParamVector | None = None) -> tuple[Checkpoint, list[float]]:
    """Offline batch training with BN statistics collection.

    The first half of the epochs runs at ``lr_schedule[0]``, the rest at
    ``lr_schedule[1]``.  Returns the checkpoint (parameters, a constant
    learning-rate vector at ``base_lr``, collected statistics) and the mean
    loss per epoch.
    """
    if not frames:
        raise ValueError("training set must not be empty")
    model = objective.model
    theta = init_theta.copy() if init_theta is not None else model.init_params(rng)
    stats = model.init_stats()
    state = AdamState.zeros(len(theta), adam)
    lr1, lr2 = lr_schedule

    batches_left = [frame_to_arrays(f)[0] for f in frames]
    batches_right = [frame_to_arrays(f)[1] for f in frames]
    history: list[float] = []
    for epoch in range(epochs):
        lr = lr1 if epoch < epochs // 2 else lr2
        order = rng.permutation(len(frames))
        losses = []
        for start in range(0, len(frames), batch_size):
            idx = order[start:start + batch_size]
            lefts = np.concatenate([batches_left[i] for i in idx], axis=0)
            rights = np.concatenate([batches_right[i] for i in idx], axis=0)
            tape = Tape()
            loss, _, new_stats, leaves = objective.evaluate(
                tape, theta, stats, (lefts, rights), BNMode.collect(model.bn_momentum))
            losses.append(loss.item())
            backward(tape, loss)
            grad = gradient_vector(objective.layout, leaves)
            direction, state = adam_direction(grad, state)
            theta = theta.with_values(theta.values - lr * direction)
            stats = new_stats
        history.append(float(np.mean(losses)))
    ckpt = Checkpoint(theta, LRVector.constant(len(theta), base_lr), stats)
    return ckpt, history


def _inner_adapt(video, theta, stats, lam, cfg: MetaConfig, objective):
    frames = video.frames if isinstance(video, StereoVideo) else list(video)
    method = AdaptMethod(use_ofda=True, use_meta_lr=True)
    return omla(frames[:cfg.n_adapt], theta, stats, lam, cfg.inner_meta_lr, method,
                objective, blend_a=cfg.blend_a, adam=cfg.adam, lr_floor=cfg.lr_floor,
                record_predictions=False)


def _eval_frames(video, cfg: MetaConfig):
    frames = video.frames if isinstance(video, StereoVideo) else list(video)
    if len(frames) < cfg.n_adapt + cfg.t_eval:
        raise ValueError(
            f"video of length {len(frames)} too short for n_adapt={cfg.n_adapt} + t_eval={cfg.t_eval}")
    return frames[cfg.n_adapt:cfg.n_adapt + cfg.t_eval]


def _video_grads_first_order(video, theta, stats, lam, cfg, objective):
    trace = _inner_adapt(video, theta, stats, lam, cfg, objective)
    grad_theta = np.zeros(len(theta))
    grad_lam = np.zeros(len(theta))
    for frame in _eval_frames(video, cfg):
        tape = Tape()
        loss, _, _, leaves = objective.evaluate(
            tape, trace.final_theta, trace.final_stats, frame, BNMode.frozen())
        backward(tape, loss)
        g = gradient_vector(objective.layout, leaves)
        grad_theta += g
        grad_lam += -(g * trace.update_dir_sum)
    return grad_theta, grad_lam


def _unrolled_eval_loss(theta_values, lam_values, video, theta_template, stats, cfg, objective):
    theta = theta_template.with_values(theta_values)
    lam = LRVector(np.asarray(lam_values, dtype=np.float64))
    trace = _inner_adapt(video, theta, stats, lam, cfg, objective)
    total = 0.0
    for frame in _eval_frames(video, cfg):
        loss, _, _, _ = objective.evaluate(
            None, trace.final_theta, trace.final_stats, frame, BNMode.frozen())
        total += loss.item()
    return total


def _video_grads_full_unroll(video, theta, stats, lam, cfg, objective, h=1e-6):
    grad_theta = finite_diff_grad(
        lambda tv: _unrolled_eval_loss(tv, lam.values, video, theta, stats, cfg, objective),
        theta.values, h)
    grad_lam = finite_diff_grad(
        lambda lv: _unrolled_eval_loss(theta.values, lv, video, theta, stats, cfg, objective),
        lam.values, h)
    return grad_theta, grad_lam


def meta_step(meta_batch, theta: ParamVector, stats, lam: LRVector, cfg: MetaConfig,
              objective, opt_states: tuple[AdamState, AdamState] | None = None,
              threads: int = 1):
    """One outer update from a batch of videos.

    Pure in its inputs: returns (theta', lam', opt_states') and leaves the
    arguments untouched.  Per-video gradients may be computed in parallel, but
    accumulation follows the batch order so results are deterministic.
    """
    if opt_states is None:
        n = len(theta)
        opt_states = (AdamState.zeros(n, cfg.adam), AdamState.zeros(n, cfg.adam))
    state_theta, state_lam = opt_states

    per_video = _video_grads_first_order if cfg.grad_mode == "first_order" else _video_grads_full_unroll

    def job(video):
        return per_video(video, theta, stats, lam, cfg, objective)

    if threads > 1 and len(meta_batch) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, meta_batch))
    else:
        results = [job(v) for v in meta_batch]

    grad_theta = np.zeros(len(theta))
    grad_lam = np.zeros(len(theta))
    for gt, gl in results:
        grad_theta += gt
        grad_lam += gl

    lam_dir, state_lam = adam_direction(grad_lam, state_lam)
    new_lam = LRVector(lam.values - cfg.lambda_lambda * lam_dir).clamped(cfg.lr_floor)
    theta_dir, state_theta = adam_direction(grad_theta, state_theta)
    new_theta = theta.with_values(theta.values - cfg.lambda_theta * theta_dir)
    return new_theta, new_lam, (state_theta, state_lam)


def meta_pretrain(videos, checkpoint: Checkpoint, cfg: MetaConfig, epochs: int,
                  objective, rng: np.random.Generator, threads: int = 1) -> Checkpoint:
    """Repeat the meta-training step over shuffled meta-batches of videos.

    The checkpoint statistics are kept as collected on the source domain; only
    the parameters and the learning-rate vector are trained.
    """
    for video in videos:
        _eval_frames(video, cfg)  # validates lengths up front
    theta = checkpoint.theta.copy()
    lam = checkpoint.lr.copy()
    stats = checkpoint.stats
    opt_states = None
    for _ in range(epochs):
        order = rng.permutation(len(videos))
        for start in range(0, len(videos), cfg.k):
            batch = [videos[i] for i in order[start:start + cfg.k]]
            theta, lam, opt_states = meta_step(batch, theta, stats, lam, cfg,
                                               objective, opt_states, threads=threads)
    return Checkpoint(theta, lam, {k: v.copy() for k, v in stats.items()})
