"""Depth and stereo-matching metrics plus the online evaluation protocol.

Predictions are scored frame by frame, always from the pre-update disparity
(the network is judged before it learns from the frame).  Disparities convert
to depth through the calibrated focal-length-times-baseline product, with the
prediction capped and ground truth beyond the cap excluded from every metric.
Sequence aggregation is per-frame-then-average, and a trailing window of
ceil(0.2 * T) frames summarizes post-convergence quality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .adapt import AdaptMethod, OnlineTrace, run_method
from .data import StereoVideo
from .net import Checkpoint

METRIC_NAMES = ("rmse", "abs_rel", "sq_rel", "rmse_log",
                "delta1", "delta2", "delta3", "d1_all", "epe")


@dataclass
class MetricsRecord:
    rmse: float
    abs_rel: float
    sq_rel: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    d1_all: float
    epe: float

    def __post_init__(self):
        if not (self.delta1 <= self.delta2 + 1e-12 and self.delta2 <= self.delta3 + 1e-12):
            raise ValueError("delta accuracies must be non-decreasing")
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in METRIC_NAMES)


@dataclass(frozen=True)
class EvalConfig:
    depth_cap: float = 50.0
    disp_eps: float = 1e-3  # disparity floor before inversion

    def __post_init__(self):
        if self.depth_cap <= 0 or self.disp_eps <= 0:
            raise ValueError("depth_cap and disp_eps must be positive")


def disparity_to_depth(disp: np.ndarray, fb: float, cap: float, disp_eps: float = 1e-3) -> np.ndarray:
    """Invert disparity to depth and clamp at the cap."""
    if fb <= 0 or cap <= 0:
        raise ValueError("fb and cap must be positive")
    depth = fb / np.maximum(np.asarray(disp, dtype=np.float64), disp_eps)
    return np.minimum(depth, cap)


def depth_metrics(pred_depth: np.ndarray, gt_depth: np.ndarray, mask: np.ndarray) -> dict[str, float]:
    """The five error measures and three threshold accuracies on valid pixels."""
    if pred_depth.shape != gt_depth.shape or mask.shape != gt_depth.shape:
        raise ValueError("pred, gt and mask shapes must agree")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    p = pred_depth[mask].astype(np.float64)
    g = gt_depth[mask].astype(np.float64)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return {
        "rmse": float(np.sqrt(np.mean(diff ** 2))),
        "abs_rel": float(np.mean(np.abs(diff) / g)),
        "sq_rel": float(np.mean(diff ** 2 / g)),
        "rmse_log": float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25 ** 2)),
        "delta3": float(np.mean(ratio < 1.25 ** 3)),
    }


def stereo_metrics(pred_disp: np.ndarray, gt_disp: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """(d1_all, epe): outlier percentage and mean absolute disparity error.

    A pixel is an outlier when its error exceeds 3 px and 5% of ground truth,
    the stereo benchmark convention.
    """
    if not mask.any():
        raise ValueError("mask selects no pixels")
    err = np.abs(pred_disp[mask] - gt_disp[mask]).astype(np.float64)
    gt = gt_disp[mask].astype(np.float64)
    outlier = (err > 3.0) & (err > 0.05 * gt)
    return float(100.0 * np.mean(outlier)), float(np.mean(err))


def frame_metrics(pred_disp: np.ndarray, gt_disp: np.ndarray, fb: float,
                  cfg: EvalConfig = EvalConfig()) -> MetricsRecord:
    """Mask by ground-truth depth, convert, and compute all metrics at once."""
    gt_depth = fb / np.maximum(np.asarray(gt_disp, dtype=np.float64), cfg.disp_eps)
    mask = gt_depth <= cfg.depth_cap
    if not mask.any():
        raise ValueError("no pixel has ground-truth depth within the cap")
    pred_depth = disparity_to_depth(pred_disp, fb, cfg.depth_cap, cfg.disp_eps)
    d = depth_metrics(pred_depth, gt_depth, mask)
    d1_all, epe = stereo_metrics(np.asarray(pred_disp, dtype=np.float64),
                                 np.asarray(gt_disp, dtype=np.float64), mask)
    return MetricsRecord(d1_all=d1_all, epe=epe, **d)


def last20_count(n_frames: int) -> int:
    return max(1, math.ceil(0.2 * n_frames))


def aggregate(records: list[MetricsRecord]) -> MetricsRecord:
    """Per-metric mean over frames (never pixel-pooled across frames)."""
    if not records:
        raise ValueError("nothing to aggregate")
    vals = {name: float(np.mean([getattr(r, name) for r in records])) for name in METRIC_NAMES}
    return MetricsRecord(**vals)


@dataclass
class SequenceReport:
    per_frame: list[MetricsRecord]
    mean_all: MetricsRecord
    mean_last20: MetricsRecord

    @classmethod
    def from_frames(cls, records: list[MetricsRecord]) -> "SequenceReport":
        tail = records[len(records) - last20_count(len(records)):]
        return cls(records, aggregate(records), aggregate(tail))


def evaluate_predictions(d_left_per_frame, video: StereoVideo,
                         cfg: EvalConfig = EvalConfig()) -> SequenceReport:
    """Score stored per-frame left-disparity predictions against ground truth."""
    if len(d_left_per_frame) != len(video.frames):
        raise ValueError(
            f"{len(d_left_per_frame)} predictions for {len(video.frames)} frames")
    records = [
        frame_metrics(pred, fr.gt_disparity, fr.focal_times_baseline, cfg)
        for pred, fr in zip(d_left_per_frame, video.frames)
    ]
    return SequenceReport.from_frames(records)


def online_evaluate(video: StereoVideo, checkpoint: Checkpoint, method: AdaptMethod,
                    objective, cfg: EvalConfig = EvalConfig(),
                    **adapt_kwargs) -> tuple[SequenceReport, OnlineTrace]:
    """Run one adaptation variant and score every pre-update prediction."""
    trace = run_method(video, checkpoint, method, objective, **adapt_kwargs)
    report = evaluate_predictions([fr.d_left for fr in trace.frames], video, cfg)
    return report, trace


REPORT_COLUMNS = ("frame_idx", "loss", "lr_min", "lr_mean", "lr_max") + METRIC_NAMES


def write_report_csv(path: str, trace: OnlineTrace, report: SequenceReport) -> None:
    """Per-frame rows (trace columns plus metrics) and ALL / LAST20 summaries."""
    from .adapt import fmt_float
    from .fileio import atomic_write

    if len(trace.frames) != len(report.per_frame):
        raise ValueError("trace and report disagree on frame count")
    lines = [",".join(REPORT_COLUMNS)]
    for fr, rec in zip(trace.frames, report.per_frame):
        vals = [fr.loss, fr.lr_min, fr.lr_mean, fr.lr_max, *rec.as_tuple()]
        lines.append(",".join([str(fr.index)] + [fmt_float(v) for v in vals]))
    n_tail = last20_count(len(trace.frames))
    for label, recs, rows in (
        ("ALL", report.mean_all, trace.frames),
        ("LAST20", report.mean_last20, trace.frames[len(trace.frames) - n_tail:]),
    ):
        vals = [
            float(np.mean([fr.loss for fr in rows])),
            float(np.mean([fr.lr_min for fr in rows])),
            float(np.mean([fr.lr_mean for fr in rows])),
            float(np.mean([fr.lr_max for fr in rows])),
            *recs.as_tuple(),
        ]
        lines.append(",".join([label] + [fmt_float(v) for v in vals]))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_report_csv(path: str) -> tuple[list[dict[str, float]], dict[str, dict[str, float]]]:
    """Parse a report CSV into per-frame dicts and the two summary rows."""
    with open(path, "r", encoding="utf-8") as fh:
        rows = [line.rstrip("\n") for line in fh if line.strip()]
    header = rows[0].split(",")
    if tuple(header) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report columns in {path}: {header}")
    per_frame: list[dict[str, float]] = []
    summaries: dict[str, dict[str, float]] = {}
    for row in rows[1:]:
        cells = row.split(",")
        key, vals = cells[0], [float(c) for c in cells[1:]]
        record = dict(zip(REPORT_COLUMNS[1:], vals))
        if key in ("ALL", "LAST20"):
            summaries[key] = record
        else:
            record["frame_idx"] = float(key)
            per_frame.append(record)
    if "ALL" not in summaries or "LAST20" not in summaries:
        raise ValueError(f"report {path} is missing summary rows")
    return per_frame, summaries
