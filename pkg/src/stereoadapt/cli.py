"""Command-line front end: data generation, pre-training, adaptation, reports.

Each command reads one config file, writes one artifact (atomically), and is
deterministic given the config seed, so pipelines compose through the shell
and reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import adapt as adapt_mod
from . import data as data_mod
from . import evaluate as eval_mod
from . import pretrain as pretrain_mod
from .adapt import AdaptMethod, StereoObjective, fmt_float
from .config import ConfigError, describe_defaults, load_config
from .fileio import FormatError, atomic_write
from .net import LayoutMismatchError, load_checkpoint, save_checkpoint
from .plots import line_plot

SUMMARY_METRICS = ("rmse", "abs_rel", "sq_rel", "rmse_log")
METHOD_ORDER = ("naive", "meta", "ofda", "omla")
PRETRAIN_ORDER = ("standard", "meta")


def _objective(cfg) -> StereoObjective:
    return StereoObjective(cfg.build_model(), cfg.loss_config())


def cmd_gen_data(cfg, out_dir: str) -> None:
    """Render the source and target video suites into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    size = (cfg.image_height, cfg.image_width)
    jobs = []
    for i in range(cfg.num_source_videos):
        jobs.append(("source", i, cfg.domain("source"), cfg.source_video_length,
                     cfg.seed + 1000 + i))
    for i in range(cfg.num_target_videos):
        jobs.append(("target", i, cfg.domain("target"), cfg.target_video_length,
                     cfg.seed + 2000 + i))

    def render(job):
        role, i, spec, length, seed = job
        return role, i, data_mod.generate_video(spec, length, size, seed,
                                                cfg.focal_times_baseline)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            rendered = list(pool.map(render, jobs))
    else:
        rendered = [render(j) for j in jobs]
    for role, i, video in rendered:
        data_mod.save_video(os.path.join(out_dir, f"{role}_{i:03d}.osv"), video)
    print(f"wrote {len(rendered)} videos to {out_dir}")


def _load_source_videos(data_dir: str):
    names = sorted(n for n in os.listdir(data_dir) if n.startswith("source_") and n.endswith(".osv"))
    if not names:
        raise FileNotFoundError(f"no source_*.osv videos in {data_dir}")
    return [data_mod.load_video(os.path.join(data_dir, n)) for n in names]


def cmd_pretrain(cfg, mode: str, data_dir: str, out_path: str, init_path: str | None = None) -> None:
    """Standard batch pre-training, optionally followed by the meta stage."""
    if mode not in ("standard", "meta"):
        raise ConfigError(f"pretrain mode must be 'standard' or 'meta', got {mode!r}")
    objective = _objective(cfg)
    videos = _load_source_videos(data_dir)
    rng = np.random.default_rng([cfg.seed, 1])

    if init_path is not None:
        ckpt = load_checkpoint(init_path)
        _check_layout(ckpt, objective)
    else:
        frames = [fr for v in videos for fr in v.frames]
        ckpt, history = pretrain_mod.standard_pretrain(
            frames, objective, cfg.pretrain_epochs, rng,
            lr_schedule=(cfg.pretrain_lr1, cfg.pretrain_lr2),
            batch_size=cfg.pretrain_batch, base_lr=cfg.base_lr,
            adam=cfg.adam_config())
        print(f"standard pre-training: loss {history[0]:.5f} -> {history[-1]:.5f} "
              f"over {len(history)} epochs")
    if mode == "meta":
        meta_rng = np.random.default_rng([cfg.seed, 2])
        ckpt = pretrain_mod.meta_pretrain(videos, ckpt, cfg.meta_config(),
                                          cfg.meta_epochs, objective, meta_rng,
                                          threads=cfg.threads)
        print(f"meta pre-training: {cfg.meta_epochs} epochs over {len(videos)} videos")
    save_checkpoint(out_path, ckpt)
    print(f"wrote checkpoint {out_path}")


def _check_layout(ckpt, objective) -> None:
    if ckpt.theta.layout != tuple(objective.layout):
        raise LayoutMismatchError(
            "checkpoint layout does not match the configured network "
            f"({len(ckpt.theta)} parameters vs {objective.model.num_params})")


def cmd_adapt(cfg, checkpoint_path: str, video_path: str, method_name: str,
              out_trace: str) -> None:
    """Adapt one method variant over one video; writes the trace CSV + sidecar."""
    objective = _objective(cfg)
    ckpt = load_checkpoint(checkpoint_path)
    _check_layout(ckpt, objective)
    video = data_mod.load_video(video_path)
    method = AdaptMethod.from_name(method_name, base_lr=cfg.base_lr)
    trace = adapt_mod.run_method(video, ckpt, method, objective,
                                 meta_lr=cfg.meta_lr, blend_a=cfg.blend_a,
                                 adam=cfg.adam_config(), lr_floor=cfg.lr_floor)
    adapt_mod.save_trace(out_trace, trace)
    losses = [fr.loss for fr in trace.frames]
    print(f"adapted {method_name} over {len(losses)} frames: "
          f"loss {losses[0]:.5f} -> {losses[-1]:.5f}; wrote {out_trace}")


def cmd_eval(cfg, trace_path: str, video_path: str, out_report: str) -> None:
    """Score a stored trace against ground truth; writes the report CSV."""
    trace = adapt_mod.load_trace(trace_path)
    video = data_mod.load_video(video_path)
    if len(trace.frames) != len(video.frames):
        raise FormatError(
            f"trace has {len(trace.frames)} frames but video has {len(video.frames)}")
    report = eval_mod.evaluate_predictions([fr.d_left for fr in trace.frames],
                                           video, cfg.eval_config())
    eval_mod.write_report_csv(out_report, trace, report)
    print(f"evaluated {len(trace.frames)} frames: mean rmse "
          f"{report.mean_all.rmse:.4f} (last 20%: {report.mean_last20.rmse:.4f}); "
          f"wrote {out_report}")


def _cell_sort_key(tag: tuple[str, str]):
    pre, method = tag
    pre_rank = PRETRAIN_ORDER.index(pre) if pre in PRETRAIN_ORDER else len(PRETRAIN_ORDER)
    m_rank = METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER)
    return (pre_rank, pre, m_rank, method)


def cmd_report(cfg, reports_dir: str, out_dir: str) -> None:
    """Summarize all report CSVs in a directory into tables and SVG curves.

    Report files must follow ``<pretraining>__<method>__<name>.report.csv``.
    """
    names = sorted(n for n in os.listdir(reports_dir) if n.endswith(".report.csv"))
    if not names:
        raise FileNotFoundError(f"no *.report.csv files in {reports_dir}")
    os.makedirs(out_dir, exist_ok=True)

    cells: dict[tuple[str, str], list[tuple[str, list[dict], dict]]] = {}
    for name in names:
        stem = name[:-len(".report.csv")]
        parts = stem.split("__")
        if len(parts) != 3:
            raise FormatError(
                f"report name {name!r} does not match <pretraining>__<method>__<video>.report.csv")
        pre, method, video = parts
        per_frame, summaries = eval_mod.read_report_csv(os.path.join(reports_dir, name))
        cells.setdefault((pre, method), []).append((video, per_frame, summaries))

    header = ["pretraining", "method", "n_videos"]
    header += [f"{m}_all" for m in SUMMARY_METRICS] + [f"{m}_last20" for m in SUMMARY_METRICS]
    rows = []
    for tag in sorted(cells, key=_cell_sort_key):
        entries = cells[tag]
        row = [tag[0], tag[1], str(len(entries))]
        for window in ("ALL", "LAST20"):
            for metric in SUMMARY_METRICS:
                row.append(fmt_float(float(np.mean([s[window][metric] for _, _, s in entries]))))
        rows.append(row)
    csv_text = "\n".join([",".join(header)] + [",".join(r) for r in rows]) + "\n"
    atomic_write(os.path.join(out_dir, "summary.csv"), csv_text.encode("utf-8"))

    widths = [max(len(h), max((len(r[i]) for r in rows), default=0)) for i, h in enumerate(header)]
    txt_lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for r in rows:
        txt_lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(r)))
    atomic_write(os.path.join(out_dir, "summary.txt"), ("\n".join(txt_lines) + "\n").encode("utf-8"))

    # per-frame rmse curves: one column per report, one SVG per grid cell
    curve_cols: dict[str, list[float]] = {}
    for tag in sorted(cells, key=_cell_sort_key):
        series = {}
        for video, per_frame, _ in sorted(cells[tag]):
            curve = [rec["rmse"] for rec in per_frame]
            series[video] = curve
            curve_cols[f"{tag[0]}__{tag[1]}__{video}"] = curve
        mean_len = min(len(c) for c in series.values())
        series["mean"] = [float(np.mean([c[i] for c in series.values() if len(c) > i]))
                          for i in range(mean_len)]
        svg = line_plot(series, f"per-frame RMSE: {tag[0]} / {tag[1]}", "frame", "rmse")
        atomic_write(os.path.join(out_dir, f"curves__{tag[0]}__{tag[1]}.svg"),
                     svg.encode("utf-8"))

    max_len = max(len(c) for c in curve_cols.values())
    tags = sorted(curve_cols)
    lines = [",".join(["frame_idx"] + tags)]
    for i in range(max_len):
        cells_row = [str(i)]
        for tag in tags:
            col = curve_cols[tag]
            cells_row.append(fmt_float(col[i]) if i < len(col) else "")
        lines.append(",".join(cells_row))
    atomic_write(os.path.join(out_dir, "curves_rmse.csv"),
                 ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"summarized {len(names)} reports over {len(rows)} grid cells into {out_dir}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereoadapt",
        description="Online adaptation testbed for stereo disparity estimation.",
        epilog=describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="override worker threads")

    p = sub.add_parser("gen-data", help="render source and target video suites")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("pretrain", help="pre-train a checkpoint on the source suite")
    common(p)
    p.add_argument("--mode", required=True, choices=("standard", "meta"))
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--init", default=None, help="reuse an existing standard checkpoint")

    p = sub.add_parser("adapt", help="run one online method over one video")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--method", required=True, choices=AdaptMethod.NAMES)
    p.add_argument("--out", required=True, help="output trace CSV path")

    p = sub.add_parser("eval", help="score a stored trace against ground truth")
    common(p)
    p.add_argument("--trace", required=True, help="trace CSV from the adapt command")
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True, help="output report CSV path")

    p = sub.add_parser("report", help="summarize report CSVs into tables and curves")
    common(p)
    p.add_argument("--reports", required=True, help="directory of *.report.csv files")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.mode, args.data, args.out, args.init)
        elif args.command == "adapt":
            cmd_adapt(cfg, args.checkpoint, args.video, args.method, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.trace, args.video, args.out)
        elif args.command == "report":
            cmd_report(cfg, args.reports, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, LayoutMismatchError) as exc:
        print(f"file format error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
