import numpy as np
import pytest

from stereoadapt.adapt import AdaptMethod, StereoObjective, run_method, save_trace
from stereoadapt.data import TARGET_DOMAIN, generate_video
from stereoadapt.evaluate import (EvalConfig, MetricsRecord, SequenceReport,
                                  aggregate, depth_metrics, disparity_to_depth,
                                  evaluate_predictions, frame_metrics,
                                  last20_count, online_evaluate,
                                  read_report_csv, stereo_metrics,
                                  write_report_csv)
from stereoadapt.loss import LossConfig
from stereoadapt.net import Checkpoint, DispNetTiny, LRVector

from oracles import loop_depth_metrics, loop_stereo_metrics


def test_disparity_to_depth_inversion():
    out = disparity_to_depth(np.array([3.0]), fb=30.0, cap=50.0)
    assert out[0] == 10.0


def test_disparity_to_depth_caps_singularity():
    out = disparity_to_depth(np.array([0.0, 1e-9]), fb=30.0, cap=50.0)
    np.testing.assert_array_equal(out, [50.0, 50.0])
    with pytest.raises(ValueError):
        disparity_to_depth(np.array([1.0]), fb=-1.0, cap=50.0)


def test_gt_beyond_cap_excluded():
    fb = 30.0
    gt_disp = np.array([[3.0, 0.4]])   # depths 10 and 75
    pred = np.array([[3.0, 123.0]])    # junk at the excluded pixel
    rec = frame_metrics(pred, gt_disp, fb, EvalConfig(depth_cap=50.0))
    assert rec.rmse == 0.0 and rec.epe == 0.0
    pred2 = np.array([[3.0, 0.1]])
    rec2 = frame_metrics(pred2, gt_disp, fb, EvalConfig(depth_cap=50.0))
    assert rec2.as_tuple() == rec.as_tuple()  # excluded pixel never matters


def test_depth_metrics_perfect_prediction():
    gt = np.random.default_rng(0).uniform(5, 40, size=(4, 5))
    m = depth_metrics(gt, gt, np.ones_like(gt, dtype=bool))
    assert m["rmse"] == 0.0 and m["abs_rel"] == 0.0 and m["sq_rel"] == 0.0
    assert m["rmse_log"] == 0.0
    assert m["delta1"] == m["delta2"] == m["delta3"] == 1.0


def test_depth_metrics_uniform_ratio():
    gt = np.full((3, 3), 8.0)
    pred = 1.3 * gt
    m = depth_metrics(pred, gt, np.ones_like(gt, dtype=bool))
    assert m["abs_rel"] == pytest.approx(0.3, abs=1e-12)
    assert m["delta1"] == 0.0
    assert m["delta2"] == 1.0  # 1.25 < 1.3 <= 1.5625


def test_depth_metrics_constant_offset():
    gt = np.full((2, 4), 8.0)
    pred = gt + 2.0
    m = depth_metrics(pred, gt, np.ones_like(gt, dtype=bool))
    assert m["rmse"] == pytest.approx(2.0, abs=1e-12)
    assert m["sq_rel"] == pytest.approx(0.5, abs=1e-12)


def test_depth_metrics_empty_mask():
    with pytest.raises(ValueError):
        depth_metrics(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))


def test_stereo_metrics_examples():
    gt = np.full((2, 3), 10.0)
    d1, epe = stereo_metrics(gt + 1.0, gt, np.ones_like(gt, dtype=bool))
    assert epe == pytest.approx(1.0) and d1 == 0.0

    # error 4 > 3px and 40% > 5% -> outlier
    d1, _ = stereo_metrics(np.array([[14.0]]), np.array([[10.0]]), np.ones((1, 1), bool))
    assert d1 == 100.0
    # error 2.4 < 3px -> never an outlier, regardless of the ratio
    d1, _ = stereo_metrics(np.array([[12.4]]), np.array([[10.0]]), np.ones((1, 1), bool))
    assert d1 == 0.0
    # error 4 > 3px but 4 < 5% of 100 -> not an outlier (conjunction)
    d1, _ = stereo_metrics(np.array([[104.0]]), np.array([[100.0]]), np.ones((1, 1), bool))
    assert d1 == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_metrics_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(4.0, 45.0, size=(6, 7))
    pred = gt * rng.uniform(0.7, 1.4, size=(6, 7))
    mask = rng.uniform(size=(6, 7)) > 0.2
    m = depth_metrics(pred, gt, mask)
    ref = loop_depth_metrics(pred, gt, mask)
    for key, val in ref.items():
        assert abs(m[key] - val) < 1e-10, key
    gt_d = rng.uniform(0.5, 12.0, size=(6, 7))
    pred_d = gt_d + rng.normal(0, 2.0, size=(6, 7))
    d1, epe = stereo_metrics(pred_d, gt_d, mask)
    d1_ref, epe_ref = loop_stereo_metrics(pred_d, gt_d, mask)
    assert abs(d1 - d1_ref) < 1e-10
    assert abs(epe - epe_ref) < 1e-10


def test_masking_invariance():
    rng = np.random.default_rng(3)
    gt = rng.uniform(5, 45, size=(5, 5))
    pred = gt + rng.normal(size=(5, 5))
    mask = rng.uniform(size=(5, 5)) > 0.4
    base = depth_metrics(pred, gt, mask)
    pred2 = pred.copy()
    pred2[~mask] = 1e6
    assert depth_metrics(pred2, gt, mask) == base


def test_metrics_record_invariants():
    with pytest.raises(ValueError):
        MetricsRecord(rmse=1.0, abs_rel=0.1, sq_rel=0.1, rmse_log=0.1,
                      delta1=0.9, delta2=0.5, delta3=1.0, d1_all=0.0, epe=0.0)
    with pytest.raises(ValueError):
        MetricsRecord(rmse=-1.0, abs_rel=0.1, sq_rel=0.1, rmse_log=0.1,
                      delta1=0.5, delta2=0.6, delta3=1.0, d1_all=0.0, epe=0.0)


def test_aggregation_is_per_frame_mean():
    r1 = MetricsRecord(2.0, 0.2, 0.1, 0.05, 0.5, 0.6, 0.7, 10.0, 1.0)
    r2 = MetricsRecord(4.0, 0.4, 0.3, 0.15, 0.7, 0.8, 0.9, 30.0, 3.0)
    agg = aggregate([r1, r2])
    assert agg.rmse == 3.0 and agg.epe == 2.0 and agg.d1_all == 20.0


def test_last20_window():
    assert last20_count(100) == 20
    assert last20_count(101) == 21
    assert last20_count(3) == 1
    report = SequenceReport.from_frames([
        MetricsRecord(float(i), 0, 0, 0, 1, 1, 1, 0, 0) for i in range(10)
    ])
    assert report.mean_all.rmse == pytest.approx(4.5)
    assert report.mean_last20.rmse == pytest.approx(8.5)  # frames 8, 9


@pytest.fixture(scope="module")
def stereo_run():
    model = DispNetTiny(32, 64)
    objective = StereoObjective(model, LossConfig())
    rng = np.random.default_rng(11)
    ckpt = Checkpoint(model.init_params(rng),
                      LRVector.constant(model.num_params, 1e-4), model.init_stats())
    video = generate_video(TARGET_DOMAIN, 8, (32, 64), seed=77)
    return model, objective, ckpt, video


def test_online_evaluate_report_shape(stereo_run):
    _, objective, ckpt, video = stereo_run
    report, trace = online_evaluate(video, ckpt, AdaptMethod.from_name("omla"),
                                    objective, meta_lr=1e-6)
    assert len(report.per_frame) == len(video.frames)
    tail = report.per_frame[-last20_count(len(video.frames)):]
    assert report.mean_last20.rmse == pytest.approx(
        float(np.mean([r.rmse for r in tail])))


def test_frozen_method_keeps_theta_constant(stereo_run):
    _, objective, ckpt, video = stereo_run
    method = AdaptMethod(use_ofda=False, use_meta_lr=False, base_lr=0.0)
    report, trace = online_evaluate(video, ckpt, method, objective)
    assert np.array_equal(trace.final_theta.values, ckpt.theta.values)
    # per-frame metrics vary only through scene content
    rmses = [r.rmse for r in report.per_frame]
    assert len(set(np.round(rmses, 12))) > 1


def test_report_csv_round_trip(tmp_path, stereo_run):
    _, objective, ckpt, video = stereo_run
    report, trace = online_evaluate(video, ckpt, AdaptMethod.from_name("ofda"), objective)
    path = str(tmp_path / "x.report.csv")
    write_report_csv(path, trace, report)
    per_frame, summaries = read_report_csv(path)
    assert len(per_frame) == len(video.frames)
    assert summaries["ALL"]["rmse"] == pytest.approx(report.mean_all.rmse, rel=1e-10)
    assert summaries["LAST20"]["epe"] == pytest.approx(report.mean_last20.epe, rel=1e-10)
    assert per_frame[0]["loss"] == pytest.approx(trace.frames[0].loss, rel=1e-10)


def test_evaluate_predictions_length_check(stereo_run):
    _, _, _, video = stereo_run
    with pytest.raises(ValueError):
        evaluate_predictions([video.frames[0].gt_disparity], video)
