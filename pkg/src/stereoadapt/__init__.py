"""Online adaptation testbed for stereo disparity estimation.

A from-scratch reverse-mode autodiff core drives a tiny encoder-decoder
disparity network whose BN statistics can be aligned online, an adaptation
engine with meta-learned per-parameter learning rates, meta-pre-training, a
synthetic stereo-video generator with controllable domain shift, and the
online evaluation protocol with standard depth and stereo-matching metrics.
"""

from .adapt import (AdamConfig, AdamState, AdaptMethod, OnlineTrace,
                    StereoObjective, adam_direction, adam_step, omla,
                    run_method)
from .autodiff import (Tape, Tensor, backward, conv2d, elementwise,
                       finite_diff_grad, upsample_bilinear2x)
from .data import (DomainSpec, StereoFrame, StereoVideo, generate_video,
                   load_video, save_video)
from .evaluate import (EvalConfig, MetricsRecord, SequenceReport,
                       depth_metrics, disparity_to_depth, frame_metrics,
                       online_evaluate, stereo_metrics)
from .loss import LossConfig, photometric_loss, ssim, warp
from .net import (BNLayer, BNMode, BNStats, Checkpoint, DispNetTiny, LRVector,
                  ParamVector, bn_blend, bn_normalize, bn_partial_stats,
                  load_checkpoint, save_checkpoint)
from .pretrain import MetaConfig, meta_pretrain, meta_step, standard_pretrain

__version__ = "0.1.0"
