"""Experiment configuration: a flat ``key = value`` text file.

Every knob of the testbed has exactly one documented default here.  Defaults
marked "published" follow the values reported for the original full-scale
experiments; the rest are desk-scale artifact choices.  Unknown keys are hard
errors so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass

from .adapt import AdamConfig
from .data import DomainSpec
from .evaluate import EvalConfig
from .loss import LossConfig
from .net import DispNetTiny
from .pretrain import GRAD_MODES, MetaConfig


class ConfigError(ValueError):
    """Malformed config file, unknown key, or invalid value."""


_AUTO = "auto"

# key -> (default, help text); insertion order is the documented order
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (1234, "master seed; per-video seeds derive from it"),
    "threads": (1, "worker threads for per-video parallel sections"),
    "image_height": (32, "frame height in pixels, divisible by 16"),
    "image_width": (64, "frame width in pixels, divisible by 16"),
    "d_max": (_AUTO, "disparity ceiling of the network head; auto = 0.75 * image_width"),
    "focal_times_baseline": (30.0, "f*B product used for depth conversion"),

    "num_source_videos": (12, "source-domain videos generated for pre-training"),
    "source_video_length": (8, "frames per source video (>= n_adapt + t_eval)"),
    "num_target_videos": (20, "held-out target-domain videos for online evaluation"),
    "target_video_length": (100, "frames per target video"),

    "source_texture_scale": (6.0, "source texture feature size in pixels"),
    "source_brightness": (0.0, "source additive brightness shift"),
    "source_contrast": (1.0, "source contrast factor"),
    "source_noise_sigma": (0.005, "source per-pixel Gaussian noise std"),
    "source_palette_seed": (7, "seed of the source texture palette"),
    "source_depth_min": (3.0, "nearest source scene depth"),
    "source_depth_max": (30.0, "farthest source scene depth"),
    "target_texture_scale": (4.0, "target texture feature size in pixels"),
    "target_brightness": (0.15, "target additive brightness shift"),
    "target_contrast": (1.35, "target contrast factor"),
    "target_noise_sigma": (0.02, "target per-pixel Gaussian noise std"),
    "target_palette_seed": (99, "seed of the target texture palette"),
    "target_depth_min": (3.0, "nearest target scene depth"),
    "target_depth_max": (30.0, "farthest target scene depth"),

    "alpha": (0.85, "SSIM weight in the reconstruction loss (published)"),
    "ssim_window": (3, "box-filter window of the SSIM term"),
    "ssim_c1": (0.0001, "SSIM luminance stabilizer (0.01^2)"),
    "ssim_c2": (0.0009, "SSIM contrast stabilizer (0.03^2)"),

    "blend_a": (0.1, "online BN statistics blend factor a"),
    "bn_eps": (1e-5, "BN variance stabilizer"),
    "bn_momentum": (0.1, "EMA momentum while collecting source statistics"),
    "lr_floor": (0.0, "lower clamp applied to per-parameter learning rates"),

    "base_lr": (1e-4, "constant online rate of the non-meta methods"),
    "meta_lr": (1e-7, "online step size for the learning-rate vector (published)"),
    "adam_beta1": (0.9, "Adam first-moment decay"),
    "adam_beta2": (0.999, "Adam second-moment decay"),
    "adam_eps": (1e-8, "Adam denominator stabilizer"),

    "pretrain_epochs": (20, "offline batch pre-training epochs"),
    "pretrain_batch": (4, "mini-batch size of offline pre-training"),
    "pretrain_lr1": (1e-4, "pre-training rate for the first half of the epochs (published)"),
    "pretrain_lr2": (5e-5, "pre-training rate for the remaining epochs (published)"),
    "meta_epochs": (10, "meta-pre-training epochs (published)"),
    "meta_batch": (8, "videos per meta-batch K (published)"),
    "n_adapt": (4, "inner adaptation frames N per video"),
    "t_eval": (3, "evaluation frames T after adaptation (published)"),
    "lambda_theta": (1e-5, "outer rate for the parameters (published)"),
    "lambda_lambda": (1e-5, "outer rate for the learning-rate vector (published)"),
    "inner_meta_lr": (1e-5, "rate-vector step size inside inner adaptation runs"),
    "grad_mode": ("first_order", "outer gradient mode: first_order or full_unroll"),

    "depth_cap": (50.0, "depth cap in scene units for evaluation (published)"),
    "disp_eps": (0.001, "disparity floor before inversion to depth"),
}


@dataclass
class ExperimentConfig:
    """Typed view over the key-value file; one attribute per key."""

    values: dict[str, object]

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    # -- assembled sub-configs -------------------------------------------------
    def domain(self, role: str) -> DomainSpec:
        p = f"{role}_"
        return DomainSpec(
            texture_scale=self.values[p + "texture_scale"],
            brightness=self.values[p + "brightness"],
            contrast=self.values[p + "contrast"],
            noise_sigma=self.values[p + "noise_sigma"],
            palette_seed=self.values[p + "palette_seed"],
            depth_min=self.values[p + "depth_min"],
            depth_max=self.values[p + "depth_max"],
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.ssim_window, self.ssim_c1, self.ssim_c2)

    def adam_config(self) -> AdamConfig:
        return AdamConfig(self.adam_beta1, self.adam_beta2, self.adam_eps)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.depth_cap, self.disp_eps)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            k=self.meta_batch, n_adapt=self.n_adapt, t_eval=self.t_eval,
            lambda_theta=self.lambda_theta, lambda_lambda=self.lambda_lambda,
            inner_meta_lr=self.inner_meta_lr, blend_a=self.blend_a,
            lr_floor=self.lr_floor, grad_mode=self.grad_mode,
            adam=self.adam_config(),
        )

    def resolved_d_max(self) -> float:
        if self.values["d_max"] == _AUTO:
            return 0.75 * self.image_width
        return float(self.values["d_max"])

    def build_model(self) -> DispNetTiny:
        return DispNetTiny(self.image_height, self.image_width, self.resolved_d_max(),
                           bn_eps=self.bn_eps, bn_momentum=self.bn_momentum)


def _coerce(key: str, raw: str, default) -> object:
    if key == "d_max":
        return _AUTO if raw == _AUTO else float(raw)
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def _validate(values: dict[str, object]) -> None:
    if values["image_height"] % 16 or values["image_width"] % 16:
        raise ConfigError("image_height and image_width must be divisible by 16")
    if values["grad_mode"] not in GRAD_MODES:
        raise ConfigError(f"grad_mode must be one of {GRAD_MODES}")
    if values["source_video_length"] < values["n_adapt"] + values["t_eval"]:
        raise ConfigError("source_video_length must be >= n_adapt + t_eval")
    if values["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    fb = values["focal_times_baseline"]
    d_max = 0.75 * values["image_width"] if values["d_max"] == _AUTO else values["d_max"]
    for role in ("source", "target"):
        if fb / values[f"{role}_depth_min"] > d_max:
            raise ConfigError(
                f"{role}_depth_min produces disparities above d_max={d_max}")


def parse_config_text(text: str, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    values = {k: v for k, (v, _) in DEFAULTS.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, DEFAULTS[key][0])
    if overrides:
        for key, val in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown override {key!r}")
            values[key] = val
    _validate(values)
    return ExperimentConfig(values)


def load_config(path: str, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, overrides)


def describe_defaults() -> str:
    lines = ["configuration keys (key = default  # description):"]
    for key, (default, help_text) in DEFAULTS.items():
        lines.append(f"  {key} = {default}  # {help_text}")
    return "\n".join(lines)
