"""Experiment configuration: nested dataclasses with JSON round-trip and hashing.

A saved config re-runs bit-identically on the same platform: every random
draw in the pipeline is derived from ``seed`` and the per-stage configs below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

TRANSFORM_KINDS = (
    "gauss_noise",
    "gauss_blur",
    "mixup",
    "scale_iso",
    "scale_aniso",
    "rotate_frac",
    "translate_frac",
    "brightness",
    "contrast",
    "hue",
    "saturation",
)

# Default magnitude ranges. Degradations are one-sided [0, hi]; geometric and
# color transforms are signed with 0 interior so the identity sits inside the
# sampled range.
DEFAULT_ALPHA_RANGES: dict[str, tuple[float, float]] = {
    "gauss_noise": (0.0, 1.0),
    "gauss_blur": (0.0, 3.0),
    "mixup": (0.0, 0.5),
    "scale_iso": (-0.25, 0.25),
    "scale_aniso": (-0.25, 0.25),
    "rotate_frac": (-0.25, 0.25),
    "translate_frac": (-0.125, 0.125),
    "brightness": (-0.5, 0.5),
    "contrast": (-0.5, 0.5),
    "hue": (-0.5, 0.5),
    "saturation": (-0.5, 0.5),
}


@dataclass
class ScheduleConfig:
    """Forward-process schedule: alpha(t) = 1, sigma(t) = t on [t_min, t_max]."""

    t_min: float = 0.01
    t_max: float = 80.0


@dataclass
class TimeSamplerConfig:
    """Lognormal training-time distribution, clipped to the schedule range."""

    p_mean: float = -1.1
    p_std: float = 2.0


@dataclass
class DtConfig:
    """Time-gap rule dt = t * q(iteration).

    ``q`` halves from 1 toward ``q_min`` on a geometric stage schedule;
    ``stage_len`` of None means total_iters / 7 (one stage per halving down
    to 1/64). Setting ``constant`` pins q to a fixed ratio instead.
    """

    q_min: float = 1.0 / 64.0
    stage_len: int | None = None
    constant: float | None = None


@dataclass
class DiscsConfig:
    """Synthetic disc dataset geometry and sampling law."""

    resolution: int = 32
    radius: float = 6.0
    softness: float = 1.5
    center_lo: float = 10.0
    center_hi: float = 22.0
    n_train: int = 4096
    n_heldout: int = 1024


@dataclass
class TransformsConfig:
    """Per-kind alpha ranges plus dataset-level exclusions.

    ``exclude`` names transform kinds whose magnitude is not recoverable from
    a single image of the target dataset (on discs: fractional translation
    and rotation move disc images to other disc images, so their level sets
    collapse onto the manifold itself).
    """

    ranges: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_ALPHA_RANGES.items()})
    exclude: list = field(default_factory=list)


@dataclass
class FeatTrainConfig:
    """Magnitude-regression training for the feature network."""

    lr: float = 1e-4
    batch: int = 512
    iters: int = 20000
    groups: list = field(default_factory=lambda: ["deg", "geo", "clr"])
    channels: list = field(default_factory=lambda: [16, 32, 64, 64])
    fc_dim: int = 128
    log_every: int = 200


@dataclass
class MfdConfig:
    """Feature-distance assembly used as the consistency loss."""

    use_taps: bool = True
    head_weight: float = 1.0
    tap_weights: list | None = None  # None -> uniform 1.0 per tap
    enable_after_iter: int = 0
    warmup_metric: str = "mse"  # loss used before enable_after_iter


@dataclass
class CmConfig:
    """Consistency-model trunk and training-loop settings."""

    metric: str = "mse"  # mse | pseudo_huber | mfd | external
    lr: float = 1e-4
    batch: int = 128
    iters: int = 20000
    ema_decay: float = 0.9999
    sigma_data: float = 0.5
    width: int = 32
    emb_dim: int = 64
    huber_c: float | None = None  # None -> 0.00054 * sqrt(data dim)
    eval_every: int = 2000
    ckpt_every: int = 5000
    log_every: int = 100
    n_eval: int = 256
    n_probe: int = 1024
    probe_t: float = 0.8
    eval_trials: int = 3
    intermediate_t: float | None = None  # 2-step mid time; None -> sqrt(t_min*t_max)
    use_ema_eval: bool = True


@dataclass
class ExperimentConfig:
    """Top-level experiment description; serializable to/from JSON."""

    dataset: str = "discs"  # discs | tiny_images
    seed: int = 0
    output_dir: str = "runs/default"
    data_path: str | None = None  # tiny_images only: container path
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    time_sampler: TimeSamplerConfig = field(default_factory=TimeSamplerConfig)
    dt: DtConfig = field(default_factory=DtConfig)
    discs: DiscsConfig = field(default_factory=DiscsConfig)
    transforms: TransformsConfig = field(default_factory=TransformsConfig)
    features: FeatTrainConfig = field(default_factory=FeatTrainConfig)
    mfd: MfdConfig = field(default_factory=MfdConfig)
    cm: CmConfig = field(default_factory=CmConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def build(klass, sub):
            fields = {f.name: f for f in dataclasses.fields(klass)}
            unknown = set(sub) - set(fields)
            if unknown:
                raise ConfigError(f"unknown config keys for {klass.__name__}: {sorted(unknown)}")
            return klass(**sub)

        d = dict(d)
        nested = {
            "schedule": ScheduleConfig,
            "time_sampler": TimeSamplerConfig,
            "dt": DtConfig,
            "discs": DiscsConfig,
            "transforms": TransformsConfig,
            "features": FeatTrainConfig,
            "mfd": MfdConfig,
            "cm": CmConfig,
        }
        for key, klass in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = build(klass, d[key])
        return build(cls, d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(raw)

    def config_hash(self) -> str:
        """Stable hash of everything except the output location."""
        d = self.to_dict()
        d.pop("output_dir", None)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        if self.dataset not in ("discs", "tiny_images"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.cm.metric not in ("mse", "pseudo_huber", "mfd", "external"):
            raise ConfigError(f"unknown metric {self.cm.metric!r}")
        if self.schedule.t_min <= 0 or self.schedule.t_max <= self.schedule.t_min:
            raise ConfigError("schedule requires 0 < t_min < t_max")
        for kind, (lo, hi) in self.transforms.ranges.items():
            if kind not in TRANSFORM_KINDS:
                raise ConfigError(f"unknown transform kind {kind!r}")
            if not (lo <= 0.0 <= hi):
                raise ConfigError(f"{kind}: alpha range [{lo}, {hi}] must contain 0")
        if self.dataset == "tiny_images" and self.data_path is None:
            raise ConfigError("tiny_images dataset requires data_path")


def discs_preset(output_dir: str = "runs/discs", seed: int = 0) -> ExperimentConfig:
    """Standard 32x32 disc-manifold experiment."""
    cfg = ExperimentConfig(dataset="discs", seed=seed, output_dir=output_dir)
    cfg.transforms.exclude = ["translate_frac", "rotate_frac"]
    cfg.features.batch = 128
    cfg.cm.batch = 64
    cfg.cm.ema_decay = 0.999
    return cfg


def discs16_preset(output_dir: str = "runs/discs16", seed: int = 0) -> ExperimentConfig:
    """Half-resolution disc experiment sized for single-core CPU budgets."""
    cfg = discs_preset(output_dir=output_dir, seed=seed)
    cfg.discs = DiscsConfig(
        resolution=16, radius=3.0, softness=0.75, center_lo=5.0, center_hi=11.0,
        n_train=4096, n_heldout=1024,
    )
    # Blur sigma above ~1.5 px erases a radius-3 disc entirely; keep it recoverable.
    cfg.transforms.ranges["gauss_blur"] = [0.0, 1.5]
    cfg.features.channels = [12, 24, 48, 48]
    cfg.features.fc_dim = 96
    cfg.cm.width = 8
    cfg.cm.emb_dim = 32
    return cfg


def tiny_images_preset(data_path: str = "data/tiny", output_dir: str = "runs/tiny",
                       seed: int = 0) -> ExperimentConfig:
    """32x32 color-image pipeline (user-supplied dataset container).

    No known manifold: the pipeline skips tangent analysis and geometric
    metrics. The 2-step sampling mid time follows the paired-dataset value.
    """
    cfg = ExperimentConfig(dataset="tiny_images", seed=seed, output_dir=output_dir,
                           data_path=data_path)
    cfg.cm.intermediate_t = 0.821
    return cfg


PRESETS = {"discs": discs_preset, "discs16": discs16_preset,
           "tiny_images": tiny_images_preset}
