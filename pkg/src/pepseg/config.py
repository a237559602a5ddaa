"""Run configuration: one dataclass per section, loaded from YAML with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

STRIDES = (4, 8, 16, 32, 64)
NUM_STAGES = len(STRIDES)


class ConfigError(ValueError):
    """Raised for any invalid or unknown configuration value."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 3
    encoder_widths: tuple[int, ...] = (16, 32, 48, 64, 64)
    feat_channels: int = 64
    head_channels: int = 64
    head_layers: int = 4
    descriptor_dim: int = 64
    excavate_hidden: int = 32
    norm: str = "gn"
    # descriptor selection
    tau_conf: float = 0.3
    n_cap: int = 30
    # excavation
    window_radius: int | None = 8
    tau_key: float = 0.3
    k_max: int = 8
    exclude_source_center: bool = True
    # purifying
    affinity_self_bias: float = 0.0
    # ablation switches
    enable_excavating: bool = True
    enable_purifying: bool = True

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        _check(self.in_channels in (1, 3), "model.in_channels must be 1 or 3")
        _check(self.num_classes >= 1, "model.num_classes must be >= 1")
        _check(len(self.encoder_widths) == NUM_STAGES, "model.encoder_widths needs 5 entries")
        _check(all(w > 0 for w in self.encoder_widths), "model.encoder_widths must be positive")
        for name in ("feat_channels", "head_channels", "descriptor_dim", "excavate_hidden"):
            _check(getattr(self, name) > 0, f"model.{name} must be positive")
        _check(self.head_layers >= 1, "model.head_layers must be >= 1")
        _check(self.norm in ("gn", "none"), "model.norm must be 'gn' or 'none'")
        _check(0.0 <= self.tau_conf <= 1.0, "model.tau_conf must lie in [0, 1]")
        _check(0.0 <= self.tau_key <= 1.0, "model.tau_key must lie in [0, 1]")
        _check(self.n_cap >= 1, "model.n_cap must be >= 1")
        _check(self.k_max >= 1, "model.k_max must be >= 1")
        _check(self.window_radius is None or self.window_radius >= 0,
               "model.window_radius must be >= 0 or null (full map)")

    @property
    def num_outputs(self) -> int:
        """C_P: foreground classes plus background at index 0."""
        return self.num_classes + 1


@dataclass
class DataConfig:
    image_size: int = 64
    num_images: int = 8
    min_instances: int = 2
    max_instances: int = 5
    overlap_bias: float = 0.7
    size_range: tuple[int, int] = (6, 12)
    seed: int = 0
    center_fraction: float = 0.2
    # sqrt(area) ranges in pixels routing instances to pyramid stages 1..5
    scale_ranges: tuple[tuple[float, float], ...] = (
        (0.0, 16.0), (12.0, 32.0), (24.0, 64.0), (48.0, 128.0), (96.0, 1e9),
    )
    mask_stride: int = 4
    hflip: bool = False

    def __post_init__(self):
        self.size_range = tuple(self.size_range)
        self.scale_ranges = tuple(tuple(float(v) for v in r) for r in self.scale_ranges)
        _check(self.image_size > 0 and self.image_size % 32 == 0, "size must be multiple of 32")
        _check(self.num_images >= 1, "data.num_images must be >= 1")
        _check(1 <= self.min_instances <= self.max_instances, "data instance range is empty")
        _check(0.0 <= self.overlap_bias <= 1.0, "data.overlap_bias must lie in [0, 1]")
        _check(len(self.size_range) == 2 and 1 <= self.size_range[0] <= self.size_range[1],
               "data.size_range must be (lo, hi) with 1 <= lo <= hi")
        _check(0.0 < self.center_fraction <= 1.0, "data.center_fraction must lie in (0, 1]")
        _check(len(self.scale_ranges) == NUM_STAGES, "data.scale_ranges needs 5 (lo, hi) pairs")
        _check(all(lo < hi for lo, hi in self.scale_ranges), "data.scale_ranges pairs need lo < hi")
        _check(self.mask_stride == STRIDES[0], "data.mask_stride must equal the stage-1 stride (4)")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    milestones: tuple[float, ...] = (0.75, 0.92)
    lr_factor: float = 0.1
    grad_clip: float | None = 10.0
    seed: int = 0
    selection: str = "mixed"
    teacher_ratio: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0
    reduction: str = "mean"
    log_every: int = 10
    checkpoint_every: int = 0
    eval_every: int = 0
    stop_ap50: float | None = None

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        _check(self.steps >= 1, "train.steps must be >= 1")
        _check(self.batch_size >= 1, "train.batch_size must be >= 1")
        _check(self.lr > 0, "train.lr must be > 0")
        _check(0.0 <= self.momentum < 1.0, "train.momentum must lie in [0, 1)")
        _check(self.weight_decay >= 0, "train.weight_decay must be >= 0")
        _check(0.0 < self.lr_factor < 1.0, "train.lr_factor must lie in (0, 1)")
        _check(all(0.0 < m <= 1.0 for m in self.milestones), "train.milestones are fractions in (0, 1]")
        _check(list(self.milestones) == sorted(self.milestones), "train.milestones must be sorted")
        _check(self.selection in ("mixed", "gt", "pred"), "train.selection must be mixed|gt|pred")
        _check(0.0 <= self.teacher_ratio <= 1.0, "train.teacher_ratio must lie in [0, 1]")
        _check(self.reduction in ("mean", "sum"), "train.reduction must be mean|sum")
        _check(self.grad_clip is None or self.grad_clip > 0, "train.grad_clip must be > 0 or null")


@dataclass
class EvalConfig:
    area_scaling: str = "canvas"
    max_dets: int = 100

    def __post_init__(self):
        _check(self.area_scaling in ("canvas", "coco"), "eval.area_scaling must be canvas|coco")
        _check(self.max_dets >= 1, "eval.max_dets must be >= 1")


@dataclass
class InferConfig:
    tau_merge: float = 0.5
    nms_iou: float = 0.5
    mask_threshold: float = 0.5
    merge_masks: str = "representative"

    def __post_init__(self):
        _check(0.0 <= self.tau_merge <= 1.0, "infer.tau_merge must lie in [0, 1]")
        _check(0.0 < self.nms_iou <= 1.0, "infer.nms_iou must lie in (0, 1]")
        _check(0.0 < self.mask_threshold < 1.0, "infer.mask_threshold must lie in (0, 1)")
        _check(self.merge_masks in ("representative", "mean"),
               "infer.merge_masks must be representative|mean")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    @classmethod
    def from_dict(cls, raw: dict[str, Any] | None) -> "RunConfig":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        built = {}
        for name, f in sections.items():
            section_cls = f.default_factory
            values = raw.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"config section '{name}' must be a mapping")
            known = {sf.name for sf in dataclasses.fields(section_cls)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown key(s) in '{name}': {sorted(bad)}")
            try:
                built[name] = section_cls(**values)
            except TypeError as exc:
                raise ConfigError(f"invalid value in '{name}': {exc}") from exc
        return cls(**built)

    def to_dict(self) -> dict[str, Any]:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            return v
        return {
            f.name: {k: plain(v) for k, v in dataclasses.asdict(getattr(self, f.name)).items()}
            for f in dataclasses.fields(self)
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return RunConfig.from_dict(raw)
