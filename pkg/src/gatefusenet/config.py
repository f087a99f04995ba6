"""Architecture and training configuration.

Every knob the architecture leaves open lives in ``NetworkConfig`` so the
ablation variants (fusion strategy, anchor branch placement) are runtime
configuration rather than code forks.  ``TrainPlan`` carries the training
recipe.  Both round-trip through plain dicts for the JSON config file and
checkpoint header.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

MODALITIES = ("roi", "qsm", "t1")
FUSION_STRATEGIES = ("gated", "concat", "weighted_average")


@dataclass
class NetworkConfig:
    stem_width: int = 16
    stage_widths: tuple = (32, 64, 64)
    roi_channels: int = 10
    attn_groups: int = 1
    attn_eps: float = 1e-6
    cbam_reduction: int = 8
    cbam_spatial_kernel: int = 3
    bottleneck_groups: int = 2
    decision_dilations: tuple = (1, 2, 4)
    fusion: str = "gated"
    anchor: str = "roi"
    gate_init: float = 0.0

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.decision_dilations = tuple(int(d) for d in self.decision_dilations)
        self.validate()

    def validate(self):
        if len(self.stage_widths) < 1:
            raise ConfigError("at least one fusion stage is required")
        if self.attn_eps <= 0:
            raise ConfigError(f"attention eps must be positive, got {self.attn_eps}")
        if self.fusion not in FUSION_STRATEGIES:
            raise ConfigError(f"fusion must be one of {FUSION_STRATEGIES}, got {self.fusion!r}")
        if self.anchor not in MODALITIES:
            raise ConfigError(f"anchor must be one of {MODALITIES}, got {self.anchor!r}")
        for w in self.stage_widths:
            if w % self.cbam_reduction:
                raise ConfigError(
                    f"stage width {w} not divisible by CBAM reduction {self.cbam_reduction}"
                )
            if w % 2:
                raise ConfigError(f"stage width {w} must be even (bottlenecks halve it)")
            if (w // 2) % self.bottleneck_groups:
                raise ConfigError(
                    f"bottleneck mid width {w // 2} not divisible by groups {self.bottleneck_groups}"
                )
        for w in (self.stem_width,) + self.stage_widths:
            if w % self.attn_groups or (3 * w) % self.attn_groups:
                raise ConfigError(
                    f"fusion width {w} incompatible with attention groups {self.attn_groups}"
                )

    def in_channels(self, modality):
        if modality == "roi":
            return self.roi_channels
        return 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainPlan:
    epochs: int = 30
    batch_size: int = 2
    base_lr: float = 2e-4
    lr_floor: float = 1e-7
    weight_decay: float = 0.01
    folds: int = 5
    seed: int = 0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train plan keys: {sorted(unknown)}")
        return cls(**d)
