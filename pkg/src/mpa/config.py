"""Experiment configuration (JSON-backed dataclasses)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dmp import AdaptConfig, LossWeights
from .encoder import EncoderConfig
from .hpa import DEFAULT_LADDER, AugConfig, SchedulerConfig
from .proto_seg import SSPConfig
from .synthbench import DomainSpec, preset_domains


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configs."""


@dataclass
class EncoderSection:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    strides: list[int] = field(default_factory=lambda: [1, 2, 2, 1])


@dataclass
class HPASection:
    ladder: list[str] = field(default_factory=lambda: list(DEFAULT_LADDER))
    n_max: int = 6
    delta: float = 1e-4
    patience: int = 3
    brightness_range: float = 0.3
    hue_range: float = 30.0
    grid_cells: list[int] = field(default_factory=lambda: [2, 3, 4])
    aug_mode: str = "cumulative"


@dataclass
class DMPSection:
    lambda_bs: float = 0.2
    lambda_seq: float = 0.1
    lambda_s_par: float = 0.4
    lambda_q_par: float = 1.0
    lr: float = 5e-4
    epochs: int = 200
    temperature: float = 20.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    ssp_fg_threshold: float = 0.7
    ssp_bg_threshold: float = 0.3
    ssp_gating: str = "soft"
    ssp_guide_weight: float = 0.0
    metric: str = "neg_loss"


@dataclass
class AblationSection:
    hpa_on: bool = True
    dmp_sequential_on: bool = True
    dmp_parallel_on: bool = True
    view_mode: str = "progressive"  # "progressive" | "single" | "fixed"
    fixed_n: int = 1


@dataclass
class ExperimentConfig:
    domains: list[str] = field(default_factory=lambda: ["lesion-like"])
    custom_domains: list[dict] = field(default_factory=list)
    image_size: int = 32
    k_shot: int = 1
    episodes: int = 20
    n_eval: int = 5
    n_categories: int = 5
    episode_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_view_draws: int = 4
    encoder: EncoderSection = field(default_factory=EncoderSection)
    hpa: HPASection = field(default_factory=HPASection)
    dmp: DMPSection = field(default_factory=DMPSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    output_dir: str = "runs/default"
    workers: int = 1
    precision: int = 32

    def validate(self) -> "ExperimentConfig":
        if self.episodes < 1:
            raise ConfigError("at least one episode is required")
        if self.k_shot < 1 or self.n_eval < 1 or not self.seeds:
            raise ConfigError("k_shot, n_eval and seeds must be non-empty/positive")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.eval_view_draws < 0:
            raise ConfigError("eval_view_draws must be >= 0 (0 skips the difficulty tables)")
        known = {d.name for d in self.domain_specs(check=False)}
        for name in self.domains:
            if name not in known:
                raise ConfigError(f"unknown domain preset {name!r}")
        try:
            self.adapt_config(0)
            self.encoder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def domain_specs(self, check: bool = True) -> list[DomainSpec]:
        specs = preset_domains(self.image_size)
        try:
            specs += [DomainSpec.from_dict({"size": self.image_size, **d}) for d in self.custom_domains]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad custom domain: {exc}") from exc
        if not check:
            return specs
        by_name = {s.name: s for s in specs}
        return [by_name[n] for n in self.domains]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            widths=tuple(self.encoder.widths),
            strides=tuple(self.encoder.strides),
            dtype="float32" if self.precision == 32 else "float64",
        )

    def adapt_config(self, seed: int) -> AdaptConfig:
        h, d, a = self.hpa, self.dmp, self.ablation
        aug = AugConfig(tuple(h.ladder), h.brightness_range, h.hue_range, tuple(h.grid_cells), h.aug_mode)
        view_mode, fixed_n = a.view_mode, a.fixed_n
        if not a.hpa_on:
            # no progressive augmentation: one fixed, simply augmented view
            aug = replace(aug, mode="simple")
            view_mode, fixed_n = "fixed", 1
        sched = SchedulerConfig(n_max=h.n_max, patience=h.patience, delta=h.delta, fixed_n=fixed_n)
        return AdaptConfig(
            max_epochs=d.epochs,
            lr=d.lr,
            optimizer=d.optimizer,
            momentum=d.momentum,
            temperature=d.temperature,
            weights=LossWeights(d.lambda_bs, d.lambda_seq, d.lambda_s_par, d.lambda_q_par),
            ssp=SSPConfig(d.ssp_fg_threshold, d.ssp_bg_threshold, d.ssp_gating, d.ssp_guide_weight),
            aug=aug,
            scheduler=sched,
            view_mode=view_mode,
            sequential_on=a.dmp_sequential_on,
            parallel_on=a.dmp_parallel_on,
            metric=d.metric,
            dtype="float32" if self.precision == 32 else "float64",
            seed=seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sections = {"encoder": EncoderSection, "hpa": HPASection, "dmp": DMPSection, "ablation": AblationSection}
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, value in d.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if key in sections:
                sub = sections[key]
                sub_names = {f.name for f in fields(sub)}
                bad = set(value) - sub_names
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                value = sub(**value)
            kwargs[key] = value
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(raw)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
