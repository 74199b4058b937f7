"""Experiment configuration schemas and named presets."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, ValidationError, model_validator

from neurodecode.utils.errors import ConfigError

LATENT_WIDTH = 16
PAPER_LAYER_RESOLUTIONS = [1] * 2 + [4] * 4 + [8] * 8 + [16] * 16 + [32]
DEFAULT_AMPLITUDES = [0, 8, 16, 32, 64, 256]
Stage1Kind = Literal["gru", "conv", "transformer", "ridge"]
ConditioningMode = Literal["vision+text", "vision", "text", "none"]


class DatasetConfig(BaseModel):
    """Synthetic stimulus set, schedule and voxel forward model."""

    n_stimuli: int = Field(200, ge=1)
    n_voxels: int = Field(500, ge=1)
    n_subjects: int = Field(1, ge=1)
    image_size: int = Field(64, ge=8)
    n_classes: int = Field(16, ge=1, le=32)
    n_sessions: int = Field(4, ge=1)
    repeats: int = Field(1, ge=1)
    tr: float = Field(1.0, gt=0)
    isi: float = Field(4.0, gt=0)
    max_session_duration: float = Field(7200.0, gt=0)
    snr: float = Field(0.5, gt=0)
    noise_sd: float | None = Field(None, ge=0)
    structured_noise_fraction: float = Field(0.98, ge=0, le=1)
    structured_sources: int = Field(3, ge=1)
    responsive_fraction: float = Field(0.8, gt=0, le=1)
    drift_scale: float = Field(0.5, ge=0)
    amplitude_offset: float = 1.0
    feature_grid: int = Field(4, ge=1)
    hrf_index: int | None = Field(None, ge=0, lt=20)
    split_fraction: float = Field(0.9, gt=0, lt=1)
    caption_max_tokens: int = Field(12, ge=4)


class GlmConfig(BaseModel):
    """Single-trial beta estimation."""

    max_g: int = Field(5, ge=0)
    poly_degree: int | None = Field(None, ge=0, le=4)
    ridge_fractions: list[float] = Field(
        default_factory=lambda: [round(0.05 * i, 2) for i in range(20)]
    )
    use_ridge: bool = True

    @model_validator(mode="after")
    def _check_fractions(self) -> GlmConfig:
        if not self.ridge_fractions or any(not 0 <= f < 1 for f in self.ridge_fractions):
            raise ValueError("ridge_fractions must be non-empty values in [0, 1)")
        return self


class HvaeConfig(BaseModel):
    """Toy hierarchical VAE."""

    layer_resolutions: list[int] = Field(default_factory=lambda: [1, 1, 2, 2, 4, 4, 8, 8])
    injected_layers: int = Field(4, ge=0)
    latent_width: int = LATENT_WIDTH
    channels: int = Field(16, ge=1)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    free_bits: float = Field(0.05, ge=0)
    sigma_x: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _check_layers(self) -> HvaeConfig:
        if not self.layer_resolutions:
            raise ValueError("layer_resolutions must name at least one layer")
        if self.latent_width != LATENT_WIDTH:
            raise ValueError(f"latent_width is fixed at {LATENT_WIDTH}")
        if self.injected_layers > len(self.layer_resolutions):
            raise ValueError(
                f"injected_layers {self.injected_layers} exceeds layer count "
                f"{len(self.layer_resolutions)}"
            )
        resolutions = self.layer_resolutions
        if any(b < a for a, b in zip(resolutions, resolutions[1:], strict=False)):
            raise ValueError("layer_resolutions must be non-decreasing top-down")
        return self

    @property
    def layer_count(self) -> int:
        """Return the number of top-down layers."""
        return len(self.layer_resolutions)

    def slots(self, layers: int | None = None) -> int:
        """Return the number of latent slots in the first ``layers`` layers."""
        count = self.injected_layers if layers is None else layers
        return sum(r * r for r in self.layer_resolutions[:count])

    @property
    def latent_length(self) -> int:
        """Return the length of the injected LatentVector."""
        return self.slots() * self.latent_width


class Stage1Config(BaseModel):
    """Beta to latent regressor and its training loop."""

    kind: Stage1Kind = "gru"
    hidden: int = Field(32, ge=1)
    fc_hidden: int = Field(64, ge=1)
    dropout_p: float = Field(0.5, ge=0, lt=1)
    chunks: int = Field(1, ge=1)
    conv_channels: int = Field(4, ge=1)
    attn_heads: int = Field(2, ge=1)
    attn_tokens: int = Field(4, ge=1)
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    patience: int = Field(20, ge=1)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    ridge_alpha: float = Field(1.0, ge=0)
    compare: bool = False

    @model_validator(mode="after")
    def _check_attention(self) -> Stage1Config:
        width = 2 * self.hidden
        if width % self.attn_tokens:
            raise ValueError(f"2*hidden={width} must be divisible by attn_tokens")
        if (width // self.attn_tokens) % self.attn_heads:
            raise ValueError("token width must be divisible by attn_heads")
        return self


class EmbedConfig(BaseModel):
    """Dual encoder and the metric classifier."""

    dim: int = Field(64, ge=2)
    grid: int = Field(4, ge=1)
    max_tokens: int = Field(12, ge=1)
    channels: int = Field(16, ge=1)
    epochs: int = Field(60, ge=0)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(1e-3, gt=0)
    tau_init: float = Field(1.0, gt=0)
    divergence_patience: int = Field(20, ge=1)
    classifier_epochs: int = Field(30, ge=0)

    @property
    def rows_v(self) -> int:
        """Return vision rows: one pooled token plus the grid tokens."""
        return 1 + self.grid * self.grid

    @property
    def rows_t(self) -> int:
        """Return text rows: one pooled token plus one per token position."""
        return 1 + self.max_tokens


class RidgeEmbedConfig(BaseModel):
    """Beta to embedding ridge regressors."""

    alpha: float = Field(50_000.0, ge=0)


class DiffusionConfig(BaseModel):
    """Latent codec, denoiser and sampling."""

    steps: int = Field(100, ge=2)
    beta_start: float = Field(1e-4, gt=0)
    beta_end: float = Field(0.02, gt=0)
    reference_steps: int = Field(1000, ge=1)
    latent_channels: int = Field(4, ge=1)
    codec_downsample: int = Field(2, ge=1)
    codec_channels: int = Field(16, ge=1)
    codec_epochs: int = Field(40, ge=0)
    codec_lr: float = Field(3e-3, gt=0)
    channels: int = Field(32, ge=1)
    time_dim: int = Field(32, ge=2)
    epochs: int = Field(60, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    conditioning: ConditioningMode = "vision+text"
    mechanism: Literal["film", "cross_attention"] = "film"
    strength: float = Field(0.3, gt=0, le=1)
    zero_init_out: bool = False

    @model_validator(mode="after")
    def _check_schedule(self) -> DiffusionConfig:
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if not self.beta_start < self.beta_end:
            raise ValueError("beta_start must be below beta_end")
        return self


class MetricConfig(BaseModel):
    """Evaluation suite."""

    ssim_window: int = Field(7, ge=1)
    ssim_kernel: Literal["uniform", "gaussian"] = "uniform"
    ssim_sigma: float = Field(1.5, gt=0)
    k1: float = Field(0.01, gt=0)
    k2: float = Field(0.03, gt=0)
    bits: int = Field(8, ge=1, le=16)
    extractors: list[str] = Field(
        default_factory=lambda: ["contrastive", "classifier_shallow", "classifier_deep", "random"]
    )
    random_projection_dim: int = Field(64, ge=1)


class SweepConfig(BaseModel):
    """Noise-sensitivity sweep."""

    amplitudes: list[int] = Field(default_factory=lambda: list(DEFAULT_AMPLITUDES))
    allow_arbitrary: bool = False

    @model_validator(mode="after")
    def _check_amplitudes(self) -> SweepConfig:
        if not self.allow_arbitrary:
            unknown = sorted(set(self.amplitudes) - set(DEFAULT_AMPLITUDES))
            if unknown:
                raise ValueError(
                    f"amplitudes {unknown} not in {DEFAULT_AMPLITUDES}; set allow_arbitrary"
                )
        return self


class ExperimentConfig(BaseModel):
    """Everything a run needs; echoed into every artifact it writes."""

    name: str = "smoke"
    seed: int = Field(0, ge=0, lt=2**64)
    subject: int = Field(0, ge=0)
    shapes_only: bool = False
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    glm: GlmConfig = Field(default_factory=GlmConfig)
    hvae: HvaeConfig = Field(default_factory=HvaeConfig)
    stage1: Stage1Config = Field(default_factory=Stage1Config)
    embed: EmbedConfig = Field(default_factory=EmbedConfig)
    ridge_embed: RidgeEmbedConfig = Field(default_factory=RidgeEmbedConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _check_cross_fields(self) -> ExperimentConfig:
        data = self.dataset
        if self.subject >= data.n_subjects:
            raise ValueError(f"subject {self.subject} outside 0..{data.n_subjects - 1}")
        if data.isi < data.tr:
            raise ValueError(f"isi {data.isi}s is below one TR ({data.tr}s)")
        if data.repeats > data.n_sessions:
            raise ValueError("repeats must not exceed n_sessions (one repeat per session)")
        if data.n_voxels < 10 or data.n_stimuli < 2:
            raise ValueError("experiments need at least 10 voxels and 2 stimuli")
        size = data.image_size
        if size % data.feature_grid:
            raise ValueError("image_size must be divisible by dataset.feature_grid")
        if size % max(self.hvae.layer_resolutions):
            raise ValueError("image_size must be a multiple of the finest HVAE resolution")
        if size % self.diffusion.codec_downsample:
            raise ValueError("image_size must be divisible by codec_downsample")
        latent = size // self.diffusion.codec_downsample
        if latent % 2:
            raise ValueError("codec latent maps must have even size for the denoiser")
        if size % self.embed.grid:
            raise ValueError("image_size must be divisible by embed.grid")
        return self

    @property
    def n_test(self) -> int:
        """Return the test-set size under the floor rounding rule."""
        return split_test_count(self.dataset.n_stimuli, self.dataset.split_fraction)


def split_test_count(total: int, fraction: float) -> int:
    """Return floor((1 - fraction) * total), guarding the binary-float product."""
    return int((1.0 - fraction) * total + 1e-9)


def _micro() -> dict:
    return {
        "name": "micro",
        "dataset": {
            "n_stimuli": 16,
            "n_voxels": 24,
            "image_size": 16,
            "n_classes": 4,
            "n_sessions": 2,
            "repeats": 2,
            "feature_grid": 2,
            "caption_max_tokens": 8,
            "split_fraction": 0.75,
        },
        "glm": {"max_g": 2, "ridge_fractions": [0.0, 0.25, 0.5]},
        "hvae": {
            "layer_resolutions": [1, 2, 4],
            "injected_layers": 2,
            "channels": 4,
            "epochs": 2,
            "batch_size": 8,
        },
        "stage1": {
            "hidden": 4,
            "fc_hidden": 8,
            "conv_channels": 2,
            "attn_heads": 1,
            "attn_tokens": 2,
            "epochs": 3,
            "batch_size": 4,
            "patience": 2,
            "val_fraction": 0.25,
        },
        "embed": {
            "dim": 8,
            "grid": 2,
            "max_tokens": 8,
            "channels": 4,
            "epochs": 2,
            "batch_size": 8,
            "classifier_epochs": 2,
        },
        "ridge_embed": {"alpha": 10.0},
        "diffusion": {
            "steps": 50,
            "latent_channels": 2,
            "codec_channels": 4,
            "codec_epochs": 20,
            "channels": 8,
            "time_dim": 8,
            "epochs": 2,
            "batch_size": 8,
        },
        "metrics": {"ssim_window": 3, "random_projection_dim": 8},
    }


def _smoke() -> dict:
    return {
        "name": "smoke",
        "dataset": {
            "n_stimuli": 64,
            "n_voxels": 200,
            "image_size": 32,
            "n_classes": 8,
            "n_sessions": 4,
            "repeats": 3,
        },
        "glm": {"max_g": 4},
        "hvae": {"channels": 16, "epochs": 20},
        "stage1": {"hidden": 16, "fc_hidden": 32, "epochs": 60},
        "embed": {"dim": 32, "grid": 4, "epochs": 40, "classifier_epochs": 20},
        "ridge_embed": {"alpha": 100.0},
        "diffusion": {"codec_epochs": 150, "epochs": 40},
    }


def _desk() -> dict:
    return {
        "name": "desk",
        "dataset": {
            "n_stimuli": 200,
            "n_voxels": 500,
            "image_size": 64,
            "n_sessions": 4,
            "repeats": 2,
        },
        "ridge_embed": {"alpha": 1000.0},
        "diffusion": {"codec_downsample": 4},
    }


def _paper_dims() -> dict:
    return {
        "name": "paper-dims-shapes",
        "shapes_only": True,
        "dataset": {
            "n_stimuli": 9841,
            "n_voxels": 15_724,
            "image_size": 64,
            "n_classes": 32,
            "caption_max_tokens": 76,
        },
        "hvae": {"layer_resolutions": PAPER_LAYER_RESOLUTIONS, "injected_layers": 15},
        "stage1": {"hidden": 100, "fc_hidden": 200, "dropout_p": 0.5, "attn_tokens": 4},
        "embed": {"dim": 768, "grid": 16, "max_tokens": 76},
        "ridge_embed": {"alpha": 50_000.0},
    }


PRESETS = {
    "micro": _micro,
    "smoke": _smoke,
    "desk": _desk,
    "paper-dims-shapes": _paper_dims,
}


def _build(payload: dict, source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first.get("loc", ()))
        raise ConfigError(f"invalid config from {source}: {location} {first['msg']}") from exc


def load_preset(name: str) -> ExperimentConfig:
    """Return the named preset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return _build(PRESETS[name](), f"preset {name}")


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a JSON config file."""
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"config file {file} does not exist")
    try:
        payload = json.loads(file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {file} is not valid JSON: {exc}") from exc
    return _build(payload, str(file))


def with_overrides(config: ExperimentConfig, **updates: object) -> ExperimentConfig:
    """Return a re-validated copy with top-level fields replaced."""
    payload = config.model_dump(mode="json")
    payload.update({key: value for key, value in updates.items() if value is not None})
    return _build(payload, "overrides")
