"""Training and evaluation report schemas."""

from __future__ import annotations

import math

from pydantic import BaseModel, Field


class Stage1Epoch(BaseModel):
    """Losses after one stage-1 epoch; epoch 0 holds the initial losses."""

    epoch: int = Field(..., ge=0)
    train_mse: float
    train_mae: float
    val_mse: float
    val_mae: float


class Stage1Report(BaseModel):
    """Stage-1 regressor training history."""

    kind: str
    param_count: int = Field(..., ge=0)
    rows: list[Stage1Epoch] = Field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = math.inf
    stopped_early: bool = False


class ComparisonRow(BaseModel):
    """One model's held-out errors in the stage-1 comparison table."""

    model: str
    val_mse: float
    val_mae: float
    test_mse: float
    test_mae: float
    param_count: int | None = None


class HvaeEpoch(BaseModel):
    """ELBO components averaged over one epoch."""

    epoch: int = Field(..., ge=1)
    loss: float
    recon: float
    kl: float
    active_layers: int = Field(..., ge=0)


class HvaeReport(BaseModel):
    """Hierarchical VAE training history."""

    rows: list[HvaeEpoch] = Field(default_factory=list)
    kl_collapse: bool = False
    warnings: list[str] = Field(default_factory=list)


class EmbedEpoch(BaseModel):
    """Contrastive loss and temperature after one epoch."""

    epoch: int = Field(..., ge=0)
    loss: float
    tau: float = Field(..., gt=0)


class RetrievalReport(BaseModel):
    """Top-1 image/text retrieval on a held-out gallery."""

    gallery_size: int = Field(..., ge=1)
    chance: float
    image_to_text_top1: float = Field(..., ge=0, le=1)
    text_to_image_top1: float = Field(..., ge=0, le=1)
    matched_beats_mismatched: float = Field(..., ge=0, le=1)


class EmbedReport(BaseModel):
    """Dual-encoder training history and retrieval scores."""

    rows: list[EmbedEpoch] = Field(default_factory=list)
    retrieval: RetrievalReport | None = None
    classifier_accuracy: float | None = None


class LossEpoch(BaseModel):
    """Train and validation loss after one epoch."""

    epoch: int = Field(..., ge=0)
    train_loss: float
    val_loss: float


class CodecReport(BaseModel):
    """Latent autoencoder training history."""

    rows: list[LossEpoch] = Field(default_factory=list)
    val_psnr: float | None = None
    latent_scale: float = 1.0


class DenoiserReport(BaseModel):
    """Denoiser training history against the zero-prediction baseline."""

    rows: list[LossEpoch] = Field(default_factory=list)
    baseline: float
    val_loss: float | None = None

    @property
    def ratio(self) -> float | None:
        """Return validation loss over the analytic baseline."""
        return None if self.val_loss is None else self.val_loss / self.baseline


class MetricReport(BaseModel):
    """Per-sample metric values plus their means.

    Every sample row carries the same keys: ``mse``, ``mae``, ``ssim``,
    ``pixcorr`` and one ``sdc_<extractor>`` per extractor. Two-way
    identification is a set-level score, so it lives in ``two_way`` only.
    """

    label: str
    samples: list[dict[str, float]] = Field(default_factory=list)
    two_way: dict[str, float] = Field(default_factory=dict)

    @property
    def aggregate(self) -> dict[str, float]:
        """Return the mean of every per-sample metric plus the two-way scores."""
        if not self.samples:
            return dict(self.two_way)
        keys = list(self.samples[0])
        count = len(self.samples)
        means = {key: math.fsum(row[key] for row in self.samples) / count for key in keys}
        means.update({f"two_way_{name}": value for name, value in self.two_way.items()})
        return means
