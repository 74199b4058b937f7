"""Image/text dual encoder trained with a symmetric contrastive objective."""

from __future__ import annotations

import logging
import math

import numpy as np

from neurodecode.core import functional as F
from neurodecode.core.nn import Conv2d, Embedding, Linear, Module, Parameter
from neurodecode.core.optim import Adam, minibatches
from neurodecode.core.rng import Rng
from neurodecode.core.tensor import Tensor, as_tensor, no_grad
from neurodecode.schemas.config import EmbedConfig
from neurodecode.schemas.reports import EmbedEpoch, EmbedReport, RetrievalReport
from neurodecode.synth import Vocabulary
from neurodecode.utils.errors import ConfigError, DimensionError, NumericError

logger = logging.getLogger(__name__)

LOG_TAU_RANGE = (math.log(0.01), math.log(100.0))


def contrastive_loss(z_img: Tensor, z_txt: Tensor, tau: float | Tensor) -> Tensor:
    """Symmetric cross-entropy over cosine-similarity logits divided by ``tau``.

    Row ``i`` of each batch is the positive for row ``i`` of the other; the
    image→text and text→image losses are averaged. Rows are L2-normalized
    here, which is a no-op for already normalized input.
    """
    z_img, z_txt = as_tensor(z_img), as_tensor(z_txt)
    if z_img.ndim != 2 or z_img.shape != z_txt.shape:
        raise DimensionError(
            f"contrastive_loss expects matching [N, d], got {z_img.shape}, {z_txt.shape}"
        )
    n = z_img.shape[0]
    if n < 2:
        raise ConfigError("contrastive_loss needs at least 2 pairs so that negatives exist")
    img = F.l2_normalize(z_img, axis=-1)
    txt = F.l2_normalize(z_txt, axis=-1)
    logits = F.div(F.matmul(img, F.transpose(txt, (1, 0))), tau)
    labels = np.arange(n)
    forward = F.cross_entropy(logits, labels)
    backward = F.cross_entropy(F.transpose(logits, (1, 0)), labels)
    return F.mul(F.add(forward, backward), 0.5)


class DualEncoder(Module):
    """Conv image tower and token text tower sharing an embedding width.

    The image tower emits ``1 + grid²`` rows: a pooled row followed by one
    row per grid cell. The text tower emits ``1 + max_tokens`` rows: a masked
    mean row followed by one row per token position. Every row is unit norm.
    """

    def __init__(self, cfg: EmbedConfig, image_size: int, vocab_size: int, rng: Rng) -> None:
        super().__init__()
        if image_size % cfg.grid:
            raise ConfigError(f"image size {image_size} not divisible by grid {cfg.grid}")
        self.cfg = cfg
        self.image_size = image_size
        channels = cfg.channels
        self.conv_a = Conv2d(3, channels, 3, rng.derive("conv_a"), padding=1)
        self.conv_b = Conv2d(channels, channels, 3, rng.derive("conv_b"), padding=1)
        self.image_proj = Linear(channels, cfg.dim, rng.derive("image_proj"))
        self.image_head = Linear(cfg.dim, cfg.dim, rng.derive("image_head"))
        self.token_table = Embedding(vocab_size, cfg.dim, rng.derive("tokens"))
        self.position_table = Embedding(cfg.max_tokens, cfg.dim, rng.derive("positions"))
        self.text_proj = Linear(cfg.dim, cfg.dim, rng.derive("text_proj"))
        self.text_head = Linear(cfg.dim, cfg.dim, rng.derive("text_head"))
        self.log_tau = Parameter(np.array(math.log(cfg.tau_init)))
        self.trained = False

    @property
    def tau(self) -> float:
        """Return the current temperature."""
        return float(np.exp(self.log_tau.data))

    def image_rows(self, images: np.ndarray | Tensor) -> Tensor:
        """Return unnormalized ``[N, rows_v, d]`` image rows."""
        x = as_tensor(images)
        if x.ndim != 4 or x.shape[1:] != (3, self.image_size, self.image_size):
            raise DimensionError(f"image tower expects [N, 3, S, S] images, got {x.shape}")
        h = F.relu(self.conv_a(x))
        h = F.relu(self.conv_b(h))
        h = F.avg_pool2d(h, self.image_size // self.cfg.grid)
        batch, channels = h.shape[:2]
        cells = F.transpose(F.reshape(h, (batch, channels, -1)), (0, 2, 1))
        tokens = self.image_proj(cells)
        pooled = self.image_head(F.mean(tokens, axis=1, keepdims=True))
        return F.concat([pooled, tokens], axis=1)

    def text_rows(self, captions: np.ndarray) -> Tensor:
        """Return unnormalized ``[N, rows_t, d]`` text rows for padded token ids."""
        ids = np.asarray(captions, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.cfg.max_tokens:
            raise DimensionError(
                f"text tower expects [N, {self.cfg.max_tokens}] token ids, got {ids.shape}"
            )
        positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        h = F.tanh(F.add(self.token_table(ids), self.position_table(positions)))
        tokens = self.text_proj(h)
        mask = (ids != 0).astype(np.float64)[..., None]
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        pooled = self.text_head(F.div(F.sum(F.mul(tokens, mask), axis=1, keepdims=True), counts))
        return F.concat([pooled, tokens], axis=1)

    def pooled_image(self, images: np.ndarray | Tensor) -> Tensor:
        """Return the pooled image row ``[N, d]``."""
        return self.image_rows(images)[:, 0]

    def pooled_text(self, captions: np.ndarray) -> Tensor:
        """Return the pooled text row ``[N, d]``."""
        return self.text_rows(captions)[:, 0]

    def loss(self, images: np.ndarray, captions: np.ndarray) -> Tensor:
        """Contrastive loss of a batch at the learned temperature."""
        return contrastive_loss(
            self.pooled_image(images), self.pooled_text(captions), F.exp(self.log_tau)
        )


def embed_image(model: DualEncoder, images: np.ndarray) -> np.ndarray:
    """Return row-normalized vision embeddings ``[N, rows_v, d]`` (or ``[rows_v, d]``)."""
    single = np.ndim(images) == 3
    batch = np.asarray(images)[None] if single else np.asarray(images)
    model.eval()
    with no_grad():
        rows = F.l2_normalize(model.image_rows(batch), axis=-1).data
    return rows[0] if single else rows


def embed_text(model: DualEncoder, captions: np.ndarray) -> np.ndarray:
    """Return row-normalized text embeddings ``[N, rows_t, d]`` (or ``[rows_t, d]``)."""
    single = np.ndim(captions) == 1
    batch = np.asarray(captions)[None] if single else np.asarray(captions)
    model.eval()
    with no_grad():
        rows = F.l2_normalize(model.text_rows(batch), axis=-1).data
    return rows[0] if single else rows


def embed_caption(model: DualEncoder, vocabulary: Vocabulary, words: list[str]) -> np.ndarray:
    """Embed a caption given as words; unknown words map to the reserved ``<unk>`` id."""
    ids = np.zeros(model.cfg.max_tokens, dtype=np.int64)
    encoded = vocabulary.encode(words)[: model.cfg.max_tokens]
    ids[: encoded.size] = encoded
    return embed_text(model, ids)


def retrieval_report(
    model: DualEncoder, images: np.ndarray, captions: np.ndarray
) -> RetrievalReport:
    """Score top-1 retrieval in both directions over a held-out gallery."""
    img = embed_image(model, images)[:, 0]
    txt = embed_text(model, captions)[:, 0]
    sims = img @ txt.T
    n = sims.shape[0]
    truth = np.arange(n)
    diagonal = np.diag(sims)
    off = ~np.eye(n, dtype=bool)
    beats = (diagonal[:, None] > sims)[off]
    return RetrievalReport(
        gallery_size=n,
        chance=1.0 / n,
        image_to_text_top1=float(np.mean(sims.argmax(axis=1) == truth)),
        text_to_image_top1=float(np.mean(sims.argmax(axis=0) == truth)),
        matched_beats_mismatched=float(beats.mean()) if beats.size else 1.0,
    )


def train_dual_encoder(
    model: DualEncoder,
    images: np.ndarray,
    captions: np.ndarray,
    cfg: EmbedConfig,
    rng: Rng,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> EmbedReport:
    """Train both towers and the temperature; report held-out retrieval.

    Training aborts with :class:`NumericError` when the epoch loss is still
    above ``ln(batch)`` once ``divergence_patience`` epochs have passed.
    """
    n = images.shape[0]
    batch_size = min(cfg.batch_size, n)
    if batch_size < 2:
        raise ConfigError("dual-encoder training needs at least 2 pairs")
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    report = EmbedReport()
    with no_grad():
        initial = model.loss(images[:batch_size], captions[:batch_size]).item()
    report.rows.append(EmbedEpoch(epoch=0, loss=initial, tau=model.tau))
    chance_loss = math.log(batch_size)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.derive("epoch", epoch).permutation(n)
        losses = []
        for batch_index, rows in enumerate(minibatches(order, batch_size)):
            if rows.size < 2:
                continue
            optimizer.zero_grad()
            try:
                loss = model.loss(images[rows], captions[rows])
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                raise NumericError(
                    f"train_dual_encoder diverged at epoch {epoch} batch {batch_index} "
                    f"(lr {cfg.lr}, tau {model.tau:.4f}): {exc.message}"
                ) from exc
            model.log_tau.data = np.clip(model.log_tau.data, *LOG_TAU_RANGE)
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        report.rows.append(EmbedEpoch(epoch=epoch, loss=mean_loss, tau=model.tau))
        logger.info("embed epoch %s loss=%.4f tau=%.4f", epoch, mean_loss, model.tau)
        if epoch >= cfg.divergence_patience and mean_loss > chance_loss:
            raise NumericError(
                f"train_dual_encoder diverged: loss {mean_loss:.4f} above ln(batch)="
                f"{chance_loss:.4f} after {epoch} epochs (lr {cfg.lr}, tau {model.tau:.4f})"
            )
    model.trained = True
    model.eval()
    if val is not None and val[0].shape[0] >= 1:
        report.retrieval = retrieval_report(model, *val)
        logger.info(
            "embed retrieval top1 image->text %.3f (chance %.3f)",
            report.retrieval.image_to_text_top1,
            report.retrieval.chance,
        )
    logger.info("train_dual_encoder completed for %s epochs on %s pairs", cfg.epochs, n)
    return report


class SemanticClassifier(Module):
    """Small conv classifier over semantic labels; its activations are metric taps."""

    TAPS = ("shallow", "deep")

    def __init__(self, image_size: int, n_classes: int, channels: int, rng: Rng) -> None:
        super().__init__()
        if image_size % 4:
            raise ConfigError(f"classifier needs an image size divisible by 4, got {image_size}")
        self.conv_a = Conv2d(3, channels, 3, rng.derive("conv_a"), padding=1)
        self.conv_b = Conv2d(channels, 2 * channels, 3, rng.derive("conv_b"), padding=1)
        self.head = Linear(2 * channels, n_classes, rng.derive("head"))

    def _taps(self, images: np.ndarray | Tensor) -> tuple[Tensor, Tensor]:
        shallow = F.avg_pool2d(F.relu(self.conv_a(images)), 2)
        deep = F.avg_pool2d(F.relu(self.conv_b(shallow)), 2)
        return shallow, deep

    def forward(self, images: np.ndarray | Tensor) -> Tensor:
        """Return class logits."""
        _, deep = self._taps(images)
        return self.head(F.mean(deep, axis=(2, 3)))

    def features(self, images: np.ndarray, tap: str) -> np.ndarray:
        """Return flattened activations at ``tap`` for ``images[N, 3, S, S]``."""
        if tap not in self.TAPS:
            raise ConfigError(f"unknown classifier tap {tap!r}; choose from {self.TAPS}")
        self.eval()
        with no_grad():
            shallow, deep = self._taps(images)
        chosen = shallow if tap == "shallow" else deep
        return chosen.data.reshape(chosen.shape[0], -1)


def train_classifier(
    model: SemanticClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: EmbedConfig,
    rng: Rng,
) -> float:
    """Train with cross-entropy and return training-set accuracy."""
    n = images.shape[0]
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    model.train()
    for epoch in range(1, cfg.classifier_epochs + 1):
        order = rng.derive("epoch", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            loss = F.cross_entropy(model(images[rows]), labels[rows])
            loss.backward()
            optimizer.step()
    model.eval()
    with no_grad():
        predicted = model(images).data.argmax(axis=1)
    accuracy = float(np.mean(predicted == labels))
    logger.info("classifier trained for %s epochs, accuracy %.3f", cfg.classifier_epochs, accuracy)
    return accuracy
