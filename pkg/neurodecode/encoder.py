"""Stage-1 regressors mapping beta vectors to HVAE latents."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from neurodecode import ridge
from neurodecode.core import functional as F
from neurodecode.core.nn import (
    GRU,
    BatchNorm1d,
    Conv1d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    MultiheadAttention,
)
from neurodecode.core.optim import Adam, minibatches
from neurodecode.core.rng import Rng
from neurodecode.core.tensor import Tensor, as_tensor, no_grad
from neurodecode.schemas.config import LATENT_WIDTH, Stage1Config
from neurodecode.schemas.reports import Stage1Epoch, Stage1Report
from neurodecode.utils.errors import ConfigError, DimensionError, NumericError

logger = logging.getLogger(__name__)

NEURAL_KINDS = ("gru", "conv", "transformer")
ABLATION_KINDS = ("conv", "transformer")


class GruRegressor(Module):
    """BiGRU stack with a fully connected head.

    Layer order: BiGRU, LayerNorm, Dropout, [variant block], BiGRU,
    LayerNorm, Linear, BatchNorm, ReLU, Dropout, Linear. The ``gru`` kind has
    no variant block; ``conv`` adds two Conv1d+ReLU+MaxPool layers and
    ``transformer`` adds one self-attention block with residual LayerNorms.

    The beta vector is read as a sequence of ``chunks`` equal-width steps,
    zero-padded at the end; the default single chunk gives a length-1
    sequence of width ``input_len``.
    """

    def __init__(
        self,
        input_len: int,
        output_len: int,
        cfg: Stage1Config,
        rng: Rng,
        kind: str = "gru",
    ) -> None:
        super().__init__()
        if kind not in NEURAL_KINDS:
            raise ConfigError(f"unknown stage-1 network kind {kind!r}; choose from {NEURAL_KINDS}")
        if output_len % LATENT_WIDTH:
            raise ConfigError(f"output_len {output_len} must be divisible by {LATENT_WIDTH}")
        hidden = cfg.hidden
        width = 2 * hidden
        self.kind = kind
        self.input_len = input_len
        self.output_len = output_len
        self.chunks = cfg.chunks
        self.step_width = math.ceil(input_len / cfg.chunks)

        self.gru1 = GRU(self.step_width, hidden, rng.derive("gru1"))
        self.norm1 = LayerNorm(width)
        self.drop1 = Dropout(cfg.dropout_p, rng.derive("drop1"))
        second_input = width
        if kind == "conv":
            flat = self.chunks * width
            if flat < 4:
                raise ConfigError("conv variant needs at least 4 features after the first BiGRU")
            channels = cfg.conv_channels
            self.conv_a = Conv1d(1, channels, 3, rng.derive("conv_a"), padding=1)
            self.conv_b = Conv1d(channels, channels, 3, rng.derive("conv_b"), padding=1)
            second_input = channels
        elif kind == "transformer":
            self.tokens = cfg.attn_tokens
            token_width = width // cfg.attn_tokens
            self.attention = MultiheadAttention(token_width, cfg.attn_heads, rng.derive("attn"))
            self.attn_norm = LayerNorm(token_width)
            self.ffn_in = Linear(token_width, 2 * token_width, rng.derive("ffn_in"))
            self.ffn_out = Linear(2 * token_width, token_width, rng.derive("ffn_out"))
            self.ffn_norm = LayerNorm(token_width)
        self.gru2 = GRU(second_input, hidden, rng.derive("gru2"))
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, cfg.fc_hidden, rng.derive("fc1"))
        self.bn = BatchNorm1d(cfg.fc_hidden)
        self.drop2 = Dropout(cfg.dropout_p, rng.derive("drop2"))
        self.fc2 = Linear(cfg.fc_hidden, output_len, rng.derive("fc2"))

    def _to_sequence(self, x: Tensor) -> Tensor:
        batch = x.shape[0]
        padding = self.chunks * self.step_width - self.input_len
        if padding:
            zeros = Tensor(np.zeros((batch, padding), dtype=x.data.dtype))
            x = F.concat([x, zeros], axis=1)
        return F.reshape(x, (batch, self.chunks, self.step_width))

    def _conv_block(self, h: Tensor) -> Tensor:
        batch, steps, width = h.shape
        h = F.reshape(h, (batch, 1, steps * width))
        h = F.max_pool1d(F.relu(self.conv_a(h)), 2)
        h = F.max_pool1d(F.relu(self.conv_b(h)), 2)
        return F.transpose(h, (0, 2, 1))

    def _attention_block(self, h: Tensor) -> Tensor:
        batch, steps, width = h.shape
        tokens = F.reshape(h, (batch, steps * self.tokens, width // self.tokens))
        tokens = self.attn_norm(F.add(tokens, self.attention(tokens)))
        ffn = self.ffn_out(F.relu(self.ffn_in(tokens)))
        tokens = self.ffn_norm(F.add(tokens, ffn))
        return F.reshape(tokens, (batch, steps, width))

    def forward(self, beta: Tensor | np.ndarray) -> Tensor:
        """Map ``beta[N, input_len]`` (or one ``[input_len]`` vector) to latents."""
        x = as_tensor(beta)
        if x.ndim == 1:
            x = F.reshape(x, (1, x.shape[0]))
        if x.ndim != 2 or x.shape[1] != self.input_len:
            raise DimensionError(
                f"stage-1 regressor expects beta length {self.input_len}, got shape {x.shape}"
            )
        h = self.drop1(self.norm1(self.gru1(self._to_sequence(x))))
        if self.kind == "conv":
            h = self._conv_block(h)
        elif self.kind == "transformer":
            h = self._attention_block(h)
        h = self.norm2(self.gru2(h))
        pooled = F.mean(h, axis=1)
        hidden = self.drop2(F.relu(self.bn(self.fc1(pooled))))
        return self.fc2(hidden)

    def predict(self, betas: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode prediction for ``betas[N, input_len]`` without recording gradients."""
        self.eval()
        betas = np.atleast_2d(betas)
        outputs = []
        with no_grad():
            for start in range(0, betas.shape[0], batch_size):
                outputs.append(self(betas[start : start + batch_size]).data)
        return np.concatenate(outputs, axis=0)


def build_regressor(
    kind: str, cfg: Stage1Config, input_len: int, output_len: int, rng: Rng
) -> GruRegressor:
    """Return a fresh stage-1 network of the given kind."""
    return GruRegressor(input_len, output_len, cfg, rng, kind=kind)


def build_ablation_variant(
    kind: str, cfg: Stage1Config, input_len: int, output_len: int, rng: Rng
) -> GruRegressor:
    """Return the ``conv`` or ``transformer`` comparison network."""
    if kind not in ABLATION_KINDS:
        raise ConfigError(f"unknown ablation variant {kind!r}; choose from {ABLATION_KINDS}")
    return build_regressor(kind, cfg, input_len, output_len, rng)


def param_count(model: Module) -> int:
    """Return the number of trainable scalars in ``model``."""
    return model.param_count()


@dataclass
class RegressionSplit:
    """Train/validation/test arrays of a synthetic regression task."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the training pair."""
        return self.x_train, self.y_train

    @property
    def val(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the validation pair."""
        return self.x_val, self.y_val

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the test pair."""
        return self.x_test, self.y_test


def _split(
    x: np.ndarray, y: np.ndarray, rng: Rng, val_fraction: float, test_fraction: float
) -> RegressionSplit:
    n = x.shape[0]
    order = rng.derive("split").permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    n_val = max(1, int(round(val_fraction * n)))
    test, val, train = order[:n_test], order[n_test : n_test + n_val], order[n_test + n_val :]
    if train.size == 0:
        raise ConfigError(f"benchmark of {n} samples leaves no training rows")
    return RegressionSplit(x[train], y[train], x[val], y[val], x[test], y[test])


def make_linear_benchmark(
    n_samples: int,
    input_len: int,
    output_len: int,
    rng: Rng,
    noise: float = 0.0,
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
) -> RegressionSplit:
    """Rank-1 linear task ``y = (x·a) b + noise``."""
    x = rng.derive("x").normal(size=(n_samples, input_len))
    a = rng.derive("a").normal(size=input_len) / math.sqrt(input_len)
    b = rng.derive("b").normal(size=output_len)
    y = np.outer(x @ a, b)
    if noise > 0:
        y = y + rng.derive("noise").normal(size=y.shape, scale=noise)
    return _split(x, y, rng, val_fraction, test_fraction)


def make_nonlinear_benchmark(
    n_samples: int,
    input_len: int,
    output_len: int,
    rng: Rng,
    hidden: int = 8,
    gain: float = 2.0,
    noise: float = 0.0,
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
) -> RegressionSplit:
    """Two-layer tanh target map ``y = tanh(gain · x W1) W2 + noise``."""
    x = rng.derive("x").normal(size=(n_samples, input_len))
    w1 = rng.derive("w1").normal(size=(input_len, hidden)) / math.sqrt(input_len)
    w2 = rng.derive("w2").normal(size=(hidden, output_len)) / math.sqrt(hidden)
    y = np.tanh(gain * (x @ w1)) @ w2
    if noise > 0:
        y = y + rng.derive("noise").normal(size=y.shape, scale=noise)
    return _split(x, y, rng, val_fraction, test_fraction)


def _errors(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    diff = pred - target
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def evaluate_regressor(
    model: GruRegressor, x: np.ndarray, y: np.ndarray, batch_size: int = 256
) -> tuple[float, float]:
    """Return eval-mode (MSE, MAE) of ``model`` on ``(x, y)``."""
    return _errors(model.predict(x, batch_size=batch_size), y)


def _epoch_row(
    model: GruRegressor,
    epoch: int,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
) -> Stage1Epoch:
    train_mse, train_mae = evaluate_regressor(model, *train)
    val_mse, val_mae = evaluate_regressor(model, *val)
    return Stage1Epoch(
        epoch=epoch, train_mse=train_mse, train_mae=train_mae, val_mse=val_mse, val_mae=val_mae
    )


def train_regressor(
    model: GruRegressor,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    cfg: Stage1Config,
    rng: Rng,
) -> Stage1Report:
    """Minimize MSE with Adam and early stopping on validation MSE.

    Row 0 of the report holds the losses before any update. The model is left
    in eval mode holding the best-validation checkpoint.
    """
    x_train, y_train = (np.asarray(a, dtype=np.float64) for a in train)
    x_val, y_val = (np.asarray(a, dtype=np.float64) for a in val)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ConfigError("stage-1 training needs non-empty train and validation sets")
    if y_train.shape[1] != model.output_len:
        raise DimensionError(
            f"targets have length {y_train.shape[1]}, model emits {model.output_len}"
        )
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    report = Stage1Report(kind=model.kind, param_count=model.param_count())
    first = _epoch_row(model, 0, (x_train, y_train), (x_val, y_val))
    report.rows.append(first)
    best_state = model.state_dict()
    report.best_val_mse = first.val_mse
    stale = 0
    n = x_train.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        model.reseed(rng.derive("dropout", epoch))
        order = rng.derive("epoch", epoch).permutation(n)
        for batch_index, rows in enumerate(minibatches(order, cfg.batch_size)):
            optimizer.zero_grad()
            try:
                loss = F.mse_loss(model(x_train[rows]), y_train[rows])
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                raise NumericError(
                    f"{model.kind} regressor diverged at epoch {epoch} batch {batch_index} "
                    f"(lr {cfg.lr}): {exc.message}"
                ) from exc
        row = _epoch_row(model, epoch, (x_train, y_train), (x_val, y_val))
        report.rows.append(row)
        logger.info(
            "stage1 %s epoch %s train_mse=%.5f val_mse=%.5f",
            model.kind,
            epoch,
            row.train_mse,
            row.val_mse,
        )
        if row.val_mse < report.best_val_mse:
            report.best_val_mse = row.val_mse
            report.best_epoch = epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stopped_early = True
                logger.info("stage1 %s early stop at epoch %s", model.kind, epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return report


def ridge_baseline(
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    alpha: float,
) -> tuple[float, float]:
    """Fit closed-form ridge on ``train`` and return its (MSE, MAE) on ``test``."""
    model = ridge.fit(train[0], train[1], alpha)
    return _errors(model.predict_matrix(test[0]), np.asarray(test[1], dtype=np.float64))


def benchmark_against_ridge(
    seed: int,
    cfg: Stage1Config,
    n_samples: int = 1500,
    input_len: int = 8,
    output_len: int = 16,
    noise: float = 0.05,
    alpha: float = 1.0,
) -> tuple[float, float]:
    """Return test MSE of the GRU regressor and of ridge on one nonlinear task draw."""
    rng = Rng(seed)
    split = make_nonlinear_benchmark(
        n_samples, input_len, output_len, rng.derive("data"), noise=noise
    )
    model = build_regressor("gru", cfg, input_len, output_len, rng.derive("init"))
    train_regressor(model, split.train, split.val, cfg, rng.derive("train"))
    gru_mse, _ = evaluate_regressor(model, *split.test)
    ridge_mse, _ = ridge_baseline(split.train, split.test, alpha)
    logger.info("seed %s: GRU test MSE %.5f, ridge test MSE %.5f", seed, gru_mse, ridge_mse)
    return gru_mse, ridge_mse
