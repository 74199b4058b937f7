"""Stage-1 regressor tests."""

from __future__ import annotations

import numpy as np
import pytest

from neurodecode.core import functional as F
from neurodecode.core.gradcheck import grad_check_module
from neurodecode.core.rng import Rng
from neurodecode.core.nn import BatchNorm1d
from neurodecode.encoder import (
    benchmark_against_ridge,
    build_ablation_variant,
    build_regressor,
    make_linear_benchmark,
    make_nonlinear_benchmark,
    ridge_baseline,
    train_regressor,
)
from neurodecode.schemas.config import Stage1Config, load_preset
from neurodecode.utils.errors import ConfigError, DimensionError


def _small_cfg(**updates: object) -> Stage1Config:
    base = {
        "hidden": 4,
        "fc_hidden": 8,
        "dropout_p": 0.0,
        "attn_tokens": 2,
        "attn_heads": 1,
        "conv_channels": 2,
        "epochs": 30,
        "batch_size": 8,
        "lr": 1e-2,
        "patience": 30,
    }
    return Stage1Config(**{**base, **updates})


def test_full_size_parameter_count() -> None:
    """The full-size BiGRU regressor has exactly 12,400,344 parameters."""
    cfg = load_preset("paper-dims-shapes")
    model = build_regressor("gru", cfg.stage1, 15_724, cfg.hvae.latent_length, Rng(0))
    assert cfg.hvae.latent_length == 13_344
    assert model.param_count() == 12_400_344


@pytest.mark.parametrize("kind", ["gru", "conv", "transformer"])
def test_forward_shapes(kind: str, rng: Rng) -> None:
    """Every variant maps [N, V] to [N, L]; a bare vector is a batch of one."""
    model = build_regressor(kind, _small_cfg(chunks=3), 10, 32, rng)
    betas = rng.normal(size=(5, 10))
    assert model(betas).shape == (5, 32)
    assert model(betas[0]).shape == (1, 32)
    assert model.predict(betas).shape == (5, 32)


def test_rejects_bad_dimensions(rng: Rng) -> None:
    """Wrong beta length and non-multiple latent lengths are rejected."""
    model = build_regressor("gru", _small_cfg(), 10, 16, rng)
    with pytest.raises(DimensionError, match="10"):
        model(np.zeros((2, 9)))
    with pytest.raises(ConfigError):
        build_regressor("gru", _small_cfg(), 10, 15, rng)
    with pytest.raises(ConfigError):
        build_ablation_variant("gru", _small_cfg(), 10, 16, rng)


def test_regressor_gradients_match_finite_differences(rng: Rng) -> None:
    """Backward through BiGRU, LayerNorm, BatchNorm and the head is correct."""
    model = build_regressor("gru", _small_cfg(chunks=2), 6, 16, rng.derive("model"))
    x = rng.derive("x").normal(size=(4, 6))
    y = rng.derive("y").normal(size=(4, 16))
    report = grad_check_module(lambda: F.mse_loss(model(x), y), model, max_entries=6)
    assert report.passed, report.max_rel_error


def test_training_improves_validation_and_keeps_best_checkpoint(rng: Rng) -> None:
    """Row 0 holds pre-training losses; the best epoch beats it."""
    split = make_linear_benchmark(60, 10, 16, rng.derive("data"))
    model = build_regressor("gru", _small_cfg(), 10, 16, rng.derive("model"))
    report = train_regressor(model, split.train, split.val, _small_cfg(), rng.derive("train"))
    assert report.rows[0].epoch == 0
    assert report.best_val_mse < report.rows[0].val_mse
    assert not model.training
    pred = model.predict(split.x_val)
    assert float(np.mean((pred - split.y_val) ** 2)) == pytest.approx(report.best_val_mse)


def test_early_stopping_respects_patience(rng: Rng) -> None:
    """With patience 1 training stops at the first non-improving epoch."""
    split = make_nonlinear_benchmark(40, 6, 16, rng.derive("data"), noise=1.0)
    cfg = _small_cfg(epochs=50, patience=1, lr=0.05)
    model = build_regressor("gru", cfg, 6, 16, rng.derive("model"))
    report = train_regressor(model, split.train, split.val, cfg, rng.derive("train"))
    if report.stopped_early:
        assert report.rows[-1].val_mse >= report.best_val_mse
    assert len(report.rows) <= cfg.epochs + 1


def test_ridge_baseline_solves_noise_free_linear_task(rng: Rng) -> None:
    """Closed-form ridge with a tiny penalty nails a noise-free linear map."""
    split = make_linear_benchmark(200, 8, 16, rng)
    mse, mae = ridge_baseline(split.train, split.test, alpha=1e-8)
    assert mse < 1e-10
    assert mae < 1e-5


def test_training_is_reproducible() -> None:
    """Same seeds give identical weights after training."""
    split = make_linear_benchmark(30, 5, 16, Rng(2))
    cfg = _small_cfg(epochs=3, dropout_p=0.3)
    states = []
    for _ in range(2):
        model = build_regressor("gru", cfg, 5, 16, Rng(3).derive("model"))
        train_regressor(model, split.train, split.val, cfg, Rng(3).derive("train"))
        states.append(model.state_dict())
    assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])


def test_training_never_normalizes_a_single_row(
    rng: Rng, monkeypatch: pytest.MonkeyPatch
) -> None:
    """With 17 training rows and batch 8 the last row joins the previous batch."""
    sizes: list[int] = []
    forward = BatchNorm1d.forward

    def recording(self: BatchNorm1d, x: object) -> object:
        if self.training:
            sizes.append(np.shape(getattr(x, "data", x))[0])
        return forward(self, x)

    monkeypatch.setattr(BatchNorm1d, "forward", recording)
    split = make_linear_benchmark(40, 6, 16, rng.derive("data"))
    x_train, y_train = split.x_train[:17], split.y_train[:17]
    model = build_regressor("gru", _small_cfg(), 6, 16, rng.derive("model"))
    train_regressor(model, (x_train, y_train), split.val, _small_cfg(epochs=2), rng)
    assert sizes
    assert 1 not in sizes
    assert sorted(set(sizes)) == [8, 9]


@pytest.mark.slow
def test_gru_matches_or_beats_ridge_on_nonlinear_maps() -> None:
    """On a tanh target map the GRU's test MSE is at most ridge's in four of five seeds."""
    cfg = Stage1Config(
        hidden=16,
        fc_hidden=64,
        dropout_p=0.0,
        epochs=200,
        batch_size=32,
        lr=3e-3,
        patience=40,
    )
    results = [benchmark_against_ridge(seed, cfg) for seed in range(5)]
    wins = sum(gru <= ridge for gru, ridge in results)
    assert wins >= 4, results
