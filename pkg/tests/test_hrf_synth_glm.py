"""HRF library, synthetic data and single-trial GLM tests."""

from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from neurodecode.core.rng import Rng
from neurodecode.glm import (
    DesignMatrix,
    beta_recovery,
    fit_glmsingle,
    fractional_ridge,
    ols_solve,
    pca_components,
    repeat_prediction_error,
)
from neurodecode.hrf import HrfLibrary, double_gamma, legendre_basis, poly_degree
from neurodecode.schemas.config import GlmConfig, load_preset
from neurodecode.synth import (
    BetaRecord,
    SessionSchedule,
    Vocabulary,
    average_repeats,
    build_schedules,
    event_matrix,
    generate_dataset,
    split_dataset,
    split_indices,
    zscore_betas,
)
from neurodecode.utils.errors import ConfigError, DimensionError, SolverError


@pytest.mark.parametrize("peak", [4.0, 6.0, 8.0])
def test_double_gamma_peaks_at_requested_time(peak: float) -> None:
    """The sampled kernel has unit maximum at the peak time."""
    kernel = double_gamma(1.0, peak, 1 / 6)
    assert kernel.shape == (32,)
    assert kernel.max() == pytest.approx(1.0)
    assert int(np.argmax(kernel)) == int(peak)


def test_library_holds_twenty_kernels_and_convolves_impulses() -> None:
    """An impulse at t=0 convolves to the kernel itself."""
    library = HrfLibrary(1.0)
    assert len(library) == 20
    events = np.zeros((40, 1))
    events[0, 0] = 1.0
    out = library.convolve(7, events)
    assert np.allclose(out[:32, 0], library.kernels[7])
    assert np.allclose(out[32:, 0], 0.0)


def test_legendre_basis_is_orthonormal() -> None:
    """Drift regressors are orthonormal columns."""
    basis = legendre_basis(50, 3)
    assert np.allclose(basis.T @ basis, np.eye(4), atol=1e-12)
    with pytest.raises(ConfigError):
        legendre_basis(3, 3)


@pytest.mark.parametrize(("seconds", "degree"), [(60.0, 1), (300.0, 3), (7200.0, 4)])
def test_poly_degree_grows_with_duration(seconds: float, degree: int) -> None:
    """One extra drift term per two minutes, capped."""
    assert poly_degree(seconds) == degree


def test_ols_solve_recovers_coefficients_and_flags_rank_deficiency(rng: Rng) -> None:
    """Exact data gives exact coefficients; a duplicated column is reported."""
    A = rng.normal(size=(30, 4))
    coef = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.allclose(ols_solve(A, A @ coef), coef)
    with pytest.raises(SolverError) as info:
        ols_solve(np.hstack([A, A[:, :1]]), A @ coef)
    assert info.value.deficient_columns == 1


def test_pca_components_are_unit_norm_with_positive_pivot(rng: Rng) -> None:
    """Components are orthonormal and their largest entry is positive."""
    components = pca_components(rng.normal(size=(40, 6)), 3)
    assert np.allclose(components.T @ components, np.eye(3), atol=1e-10)
    pivots = components[np.argmax(np.abs(components), axis=0), np.arange(3)]
    assert np.all(pivots > 0)


def _two_session_design() -> DesignMatrix:
    schedules = [
        SessionSchedule(0, [(0, 0.0), (1, 6.0), (2, 12.0)], 1.0, 44.0),
        SessionSchedule(1, [(2, 0.0), (0, 6.0), (1, 12.0)], 1.0, 44.0),
    ]
    return DesignMatrix.from_schedules(schedules)


def test_design_matrix_layout() -> None:
    """Trials occupy one column each; drift blocks are session-local."""
    design = _two_session_design()
    assert design.X.shape == (88, 6)
    assert design.X.sum() == 6
    assert design.trial_stimulus.tolist() == [0, 1, 2, 2, 0, 1]
    assert design.has_repeats()
    assert np.all(design.P[:44, design.p_session == 1] == 0)
    shuffled = design.shuffled(Rng(3))
    assert sorted(shuffled.trial_stimulus) == sorted(design.trial_stimulus)


def test_glm_recovers_noise_free_betas(rng: Rng) -> None:
    """Noise-free BOLD with a known HRF gives the generating amplitudes back."""
    design = _two_session_design()
    hrfs = HrfLibrary(1.0)
    amplitudes = rng.normal(size=(3, 4)) + 2.0
    trial_amps = amplitudes[design.trial_stimulus]
    drift = design.P @ rng.normal(size=(design.P.shape[1], 4))
    bold = (design.convolved(hrfs, 5) @ trial_amps + drift).T
    cfg = GlmConfig(max_g=0, ridge_fractions=[0.0], use_ridge=False)

    fit = fit_glmsingle(bold, design, hrfs, cfg)

    assert fit.chosen_hrf.tolist() == [5, 5, 5, 5]
    assert np.allclose(fit.betas, trial_amps.T, atol=1e-8)
    assert np.all(fit.r2 > 0.999)
    assert np.allclose(fit.r2_final, fit.r2)
    assert {"r2_ols", "r2_final"} <= set(fit.sidecar())
    assert len(fit.folds) == 2
    assert all(fold.disjoint for fold in fit.folds)
    assert fit.noise_pool_skipped


def test_glm_needs_two_sessions(rng: Rng) -> None:
    """Leave-one-session-out needs more than one session."""
    from neurodecode.utils.errors import CrossValidationError

    design = DesignMatrix.from_schedules([SessionSchedule(0, [(0, 0.0)], 1.0, 40.0)])
    with pytest.raises(CrossValidationError):
        fit_glmsingle(rng.normal(size=(2, 40)), design, HrfLibrary(1.0), GlmConfig())


def test_schedules_put_repeats_in_distinct_sessions(micro_cfg) -> None:
    """Every stimulus appears ``repeats`` times, never twice in one session."""
    data = micro_cfg.dataset
    schedules = build_schedules(data, Rng(1), 32.0)
    assert len(schedules) == data.n_sessions
    counts = Counter(stim for s in schedules for stim in s.stimulus_ids)
    assert set(counts.values()) == {data.repeats}
    for schedule in schedules:
        assert len(set(schedule.stimulus_ids)) == len(schedule.stimulus_ids)
        gaps = np.diff([t for _, t in schedule.onsets])
        assert np.all(gaps == data.isi)
        assert event_matrix(schedule).sum() == len(schedule.onsets)


def test_generated_dataset_is_balanced_and_reproducible(micro_cfg) -> None:
    """Classes are balanced, pixels lie in [0, 1] and the seed fixes everything."""
    data = micro_cfg.dataset
    first = generate_dataset(data, Rng(4))
    second = generate_dataset(data, Rng(4))
    assert first.images.shape == (16, 3, 16, 16)
    assert first.images.min() >= 0.0
    assert first.images.max() <= 1.0
    assert set(Counter(first.labels.tolist()).values()) == {16 // data.n_classes}
    assert first.captions(data.caption_max_tokens).shape == (16, data.caption_max_tokens)
    for a, b in zip(first.subjects[0].bold, second.subjects[0].bold, strict=True):
        assert np.array_equal(a, b)
    assert first.subjects[0].bold[0].shape[0] == data.n_voxels


def test_vocabulary_round_trip() -> None:
    """Encoding then decoding a caption returns its words; unknown words map to UNK."""
    vocab = Vocabulary.default()
    ids = vocab.encode(["a", "red", "circle", "zebra"])
    assert ids[-1] == 1
    assert vocab.decode(ids)[:3] == ["a", "red", "circle"]
    assert Vocabulary.from_dict(vocab.to_dict()).tokens == vocab.tokens


def test_zscore_betas_standardizes_and_zeroes_flat_voxels(rng: Rng) -> None:
    """Each voxel has mean 0 and sd 1; constant voxels become 0."""
    records = [BetaRecord(np.append(rng.normal(size=3), 5.0), i, 0) for i in range(10)]
    normalized, report = zscore_betas(records)
    stacked = np.stack([r.beta for r in normalized])
    assert np.allclose(stacked[:, :3].mean(axis=0), 0.0)
    assert np.allclose(stacked[:, :3].std(axis=0), 1.0)
    assert np.all(stacked[:, 3] == 0.0)
    assert report.zero_variance_voxels == 1
    assert all(r.normalized for r in normalized)


def test_split_indices_floor_and_disjoint() -> None:
    """Test size is floored, sides are disjoint and sorted, and the seed fixes the split."""
    train, test = split_indices(200, 0.9, Rng(0).derive("split"))
    assert len(test) == 20
    assert len(train) == 180
    assert not set(train) & set(test)
    assert test == sorted(test)
    assert split_indices(200, 0.9, Rng(0).derive("split")) == (train, test)
    with pytest.raises(ConfigError):
        split_indices(5, 0.95, Rng(0))


def test_split_dataset_follows_split_indices() -> None:
    """Records land on the side their index was assigned to."""
    records = [BetaRecord(np.full(3, float(i)), i, 0) for i in range(16)]
    train, test = split_dataset(records, 0.75, Rng(4))
    _, test_ids = split_indices(16, 0.75, Rng(4))
    assert [r.stimulus_id for r in test] == test_ids
    assert len(train) == 12
    assert {r.stimulus_id for r in train} | set(test_ids) == set(range(16))


def test_fractional_ridge_scales_the_least_squares_norm(rng: Rng) -> None:
    """Each fraction removes that share of the OLS norm, column by column."""
    X = rng.derive("x").normal(size=(30, 5))
    Y = rng.derive("y").normal(size=(30, 4))
    fractions = [0.0, 0.1, 0.25, 0.5, 0.9]
    solutions = fractional_ridge(X, Y, fractions)
    assert solutions.shape == (5, 5, 4)
    assert np.allclose(solutions[0], np.linalg.lstsq(X, Y, rcond=None)[0], atol=1e-10)
    ols_norm = np.linalg.norm(solutions[0], axis=0)
    norms = np.linalg.norm(solutions, axis=1)
    for fraction, norm in zip(fractions, norms, strict=True):
        assert np.allclose(norm, (1.0 - fraction) * ols_norm, rtol=1e-6)
    assert np.all(np.diff(norms, axis=0) <= 0)


def test_repeat_prediction_error_compares_with_other_repeats() -> None:
    """Each trial is scored against the mean of its other repeats; singletons are skipped."""
    reference = np.array([[1.0], [3.0], [2.0], [2.0], [5.0]])
    stimulus = np.array([0, 0, 1, 1, 2])
    assert repeat_prediction_error(reference, reference, stimulus).tolist() == [8.0]
    shrunk = np.full((5, 1), 2.0)
    assert repeat_prediction_error(shrunk, reference, stimulus).tolist() == [2.0]


def test_glm_refit_r2_never_beats_least_squares(rng: Rng) -> None:
    """Shrunk betas with refit drift terms explain no more variance than OLS."""
    design = _two_session_design()
    hrfs = HrfLibrary(1.0)
    trial_amps = (rng.normal(size=(3, 6)) + 1.0)[design.trial_stimulus]
    signal = design.convolved(hrfs, 4) @ trial_amps
    bold = (signal + rng.derive("noise").normal(size=signal.shape)).T
    cfg = GlmConfig(max_g=0, ridge_fractions=[0.0, 0.3, 0.6, 0.9])

    fit = fit_glmsingle(bold, design, hrfs, cfg)

    assert np.all(fit.r2_final <= fit.r2 + 1e-10)
    assert np.allclose(fit.r2_final[fit.ridge_fraction == 0], fit.r2[fit.ridge_fraction == 0])


def test_beta_recovery_is_a_per_voxel_correlation(rng: Rng) -> None:
    """Affine copies correlate perfectly; constant voxels are undefined."""
    truth = np.column_stack([rng.normal(size=(10, 2)), np.full(10, 3.0)])
    estimated = 2.0 * truth + 1.0
    estimated[:, 1] = -truth[:, 1]
    recovery = beta_recovery(estimated, truth)
    assert recovery[0] == pytest.approx(1.0)
    assert recovery[1] == pytest.approx(-1.0)
    assert np.isnan(recovery[2])
    with pytest.raises(DimensionError):
        beta_recovery(estimated[:, :2], truth)


def _smoke_subject():
    data = load_preset("smoke").dataset
    return data, generate_dataset(data, Rng(0)).subjects[0]


@pytest.mark.slow
def test_glm_recovers_simulated_amplitudes_at_low_snr() -> None:
    """Repeat-averaged betas correlate at 0.95 or better with the truth in responsive voxels."""
    data, subject = _smoke_subject()
    design = DesignMatrix.from_schedules(subject.schedules)
    fit = fit_glmsingle(subject.concatenated_bold, design, HrfLibrary(data.tr), GlmConfig(max_g=4))
    records = average_repeats(fit.betas, fit.trial_stimulus.tolist(), 0)
    recovery = beta_recovery(np.stack([r.beta for r in records]), subject.true_amplitudes)
    responsive = subject.forward_model.responsive > 0
    assert np.median(recovery[responsive]) >= 0.95


@pytest.mark.slow
def test_shuffled_labels_do_not_cross_validate() -> None:
    """With permuted trial labels the median held-out R² is not positive."""
    data, subject = _smoke_subject()
    design = DesignMatrix.from_schedules(subject.schedules).shuffled(Rng(5))
    fit = fit_glmsingle(subject.concatenated_bold, design, HrfLibrary(data.tr), GlmConfig(max_g=4))
    assert np.median(fit.r2_cv) <= 0.0
