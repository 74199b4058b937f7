"""Single-trial beta estimation: HRF fitting, noise regressors and fractional ridge."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import qr, solve_triangular, svd

from neurodecode.core.rng import Rng
from neurodecode.hrf import HrfLibrary, block_diagonal_drift, poly_degree
from neurodecode.schemas.config import GlmConfig
from neurodecode.synth import SessionSchedule
from neurodecode.utils.errors import CrossValidationError, DimensionError, SolverError
from neurodecode.utils.parallel import parallel_map

logger = logging.getLogger(__name__)

_BISECTION_STEPS = 80
_LOG_ALPHA_RANGE = (-40.0, 40.0)


@dataclass
class DesignMatrix:
    """Trial indicators, drift regressors and (after Step 2) noise regressors."""

    X: np.ndarray
    P: np.ndarray
    G: np.ndarray
    row_session: np.ndarray
    trial_session: np.ndarray
    trial_stimulus: np.ndarray
    p_session: np.ndarray

    @classmethod
    def from_schedules(
        cls, schedules: list[SessionSchedule], degree: int | None = None
    ) -> DesignMatrix:
        """Lay sessions end to end with block-diagonal drift terms."""
        lengths = [s.n_timepoints for s in schedules]
        degrees = [poly_degree(s.duration) if degree is None else degree for s in schedules]
        n_trials = sum(len(s.onsets) for s in schedules)
        X = np.zeros((sum(lengths), n_trials))
        row_session = np.repeat(np.arange(len(schedules)), lengths)
        trial_session = np.zeros(n_trials, dtype=np.int64)
        trial_stimulus = np.zeros(n_trials, dtype=np.int64)
        row = col = 0
        for index, schedule in enumerate(schedules):
            rows = schedule.onset_rows()
            X[row + rows, col + np.arange(rows.size)] = 1.0
            trial_session[col : col + rows.size] = index
            trial_stimulus[col : col + rows.size] = schedule.stimulus_ids
            row += lengths[index]
            col += rows.size
        P = block_diagonal_drift(lengths, degrees)
        p_session = np.repeat(np.arange(len(schedules)), [d + 1 for d in degrees])
        return cls(
            X=X,
            P=P,
            G=np.zeros((X.shape[0], 0)),
            row_session=row_session,
            trial_session=trial_session,
            trial_stimulus=trial_stimulus,
            p_session=p_session,
        )

    @property
    def n_timepoints(self) -> int:
        """Return T."""
        return self.X.shape[0]

    @property
    def n_trials(self) -> int:
        """Return S."""
        return self.X.shape[1]

    @property
    def sessions(self) -> np.ndarray:
        """Return the distinct session indices."""
        return np.unique(self.row_session)

    def convolved(self, hrfs: HrfLibrary, index: int) -> np.ndarray:
        """Return ``kX`` for HRF ``index``, convolving within each session only."""
        out = np.zeros_like(self.X)
        for session in self.sessions:
            rows = self.row_session == session
            out[rows] = hrfs.convolve(index, self.X[rows])
        return out

    def condition_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (condition ids, ``[S, C]`` trial-to-condition indicator)."""
        conditions, inverse = np.unique(self.trial_stimulus, return_inverse=True)
        mapping = np.zeros((self.n_trials, conditions.size))
        mapping[np.arange(self.n_trials), inverse] = 1.0
        return conditions, mapping

    def has_repeats(self) -> bool:
        """Return True when some stimulus is shown more than once."""
        _, counts = np.unique(self.trial_stimulus, return_counts=True)
        return bool(np.any(counts > 1))

    def with_noise_regressors(self, G: np.ndarray) -> DesignMatrix:
        """Return a copy carrying noise regressors ``G``."""
        return replace(self, G=G)

    def shuffled(self, rng: Rng) -> DesignMatrix:
        """Return a copy whose trial-to-stimulus labels are randomly permuted."""
        return replace(self, trial_stimulus=self.trial_stimulus[rng.permutation(self.n_trials)])


@dataclass
class FoldRecord:
    """Bookkeeping for one leave-one-session-out fold."""

    held_out_session: int
    train_rows: np.ndarray
    test_rows: np.ndarray

    @property
    def disjoint(self) -> bool:
        """Return True when no timepoint is on both sides."""
        return np.intersect1d(self.train_rows, self.test_rows).size == 0


@dataclass
class GlmFit:
    """Result of the three-step beta estimation."""

    betas: np.ndarray
    chosen_hrf: np.ndarray
    u: np.ndarray
    v: np.ndarray
    r2: np.ndarray
    r2_final: np.ndarray
    r2_cv: np.ndarray
    ridge_fraction: np.ndarray
    noise_pool: np.ndarray
    n_components: int
    noise_regressors: np.ndarray
    trial_stimulus: np.ndarray
    trial_session: np.ndarray
    noise_pool_skipped: bool = False
    skip_reason: str = ""
    component_scores: list[float] = field(default_factory=list)
    folds: list[FoldRecord] = field(default_factory=list)

    def sidecar(self) -> dict:
        """Return the JSON sidecar payload."""
        return {
            "chosen_hrf": self.chosen_hrf.tolist(),
            "r2_ols": self.r2.tolist(),
            "r2_final": self.r2_final.tolist(),
            "r2_cv": self.r2_cv.tolist(),
            "ridge_fraction": self.ridge_fraction.tolist(),
            "noise_pool_size": int(self.noise_pool.sum()),
            "n_components": self.n_components,
            "component_scores": self.component_scores,
            "noise_pool_skipped": self.noise_pool_skipped,
            "skip_reason": self.skip_reason,
            "trial_stimulus": self.trial_stimulus.tolist(),
            "trial_session": self.trial_session.tolist(),
            "folds": [
                {
                    "held_out_session": f.held_out_session,
                    "train_rows": int(f.train_rows.size),
                    "test_rows": int(f.test_rows.size),
                }
                for f in self.folds
            ],
        }


def ols_solve(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares coefficients via column-pivoted QR.

    ``y`` may be a vector or a ``[T, k]`` matrix of right-hand sides.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if A.ndim != 2 or y.shape[0] != A.shape[0]:
        raise DimensionError(f"ols_solve shape mismatch: A {A.shape} vs y {y.shape}")
    rows, cols = A.shape
    if cols == 0:
        return np.zeros((0,) + y.shape[1:])
    q, r, piv = qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(rows, cols) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < cols:
        raise SolverError(
            f"design is rank deficient: {cols - rank} of {cols} columns are dependent",
            deficient_columns=cols - rank,
        )
    solved = solve_triangular(r, q.T @ y)
    out = np.empty_like(solved)
    out[piv] = solved
    return out


def pca_components(Xn: np.ndarray, n: int) -> np.ndarray:
    """Return the top-``n`` unit-norm temporal components of column-centred ``Xn``."""
    Xn = np.asarray(Xn, dtype=np.float64)
    if n < 0 or n > min(Xn.shape):
        raise DimensionError(f"cannot take {n} components from a {Xn.shape} matrix")
    if n == 0:
        return np.zeros((Xn.shape[0], 0))
    centered = Xn - Xn.mean(axis=0, keepdims=True)
    u, _, _ = svd(centered, full_matrices=False)
    components = u[:, :n]
    pivot = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pivot, np.arange(n)])
    return components * np.where(signs == 0, 1.0, signs)


def _orthonormal(columns: np.ndarray) -> np.ndarray:
    if columns.shape[1] == 0:
        return columns
    q, r = qr(columns, mode="economic")
    keep = np.abs(np.diag(r)) > 1e-10 * max(1.0, float(np.abs(r).max()))
    return q[:, keep]


def _project_out(basis: np.ndarray, data: np.ndarray) -> np.ndarray:
    if basis.shape[1] == 0:
        return data
    return data - basis @ (basis.T @ data)


def _r2(Y: np.ndarray, fitted: np.ndarray) -> np.ndarray:
    residual = Y - fitted
    centered = Y - Y.mean(axis=0, keepdims=True)
    total = np.sum(centered**2, axis=0)
    ss_res = np.sum(residual**2, axis=0)
    scale = np.sum(Y**2, axis=0)
    return np.where(total > 1e-20 * scale, 1.0 - ss_res / np.where(total > 0, total, 1.0), 0.0)


def _in_sample_r2(A: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return _r2(Y, A @ ols_solve(A, Y))


def _select_hrfs(
    kx: dict[int, np.ndarray], nuisance: np.ndarray, Y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Return the per-voxel HRF index maximizing in-sample R² and that R²."""
    r2_by_hrf = np.stack(
        parallel_map(lambda h: _in_sample_r2(np.hstack([kx[h], nuisance]), Y), sorted(kx))
    )
    chosen = np.argmax(r2_by_hrf, axis=0)
    return chosen, r2_by_hrf[chosen, np.arange(Y.shape[1])]


def cross_validated_r2(
    bold: np.ndarray,
    design: DesignMatrix,
    kx: dict[int, np.ndarray],
    chosen: np.ndarray,
) -> tuple[np.ndarray, list[FoldRecord]]:
    """Leave-one-session-out R² of condition-level predictions.

    Each fold trains on the other sessions and predicts the held-out one; the
    held-out session's drift and noise regressors are projected out of both
    the data and the prediction before scoring.
    """
    sessions = design.sessions
    if sessions.size < 2:
        raise CrossValidationError(
            f"cross-validation needs at least 2 sessions; got {sessions.size}"
        )
    _, mapping = design.condition_map()
    n_voxels = bold.shape[0]
    ss_res = np.zeros(n_voxels)
    ss_tot = np.zeros(n_voxels)
    ss_raw = np.zeros(n_voxels)
    folds: list[FoldRecord] = []
    conditions = {h: kx[h] @ mapping for h in np.unique(chosen)}
    for session in sessions:
        test = design.row_session == session
        train = ~test
        fold = FoldRecord(int(session), np.flatnonzero(train), np.flatnonzero(test))
        if not fold.disjoint:
            raise CrossValidationError(f"fold {session} shares timepoints between sides")
        folds.append(fold)
        nuisance = np.hstack(
            [design.P[test][:, design.p_session == session], design.G[test]]
        )
        basis = _orthonormal(nuisance)
        for h, cond in conditions.items():
            voxels = chosen == h
            A_train = np.hstack([cond[train], design.P[train], design.G[train]])
            keep = ~np.all(A_train == 0, axis=0)
            coef = ols_solve(A_train[:, keep], bold[voxels][:, train].T)
            cond_keep = keep[: cond.shape[1]]
            prediction = cond[test][:, cond_keep] @ coef[: int(cond_keep.sum())]
            observed = bold[voxels][:, test].T
            resid_obs = _project_out(basis, observed)
            resid_pred = _project_out(basis, prediction)
            ss_res[voxels] += np.sum((resid_obs - resid_pred) ** 2, axis=0)
            ss_tot[voxels] += np.sum(resid_obs**2, axis=0)
            ss_raw[voxels] += np.sum(observed**2, axis=0)
    usable = ss_tot > 1e-20 * np.maximum(ss_raw, np.finfo(np.float64).tiny)
    r2 = np.where(usable, 1.0 - ss_res / np.where(usable, ss_tot, 1.0), 0.0)
    return r2, folds


def _noise_components(
    bold: np.ndarray, design: DesignMatrix, pool: np.ndarray, max_g: int
) -> np.ndarray:
    series = _project_out(design.P, bold[pool].T)
    norms = np.linalg.norm(series, axis=0)
    series = series[:, norms > 1e-12] / norms[norms > 1e-12]
    count = min(max_g, *series.shape) if series.size else 0
    return pca_components(series, count)


def fractional_ridge(X: np.ndarray, Y: np.ndarray, fractions: list[float]) -> np.ndarray:
    """Return ``[F, S, V]`` ridge solutions whose norms are ``(1 − f)`` of the OLS norm.

    Each fraction ``f`` is met per column of ``Y`` by bisection on ``log α``
    in the SVD basis of ``X``; ``f = 0`` is the least-squares solution.
    """
    u, s, vt = svd(X, full_matrices=False)
    keep = s > s[0] * 1e-12
    u, s, vt = u[:, keep], s[keep], vt[keep]
    uty = u.T @ Y
    ols_norm = np.sqrt(np.sum((uty / s[:, None]) ** 2, axis=0))
    candidates = []
    for fraction in fractions:
        if fraction == 0:
            gain = np.repeat((1.0 / s)[:, None], Y.shape[1], axis=1)
        else:
            target = (1.0 - fraction) * ols_norm
            lo = np.full(Y.shape[1], _LOG_ALPHA_RANGE[0])
            hi = np.full(Y.shape[1], _LOG_ALPHA_RANGE[1])
            for _ in range(_BISECTION_STEPS):
                mid = 0.5 * (lo + hi)
                alpha = s[0] ** 2 * np.exp(mid)
                norm = np.sqrt(np.sum((s[:, None] / (s[:, None] ** 2 + alpha) * uty) ** 2, 0))
                too_big = norm > target
                lo = np.where(too_big, mid, lo)
                hi = np.where(too_big, hi, mid)
            alpha = s[0] ** 2 * np.exp(0.5 * (lo + hi))
            gain = s[:, None] / (s[:, None] ** 2 + alpha)
        candidates.append(vt.T @ (gain * uty))
    return np.stack(candidates)


def repeat_prediction_error(
    betas: np.ndarray, reference: np.ndarray, trial_stimulus: np.ndarray
) -> np.ndarray:
    """Per-voxel squared error of each trial against the mean of its other repeats.

    ``reference`` holds unshrunk estimates, so the other repeats are an
    unbiased target and the error tracks distance to the true betas.
    """
    error = np.zeros(betas.shape[1])
    for stim in np.unique(trial_stimulus):
        trials = np.flatnonzero(trial_stimulus == stim)
        if trials.size < 2:
            continue
        group = reference[trials]
        others = (group.sum(axis=0, keepdims=True) - group) / (trials.size - 1)
        error += np.sum((betas[trials] - others) ** 2, axis=0)
    return error


def _ridge_group(
    kx: np.ndarray,
    nuisance: np.ndarray,
    Y: np.ndarray,
    fractions: list[float],
    trial_stimulus: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    basis = _orthonormal(nuisance)
    Xr = _project_out(basis, kx)
    Yr = _project_out(basis, Y)
    candidates = fractional_ridge(Xr, Yr, [0.0, *fractions])
    ols, candidates = candidates[0], candidates[1:]
    errors = np.stack([repeat_prediction_error(b, ols, trial_stimulus) for b in candidates])
    best = np.argmin(errors, axis=0)
    betas = candidates[best, :, np.arange(Y.shape[1])].T
    return betas, np.asarray(fractions)[best]


def fit_glmsingle(
    bold: np.ndarray, design: DesignMatrix, hrfs: HrfLibrary, cfg: GlmConfig
) -> GlmFit:
    """Estimate single-trial betas for every voxel of ``bold[V, T]``.

    Step 1 picks the best library HRF per voxel by in-sample R². Step 2 builds
    a noise pool from voxels with negative cross-validated R², derives PCA
    noise regressors, picks their count by cross-validation and re-selects
    the HRF with them in the model, then refits jointly. Step 3 applies
    per-voxel fractional ridge, keeping the fraction whose trial betas best
    predict the unshrunk betas of the other repeats.
    """
    bold = np.asarray(bold, dtype=np.float64)
    if bold.ndim != 2 or bold.shape[1] != design.n_timepoints:
        raise DimensionError(
            f"bold shape {bold.shape} does not match design with {design.n_timepoints} timepoints"
        )
    if design.sessions.size < 2:
        raise CrossValidationError(
            f"cross-validation needs at least 2 sessions; got {design.sessions.size}"
        )
    n_voxels = bold.shape[0]
    Y = bold.T

    kx = dict(enumerate(parallel_map(lambda h: design.convolved(hrfs, h), range(len(hrfs)))))
    chosen, r2 = _select_hrfs(kx, design.P, Y)
    logger.info(
        "GLM step 1: %s distinct HRFs chosen over %s voxels", np.unique(chosen).size, n_voxels
    )

    r2_cv, folds = cross_validated_r2(bold, design, kx, chosen)
    pool = r2_cv < 0
    skipped, reason, scores = False, "", [float(np.median(r2_cv))]
    components = np.zeros((design.n_timepoints, 0))
    if not design.has_repeats():
        skipped, reason = True, "no stimulus repeats across sessions"
    elif not pool.any():
        skipped, reason = True, "noise pool is empty"
    if skipped:
        logger.warning("GLM step 2 skipped: %s", reason)
    else:
        candidates = _noise_components(bold, design, pool, cfg.max_g)
        signal = ~pool if (~pool).any() else np.ones(n_voxels, dtype=bool)
        scores = [float(np.median(r2_cv[signal]))]
        per_count = [r2_cv]
        for n in range(1, candidates.shape[1] + 1):
            trial = design.with_noise_regressors(candidates[:, :n])
            r2_n, _ = cross_validated_r2(bold, trial, kx, chosen)
            scores.append(float(np.median(r2_n[signal])))
            per_count.append(r2_n)
        best = int(np.argmax(scores))
        components = candidates[:, :best]
        r2_cv = per_count[best]
        logger.info(
            "GLM step 2: noise pool %s voxels, %s components selected", int(pool.sum()), best
        )
    design = design.with_noise_regressors(components)
    if components.shape[1]:
        chosen, r2 = _select_hrfs(kx, np.hstack([design.P, components]), Y)
        logger.info(
            "GLM step 2: HRF choice refined with %s noise regressors", components.shape[1]
        )

    n_trials, n_poly = design.n_trials, design.P.shape[1]
    betas = np.zeros((n_voxels, n_trials))
    u = np.zeros((n_voxels, n_poly))
    v = np.zeros((n_voxels, components.shape[1]))
    fractions = np.zeros(n_voxels)
    r2_final = np.zeros(n_voxels)
    use_ridge = cfg.use_ridge and design.has_repeats() and any(f > 0 for f in cfg.ridge_fractions)
    nuisance = np.hstack([design.P, design.G])
    for h in np.unique(chosen):
        voxels = chosen == h
        coef = ols_solve(np.hstack([kx[h], nuisance]), Y[:, voxels])
        betas[voxels] = coef[:n_trials].T
        u[voxels] = coef[n_trials : n_trials + n_poly].T
        v[voxels] = coef[n_trials + n_poly :].T
        if use_ridge:
            shrunk, chosen_fraction = _ridge_group(
                kx[h], nuisance, Y[:, voxels], cfg.ridge_fractions, design.trial_stimulus
            )
            betas[voxels] = shrunk.T
            fractions[voxels] = chosen_fraction
            nuisance_coef = ols_solve(nuisance, Y[:, voxels] - kx[h] @ shrunk)
            u[voxels] = nuisance_coef[:n_poly].T
            v[voxels] = nuisance_coef[n_poly:].T
        fitted = kx[h] @ betas[voxels].T + nuisance @ np.vstack([u[voxels].T, v[voxels].T])
        r2_final[voxels] = _r2(Y[:, voxels], fitted)
    if not np.all(np.isfinite(betas)):
        raise SolverError("GLM produced non-finite betas")
    return GlmFit(
        betas=betas,
        chosen_hrf=chosen.astype(np.int64),
        u=u,
        v=v,
        r2=r2,
        r2_final=r2_final,
        r2_cv=np.minimum(r2_cv, 1.0),
        ridge_fraction=fractions,
        noise_pool=pool,
        n_components=int(components.shape[1]),
        noise_regressors=components,
        trial_stimulus=design.trial_stimulus.copy(),
        trial_session=design.trial_session.copy(),
        noise_pool_skipped=skipped,
        skip_reason=reason,
        component_scores=scores,
        folds=folds,
    )


def beta_recovery(estimated: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-voxel Pearson r between ``[N, V]`` estimates and ground truth.

    Voxels whose truth or estimate is constant get NaN.
    """
    estimated = np.asarray(estimated, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimated.shape != truth.shape or estimated.ndim != 2:
        raise DimensionError(f"beta_recovery needs matching [N, V]; got {estimated.shape}")
    a = estimated - estimated.mean(axis=0)
    b = truth - truth.mean(axis=0)
    denom = np.sqrt(np.sum(a**2, axis=0) * np.sum(b**2, axis=0))
    flat = denom <= 1e-12 * np.maximum(np.sum(b**2, axis=0), 1.0)
    return np.where(flat, np.nan, np.sum(a * b, axis=0) / np.where(flat, 1.0, denom))
