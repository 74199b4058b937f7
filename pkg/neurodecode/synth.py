"""Synthetic stimuli, voxel forward model and BOLD generation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.ndimage import gaussian_filter1d

from neurodecode.core.rng import Rng
from neurodecode.hrf import HrfLibrary, legendre_basis, poly_degree
from neurodecode.schemas.config import DatasetConfig, split_test_count
from neurodecode.utils.errors import ConfigError
from neurodecode.utils.parallel import parallel_map

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "bar", "star")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("left", "center", "right")
SIZES = ("small", "large")
TEXTURES = ("stripes", "checker", "gradient", "noise")
COLOR_RGB = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
}
PAD, UNK = "<pad>", "<unk>"
FILLER_WORDS = ("a", "on", "the", "with", "background", "shape")
LUMA = np.array([0.299, 0.587, 0.114])
SOURCE_SMOOTHING_TRS = 3.0


def class_attributes(label: int) -> tuple[str, str]:
    """Return the (shape, colour) pair of a semantic class."""
    shape = label % len(SHAPES)
    return SHAPES[shape], COLORS[(shape + label // len(SHAPES)) % len(COLORS)]


class Vocabulary:
    """Token map with reserved padding (0) and unknown (1) ids."""

    def __init__(self, words: list[str]) -> None:
        self.tokens = [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]
        self.index = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def default(cls) -> Vocabulary:
        """Return the vocabulary covering every caption template word."""
        words = [*FILLER_WORDS, *SIZES, *COLORS, *SHAPES, *POSITIONS, *TEXTURES]
        return cls(list(dict.fromkeys(words)))

    def encode(self, words: list[str]) -> np.ndarray:
        """Map words to ids; unknown words map to the reserved unknown id."""
        unk = self.index[UNK]
        return np.array([self.index.get(w, unk) for w in words], dtype=np.int64)

    def decode(self, ids: np.ndarray) -> list[str]:
        """Map ids back to tokens, dropping padding."""
        return [self.tokens[int(i)] for i in ids if int(i) != self.index[PAD]]

    def to_dict(self) -> dict[str, int]:
        """Return the JSON token map."""
        return dict(self.index)

    @classmethod
    def from_dict(cls, mapping: dict[str, int]) -> Vocabulary:
        """Rebuild from a JSON token map."""
        ordered = sorted(mapping, key=mapping.__getitem__)
        return cls(ordered)


@dataclass
class Stimulus:
    """One synthetic image with its caption and class."""

    stimulus_id: int
    image: np.ndarray
    caption: np.ndarray
    semantic_label: int
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass
class SessionSchedule:
    """Onsets of one scanning session."""

    session: int
    onsets: list[tuple[int, float]]
    tr: float
    duration: float

    @property
    def n_timepoints(self) -> int:
        """Return the number of volumes acquired in the session."""
        return int(math.ceil(self.duration / self.tr - 1e-9))

    @property
    def stimulus_ids(self) -> list[int]:
        """Return the presented stimulus ids in onset order."""
        return [stim for stim, _ in self.onsets]

    def onset_rows(self) -> np.ndarray:
        """Return the volume index of each onset."""
        return np.array([int(round(t / self.tr)) for _, t in self.onsets], dtype=np.int64)

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready representation."""
        return {
            "session": self.session,
            "tr": self.tr,
            "duration": self.duration,
            "onsets": [[stim, t] for stim, t in self.onsets],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> SessionSchedule:
        """Rebuild from :meth:`to_dict` output."""
        return cls(
            session=int(payload["session"]),
            onsets=[(int(s), float(t)) for s, t in payload["onsets"]],
            tr=float(payload["tr"]),
            duration=float(payload["duration"]),
        )


@dataclass
class VoxelForwardModel:
    """Known map from image features to voxel amplitudes, plus noise settings."""

    weights: np.ndarray
    offset: np.ndarray
    responsive: np.ndarray
    hrf_index: np.ndarray
    feature_mean: np.ndarray
    feature_sd: np.ndarray
    response_sd: np.ndarray
    white_sd: np.ndarray
    structured_sd: np.ndarray
    loadings: np.ndarray
    drift_coefficients: list[np.ndarray] = field(default_factory=list)

    @property
    def n_voxels(self) -> int:
        """Return V."""
        return self.weights.shape[0]

    def amplitudes(self, features: np.ndarray) -> np.ndarray:
        """Return ``[N, V]`` amplitudes for raw ``features[N, F]``."""
        standardized = (features - self.feature_mean) / self.feature_sd
        scaled = standardized @ self.weights.T / self.response_sd
        return (self.offset + scaled) * self.responsive


@dataclass
class SubjectData:
    """Schedules, forward model, BOLD and ground truth of one subject."""

    subject_id: int
    schedules: list[SessionSchedule]
    forward_model: VoxelForwardModel
    bold: list[np.ndarray]
    true_amplitudes: np.ndarray

    def session_trial_amplitudes(self, session: int) -> np.ndarray:
        """Return ground-truth ``[V, S_session]`` trial amplitudes in onset order."""
        ids = self.schedules[session].stimulus_ids
        return self.true_amplitudes[ids].T

    @property
    def concatenated_bold(self) -> np.ndarray:
        """Return ``[V, T_total]`` BOLD across sessions."""
        return np.concatenate(self.bold, axis=1)


@dataclass
class SyntheticDataset:
    """Stimulus set shared across subjects plus per-subject recordings."""

    stimuli: list[Stimulus]
    vocabulary: Vocabulary
    features: np.ndarray
    subjects: list[SubjectData]

    @property
    def images(self) -> np.ndarray:
        """Return ``[N, 3, H, W]`` images."""
        return np.stack([s.image for s in self.stimuli])

    def captions(self, max_tokens: int) -> np.ndarray:
        """Return ``[N, max_tokens]`` padded caption ids."""
        return pad_captions([s.caption for s in self.stimuli], max_tokens)

    @property
    def labels(self) -> np.ndarray:
        """Return semantic labels."""
        return np.array([s.semantic_label for s in self.stimuli], dtype=np.int64)


@dataclass
class BetaRecord:
    """Per-stimulus voxel activation vector."""

    beta: np.ndarray
    stimulus_id: int
    subject_id: int
    normalized: bool = False


@dataclass
class ZScoreReport:
    """Outcome of dataset-wide z-scoring."""

    n_records: int
    zero_variance_voxels: int
    mean: np.ndarray
    sd: np.ndarray


def pad_captions(captions: list[np.ndarray], max_tokens: int) -> np.ndarray:
    """Right-pad (or truncate) token sequences with the padding id."""
    out = np.zeros((len(captions), max_tokens), dtype=np.int64)
    for row, caption in enumerate(captions):
        kept = caption[:max_tokens]
        out[row, : kept.size] = kept
    return out


# -- stimuli ---------------------------------------------------------------
def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    radius = np.hypot(dx, dy)
    if shape == "circle":
        return radius <= 1.0
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8
    if shape == "triangle":
        return (dy >= -0.8) & (dy <= 0.8) & (np.abs(dx) <= 0.9 * (dy + 0.8) / 1.6)
    if shape == "cross":
        vertical = (np.abs(dx) <= 0.25) & (np.abs(dy) <= 0.9)
        horizontal = (np.abs(dy) <= 0.25) & (np.abs(dx) <= 0.9)
        return vertical | horizontal
    if shape == "ring":
        return (radius >= 0.55) & (radius <= 1.0)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    if shape == "bar":
        return (np.abs(dx) <= 0.95) & (np.abs(dy) <= 0.3)
    if shape == "star":
        theta = np.arctan2(dy, dx)
        return radius <= 0.55 + 0.4 * np.cos(5 * theta)
    raise ConfigError(f"unknown shape {shape!r}")


def _background(texture: str, x: np.ndarray, y: np.ndarray, rng: Rng) -> np.ndarray:
    if texture == "stripes":
        return 0.3 + 0.15 * (np.sin(2 * np.pi * 3 * x) > 0)
    if texture == "checker":
        return 0.3 + 0.15 * ((np.floor(2 * (x + 1)) + np.floor(2 * (y + 1))) % 2)
    if texture == "gradient":
        return 0.2 + 0.15 * (x + 1)
    if texture == "noise":
        return np.clip(0.35 + 0.08 * rng.normal(size=x.shape), 0.0, 1.0)
    raise ConfigError(f"unknown texture {texture!r}")


def render_image(attributes: dict[str, str], size: int, rng: Rng) -> np.ndarray:
    """Draw a coloured shape over a grey texture as ``[3, size, size]`` in [0, 1]."""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    cx = {"left": -0.45, "center": 0.0, "right": 0.45}[attributes["position"]]
    radius = {"small": 0.3, "large": 0.5}[attributes["size"]]
    mask = _shape_mask(attributes["shape"], (x - cx) / radius, y / radius)
    grey = _background(attributes["texture"], x, y, rng)
    image = np.repeat(grey[None], 3, axis=0)
    for channel, value in enumerate(COLOR_RGB[attributes["color"]]):
        image[channel][mask] = value
    return np.clip(image, 0.0, 1.0)


def caption_words(attributes: dict[str, str], rng: Rng) -> list[str]:
    """Build the template caption, with seeded optional words."""
    words = ["a"]
    if rng.random() < 0.5:
        words.append(attributes["size"])
    words += [attributes["color"], attributes["shape"], "on", "the", attributes["position"]]
    if rng.random() < 0.5:
        words += ["with", attributes["texture"], "background"]
    return words


def make_stimuli(
    cfg: DatasetConfig, rng: Rng, vocabulary: Vocabulary | None = None
) -> list[Stimulus]:
    """Generate ``cfg.n_stimuli`` class-balanced stimuli."""
    vocab = vocabulary or Vocabulary.default()
    labels = np.arange(cfg.n_stimuli) % cfg.n_classes
    labels = labels[rng.derive("labels").permutation(cfg.n_stimuli)]
    stimuli = []
    for stim_id, label in enumerate(labels):
        stream = rng.derive("stimulus", stim_id)
        shape, color = class_attributes(int(label))
        attributes = {
            "shape": shape,
            "color": color,
            "position": str(stream.choice(list(POSITIONS))),
            "size": str(stream.choice(list(SIZES))),
            "texture": str(stream.choice(list(TEXTURES))),
        }
        image = render_image(attributes, cfg.image_size, stream.derive("texture"))
        words = caption_words(attributes, stream.derive("caption"))[: cfg.caption_max_tokens]
        stimuli.append(
            Stimulus(
                stimulus_id=stim_id,
                image=image,
                caption=vocab.encode(words),
                semantic_label=int(label),
                attributes=attributes,
            )
        )
    return stimuli


def luminance(images: np.ndarray) -> np.ndarray:
    """Collapse the colour axis (third from last) with Rec. 601 weights."""
    return np.tensordot(LUMA, images, axes=([0], [-3]))


def _block_means(maps: np.ndarray, grid: int) -> np.ndarray:
    n, height, width = maps.shape
    blocks = maps.reshape(n, grid, height // grid, grid, width // grid)
    return blocks.mean(axis=(2, 4)).reshape(n, grid * grid)


def image_features(images: np.ndarray, grid: int) -> np.ndarray:
    """Return the fixed forward-model features of ``images[N, 3, H, W]``.

    Layout: ``grid²`` luminance block means, ``grid²`` edge-energy block means
    (gradient magnitude), then the mean of each colour channel.
    """
    lum = luminance(images)
    gy, gx = np.gradient(lum, axis=(1, 2))
    edges = np.hypot(gx, gy)
    colour = images.mean(axis=(2, 3))
    return np.concatenate([_block_means(lum, grid), _block_means(edges, grid), colour], axis=1)


# -- forward model and schedules -----------------------------------------------
def build_forward_model(
    cfg: DatasetConfig, features: np.ndarray, rng: Rng, n_hrfs: int
) -> VoxelForwardModel:
    """Draw voxel weights, HRF assignment and responsive set."""
    n_voxels = cfg.n_voxels
    mean = features.mean(axis=0)
    sd = features.std(axis=0)
    sd[sd == 0] = 1.0
    standardized = (features - mean) / sd
    weights = rng.derive("weights").normal(size=(n_voxels, features.shape[1]))
    response_sd = (standardized @ weights.T).std(axis=0)
    response_sd[response_sd == 0] = 1.0
    n_responsive = max(1, int(round(cfg.responsive_fraction * n_voxels)))
    responsive = np.zeros(n_voxels)
    responsive[rng.derive("responsive").permutation(n_voxels)[:n_responsive]] = 1.0
    if cfg.hrf_index is not None:
        hrf_index = np.full(n_voxels, cfg.hrf_index, dtype=np.int64)
    else:
        hrf_index = rng.derive("hrf").integers(0, n_hrfs, size=n_voxels).astype(np.int64)
    loadings = rng.derive("loadings").normal(size=(n_voxels, cfg.structured_sources))
    loadings /= np.linalg.norm(loadings, axis=1, keepdims=True)
    zeros = np.zeros(n_voxels)
    return VoxelForwardModel(
        weights=weights,
        offset=np.full(n_voxels, cfg.amplitude_offset),
        responsive=responsive,
        hrf_index=hrf_index,
        feature_mean=mean,
        feature_sd=sd,
        response_sd=response_sd,
        white_sd=zeros.copy(),
        structured_sd=zeros.copy(),
        loadings=loadings,
    )


def build_schedules(cfg: DatasetConfig, rng: Rng, hrf_seconds: float) -> list[SessionSchedule]:
    """Assign each stimulus's repeats to distinct sessions and lay out onsets."""
    if cfg.isi < cfg.tr:
        raise ConfigError(f"isi {cfg.isi}s is below one TR ({cfg.tr}s)")
    if cfg.repeats > cfg.n_sessions:
        raise ConfigError("repeats must not exceed n_sessions (one repeat per session)")
    order = rng.derive("assignment").permutation(cfg.n_stimuli)
    per_session: list[list[int]] = [[] for _ in range(cfg.n_sessions)]
    for rank, stim in enumerate(order):
        for repeat in range(cfg.repeats):
            per_session[(rank + repeat) % cfg.n_sessions].append(int(stim))
    step = max(1, int(round(cfg.isi / cfg.tr)))
    schedules = []
    for session, stims in enumerate(per_session):
        if not stims:
            raise ConfigError(f"session {session} has no trials; reduce n_sessions")
        shuffled = [stims[i] for i in rng.derive("order", session).permutation(len(stims))]
        onsets = [(stim, k * step * cfg.tr) for k, stim in enumerate(shuffled)]
        duration = len(onsets) * step * cfg.tr + hrf_seconds
        if duration > cfg.max_session_duration:
            raise ConfigError(
                f"session {session} needs {duration:.0f}s, above max_session_duration "
                f"{cfg.max_session_duration:.0f}s; add sessions or shorten isi"
            )
        schedules.append(SessionSchedule(session, onsets, cfg.tr, duration))
    return schedules


def event_matrix(schedule: SessionSchedule) -> np.ndarray:
    """Return ``[T, S]`` 0/1 onset indicators, one column per trial."""
    out = np.zeros((schedule.n_timepoints, len(schedule.onsets)))
    out[schedule.onset_rows(), np.arange(len(schedule.onsets))] = 1.0
    return out


def evoked_response(
    schedule: SessionSchedule,
    amplitudes: np.ndarray,
    hrf_index: np.ndarray,
    library: HrfLibrary,
) -> np.ndarray:
    """Return noiseless ``[V, T]`` BOLD for one session."""
    events = event_matrix(schedule)
    trial_amps = amplitudes[schedule.stimulus_ids]
    out = np.zeros((amplitudes.shape[1], events.shape[0]))
    for index in np.unique(hrf_index):
        voxels = np.flatnonzero(hrf_index == index)
        convolved = library.convolve(int(index), events)
        out[voxels] = (convolved @ trial_amps[:, voxels]).T
    return out


def _session_noise(
    schedule: SessionSchedule,
    model: VoxelForwardModel,
    cfg: DatasetConfig,
    rng: Rng,
) -> tuple[np.ndarray, np.ndarray]:
    steps = schedule.n_timepoints
    degree = poly_degree(schedule.duration)
    basis = legendre_basis(steps, degree)
    coefficients = rng.derive("drift").normal(
        size=(model.n_voxels, degree + 1), scale=cfg.drift_scale
    )
    noise = coefficients @ basis.T
    if np.any(model.structured_sd > 0):
        raw = rng.derive("sources").normal(size=(cfg.structured_sources, steps))
        sources = gaussian_filter1d(raw, SOURCE_SMOOTHING_TRS, axis=1)
        sources -= sources.mean(axis=1, keepdims=True)
        sources /= np.maximum(sources.std(axis=1, keepdims=True), 1e-12)
        noise += model.structured_sd[:, None] * (model.loadings @ sources)
    noise += model.white_sd[:, None] * rng.derive("white").normal(size=(model.n_voxels, steps))
    return noise, coefficients


def _calibrate_noise(
    cfg: DatasetConfig, model: VoxelForwardModel, evoked: list[np.ndarray]
) -> None:
    if cfg.noise_sd is not None:
        model.white_sd[:] = cfg.noise_sd
        model.structured_sd[:] = 0.0
        return
    signal_sd = np.concatenate(evoked, axis=1).std(axis=1)
    responsive = model.responsive > 0
    reference = float(np.median(signal_sd[responsive])) if responsive.any() else 0.0
    total = reference / cfg.snr
    model.structured_sd[:] = total * math.sqrt(cfg.structured_noise_fraction)
    model.white_sd[:] = total * math.sqrt(1.0 - cfg.structured_noise_fraction)


def generate_subject(
    cfg: DatasetConfig,
    features: np.ndarray,
    subject_id: int,
    rng: Rng,
    library: HrfLibrary,
) -> SubjectData:
    """Simulate one subject's sessions from a fresh forward model."""
    model = build_forward_model(cfg, features, rng.derive("model"), len(library))
    amplitudes = model.amplitudes(features)
    schedules = build_schedules(cfg, rng.derive("schedule"), library.length * cfg.tr)
    evoked = [evoked_response(s, amplitudes, model.hrf_index, library) for s in schedules]
    _calibrate_noise(cfg, model, evoked)

    def simulate(session: int) -> tuple[np.ndarray, np.ndarray]:
        noise, drift = _session_noise(
            schedules[session], model, cfg, rng.derive("session", session)
        )
        return evoked[session] + noise, drift

    results = parallel_map(simulate, range(len(schedules)))
    model.drift_coefficients = [drift for _, drift in results]
    logger.info(
        "Simulated subject %s: %s sessions, %s voxels, white sd %.3f",
        subject_id,
        len(schedules),
        cfg.n_voxels,
        float(model.white_sd[0]),
    )
    return SubjectData(
        subject_id=subject_id,
        schedules=schedules,
        forward_model=model,
        bold=[bold for bold, _ in results],
        true_amplitudes=amplitudes,
    )


def generate_dataset(cfg: DatasetConfig, rng: Rng) -> SyntheticDataset:
    """Generate stimuli and every subject's BOLD recordings.

    BOLD is event impulses convolved with each voxel's library HRF, scaled by
    the forward-model amplitudes, plus Legendre drift, shared smooth
    physiological sources and white noise.
    """
    vocabulary = Vocabulary.default()
    stimuli = make_stimuli(cfg, rng.derive("stimuli"), vocabulary)
    features = image_features(np.stack([s.image for s in stimuli]), cfg.feature_grid)
    library = HrfLibrary(cfg.tr)
    subjects = [
        generate_subject(cfg, features, k, rng.derive("subject", k), library)
        for k in range(cfg.n_subjects)
    ]
    return SyntheticDataset(stimuli, vocabulary, features, subjects)


# -- betas -----------------------------------------------------------------
def zscore_betas(records: list[BetaRecord]) -> tuple[list[BetaRecord], ZScoreReport]:
    """Standardize every voxel over the whole record set (population sd)."""
    if len(records) < 2:
        raise ConfigError("z-scoring needs at least 2 records")
    stacked = np.stack([r.beta for r in records])
    mean = stacked.mean(axis=0)
    sd = stacked.std(axis=0)
    flat = sd <= 1e-12 * np.maximum(np.abs(mean), 1.0)
    if flat.any():
        logger.warning("Z-scoring set %s zero-variance voxels to 0", int(flat.sum()))
    scaled = np.where(flat, 0.0, (stacked - mean) / np.where(flat, 1.0, sd))
    normalized = [
        BetaRecord(row, r.stimulus_id, r.subject_id, normalized=True)
        for row, r in zip(scaled, records, strict=True)
    ]
    report = ZScoreReport(len(records), int(flat.sum()), mean, sd)
    return normalized, report


def split_indices(total: int, fraction: float, rng: Rng) -> tuple[list[int], list[int]]:
    """Return sorted (train, test) positions with floor rounding on the test side."""
    if not 0 < fraction < 1:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    n_test = split_test_count(total, fraction)
    if n_test == 0 or n_test == total:
        raise ConfigError(f"split of {total} records at {fraction} leaves a side empty")
    order = rng.permutation(total)
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return train, test


def split_dataset(
    records: list[BetaRecord], fraction: float, rng: Rng
) -> tuple[list[BetaRecord], list[BetaRecord]]:
    """Split records into train/test with floor rounding on the test side."""
    _, test = split_indices(len(records), fraction, rng)
    test_idx = set(test)
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


def average_repeats(
    trial_betas: np.ndarray, stimulus_ids: list[int], subject_id: int
) -> list[BetaRecord]:
    """Average ``[V, trials]`` betas over repeats into one record per stimulus."""
    ids = np.asarray(stimulus_ids)
    records = []
    for stim in sorted(set(stimulus_ids)):
        beta = trial_betas[:, ids == stim].mean(axis=1)
        records.append(BetaRecord(beta, int(stim), subject_id))
    return records
