"""Synthetic stimulus and BOLD generation service."""

from __future__ import annotations

import logging
from typing import Any

import numpy as np

from neurodecode.schemas.config import ExperimentConfig
from neurodecode.services.common import ArtifactStore, ensure_trainable, stage_rng
from neurodecode.synth import (
    SessionSchedule,
    Vocabulary,
    generate_dataset,
    pad_captions,
    split_indices,
)

PRODUCER = "synth"
DATASET_JSON = "synth/dataset.json"
VOCABULARY_JSON = "synth/vocabulary.json"
IMAGES = "synth/images.ndtn"
CAPTIONS = "synth/captions.ndtn"
LABELS = "synth/labels.ndtn"
FEATURES = "synth/features.ndtn"
logger = logging.getLogger(__name__)


def bold_path(subject: int) -> str:
    """Return the BOLD tensor path of ``subject``."""
    return f"synth/bold_s{subject}.ndtn"


def amplitudes_path(subject: int) -> str:
    """Return the ground-truth amplitude tensor path of ``subject``."""
    return f"synth/amplitudes_s{subject}.ndtn"


class SynthService:
    """Generate the stimulus set, schedules and BOLD of every subject."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def run(self) -> dict[str, Any]:
        """Write images, captions, BOLD and the dataset manifest."""
        ensure_trainable(self.cfg, PRODUCER)
        data_cfg = self.cfg.dataset
        rng = stage_rng(self.cfg, PRODUCER)
        with self.store.stage(PRODUCER, self.cfg) as store:
            dataset = generate_dataset(data_cfg, rng)
            train_ids, test_ids = split_indices(
                len(dataset.stimuli), data_cfg.split_fraction, rng.derive("split")
            )
            store.save_tensor(IMAGES, dataset.images)
            store.save_tensor(CAPTIONS, dataset.captions(data_cfg.caption_max_tokens))
            store.save_tensor(LABELS, dataset.labels)
            store.save_tensor(FEATURES, dataset.features)
            stimuli = []
            for stimulus in dataset.stimuli:
                image_path = f"synth/images/{stimulus.stimulus_id:04d}.ppm"
                store.save_ppm(image_path, stimulus.image)
                stimuli.append(
                    {
                        "id": stimulus.stimulus_id,
                        "image": image_path,
                        "caption": dataset.vocabulary.decode(stimulus.caption),
                        "label": stimulus.semantic_label,
                        "attributes": stimulus.attributes,
                    }
                )
            subjects = []
            for subject in dataset.subjects:
                store.save_tensor(bold_path(subject.subject_id), subject.concatenated_bold)
                store.save_tensor(amplitudes_path(subject.subject_id), subject.true_amplitudes)
                subjects.append(
                    {
                        "subject": subject.subject_id,
                        "bold": bold_path(subject.subject_id),
                        "schedules": [schedule.to_dict() for schedule in subject.schedules],
                    }
                )
            store.save_json(VOCABULARY_JSON, dataset.vocabulary.to_dict())
            payload = {
                "config": data_cfg.model_dump(mode="json"),
                "stimuli": stimuli,
                "subjects": subjects,
                "split": {"train": train_ids, "test": test_ids},
            }
            store.save_json(DATASET_JSON, payload)
        logger.info(
            "synth completed: %s stimuli, %s subjects, %s test",
            len(stimuli),
            len(subjects),
            len(test_ids),
        )
        return {"stimuli": len(stimuli), "subjects": len(subjects), "test": len(test_ids)}


# -- loaders used by downstream stages ------------------------------------------------
def load_manifest(store: ArtifactStore) -> dict[str, Any]:
    """Return the dataset manifest."""
    return store.load_json(DATASET_JSON, PRODUCER)


def load_split(store: ArtifactStore) -> tuple[np.ndarray, np.ndarray]:
    """Return (train ids, test ids)."""
    split = load_manifest(store)["split"]
    return np.array(split["train"], dtype=np.int64), np.array(split["test"], dtype=np.int64)


def load_schedules(store: ArtifactStore, subject: int) -> list[SessionSchedule]:
    """Return the session schedules of ``subject``."""
    entry = load_manifest(store)["subjects"][subject]
    return [SessionSchedule.from_dict(payload) for payload in entry["schedules"]]


def load_images(store: ArtifactStore) -> np.ndarray:
    """Return ``[N, 3, S, S]`` stimulus images."""
    return store.load_tensor(IMAGES, PRODUCER)


def load_captions(store: ArtifactStore, max_tokens: int) -> np.ndarray:
    """Return caption ids padded or truncated to ``max_tokens``."""
    captions = store.load_tensor(CAPTIONS, PRODUCER).astype(np.int64)
    return pad_captions(list(captions), max_tokens)


def load_labels(store: ArtifactStore) -> np.ndarray:
    """Return semantic labels."""
    return store.load_tensor(LABELS, PRODUCER).astype(np.int64)


def load_vocabulary(store: ArtifactStore) -> Vocabulary:
    """Return the caption vocabulary."""
    return Vocabulary.from_dict(store.load_json(VOCABULARY_JSON, PRODUCER))
