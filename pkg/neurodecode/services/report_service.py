"""Summary tables and comparison montages built from saved artifacts only."""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from typing import Any

from neurodecode.schemas.config import ExperimentConfig
from neurodecode.services import reconstruct_service, synth_service
from neurodecode.services.common import ArtifactStore
from neurodecode.utils.imageio import montage

PRODUCER = "report"
SUMMARY_CSV = "report/summary.csv"
SUMMARY_JSON = "report/summary.json"
METRIC_PATTERNS = ("reconstruct/s*/metrics_*.csv", "noise_sweep/s*/metrics_*.csv")
MEAN_SUBJECT = "mean"
_METRIC_FILE = re.compile(r"^(?P<source>[a-z_]+)/s(?P<subject>\d+)/metrics_(?P<label>\w+)\.csv$")
logger = logging.getLogger(__name__)


def montage_ppm(subject: int, stimulus_id: int) -> str:
    """Return the truth | stage-1 | stage-2 montage path of a stimulus."""
    return f"report/montage/s{subject}/{stimulus_id:04d}.ppm"


def aggregate_rows(rows: list[dict[str, str]]) -> dict[str, float]:
    """Return the mean of every numeric column except the stimulus id."""
    if not rows:
        return {}
    columns = [column for column in rows[0] if column != "stimulus_id"]
    return {
        column: math.fsum(float(row[column]) for row in rows) / len(rows) for column in columns
    }


def cross_subject_means(summary: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Return one mean row per source and label that more than one subject reports.

    Every numeric column is averaged over subjects with equal weight; ``n`` is the
    number of subjects averaged.
    """
    groups: dict[tuple[str, str], list[dict[str, Any]]] = defaultdict(list)
    for entry in summary:
        groups[(entry["source"], entry["label"])].append(entry)
    means = []
    for (source, label), entries in sorted(groups.items()):
        if len(entries) < 2:
            continue
        columns = [
            key
            for key in entries[0]
            if key not in ("source", "label", "subject", "n")
            and all(key in entry for entry in entries)
        ]
        means.append(
            {
                "source": source,
                "label": label,
                "subject": MEAN_SUBJECT,
                "n": len(entries),
                **{
                    key: math.fsum(float(entry[key]) for entry in entries) / len(entries)
                    for key in columns
                },
            }
        )
    return means


class ReportService:
    """Aggregate every metric file present and render comparison montages."""

    def __init__(self, store: ArtifactStore, cfg: ExperimentConfig) -> None:
        self.store = store
        self.cfg = cfg

    def _metric_files(self) -> list[str]:
        root = self.store.root
        found = {
            path.relative_to(root).as_posix()
            for pattern in METRIC_PATTERNS
            for path in root.glob(pattern)
        }
        return sorted(found)

    def _summary(self, store: ArtifactStore) -> list[dict[str, Any]]:
        summary = []
        for relative in self._metric_files():
            match = _METRIC_FILE.match(relative)
            if match is None:
                continue
            rows = store.load_csv(relative, PRODUCER)
            entry: dict[str, Any] = {
                "source": match["source"],
                "label": match["label"],
                "subject": int(match["subject"]),
                "n": len(rows),
                **aggregate_rows(rows),
            }
            sidecar = relative.removesuffix(".csv") + ".json"
            if store.exists(sidecar):
                two_way = store.load_json(sidecar, PRODUCER).get("two_way", {})
                entry.update({f"two_way_{key}": value for key, value in sorted(two_way.items())})
            summary.append(entry)
        return summary

    def _montages(self, store: ArtifactStore, subjects: list[int]) -> dict[str, int]:
        _, test_ids = synth_service.load_split(store)
        missing = {"stage1": 0, "stage2": 0}
        for subject in subjects:
            for stimulus_id in (int(i) for i in test_ids):
                truth = store.load_ppm(
                    f"synth/images/{stimulus_id:04d}.ppm", synth_service.PRODUCER
                )
                panels = [truth]
                for stage, relative in (
                    ("stage1", reconstruct_service.guess_ppm(subject, stimulus_id)),
                    ("stage2", reconstruct_service.refined_ppm(subject, stimulus_id)),
                ):
                    if store.exists(relative):
                        panels.append(store.load_ppm(relative, reconstruct_service.PRODUCER))
                    else:
                        panels.append(None)
                        missing[stage] += 1
                store.save_ppm(montage_ppm(subject, stimulus_id), montage(panels))
        return missing

    def run(self) -> dict[str, Any]:
        """Write summary CSV/JSON and one montage per subject and test stimulus."""
        with self.store.stage(PRODUCER, self.cfg) as store:
            summary = self._summary(store)
            n_files = len(summary)
            subjects = sorted({entry["subject"] for entry in summary}) or [self.cfg.subject]
            summary.extend(cross_subject_means(summary))
            columns: list[str] = []
            for entry in summary:
                columns.extend(key for key in entry if key not in columns)
            store.save_csv(
                SUMMARY_CSV, [{key: entry.get(key, "") for key in columns} for entry in summary]
            )
            store.save_json(SUMMARY_JSON, summary)
            missing = self._montages(store, subjects)
        if any(missing.values()):
            logger.warning("report rendered placeholders for missing stages: %s", missing)
        logger.info("report: %s metric files over subjects %s", n_files, subjects)
        return {"metric_files": n_files, "subjects": subjects, "missing_panels": missing}
