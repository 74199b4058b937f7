"""End-to-end CLI tests over the micro preset."""

from __future__ import annotations

import csv
import json
import math
import shutil
from pathlib import Path

import pytest

from neurodecode.cli import RUN_ALL, main
from neurodecode.schemas.config import load_preset
from neurodecode.schemas.manifest import RunManifest
from neurodecode.services.common import sha256_file
from neurodecode.utils.errors import EXIT_CONFIG, EXIT_MISSING_ARTIFACT


def _csv_rows(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def test_run_all_writes_every_stage_output(micro_run: Path) -> None:
    """Each test stimulus gets a guess, a refinement and a montage."""
    n_test = load_preset("micro").n_test
    subject = micro_run / "reconstruct" / "s0"
    assert len(list((subject / "guess").glob("*.ppm"))) == n_test
    assert len(list((subject / "refined").glob("*.ppm"))) == n_test
    assert len(list((micro_run / "report" / "montage" / "s0").glob("*.ppm"))) == n_test
    labels = [row["label"] for row in _csv_rows(subject / "metrics.csv")]
    assert labels == ["stage1", "stage2", "prior"]
    for label in labels:
        assert len(_csv_rows(subject / f"metrics_{label}.csv")) == n_test


def test_manifest_hashes_every_output(micro_run: Path) -> None:
    """Every stage is recorded and each output hash matches the file on disk."""
    manifest = RunManifest.model_validate_json((micro_run / "manifest.json").read_text())
    assert set(RUN_ALL) <= {record.stage for record in manifest.stages.values()}
    assert "reconstruct/s0" in manifest.stages
    assert manifest.config["seed"] == 7
    hashes = manifest.output_hashes()
    assert "reconstruct/s0/refined.ndtn" in hashes
    for relative, digest in hashes.items():
        assert sha256_file(micro_run / relative) == digest, relative


def test_sweep_amplitude_zero_reproduces_the_reconstruction(micro_run: Path) -> None:
    """Without noise the sweep refines the exact stage-1 guesses with the same stream."""
    reconstruct = (micro_run / "reconstruct" / "s0" / "metrics_stage2.csv").read_text()
    zero = (micro_run / "noise_sweep" / "s0" / "metrics_a000.csv").read_text()
    assert zero == reconstruct
    sweep = _csv_rows(micro_run / "noise_sweep" / "s0" / "sweep.csv")
    assert [int(row["amplitude"]) for row in sweep] == [0, 8, 16, 32, 64, 256]
    assert float(sweep[0]["ssim_drop_pct"]) == 0.0


def test_report_aggregates_are_per_sample_means(micro_run: Path) -> None:
    """Summary rows equal the mean of the per-sample rows they summarize."""
    summary = json.loads((micro_run / "report" / "summary.json").read_text())
    by_key = {(entry["source"], entry["label"], entry["subject"]): entry for entry in summary}
    assert ("noise_sweep", "a256", 0) in by_key
    assert all(entry["subject"] != "mean" for entry in summary)
    rows = _csv_rows(micro_run / "reconstruct" / "s0" / "metrics_stage1.csv")
    entry = by_key[("reconstruct", "stage1", 0)]
    for column in ("mse", "ssim", "pixcorr", "sdc_random"):
        mean = math.fsum(float(row[column]) for row in rows) / len(rows)
        assert entry[column] == pytest.approx(mean, abs=1e-12)
    assert 0.0 <= entry["two_way_random"] <= 1.0


def test_reconstruction_is_deterministic(micro_run: Path, tmp_path: Path) -> None:
    """Rerunning a stage on a copy of the run reproduces its files byte for byte."""
    copy = tmp_path / "copy"
    shutil.copytree(micro_run, copy)
    assert main(["reconstruct", "--out", str(copy), "--seed", "7"]) == 0
    for relative in ("reconstruct/s0/metrics_stage2.csv", "reconstruct/s0/refined.ndtn"):
        assert (copy / relative).read_bytes() == (micro_run / relative).read_bytes()


def test_shuffled_glm_leaves_the_real_betas_alone(micro_run: Path, tmp_path: Path) -> None:
    """The permuted-label control writes its own folder and manifest record."""
    copy = tmp_path / "copy"
    shutil.copytree(micro_run, copy)
    assert main(["glm", "--shuffled", "--out", str(copy), "--seed", "7"]) == 0
    assert (copy / "glm" / "betas_s0.ndtn").read_bytes() == (
        micro_run / "glm" / "betas_s0.ndtn"
    ).read_bytes()
    assert (copy / "glm" / "shuffled" / "betas_s0.ndtn").is_file()
    index = json.loads((copy / "glm" / "shuffled" / "index.json").read_text())
    assert index["shuffled"] is True
    assert index["subjects"][0]["betas"] == "glm/shuffled/betas_s0.ndtn"
    manifest = RunManifest.model_validate_json((copy / "manifest.json").read_text())
    assert {"glm", "glm/shuffled"} <= set(manifest.stages)
    assert manifest.stages["glm"] == RunManifest.model_validate_json(
        (micro_run / "manifest.json").read_text()
    ).stages["glm"]


def test_glm_index_reports_beta_recovery(micro_run: Path) -> None:
    """The GLM index carries the median correlation with the simulated amplitudes."""
    index = json.loads((micro_run / "glm" / "index.json").read_text())
    recovery = index["subjects"][0]["median_beta_recovery"]
    assert -1.0 <= recovery <= 1.0
    assert index["shuffled"] is False


def test_every_subject_is_decoded_and_averaged(tmp_path: Path) -> None:
    """With --all-subjects each subject gets its own outputs and the report a mean row."""
    payload = load_preset("micro").model_dump(mode="json")
    payload["dataset"]["n_subjects"] = 2
    config = tmp_path / "two_subjects.json"
    config.write_text(json.dumps(payload), encoding="utf-8")
    out = tmp_path / "run"
    argv = ["run-all", "--config", str(config), "--all-subjects", "--out", str(out)]
    assert main(argv) == 0
    for subject in ("s0", "s1"):
        assert (out / "stage1" / subject / "checkpoint.json").is_file()
        assert (out / "ridge_embed" / subject / "vision.ndta").is_file()
        assert (out / "noise_sweep" / subject / "sweep.csv").is_file()
        assert (out / "report" / "montage" / subject).is_dir()
    summary = json.loads((out / "report" / "summary.json").read_text())
    by_key = {(entry["source"], entry["label"], entry["subject"]): entry for entry in summary}
    first = by_key[("reconstruct", "stage2", 0)]
    second = by_key[("reconstruct", "stage2", 1)]
    mean = by_key[("reconstruct", "stage2", "mean")]
    assert mean["n"] == 2
    for column in ("ssim", "pixcorr", "two_way_random"):
        assert mean[column] == pytest.approx((first[column] + second[column]) / 2, abs=1e-12)
    meta = json.loads((out / "stage1" / "s1" / "checkpoint.json").read_text())
    assert meta["subject"] == 1


def test_subject_outside_the_dataset_is_a_config_error(micro_run: Path) -> None:
    """--subject must name one of the simulated subjects."""
    code = main(["train-stage1", "--subject", "3", "--out", str(micro_run)])
    assert code == EXIT_CONFIG


def test_missing_upstream_artifact_exits_with_its_code(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    """A stage run before its producer names the command to run first."""
    code = main(["train-stage1", "--preset", "micro", "--out", str(tmp_path / "empty")])
    assert code == EXIT_MISSING_ARTIFACT
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["code"] == "MISSING_ARTIFACT"
    assert "neurodecode glm" in error["error"]


def test_shape_only_preset_refuses_training_commands(tmp_path: Path) -> None:
    """The full-dimension preset is for the shapes command only."""
    code = main(["synth", "--preset", "paper-dims-shapes", "--out", str(tmp_path / "run")])
    assert code == EXIT_CONFIG


def test_bad_seed_is_a_config_error(tmp_path: Path) -> None:
    """Seeds must fit in an unsigned 64-bit integer."""
    code = main(["shapes", "--preset", "micro", "--seed", "-1", "--out", str(tmp_path / "run")])
    assert code == EXIT_CONFIG


def test_shapes_contract_at_full_dimensions(tmp_path: Path) -> None:
    """The shapes command reports the full-size network without training."""
    out = tmp_path / "run"
    assert main(["shapes", "--preset", "paper-dims-shapes", "--out", str(out)]) == 0
    contract = json.loads((out / "shapes" / "contract.json").read_text())
    assert contract["stage1"]["param_count"] == 12_400_344
    assert contract["stage1"]["forward_shape"] == [1, 13_344]
    assert contract["hvae"]["latent_length_by_layers"] == {"15": 13_344, "31": 91_168}
    assert contract["embed"]["rows"] == {"vision": 257, "text": 77}
    assert contract["ridge_embed"] == {"vision": [257, 768], "text": [77, 768]}


@pytest.mark.slow
def test_stage1_guesses_beat_unconditional_samples(smoke_run: Path) -> None:
    """On the smoke preset, decoded guesses sit closer to the truth than prior samples."""
    metrics = _csv_rows(smoke_run / "reconstruct" / "s0" / "metrics.csv")
    rows = {row["label"]: row for row in metrics}
    assert float(rows["stage1"]["pixcorr"]) > float(rows["prior"]["pixcorr"])
    assert float(rows["stage1"]["mse"]) < float(rows["prior"]["mse"])


@pytest.mark.slow
def test_codec_round_trip_reaches_twenty_db(smoke_run: Path) -> None:
    """The latent codec reconstructs held-out smoke images at 20 dB PSNR or better."""
    report = json.loads((smoke_run / "ldm" / "report.json").read_text())
    assert report["codec"]["val_psnr"] >= 20.0


@pytest.mark.slow
def test_sweep_scores_fall_with_noise(smoke_run: Path) -> None:
    """SSIM falls strictly and pixel correlation never rises as the guess gets noisier."""
    sweep = json.loads((smoke_run / "noise_sweep" / "s0" / "sweep.json").read_text())
    ssim = [row["ssim"] for row in sweep]
    pixcorr = [row["pixcorr"] for row in sweep]
    assert all(later < earlier for earlier, later in zip(ssim, ssim[1:], strict=False))
    assert all(later <= earlier for earlier, later in zip(pixcorr, pixcorr[1:], strict=False))


@pytest.mark.slow
def test_contrastive_identification_survives_heavy_noise(smoke_run: Path) -> None:
    """High-level identification at amplitude 256 stays within 15% of the clean score."""
    rows = {
        row["amplitude"]: row
        for row in json.loads((smoke_run / "noise_sweep" / "s0" / "sweep.json").read_text())
    }
    clean, noisy = rows[0]["two_way_contrastive"], rows[256]["two_way_contrastive"]
    assert abs(noisy - clean) <= 0.15 * clean


@pytest.mark.slow
def test_glm_recovers_the_simulated_amplitudes(smoke_run: Path) -> None:
    """Stimulus betas correlate at 0.95 or better with the truth; shuffled labels do not fit."""
    index = json.loads((smoke_run / "glm" / "index.json").read_text())
    assert index["subjects"][0]["median_beta_recovery"] >= 0.95
    control = json.loads((smoke_run / "glm" / "shuffled" / "index.json").read_text())
    assert control["subjects"][0]["median_r2_cv"] <= 0.0
