"""Run the end-to-end acceptance checks on a preset and print a verdict table."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from collections.abc import Sequence
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

PAPER_PARAM_COUNT = 12_400_344
PAPER_LATENT_LENGTHS = {"15": 13_344, "31": 91_168}
PAPER_ROWS = {"vision": 257, "text": 77}


def parse_args() -> argparse.Namespace:
    """Parse CLI arguments."""
    parser = argparse.ArgumentParser(
        description="Run the pipeline twice on a preset and check the acceptance properties.",
    )
    parser.add_argument(
        "--preset",
        type=str,
        default="smoke",
        choices=["micro", "smoke", "desk"],
        help="Trainable preset to run end to end (default: smoke).",
    )
    parser.add_argument(
        "--out",
        type=Path,
        default=ROOT / "runs" / "acceptance",
        help="Parent directory for the two run directories.",
    )
    parser.add_argument("--seed", type=int, default=0, help="Master seed (default: 0).")
    return parser.parse_args()


def csv_digests(run_dir: Path) -> dict[str, str]:
    """Return sha256 digests of every CSV below ``run_dir``."""
    return {
        path.relative_to(run_dir).as_posix(): hashlib.sha256(path.read_bytes()).hexdigest()
        for path in sorted(run_dir.rglob("*.csv"))
    }


def shape_checks(out: Path) -> list[tuple[str, bool, str]]:
    """Check the paper-dims shape contract."""
    from neurodecode.cli import main as cli_main

    run_dir = out / "shapes"
    code = cli_main(["shapes", "--preset", "paper-dims-shapes", "--out", str(run_dir)])
    if code:
        return [("paper-dims shape contract", False, f"exit code {code}")]
    contract = json.loads((run_dir / "shapes" / "contract.json").read_text(encoding="utf-8"))
    lengths = contract["hvae"]["latent_length_by_layers"]
    rows = contract["embed"]["rows"]
    return [
        (
            "GRU parameter count",
            contract["stage1"]["param_count"] == PAPER_PARAM_COUNT,
            str(contract["stage1"]["param_count"]),
        ),
        ("latent lengths", lengths == PAPER_LATENT_LENGTHS, json.dumps(lengths)),
        ("embedding rows", rows == PAPER_ROWS, json.dumps(rows)),
    ]


def pipeline_checks(preset: str, out: Path, seed: int) -> list[tuple[str, bool, str]]:
    """Run the full chain twice and check determinism plus the directional results."""
    from neurodecode.cli import main as cli_main

    runs = [out / f"{preset}-a", out / f"{preset}-b"]
    for run_dir in runs:
        argv = [
            "run-all",
            "--preset",
            preset,
            "--seed",
            str(seed),
            "--shuffled",
            "--out",
            str(run_dir),
        ]
        code = cli_main(argv)
        if code:
            return [("end-to-end run", False, f"{run_dir} exit code {code}")]
    checks = [("end-to-end run", True, preset)]
    same = csv_digests(runs[0]) == csv_digests(runs[1])
    checks.append(("byte-identical CSV reports", same, f"{len(csv_digests(runs[0]))} files"))

    metrics_csv = runs[0] / "reconstruct" / "s0" / "metrics.csv"
    with metrics_csv.open(newline="", encoding="utf-8") as handle:
        ssim_by_label = {row["label"]: float(row["ssim"]) for row in csv.DictReader(handle)}
    stage1, stage2 = ssim_by_label["stage1"], ssim_by_label["stage2"]
    prior = ssim_by_label["prior"]
    detail = f"{stage2:.4f} vs {stage1:.4f}"
    checks.append(("refined SSIM >= guess SSIM", stage2 >= stage1, detail))
    checks.append(("injected beats prior SSIM", stage1 > prior, f"{stage1:.4f} vs {prior:.4f}"))

    sweep = json.loads((runs[0] / "noise_sweep" / "s0" / "sweep.json").read_text(encoding="utf-8"))
    ssim = [row["ssim"] for row in sweep]
    pixcorr = [row["pixcorr"] for row in sweep]
    checks.append(
        (
            "sweep SSIM strictly decreasing",
            all(b < a for a, b in zip(ssim, ssim[1:], strict=False)),
            ", ".join(f"{value:.3f}" for value in ssim),
        )
    )
    checks.append(
        (
            "sweep pixcorr non-increasing",
            all(b <= a for a, b in zip(pixcorr, pixcorr[1:], strict=False)),
            ", ".join(f"{value:.3f}" for value in pixcorr),
        )
    )
    clean, noisy = sweep[0]["two_way_contrastive"], sweep[-1]["two_way_contrastive"]
    checks.append(
        (
            "contrastive identification at the largest amplitude within 15%",
            abs(noisy - clean) <= 0.15 * clean,
            f"{noisy:.3f} vs {clean:.3f}",
        )
    )

    ldm = json.loads((runs[0] / "ldm" / "report.json").read_text(encoding="utf-8"))
    psnr = ldm["codec"]["val_psnr"]
    checks.append(("codec held-out PSNR >= 20 dB", psnr >= 20.0, f"{psnr:.2f} dB"))

    glm = json.loads((runs[0] / "glm" / "index.json").read_text(encoding="utf-8"))
    recovery = [entry["median_beta_recovery"] for entry in glm["subjects"]]
    checks.append(
        (
            "GLM beta recovery median r >= 0.95",
            all(r >= 0.95 for r in recovery),
            ", ".join(f"{r:.3f}" for r in recovery),
        )
    )
    control = json.loads(
        (runs[0] / "glm" / "shuffled" / "index.json").read_text(encoding="utf-8")
    )
    cv = [entry["median_r2_cv"] for entry in control["subjects"]]
    checks.append(
        (
            "shuffled-label median CV R2 <= 0",
            all(value <= 0.0 for value in cv),
            ", ".join(f"{value:.3f}" for value in cv),
        )
    )
    return checks


def benchmark_checks(seeds: int = 5) -> list[tuple[str, bool, str]]:
    """Compare the GRU regressor with ridge on the nonlinear benchmark over several seeds."""
    from neurodecode.encoder import benchmark_against_ridge
    from neurodecode.schemas.config import Stage1Config

    cfg = Stage1Config(
        hidden=16, fc_hidden=64, dropout_p=0.0, epochs=200, batch_size=32, lr=3e-3, patience=40
    )
    results = [benchmark_against_ridge(seed, cfg) for seed in range(seeds)]
    wins = sum(gru <= ridge for gru, ridge in results)
    detail = "; ".join(f"{gru:.4f}/{ridge:.4f}" for gru, ridge in results)
    return [("GRU test MSE <= ridge in >= 4 of 5 seeds", wins >= 4, f"{wins} wins: {detail}")]


def print_checks(checks: Sequence[tuple[str, bool, str]]) -> None:
    """Print one verdict line per check."""
    for name, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


def main() -> None:
    """CLI entry point."""
    args = parse_args()
    checks = (
        shape_checks(args.out)
        + pipeline_checks(args.preset, args.out, args.seed)
        + benchmark_checks()
    )
    print_checks(checks)
    if not all(passed for _, passed, _ in checks):
        raise SystemExit(1)


if __name__ == "__main__":
    main()
