#!/usr/bin/env python3
"""
ControlSR Spectral Probe
Compares the high-frequency content of DPM and GSPM control signals, the
spectral gain of each window cross-attention layer, and (with a ControlNet-only
baseline checkpoint) the KL divergence of the fused signals to x_lr.
"""

import csv
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib.pyplot as plt
import numpy as np

from src.interface.pipeline import ProbeReport, get_pipeline_instance

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

DEFAULT_CKPT = Path("runs/simulate/overfit/control/control.csrk")
DEFAULT_BASELINE = Path("runs/simulate/ablations/controlnet_only/control.csrk")
MIN_IMAGES = 8


def tap_mean(report: ProbeReport, prefix: str) -> float:
    values = [v for k, v in report.hf.items() if k.startswith(prefix)]
    return float(np.mean(values)) if values else float("nan")


def read_spectra(path: Path) -> Dict[str, List[float]]:
    spectra: Dict[str, List[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            spectra.setdefault(row["tap"], []).append(float(row["log_power"]))
    return spectra


def probe_images(ckpt: Path, lr_dir: Path, out: Path, baseline: Optional[Path]) -> List[ProbeReport]:
    pipeline = get_pipeline_instance()
    images = sorted(lr_dir.glob("*.ppm"))
    if len(images) < MIN_IMAGES:
        logger.warning(f"Only {len(images)} test images in {lr_dir} (want {MIN_IMAGES})")
    reports = []
    for path in images:
        reports.append(pipeline.probe(ckpt, path, out / path.stem, baseline_ckpt=baseline))
    return reports


def summarize(reports: List[ProbeReport]) -> None:
    dpm = np.mean([tap_mean(r, "dpm.") for r in reports])
    gspm = np.mean([tap_mean(r, "gspm.") for r in reports])
    if dpm >= gspm:
        logger.info(f"HF fraction DPM {dpm:.4f} >= GSPM {gspm:.4f} ✓")
    else:
        logger.warning(f"HF fraction DPM {dpm:.4f} < GSPM {gspm:.4f}")

    for layer in ("wx1", "wx2"):
        pre = [r.hf[f"{layer}.pre"] for r in reports if f"{layer}.pre" in r.hf]
        post = [r.hf[f"{layer}.post"] for r in reports if f"{layer}.post" in r.hf]
        if pre:
            logger.info(f"{layer}: HF fraction {np.mean(pre):.4f} before attention, {np.mean(post):.4f} after")

    diffs = [r.diff for r in reports if r.diff is not None]
    if diffs:
        kl = np.mean([r.kl_ours for r in reports])
        logger.info(f"Mean KL to x_lr {kl:.5f}; mean Diff vs baseline {np.mean(diffs):+.5f} "
                    f"({sum(d > 0 for d in diffs)}/{len(diffs)} images positive)")


def plot_spectra(out: Path, reports: List[ProbeReport], path: Path):
    """Radial log-power of the first image's taps; HF fractions per image"""
    first = sorted(p for p in out.iterdir() if p.is_dir())[0]
    spectra = read_spectra(first / "spectrum.csv")
    fig, axes = plt.subplots(1, 2, figsize=(12, 5))

    for tap in ("x_lr", "dpm.1", "gspm.1", "wx1.pre", "wx1.post"):
        if tap in spectra:
            axes[0].plot(spectra[tap], 'o-', label=tap)
    axes[0].set_xlabel('Radius (frequency bin)')
    axes[0].set_ylabel('log10 power')
    axes[0].set_title(f'Radial spectra ({first.name})')
    axes[0].grid(True, alpha=0.3)
    axes[0].legend()

    idx = np.arange(len(reports))
    axes[1].bar(idx - 0.2, [tap_mean(r, "dpm.") for r in reports], 0.4, label='DPM')
    axes[1].bar(idx + 0.2, [tap_mean(r, "gspm.") for r in reports], 0.4, label='GSPM')
    axes[1].set_xlabel('Image')
    axes[1].set_ylabel('HF energy fraction')
    axes[1].set_title('Control-signal high-frequency content')
    axes[1].legend()

    plt.tight_layout()
    plt.savefig(path, dpi=150)
    logger.info(f"Saved {path}")


if __name__ == "__main__":
    print("ControlSR Spectral Probe")
    print("========================\n")

    ckpt = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_CKPT
    lr_dir = Path(sys.argv[2]) if len(sys.argv) > 2 else ckpt.parent / "lsa_sweep" / "held_out" / "lr"
    baseline = Path(sys.argv[3]) if len(sys.argv) > 3 else DEFAULT_BASELINE
    out = ckpt.parent / "spectral_probe"

    reports = probe_images(ckpt, lr_dir, out, baseline if baseline.exists() else None)
    summarize(reports)
    plot_spectra(out, reports, out / "spectral_probe.png")
