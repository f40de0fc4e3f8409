#!/usr/bin/env python3
"""
ControlSR Training Runs
Overfit convergence of the three stages, the ablation harness (LoRA ranks and
branch variants) and a determinism check, with loss curves plotted per stage.
"""

import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List

import matplotlib.pyplot as plt
import numpy as np

from src.storage.checkpoint import Stage
from src.storage.run_config import config_from_dict
from src.training.trainer import train_loop

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

OUT_DIR = Path("runs/simulate")

# four fixed 64x64 toy images, desk-sized networks
OVERFIT = {
    "image_size": 64,
    "dataset_size": 4,
    "batch": 4,
    "lr": 1e-3,
    "vae_widths": [16, 32, 64],
    "unet_width": 32,
    "time_dim": 64,
    "cond_dim": 64,
    "checkpoint_every": 0,
    "log_every": 100,
}
ITERS = {Stage.VAE: 2000, Stage.BACKBONE: 3000, Stage.CONTROL: 3000}
TARGETS = {Stage.VAE: 0.01, Stage.BACKBONE: 0.05, Stage.CONTROL: 0.05}
TAIL = 50

ABLATION_ITERS = 300
ABLATIONS = {
    "rank8": {"vae_lora_rank": 8, "unet_lora_rank": 8},
    "rank16": {"vae_lora_rank": 16, "unet_lora_rank": 16},
    "rank32": {"vae_lora_rank": 32, "unet_lora_rank": 32},
    "no_gspm": {"use_gspm": False},
    "no_cross_attn": {"dpm_cross_attn": False},
    "no_window_partition": {"dpm_window_partition": False},
    "controlnet_only": {"dpm_only": True},
}


def read_losses(metrics_path: Path) -> np.ndarray:
    with open(metrics_path, newline="") as fh:
        return np.array([float(row["loss"]) for row in csv.DictReader(fh)])


def run_stages(out_dir: Path, overrides: Dict, iters: Dict[Stage, int]) -> Dict[Stage, Path]:
    """vae -> backbone -> control, each resuming from the previous checkpoint"""
    ckpts: Dict[Stage, Path] = {}
    resume = None
    for stage in (Stage.VAE, Stage.BACKBONE, Stage.CONTROL):
        config = config_from_dict({**OVERFIT, **overrides, "iters": iters[stage]})
        ckpts[stage] = train_loop(config, stage, out_dir / stage.value, resume=resume)
        resume = ckpts[stage]
    return ckpts


def overfit_convergence(out_dir: Path) -> Dict[Stage, np.ndarray]:
    """Every stage should drive its loss under the target on the fixed batch"""
    logger.info("Overfit convergence run")
    run_stages(out_dir, {}, ITERS)
    curves = {}
    for stage in (Stage.VAE, Stage.BACKBONE, Stage.CONTROL):
        losses = read_losses(out_dir / stage.value / "metrics.csv")
        curves[stage] = losses
        final = float(losses[-TAIL:].mean())
        if final < TARGETS[stage]:
            logger.info(f"  {stage.value}: final loss {final:.5f} < {TARGETS[stage]} ✓")
        else:
            logger.warning(f"  {stage.value}: final loss {final:.5f} >= {TARGETS[stage]}")
    (out_dir / "config.json").write_text(json.dumps(OVERFIT, indent=2))
    return curves


def ablation_runs(out_dir: Path, backbone: Path) -> Dict[str, float]:
    """Control stage per variant, all resuming from one backbone checkpoint"""
    logger.info("Ablation harness")
    finals = {}
    for name, overrides in ABLATIONS.items():
        config = config_from_dict({**OVERFIT, **overrides, "iters": ABLATION_ITERS})
        train_loop(config, Stage.CONTROL, out_dir / name, resume=backbone)
        losses = read_losses(out_dir / name / "metrics.csv")
        finals[name] = float(losses[-TAIL:].mean())
        logger.info(f"  {name:<20} final loss {finals[name]:.5f}")
    return finals


def determinism_check(out_dir: Path, backbone: Path) -> bool:
    config = config_from_dict({**OVERFIT, "iters": 20})
    a = train_loop(config, Stage.CONTROL, out_dir / "det_a", resume=backbone)
    b = train_loop(config, Stage.CONTROL, out_dir / "det_b", resume=backbone)
    same = a.read_bytes() == b.read_bytes()
    if same:
        logger.info("Two identical control runs produced byte-identical checkpoints ✓")
    else:
        logger.error("Control runs with identical seed and config differ")
    return same


def plot_curves(curves: Dict[Stage, np.ndarray], finals: Dict[str, float], path: Path):
    """Loss per stage plus the ablation bar chart"""
    fig, axes = plt.subplots(1, 2, figsize=(13, 5))

    for stage, losses in curves.items():
        axes[0].semilogy(np.arange(1, len(losses) + 1), losses, label=stage.value)
        axes[0].axhline(y=TARGETS[stage], linestyle='--', alpha=0.4)
    axes[0].set_xlabel('Step')
    axes[0].set_ylabel('Loss')
    axes[0].set_title('Overfit convergence')
    axes[0].grid(True, alpha=0.3)
    axes[0].legend()

    names: List[str] = list(finals)
    axes[1].bar(names, [finals[n] for n in names])
    axes[1].set_ylabel(f'Mean loss, last {TAIL} steps')
    axes[1].set_title(f'Control-stage ablations ({ABLATION_ITERS} steps)')
    axes[1].tick_params(axis='x', rotation=30)

    plt.tight_layout()
    plt.savefig(path, dpi=150)
    logger.info(f"Saved {path}")


if __name__ == "__main__":
    print("ControlSR Training Runs")
    print("=======================\n")

    out = Path(sys.argv[1]) if len(sys.argv) > 1 else OUT_DIR
    curves = overfit_convergence(out / "overfit")
    backbone = out / "overfit" / "backbone" / "backbone.csrk"
    finals = ablation_runs(out / "ablations", backbone)
    ok = determinism_check(out / "determinism", backbone)
    plot_curves(curves, finals, out / "training_runs.png")

    print("\nAblation summary:")
    print(f"{'Variant':<22} {'Final loss':>10}")
    print("-" * 34)
    for name, loss in finals.items():
        print(f"{name:<22} {loss:>10.5f}")
    sys.exit(0 if ok else 1)
