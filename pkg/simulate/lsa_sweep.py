#!/usr/bin/env python3
"""
ControlSR Latent Space Adjustment Sweep
Fidelity knob (alpha) and generation knob (beta) on held-out toy images:
distance to x_lr must fall with alpha; PSNR and high-frequency energy are
reported against the expected trends.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Tuple

import matplotlib.pyplot as plt

from src.interface.pipeline import SweepCell, get_pipeline_instance

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

DEFAULT_CKPT = Path("runs/simulate/overfit/control/control.csrk")
ALPHAS = [0.0, 0.01, 0.03, 0.05]
BETAS = [0.0, 0.01, 0.03]
HELD_OUT = 8
HELD_OUT_SEED = 1000
MIN_PSNR_GAIN = 0.3


def held_out_set(ckpt: Path, root: Path) -> Tuple[Path, Path]:
    """Synthesize and degrade toy images under a seed the model never trained on"""
    pipeline = get_pipeline_instance()
    config = json.loads(ckpt.with_suffix(".json").read_text())
    config["seed"] = HELD_OUT_SEED
    config["degrade"] = {**config.get("degrade", {}), "seed": HELD_OUT_SEED}
    config_path = root / "held_out.json"
    root.mkdir(parents=True, exist_ok=True)
    config_path.write_text(json.dumps(config))
    pipeline.degrade(root / "hr", root / "lr", config_path, synth=HELD_OUT)
    return root / "hr", root / "lr"


def grid(cells: List[SweepCell]) -> Dict[Tuple[float, float], SweepCell]:
    return {(c.alpha, c.beta): c for c in cells}


def check_trends(cells: Dict[Tuple[float, float], SweepCell]) -> bool:
    """Hard check on the alpha distance trend, soft checks on PSNR and HF energy"""
    dist = [cells[(a, 0.0)].dist_lr for a in ALPHAS]
    ok = all(b < a for a, b in zip(dist, dist[1:]))
    if ok:
        logger.info(f"Distance to x_lr falls with alpha: {', '.join(f'{d:.4f}' for d in dist)} ✓")
    else:
        logger.error(f"Distance to x_lr not strictly decreasing over alpha: {dist}")

    gain = cells[(ALPHAS[-1], 0.0)].psnr - cells[(0.0, 0.0)].psnr
    if gain >= MIN_PSNR_GAIN:
        logger.info(f"PSNR gain at alpha={ALPHAS[-1]}: {gain:+.3f} dB ✓")
    else:
        logger.warning(f"PSNR gain at alpha={ALPHAS[-1]} only {gain:+.3f} dB (< {MIN_PSNR_GAIN})")

    hf = [cells[(0.0, b)].hf_energy for b in BETAS]
    if all(b >= a for a, b in zip(hf, hf[1:])):
        logger.info(f"HF energy non-decreasing over beta: {', '.join(f'{h:.4f}' for h in hf)} ✓")
    else:
        logger.warning(f"HF energy not monotone over beta: {hf}")
    return ok


def plot_sweep(cells: Dict[Tuple[float, float], SweepCell], path: Path):
    fig, axes = plt.subplots(1, 3, figsize=(15, 4.5))
    for beta in BETAS:
        axes[0].plot(ALPHAS, [cells[(a, beta)].psnr for a in ALPHAS], 'o-', label=f"beta={beta}")
        axes[1].plot(ALPHAS, [cells[(a, beta)].dist_lr for a in ALPHAS], 'o-', label=f"beta={beta}")
    for alpha in ALPHAS:
        axes[2].plot(BETAS, [cells[(alpha, b)].hf_energy for b in BETAS], 's-', label=f"alpha={alpha}")

    axes[0].set_xlabel('alpha')
    axes[0].set_ylabel('PSNR vs HR (dB)')
    axes[1].set_xlabel('alpha')
    axes[1].set_ylabel('Final latent distance to x_lr')
    axes[2].set_xlabel('beta')
    axes[2].set_ylabel('HF energy fraction')
    for ax in axes:
        ax.grid(True, alpha=0.3)
        ax.legend()

    plt.suptitle('ControlSR latent space adjustment')
    plt.tight_layout()
    plt.savefig(path, dpi=150)
    logger.info(f"Saved {path}")


if __name__ == "__main__":
    print("ControlSR LSA Sweep")
    print("===================\n")

    ckpt = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_CKPT
    out = ckpt.parent / "lsa_sweep"
    hr_dir, lr_dir = held_out_set(ckpt, out / "held_out")
    cells = grid(get_pipeline_instance().sweep(ckpt, lr_dir, ALPHAS, BETAS, out / "sweep.csv", hr_dir=hr_dir))

    print(f"\n{'alpha':<7} {'beta':<7} {'PSNR':>8} {'HF':>8} {'dist':>8}")
    print("-" * 42)
    for (alpha, beta), c in sorted(cells.items()):
        print(f"{alpha:<7} {beta:<7} {c.psnr:>8.3f} {c.hf_energy:>8.4f} {c.dist_lr:>8.4f}")

    ok = check_trends(cells)
    plot_sweep(cells, out / "lsa_sweep.png")
    sys.exit(0 if ok else 1)
