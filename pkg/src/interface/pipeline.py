"""
ControlSR Pipeline
Thread-safe facade over training, inference, sweeps, probes and dataset
degradation. Checkpoints are loaded once per path together with their config
sidecar and shared between calls.
"""
import csv
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src.analysis.metrics import psnr
from src.analysis.probe import (
    hf_energy_fraction, pca_project, power_spectrum, signal_kl,
    write_hf_csv, write_kl_csv, write_spectrum_csv,
)
from src.data.degrade import degrade_image, synth_toy_image
from src.data.resize import resize_array
from src.data.toyset import image_rng
from src.diffusion.sampler import LSAConfig, SamplerTrace, sample
from src.diffusion.schedule import NoiseSchedule, make_schedule, space_schedule
from src.errors import ControlSRError, ValidationError
from src.model.controlsr import ControlSRModel
from src.storage.checkpoint import Stage, read_checkpoint
from src.storage.ppm import ImageBuffer, read_ppm, write_ppm
from src.storage.run_config import RunConfig, load_config, load_sidecar
from src.training.trainer import thread_count, train_loop

logger = logging.getLogger(__name__)


@dataclass
class LoadedModel:
    model: ControlSRModel
    stage: Stage
    config: RunConfig

    def schedule(self, steps: int) -> NoiseSchedule:
        c = self.config
        return space_schedule(make_schedule(c.T, c.beta_start, c.beta_end), steps)


@dataclass
class SweepCell:
    alpha: float
    beta: float
    psnr: float
    hf_energy: float
    dist_lr: float


@dataclass
class ProbeReport:
    kl_ours: float
    kl_baseline: Optional[float]
    hf: Dict[str, float] = field(default_factory=dict)

    @property
    def diff(self) -> Optional[float]:
        return None if self.kl_baseline is None else self.kl_baseline - self.kl_ours


def _ppm_files(directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory} is not a directory")
    return sorted(directory.glob("*.ppm"))


class ControlSRPipeline:
    """Loads checkpoints on demand and runs the ControlSR workflows"""

    def __init__(self):
        self.lock = threading.Lock()
        self.models: Dict[str, LoadedModel] = {}
        logger.info("ControlSR pipeline initialized")

    def load(self, ckpt: Union[str, Path]) -> LoadedModel:
        key = str(Path(ckpt).resolve())
        with self.lock:
            if key not in self.models:
                checkpoint = read_checkpoint(ckpt)
                config = load_sidecar(ckpt)
                model = ControlSRModel(config)
                model.load_checkpoint(checkpoint)
                model.eval()
                self.models[key] = LoadedModel(model=model, stage=checkpoint.stage, config=config)
                logger.info(f"Loaded {checkpoint.stage.value} model from {ckpt}")
            return self.models[key]

    def train(self, stage: Stage, config_path: Union[str, Path], out_dir: Union[str, Path],
              resume: Optional[Union[str, Path]] = None) -> Path:
        return train_loop(load_config(config_path), stage, out_dir, resume)

    def infer(self, ckpt, lr_path, out_path, alpha: Optional[float] = None, beta: Optional[float] = None,
              steps: Optional[int] = None, seed: Optional[int] = None, trace_dir=None,
              hr_path=None) -> SamplerTrace:
        loaded = self.load(ckpt)
        lsa = LSAConfig.from_config(loaded.config, alpha=alpha, beta=beta, n_steps=steps, seed=seed)
        hr = read_ppm(hr_path) if hr_path else None
        snapshots = Path(trace_dir) / "snapshots" if trace_dir else None
        image, trace = sample(read_ppm(lr_path), loaded.model, loaded.schedule(lsa.n_steps), lsa,
                              stage=loaded.stage, hr=hr, snapshot_dir=snapshots)
        write_ppm(out_path, image)
        if trace_dir:
            trace.write_csv(Path(trace_dir) / "trace.csv")
        logger.info(f"Super-resolved {lr_path} -> {out_path} (alpha={lsa.alpha}, beta={lsa.beta}, "
                    f"steps={lsa.n_steps})")
        return trace

    def _sweep_cell(self, loaded: LoadedModel, pairs: Sequence[Tuple[ImageBuffer, ImageBuffer]],
                    alpha: float, beta: float, steps: Optional[int], seed: Optional[int]) -> SweepCell:
        lsa = LSAConfig.from_config(loaded.config, alpha=alpha, beta=beta, n_steps=steps, seed=seed)
        schedule = loaded.schedule(lsa.n_steps)
        scores, hf, dist = [], [], []
        for lr, reference in pairs:
            image, trace = sample(lr, loaded.model, schedule, lsa, stage=loaded.stage)
            scores.append(psnr(image, reference))
            hf.append(hf_energy_fraction(image))
            dist.append(trace.records[-1].dist_lr)
        cell = SweepCell(alpha, beta, float(np.mean(scores)), float(np.mean(hf)), float(np.mean(dist)))
        logger.info(f"alpha={alpha} beta={beta}: PSNR {cell.psnr:.3f} dB, hf {cell.hf_energy:.4f}")
        return cell

    def sweep(self, ckpt, lr_dir, alphas: Sequence[float], betas: Sequence[float], csv_path,
              hr_dir=None, steps: Optional[int] = None, seed: Optional[int] = None) -> List[SweepCell]:
        """PSNR / HF-energy grid over (alpha, beta); PSNR is against HR when given, else bicubic LR"""
        loaded = self.load(ckpt)
        scale = loaded.model.scale
        pairs = []
        for path in _ppm_files(lr_dir):
            lr = read_ppm(path)
            if hr_dir is not None:
                reference = read_ppm(Path(hr_dir) / path.name)
            else:
                reference = ImageBuffer.clipped(resize_array(lr.pixels, lr.height * scale, lr.width * scale))
            pairs.append((lr, reference))
        if not pairs:
            raise ValidationError(f"no .ppm images in {lr_dir}")

        grid = [(a, b) for a in alphas for b in betas]
        with ThreadPoolExecutor(max_workers=thread_count()) as pool:
            cells = list(pool.map(lambda ab: self._sweep_cell(loaded, pairs, ab[0], ab[1], steps, seed), grid))

        path = Path(csv_path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["alpha", "beta", "psnr", "hf_energy", "dist_lr"])
                for c in cells:
                    writer.writerow([c.alpha, c.beta, f"{c.psnr:.4f}", f"{c.hf_energy:.6f}", f"{c.dist_lr:.6f}"])
        except OSError as e:
            raise ControlSRError(f"failed to write {path}: {e}") from e
        return cells

    def _capture(self, loaded: LoadedModel, lr: ImageBuffer, step: Optional[int], seed: Optional[int]):
        """Latent, timestep and x_lr at the probed sampling step"""
        lsa = LSAConfig.from_config(loaded.config, seed=seed)
        schedule = loaded.schedule(lsa.n_steps)
        at = lsa.n_steps // 2 if step is None else step
        if not 0 <= at < lsa.n_steps:
            raise ValidationError(f"probe step {at} outside [0, {lsa.n_steps})")
        captured = {}

        def hook(i, outputs, x_t, x_lr):
            if i == at:
                captured.update(x_t=x_t.clone(), x_lr=x_lr.clone())

        sample(lr, loaded.model, schedule, lsa, stage=loaded.stage, control_hook=hook)
        t = torch.full((1,), schedule.timestep(lsa.n_steps - 1 - at), dtype=torch.long)
        return captured["x_t"], t, captured["x_lr"]

    @torch.no_grad()
    def probe(self, ckpt, lr_path, outdir, baseline_ckpt=None, step: Optional[int] = None,
              seed: Optional[int] = None) -> ProbeReport:
        loaded = self.load(ckpt)
        lr = read_ppm(lr_path)
        outdir = Path(outdir)
        x_t, t, x_lr = self._capture(loaded, lr, step, seed)
        p = loaded.model.condition(lr.to_tensor())
        taps: Dict[str, torch.Tensor] = {}
        outputs = loaded.model.controls(x_t, x_lr, t, p, taps)
        kl_ours = signal_kl(outputs.fused, x_lr)

        kl_baseline = None
        if baseline_ckpt is not None:
            base = self.load(baseline_ckpt)
            bx_t, bt, bx_lr = self._capture(base, lr, step, seed)
            bp = base.model.condition(lr.to_tensor())
            kl_baseline = signal_kl(base.model.controls(bx_t, bx_lr, bt, bp).fused, bx_lr)

        tensors = {"x_lr": x_lr}
        tensors.update({f"dpm.{k}": c for k, c in enumerate(outputs.dpm)})
        if outputs.gspm is not None:
            tensors.update({f"gspm.{k}": c for k, c in enumerate(outputs.gspm)})
        tensors.update(taps)
        hf = {name: hf_energy_fraction(x) for name, x in tensors.items()}

        write_kl_csv(outdir / "kl.csv", [(Path(lr_path).name, kl_ours, kl_baseline)])
        write_spectrum_csv(outdir / "spectrum.csv", {name: power_spectrum(x) for name, x in tensors.items()})
        write_hf_csv(outdir / "hf.csv", hf)
        write_ppm(outdir / "pca_xlr.ppm", pca_project(x_lr))
        write_ppm(outdir / "pca_dpm.ppm", pca_project(outputs.dpm[1]))
        write_ppm(outdir / "pca_fused.ppm", pca_project(outputs.fused[1]))
        if outputs.gspm is not None:
            write_ppm(outdir / "pca_gspm.ppm", pca_project(outputs.gspm[1]))
        report = ProbeReport(kl_ours=kl_ours, kl_baseline=kl_baseline, hf=hf)
        logger.info(f"Probe {lr_path}: KL {kl_ours:.5f}" + (f", Diff {report.diff:.5f}" if report.diff is not None else ""))
        return report

    def degrade(self, hr_dir, out_dir, config_path=None, synth: Optional[int] = None) -> int:
        """Degrade every HR .ppm into out_dir; synth fills hr_dir with toy images first"""
        config = load_config(config_path) if config_path else RunConfig()
        hr_dir, out_dir = Path(hr_dir), Path(out_dir)
        if synth:
            for i in range(synth):
                write_ppm(hr_dir / f"toy_{i:04d}.ppm", synth_toy_image(config.image_size, image_rng(config.seed, i, 0)))
            logger.info(f"Synthesized {synth} toy images into {hr_dir}")
        files = _ppm_files(hr_dir)
        for i, path in enumerate(files):
            lr = degrade_image(read_ppm(path), config.degrade, image_rng(config.degrade.seed, i, 1))
            write_ppm(out_dir / path.name, lr)
        logger.info(f"Degraded {len(files)} images into {out_dir}")
        return len(files)


# Global pipeline instance
_pipeline_instance = None


def get_pipeline_instance() -> ControlSRPipeline:
    """Get the global pipeline instance"""
    global _pipeline_instance
    if _pipeline_instance is None:
        _pipeline_instance = ControlSRPipeline()
    return _pipeline_instance


def train(stage: Stage, config_path, out_dir, resume=None) -> Path:
    """Train one stage (module-level function)"""
    return get_pipeline_instance().train(stage, config_path, out_dir, resume)


def infer(ckpt, lr_path, out_path, **kwargs) -> SamplerTrace:
    """Super-resolve one image (module-level function)"""
    return get_pipeline_instance().infer(ckpt, lr_path, out_path, **kwargs)


def sweep(ckpt, lr_dir, alphas, betas, csv_path, **kwargs) -> List[SweepCell]:
    return get_pipeline_instance().sweep(ckpt, lr_dir, alphas, betas, csv_path, **kwargs)


def probe(ckpt, lr_path, outdir, **kwargs) -> ProbeReport:
    return get_pipeline_instance().probe(ckpt, lr_path, outdir, **kwargs)


def degrade(hr_dir, out_dir, config_path=None, synth=None) -> int:
    return get_pipeline_instance().degrade(hr_dir, out_dir, config_path, synth)
