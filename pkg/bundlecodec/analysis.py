"""
Latent-space analysis module.
Perturbation sweeps around encoded bundles, PCA projections of latent
vectors, and the CSV and image files that report both.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from django.conf import settings
from sklearn.metrics import silhouette_score

from .codec import Model
from .curves import Bundle
from .dataio import LatentRecord
from .diffnum import Rng
from .exceptions import ConfigError, DataError
from .metrics import BuanConfig, bundle_adjacency

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['arch', 'eps', 'mean_buan', 'mean_mse', 'samples']


@dataclass
class PerturbSpec:
    """Noise magnitudes, trials per magnitude and the noise seed"""
    eps_grid: List[float] = field(default_factory=lambda: list(settings.BUNDLECODEC_PERTURB_DEFAULTS['eps_grid']))
    trials: int = field(default_factory=lambda: settings.BUNDLECODEC_PERTURB_DEFAULTS['trials'])
    seed: int = field(default_factory=lambda: settings.BUNDLECODEC_SEED)

    def __post_init__(self):
        grid = [float(e) for e in self.eps_grid]
        negative = [e for e in grid if e < 0]
        if negative:
            raise ConfigError(f"perturbation magnitudes must be >= 0, got {negative}", module='analysis')
        if 0.0 not in grid:
            logger.info("Adding eps=0 to the perturbation grid")
            grid.append(0.0)
        self.eps_grid = sorted(set(grid))
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}", module='analysis')


def _trial_metrics(model: Model, bundle: Bundle, z: np.ndarray, noise: np.ndarray,
                   grid: Sequence[float], cfg: BuanConfig) -> np.ndarray:
    """[len(grid), 2] BUAN and MSE for one noise direction across the grid"""
    rows = []
    for eps in grid:
        recon = model.decode_latents(z + eps * noise)
        diff = recon - bundle.streamlines
        rows.append((bundle_adjacency(bundle, recon, cfg), float(np.mean(diff * diff))))
    return np.array(rows)


def perturb_trials(model: Model, bundle: Bundle, spec: PerturbSpec, cfg: Optional[BuanConfig] = None,
                   noise_rng: Optional[Rng] = None, threads: Optional[int] = None) -> np.ndarray:
    """[trials, len(grid), 2] metrics; trial t draws its noise from substream t"""
    cfg = cfg or BuanConfig()
    noise_rng = noise_rng or Rng(spec.seed)
    threads = threads or settings.BUNDLECODEC_THREADS
    z, _ = model.latents(bundle)
    noises = [noise_rng.spawn(t).normal(z.shape) for t in range(spec.trials)]

    def run(noise):
        return _trial_metrics(model, bundle, z, noise, spec.eps_grid, cfg)

    if threads > 1 and spec.trials > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, noises))
    else:
        results = [run(n) for n in noises]
    return np.stack(results)


def perturb_sweep(model: Model, bundle: Bundle, spec: Optional[PerturbSpec] = None,
                  cfg: Optional[BuanConfig] = None, threads: Optional[int] = None) -> pd.DataFrame:
    """Mean BUAN and MSE of reconstructions from z + eps * eta, per eps"""
    spec = spec or PerturbSpec()
    metrics = perturb_trials(model, bundle, spec, cfg, threads=threads)
    return _sweep_frame(model.tag, spec.eps_grid, metrics)


def _sweep_frame(tag: str, grid: Sequence[float], metrics: np.ndarray) -> pd.DataFrame:
    means = metrics.mean(axis=0)
    return pd.DataFrame({
        'arch': tag,
        'eps': list(grid),
        'mean_buan': means[:, 0],
        'mean_mse': means[:, 1],
        'samples': metrics.shape[0],
    }, columns=SWEEP_COLUMNS)


def perturb_sweeps(models: Sequence[Model], bundles: Sequence[Bundle], spec: Optional[PerturbSpec] = None,
                   cfg: Optional[BuanConfig] = None, threads: Optional[int] = None) -> pd.DataFrame:
    """Sweeps for several architectures averaged over several bundles.

    Bundle i uses noise substream i for every architecture, so all models see
    the same noise directions.
    """
    spec = spec or PerturbSpec()
    if not bundles:
        raise DataError("no bundles to perturb", module='analysis')
    root = Rng(spec.seed)
    frames = []
    for model in models:
        metrics = np.concatenate([
            perturb_trials(model, bundle, spec, cfg, root.spawn(i), threads)
            for i, bundle in enumerate(bundles)
        ])
        frames.append(_sweep_frame(model.tag, spec.eps_grid, metrics))
        logger.info(f"[{model.tag}] perturbation sweep over {len(bundles)} bundles done")
    return pd.concat(frames, ignore_index=True)


@dataclass
class Projection:
    coords: np.ndarray  # [N, out_dim]
    components: np.ndarray  # [out_dim, d], orthonormal rows
    explained: np.ndarray  # fraction of total variance per component
    mean: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.mean + self.coords @ self.components


def pca_project(latents: np.ndarray, out_dim: int = 2) -> Projection:
    """Mean-centred projection onto the top principal directions.

    Each component is signed so its largest-magnitude coordinate is positive.
    """
    data = np.asarray(latents, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise DataError(f"PCA needs an [N >= 2, d] array, got {data.shape}", module='analysis')
    if not 1 <= out_dim <= data.shape[1]:
        raise ConfigError(f"cannot project d={data.shape[1]} latents to {out_dim} dimensions",
                          module='analysis')
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (data.shape[0] - 1)
    total = float(np.trace(cov))
    if total == 0.0:
        logger.warning("Latents have zero variance; projection is all zeros")
        components = np.eye(data.shape[1])[:out_dim]
        return Projection(np.zeros((data.shape[0], out_dim)), components, np.zeros(out_dim), mean)

    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1][:out_dim]
    components = vectors[:, order].T
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    explained = np.clip(values[order], 0.0, None) / total
    return Projection(centered @ components.T, components, explained, mean)


def stack_latents(records: Sequence[LatentRecord]) -> Tuple[np.ndarray, np.ndarray]:
    """All streamline latents of the records with the bundle label of each row"""
    if not records:
        raise DataError("no latent records to project", module='analysis')
    latents = np.concatenate([r.z for r in records])
    labels = np.concatenate([[r.label] * r.z.shape[0] for r in records])
    return latents, labels


def cluster_silhouette(coords: np.ndarray, labels: Sequence[str]) -> float:
    """Silhouette of the labelled 2D coordinates; nan when it is undefined"""
    distinct = len(set(labels))
    if distinct < 2 or distinct >= len(labels):
        return float('nan')
    return float(silhouette_score(coords, labels))


# ---------------------------------------------------------------------------
# Output files

def _ensure_dir(out_dir) -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}", module='analysis')
    return out_dir


def _save(action, path: Path):
    try:
        action(path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}", module='analysis')
    return path


def write_sweep_csvs(sweeps: pd.DataFrame, out_dir) -> List[Path]:
    out_dir = _ensure_dir(out_dir)
    written = []
    for tag, part in sweeps.groupby('arch', sort=True):
        written.append(_save(
            lambda p: part.to_csv(p, index=False, float_format='%.10g', lineterminator='\n'),
            out_dir / f'perturb_{tag}.csv',
        ))
    return written


def plot_sweeps(sweeps: pd.DataFrame, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for tag, part in sweeps.groupby('arch', sort=True):
        ax.plot(part['eps'], part['mean_buan'], marker='o', label=tag)
    ax.set_xlabel('perturbation magnitude eps')
    ax.set_ylabel('mean BUAN')
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    try:
        return _save(lambda p: fig.savefig(p, dpi=120), Path(path))
    finally:
        plt.close(fig)


def write_projection_csv(projection: Projection, labels: Sequence[str], path) -> Path:
    frame = pd.DataFrame({'label': list(labels)})
    for i in range(projection.coords.shape[1]):
        frame[f'pc{i + 1}'] = projection.coords[:, i]
    return _save(lambda p: frame.to_csv(p, index=False, float_format='%.10g', lineterminator='\n'), Path(path))


def plot_projection(projection: Projection, labels: Sequence[str], path, title: str = '') -> Path:
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 5))
    for label in sorted(set(labels)):
        mask = labels == label
        y = projection.coords[mask, 1] if projection.coords.shape[1] > 1 else np.zeros(mask.sum())
        ax.scatter(projection.coords[mask, 0], y, s=6, alpha=0.6, label=label)
    ax.set_xlabel(f'PC1 ({projection.explained[0]:.1%})')
    if projection.coords.shape[1] > 1:
        ax.set_ylabel(f'PC2 ({projection.explained[1]:.1%})')
    ax.set_title(title)
    ax.legend(markerscale=3, fontsize='small')
    fig.tight_layout()
    try:
        return _save(lambda p: fig.savefig(p, dpi=120), Path(path))
    finally:
        plt.close(fig)


def emit_plots(sweeps: Optional[pd.DataFrame], projections: Dict[str, tuple], out_dir) -> List[Path]:
    """CSV and PNG files for sweeps (by architecture) and projections.

    `projections` maps an architecture tag to (Projection, row labels).
    """
    out_dir = _ensure_dir(out_dir)
    written = []
    if sweeps is not None and not sweeps.empty:
        written.extend(write_sweep_csvs(sweeps, out_dir))
        written.append(plot_sweeps(sweeps, out_dir / 'perturb.png'))
    for tag, (projection, labels) in sorted(projections.items()):
        written.append(write_projection_csv(projection, labels, out_dir / f'projection_{tag}.csv'))
        written.append(plot_projection(projection, labels, out_dir / f'projection_{tag}.png', title=tag))
    return written
