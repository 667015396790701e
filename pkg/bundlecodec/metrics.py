"""
Bundle comparison metrics.
Minimum average direct-flip (MDF) distance between streamlines, the symmetric
bundle adjacency score built on it, and per-class reconstruction reports.

MDF sums pointwise distances in mirrored pairs (i, P-1-i), so the direct and
flipped orientations and both argument orders accumulate the same floating
point terms in the same order. The broadcast distance matrix therefore equals
the pair-by-pair computation bit for bit.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from django.conf import settings

from .curves import Bundle
from .exceptions import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['class', 'mean_buan', 'std_buan', 'mean_mse', 'n_bundles']


@dataclass
class BuanConfig:
    theta: Optional[float] = None

    def __post_init__(self):
        if self.theta is None:
            self.theta = settings.BUNDLECODEC_BUAN_THRESHOLD
        if not self.theta > 0:
            raise ConfigError(f"BUAN threshold must be positive, got {self.theta}", module='metrics')


def _pointwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.sqrt(x * x + y * y + z * z)


def _paired_mean(dist: np.ndarray) -> np.ndarray:
    points = dist.shape[-1]
    total = np.zeros(dist.shape[:-1])
    for i in range(points // 2):
        total = total + (dist[..., i] + dist[..., points - 1 - i])
    if points % 2:
        total = total + dist[..., points // 2]
    return total / points


def _check_points(a: np.ndarray, b: np.ndarray):
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"streamlines must have 3 coordinates, got {a.shape} and {b.shape}", module='metrics')
    if a.shape[-2] != b.shape[-2]:
        raise ShapeError(f"point counts differ: {a.shape[-2]} vs {b.shape[-2]}", module='metrics')


def mdf_distance(a: np.ndarray, b: np.ndarray) -> float:
    """min(direct, flipped) mean pointwise distance between two [P, 3] streamlines"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_points(a, b)
    direct = _paired_mean(_pointwise(a, b))
    flipped = _paired_mean(_pointwise(a, b[::-1]))
    return float(min(direct, flipped))


def mdf_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """MDF between every streamline of a [Sa, P, 3] and of b [Sb, P, 3]"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_points(a, b)
    direct = _paired_mean(_pointwise(a[:, None], b[None]))
    flipped = _paired_mean(_pointwise(a[:, None], b[None, :, ::-1]))
    return np.minimum(direct, flipped)


def _streamlines(bundle: Union[Bundle, np.ndarray]) -> np.ndarray:
    array = bundle.streamlines if isinstance(bundle, Bundle) else np.asarray(bundle, dtype=np.float64)
    if array.ndim != 3 or len(array) == 0:
        raise DataError(f"bundle must be a non-empty [S, P, 3] array, got {array.shape}", module='metrics')
    return array


def coverage(distances: np.ndarray, theta: float) -> float:
    """Fraction of rows whose nearest column lies within theta"""
    return int(np.count_nonzero(distances.min(axis=1) <= theta)) / distances.shape[0]


def bundle_adjacency(a, b, cfg: Optional[BuanConfig] = None) -> float:
    """Symmetric theta-coverage: 1.0 when each bundle lies within theta of the other"""
    cfg = cfg or BuanConfig()
    distances = mdf_matrix(_streamlines(a), _streamlines(b))
    return 0.5 * (coverage(distances, cfg.theta) + coverage(distances.T, cfg.theta))


def bundle_adjacency_naive(a, b, cfg: Optional[BuanConfig] = None) -> float:
    """Pair-by-pair reference for bundle_adjacency"""
    cfg = cfg or BuanConfig()
    sa, sb = _streamlines(a), _streamlines(b)
    covered_a = sum(1 for x in sa if min(mdf_distance(x, y) for y in sb) <= cfg.theta)
    covered_b = sum(1 for y in sb if min(mdf_distance(x, y) for x in sa) <= cfg.theta)
    return 0.5 * (covered_a / len(sa) + covered_b / len(sb))


Reconstructor = Callable[[Bundle], np.ndarray]


def score_bundles(reconstruct: Reconstructor, bundles: Sequence[Bundle],
                  cfg: Optional[BuanConfig] = None, threads: Optional[int] = None) -> pd.DataFrame:
    """Per-bundle BUAN and MSE between each bundle and its reconstruction.

    Bundles are scored on a thread pool; rows come back in input order.
    """
    cfg = cfg or BuanConfig()
    threads = threads or settings.BUNDLECODEC_THREADS

    def score(bundle: Bundle):
        recon = np.asarray(reconstruct(bundle), dtype=np.float64)
        if recon.shape != bundle.streamlines.shape:
            raise ShapeError(f"reconstruction shape {recon.shape} differs from {bundle.streamlines.shape}",
                             module='metrics')
        diff = recon - bundle.streamlines
        return bundle_adjacency(bundle, recon, cfg), float(np.mean(diff * diff))

    if threads > 1 and len(bundles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(score, bundles))
    else:
        scores = [score(b) for b in bundles]
    return pd.DataFrame({
        'class': [b.label for b in bundles],
        'provenance': [b.provenance for b in bundles],
        'buan': [s[0] for s in scores],
        'mse': [s[1] for s in scores],
    })


def summarize_scores(scores: pd.DataFrame, classes: Optional[Sequence[str]] = None) -> pd.DataFrame:
    classes = sorted(set(scores['class'])) if classes is None else list(classes)
    rows = []
    for label in classes:
        part = scores[scores['class'] == label]
        if part.empty:
            logger.warning(f"Class {label} has no bundles to evaluate; skipping")
            continue
        buan = part['buan'].to_numpy()
        rows.append({
            'class': label,
            'mean_buan': float(np.mean(buan)),
            'std_buan': float(np.std(buan)),
            'mean_mse': float(np.mean(part['mse'].to_numpy())),
            'n_bundles': int(len(part)),
        })
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def recon_report(reconstruct: Reconstructor, bundles: Sequence[Bundle], cfg: Optional[BuanConfig] = None,
                 classes: Optional[Sequence[str]] = None, threads: Optional[int] = None) -> pd.DataFrame:
    """Per-class mean and std of BUAN plus mean MSE, one row per class in sorted order"""
    return summarize_scores(score_bundles(reconstruct, bundles, cfg, threads), classes)


def format_report(report: pd.DataFrame) -> str:
    if report.empty:
        return '(no classes)'
    return report.to_string(index=False, float_format=lambda v: f"{v:.6f}")


def write_report_csv(report: pd.DataFrame, path):
    report.to_csv(path, index=False, float_format='%.10g', lineterminator='\n')
