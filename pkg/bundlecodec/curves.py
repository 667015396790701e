"""
Streamline geometry module.
This module handles arc-length resampling, dataset normalization, fixed-size
grouping of streamlines into bundles, and the parametric families used to
synthesize bundles when no tractography data is at hand.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .diffnum import Rng
from .exceptions import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

TEMPLATE_SAMPLES = 256


@dataclass
class Bundle:
    """Ordered group of streamlines sharing a point count, with a class label"""
    streamlines: np.ndarray  # [S, P, 3]
    label: str
    provenance: str = ''

    def __post_init__(self):
        self.streamlines = np.asarray(self.streamlines, dtype=np.float64)
        if self.streamlines.ndim != 3 or self.streamlines.shape[2] != 3:
            raise ShapeError(f"bundle streamlines must be [S, P, 3], got {self.streamlines.shape}",
                             module='curves')

    @property
    def size(self) -> int:
        return self.streamlines.shape[0]

    @property
    def points(self) -> int:
        return self.streamlines.shape[1]

    def as_channels(self) -> np.ndarray:
        """[S, 3, P] layout consumed by the encoder"""
        return np.ascontiguousarray(self.streamlines.transpose(0, 2, 1))

    @classmethod
    def from_channels(cls, array: np.ndarray, label: str, provenance: str = '') -> 'Bundle':
        return cls(np.ascontiguousarray(np.asarray(array).transpose(0, 2, 1)), label, provenance)


def _check_streamline(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"streamline must be [P, 3], got {pts.shape}", module='curves')
    if pts.shape[0] < 2:
        raise ShapeError(f"streamline needs at least 2 points, got {pts.shape[0]}", module='curves')
    if not np.all(np.isfinite(pts)):
        raise DataError("streamline has non-finite coordinates", module='curves')
    return pts


def arc_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def resample_arclength(points: np.ndarray, count: int) -> np.ndarray:
    """Place `count` points at equal arc-length fractions of the polyline.

    Endpoints are copied exactly. A zero-length input is replicated with a warning.
    """
    if count < 2:
        raise ConfigError(f"resample point count must be >= 2, got {count}", module='curves')
    pts = _check_streamline(points)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seg.sum()
    if total == 0.0:
        logger.warning("Degenerate streamline of zero length; replicating its single point")
        return np.repeat(pts[:1], count, axis=0)

    keep = np.concatenate([[True], seg > 0])
    vertices = pts[keep]
    cumulative = np.concatenate([[0.0], np.cumsum(seg[seg > 0])])
    targets = np.linspace(0.0, cumulative[-1], count)
    out = np.column_stack([np.interp(targets, cumulative, vertices[:, c]) for c in range(3)])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


@dataclass
class NormStats:
    """Global training-set centroid and max-abs scale"""
    centroid: np.ndarray
    scale: float

    def apply_array(self, array: np.ndarray) -> np.ndarray:
        return (array - self.centroid) / self.scale

    def invert_array(self, array: np.ndarray) -> np.ndarray:
        return array * self.scale + self.centroid

    def apply(self, bundles: Sequence[Bundle]) -> List[Bundle]:
        return [Bundle(self.apply_array(b.streamlines), b.label, b.provenance) for b in bundles]

    def invert(self, bundles: Sequence[Bundle]) -> List[Bundle]:
        return [Bundle(self.invert_array(b.streamlines), b.label, b.provenance) for b in bundles]

    def to_dict(self) -> Dict[str, object]:
        return {'centroid': [float(c) for c in self.centroid], 'scale': float(self.scale)}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'NormStats':
        return cls(np.asarray(data['centroid'], dtype=np.float64), float(data['scale']))


def fit_normalization(train: Sequence[Bundle]) -> NormStats:
    if not train:
        raise DataError("cannot normalize: training set is empty", module='curves')
    coords = np.concatenate([b.streamlines.reshape(-1, 3) for b in train])
    centroid = coords.mean(axis=0)
    scale = float(np.abs(coords - centroid).max())
    if scale == 0.0:
        logger.warning("Training coordinates are all identical; using unit scale")
        scale = 1.0
    return NormStats(centroid, scale)


def normalize_bundles(train: Sequence[Bundle], val: Sequence[Bundle] = ()
                      ) -> Tuple[List[Bundle], List[Bundle], NormStats]:
    """Fit on train, apply the same stats to validation (which is not clamped)"""
    stats = fit_normalization(train)
    return stats.apply(train), stats.apply(val), stats


def make_groups(streamlines: Sequence[np.ndarray], group_size: int, rng: Rng,
                label: str = '', provenance: str = '') -> List[Bundle]:
    """Shuffle, then cut into consecutive groups of exactly group_size; the remainder is dropped"""
    if group_size < 1:
        raise ConfigError(f"group size must be >= 1, got {group_size}", module='curves')
    if len(streamlines) < group_size:
        logger.warning(f"Only {len(streamlines)} streamlines for {label or 'bundle'} "
                       f"{provenance}; need {group_size} for one group")
        return []
    stacked = np.stack([_check_streamline(s) for s in streamlines])
    order = rng.permutation(len(stacked))
    n_groups = len(stacked) // group_size
    dropped = len(stacked) - n_groups * group_size
    if dropped:
        logger.info(f"Dropping {dropped} streamlines that do not fill a group of {group_size}")
    return [
        Bundle(stacked[order[g * group_size:(g + 1) * group_size]], label, provenance)
        for g in range(n_groups)
    ]


# ---------------------------------------------------------------------------
# Synthetic families

def _arc(t):
    return np.column_stack([0.5 * np.cos(np.pi * t), 0.5 * np.sin(np.pi * t), np.zeros_like(t)])


def _u_shape(t):
    s = 2.0 * t - 1.0
    return np.column_stack([0.6 * s, 0.5 * s * s, 0.1 * s])


def _helix(t):
    return np.column_stack([0.3 * np.cos(4 * np.pi * t), 0.3 * np.sin(4 * np.pi * t), t - 0.5])


def _s_curve(t):
    return np.column_stack([0.8 * (t - 0.5), 0.25 * np.sin(2 * np.pi * t), 0.2 * t])


def _fan(t):
    return np.column_stack([0.1 * t, 0.2 * t, t - 0.5])


@dataclass
class SynthFamily:
    """Parametric template with its dispersion and rigid jitter ranges"""
    name: str
    template: Callable[[np.ndarray], np.ndarray]
    offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    dispersion: float = 1.0
    jitter_translation: float = 0.5
    jitter_rotation: float = 0.2
    pivot: str = 'centroid'  # or 'start'

    def template_points(self, samples: int = TEMPLATE_SAMPLES) -> np.ndarray:
        t = np.linspace(0.0, 1.0, samples)
        return self.template(t) + np.asarray(self.offset, dtype=np.float64)


FAMILIES: Dict[str, SynthFamily] = {
    family.name: family for family in [
        SynthFamily('arc', _arc, offset=(0.0, 0.0, 0.0)),
        SynthFamily('u_shape', _u_shape, offset=(1.5, 0.0, 0.0)),
        SynthFamily('helix', _helix, offset=(0.0, 1.5, 0.0)),
        SynthFamily('s_curve', _s_curve, offset=(1.5, 1.5, 0.0)),
        SynthFamily('fan', _fan, offset=(0.0, 0.0, 1.5), jitter_rotation=0.6, pivot='start'),
    ]
}


def get_families(count: int) -> List[SynthFamily]:
    if not 1 <= count <= len(FAMILIES):
        raise ConfigError(f"family count must be between 1 and {len(FAMILIES)}, got {count}",
                          module='curves')
    return list(FAMILIES.values())[:count]


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _displacement(t: np.ndarray, rng: Rng) -> np.ndarray:
    """Sum of three random-phase sinusoids per coordinate along arc length"""
    amplitudes = rng.normal((3, 3))
    phases = rng.uniform_open((3, 3)) * 2.0 * np.pi
    freqs = np.array([0.5, 1.0, 1.5])
    waves = np.sin(2.0 * np.pi * freqs[None, None, :] * t[:, None, None] + phases[None])
    return (waves * amplitudes[None]).sum(axis=2) / np.sqrt(3.0)


def synth_streamline(family: SynthFamily, noise: float, rng: Rng,
                     samples: int = TEMPLATE_SAMPLES) -> np.ndarray:
    t = np.linspace(0.0, 1.0, samples)
    pts = family.template_points(samples)
    pts = pts + noise * family.dispersion * _displacement(t, rng)

    axis = rng.normal(3)
    axis = axis / np.linalg.norm(axis)
    angle = noise * family.jitter_rotation * rng.normal(())
    pivot = pts[0] if family.pivot == 'start' else pts.mean(axis=0)
    pts = pts + (pts - pivot) @ (_rotation(axis, float(angle)) - np.eye(3)).T
    return pts + noise * family.jitter_translation * rng.normal(3)


def synth_bundle(family: SynthFamily, size: int, points: int, noise: float, rng: Rng,
                 provenance: str = '') -> Bundle:
    """`size` jittered copies of the family template, resampled to `points`"""
    if size < 2 or points < 2:
        raise ConfigError(f"synthetic bundles need S >= 2 and P >= 2, got S={size}, P={points}",
                          module='curves')
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}", module='curves')
    streamlines = [
        resample_arclength(synth_streamline(family, noise, rng), points) for _ in range(size)
    ]
    return Bundle(np.stack(streamlines), family.name, provenance)


def synth_dataset(families: Sequence[SynthFamily], bundles_per_family: int, size: int,
                  points: int, noise: float, rng: Rng) -> List[Bundle]:
    """Bundles for every family, each drawn from its own substream of rng"""
    bundles = []
    for f_index, family in enumerate(families):
        family_rng = rng.spawn(f_index)
        for b_index in range(bundles_per_family):
            bundles.append(synth_bundle(
                family, size, points, noise, family_rng.spawn(b_index),
                provenance=f"synth-{family.name}-{b_index:04d}",
            ))
    logger.info(f"Synthesized {len(bundles)} bundles across {len(families)} families")
    return bundles
