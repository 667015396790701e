"""
Shared fixtures for the bundlecodec test suites.
"""

import os
import struct
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..codec import ModelConfig
from ..curves import Bundle, get_families, synth_dataset
from ..dataio import TRK_HEADER_DTYPE, TRK_HEADER_SIZE, BndDataset, DatasetSplit, SplitSpec, prepare_dataset
from ..diffnum import Rng
from ..trainer import TrainConfig

SLOW = os.environ.get('BUNDLECODEC_SLOW', '0') == '1'
SLOW_REASON = 'long acceptance run; set BUNDLECODEC_SLOW=1'

TINY_POINTS = 16


def tiny_model_config(kind: str, **overrides) -> ModelConfig:
    options = dict(kind=kind, points=TINY_POINTS, channels=4, latent_dim=4, codebook_size=8, res_blocks=1,
                   beta_temp=1.0, sigma_codebook=1.0)
    options.update(overrides)
    return ModelConfig(**options)


def tiny_train_config(arch: str, directory, **overrides) -> TrainConfig:
    directory = Path(directory)
    options = dict(arch=arch, iterations=6, batch_size=2, learning_rate=1e-3, seed=3, channels=4,
                   latent_dim=4, codebook_size=8, res_blocks=1, beta_temp=1.0, sigma_codebook=1.0,
                   eval_every=3, log_every=0,
                   checkpoint_path=str(directory / f'{arch}.bnc'), log_path=str(directory / f'{arch}.csv'))
    options.update(overrides)
    return TrainConfig(**options)


def tiny_bundles(seed: int = 0, families: int = 2, per_family: int = 4, size: int = 4,
                 points: int = TINY_POINTS, noise: float = 0.05) -> List[Bundle]:
    return synth_dataset(get_families(families), per_family, size, points, noise, Rng(seed))


def tiny_split(seed: int = 0, **kwargs) -> DatasetSplit:
    """Normalized 2-family split with 3 train and 1 validation bundle per class"""
    dataset = BndDataset.from_bundles(tiny_bundles(seed, **kwargs))
    split, _ = prepare_dataset(dataset, SplitSpec(train_fraction=0.75, seed=seed))
    return split


def random_bundle(rng: Rng, size: int, points: int, label: str = 'x', spread: float = 1.0) -> Bundle:
    return Bundle(rng.normal((size, points, 3), scale=spread), label)


def trk_header(count: int, n_scalars: int = 0, n_properties: int = 0) -> np.ndarray:
    header = np.zeros((), dtype=TRK_HEADER_DTYPE)
    header['id_string'] = b'TRACK'
    header['dim'] = (10, 10, 10)
    header['voxel_size'] = (1.0, 1.0, 1.0)
    header['n_scalars'] = n_scalars
    header['n_properties'] = n_properties
    header['voxel_order'] = b'RAS'
    header['n_count'] = count
    header['version'] = 2
    header['hdr_size'] = TRK_HEADER_SIZE
    return header


def trk_bytes(tracks: Sequence[np.ndarray], count: Optional[int] = None, n_scalars: int = 0,
              n_properties: int = 0) -> bytes:
    """Classic little-endian TrackVis payload; coordinates are stored as float32"""
    header = trk_header(len(tracks) if count is None else count, n_scalars, n_properties)
    parts = [header.tobytes()]
    for track in tracks:
        track = np.asarray(track, dtype='<f4')
        parts.append(struct.pack('<i', track.shape[0]))
        parts.append(track.tobytes())
    return b''.join(parts)


def write_trk(path, tracks: Sequence[np.ndarray], **kwargs) -> Path:
    path = Path(path)
    path.write_bytes(trk_bytes(tracks, **kwargs))
    return path


def float32_tracks(rng: Rng, count: int, lengths: Sequence[int] = (5, 9, 12)) -> List[np.ndarray]:
    """Random tracks that survive the float32 round trip exactly"""
    return [rng.normal((lengths[i % len(lengths)], 3), scale=10.0).astype(np.float32).astype(np.float64)
            for i in range(count)]
