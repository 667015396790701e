"""
Dataset persistence module.
This module reads and writes the native bundle dataset (BND1), latent record
(BNL1) and checkpoint (BNC1) formats, imports classic TrackVis .trk files,
and balances, splits and prepares bundle datasets for training.

All formats are little-endian, magic-prefixed and versioned. Every reader
turns any decoding failure into FormatError.
"""

import functools
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings

from .curves import Bundle, NormStats, make_groups, normalize_bundles, resample_arclength
from .diffnum import Rng
from .exceptions import (
    BundleCodecError, DataError, FormatError, TruncatedFileError, UnsupportedFormatError,
)

logger = logging.getLogger(__name__)

BND_MAGIC = b'BND1'
BNL_MAGIC = b'BNL1'
BNC_MAGIC = b'BNC1'
FORMAT_VERSION = 1

F64 = np.dtype('<f8')

# Classic TrackVis header, 1000 bytes
TRK_HEADER_DTYPE = np.dtype([
    ('id_string', 'S6'),
    ('dim', '<i2', 3),
    ('voxel_size', '<f4', 3),
    ('origin', '<f4', 3),
    ('n_scalars', '<i2'),
    ('scalar_name', 'S20', 10),
    ('n_properties', '<i2'),
    ('property_name', 'S20', 10),
    ('vox_to_ras', '<f4', (4, 4)),
    ('reserved', 'S444'),
    ('voxel_order', 'S4'),
    ('pad2', 'S4'),
    ('image_orientation_patient', '<f4', 6),
    ('pad1', 'S2'),
    ('invert_x', 'S1'),
    ('invert_y', 'S1'),
    ('invert_z', 'S1'),
    ('swap_xy', 'S1'),
    ('swap_yz', 'S1'),
    ('swap_zx', 'S1'),
    ('n_count', '<i4'),
    ('version', '<i4'),
    ('hdr_size', '<i4'),
])
TRK_HEADER_SIZE = 1000


class _ByteReader:
    """Bounds-checked cursor over an in-memory file"""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.what = what
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if count < 0 or end > len(self.data):
            raise TruncatedFileError(end, len(self.data), what=self.what)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid utf-8 string in {self.what}: {exc}")

    def f64(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = 1
        for n in shape:
            count *= int(n)
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype=F64).astype(np.float64).reshape(shape)

    def expect_magic(self, magic: bytes, name: str):
        if len(self.data) < len(magic) or self.data[:len(magic)] != magic:
            raise FormatError(f"not a {name} file ({self.what})")
        self.offset = len(magic)

    def expect_version(self):
        version = self.u32()
        if version != FORMAT_VERSION:
            raise UnsupportedFormatError(f"unsupported version {version} in {self.what}")

    def finish(self):
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} trailing bytes after declared payload in {self.what}"
            )


def _pack_u32(value: int) -> bytes:
    return struct.pack('<I', value)


def _pack_string(text: str) -> bytes:
    raw = text.encode('utf-8')
    return _pack_u32(len(raw)) + raw


def _pack_f64(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=F64).tobytes()


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")


def _write_file(path, payload: bytes):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _decoding(reader_fn):
    """Wrap a reader so low-level decoding failures surface as FormatError"""
    @functools.wraps(reader_fn)
    def wrapper(data: bytes, *args):
        try:
            return reader_fn(data, *args)
        except FormatError:
            raise
        except (BundleCodecError, ValueError, TypeError, KeyError, IndexError, OverflowError, MemoryError) as exc:
            raise FormatError(f"malformed {reader_fn.__name__.replace('decode_', '')} data: {exc}")
    return wrapper


# ---------------------------------------------------------------------------
# BND1 bundle datasets

@dataclass
class BndDataset:
    """Bundles sharing group size and point count, plus the label table"""
    group_size: int
    point_count: int
    labels: List[str] = field(default_factory=list)
    bundles: List[Bundle] = field(default_factory=list)

    @classmethod
    def from_bundles(cls, bundles: Sequence[Bundle], labels: Optional[Sequence[str]] = None,
                     group_size: Optional[int] = None, point_count: Optional[int] = None) -> 'BndDataset':
        bundles = list(bundles)
        if bundles:
            group_size = bundles[0].size if group_size is None else group_size
            point_count = bundles[0].points if point_count is None else point_count
        else:
            group_size = settings.BUNDLECODEC_GROUP_SIZE if group_size is None else group_size
            point_count = settings.BUNDLECODEC_POINT_COUNT if point_count is None else point_count
        if labels is None:
            labels = sorted({b.label for b in bundles})
        return cls(group_size, point_count, list(labels), bundles)

    def __len__(self):
        return len(self.bundles)

    def class_counts(self) -> Dict[str, int]:
        counts = {label: 0 for label in self.labels}
        for bundle in self.bundles:
            counts[bundle.label] = counts.get(bundle.label, 0) + 1
        return counts

    def validate(self):
        index = set(self.labels)
        if len(index) != len(self.labels):
            raise DataError("duplicate entries in label table")
        for i, bundle in enumerate(self.bundles):
            if bundle.streamlines.shape != (self.group_size, self.point_count, 3):
                raise DataError(
                    f"bundle {i} has shape {bundle.streamlines.shape}, "
                    f"dataset declares ({self.group_size}, {self.point_count}, 3)"
                )
            if bundle.label not in index:
                raise DataError(f"bundle {i} label {bundle.label!r} missing from label table")
            if not np.all(np.isfinite(bundle.streamlines)):
                raise DataError(f"bundle {i} has non-finite coordinates")


def encode_bnd(dataset: BndDataset) -> bytes:
    dataset.validate()
    label_ids = {label: i for i, label in enumerate(dataset.labels)}
    parts = [
        BND_MAGIC,
        _pack_u32(FORMAT_VERSION),
        _pack_u32(len(dataset.bundles)),
        _pack_u32(dataset.group_size),
        _pack_u32(dataset.point_count),
        _pack_u32(len(dataset.labels)),
    ]
    parts.extend(_pack_string(label) for label in dataset.labels)
    for bundle in dataset.bundles:
        parts.append(_pack_u32(label_ids[bundle.label]))
        parts.append(_pack_string(bundle.provenance))
        parts.append(_pack_f64(bundle.streamlines))
    return b''.join(parts)


@_decoding
def decode_bnd(data: bytes, what: str = 'BND1 data') -> BndDataset:
    reader = _ByteReader(data, what)
    reader.expect_magic(BND_MAGIC, 'BND1')
    reader.expect_version()
    bundle_count = reader.u32()
    group_size = reader.u32()
    point_count = reader.u32()
    labels = [reader.string() for _ in range(reader.u32())]
    bundles = []
    shape = (group_size, point_count, 3)
    for _ in range(bundle_count):
        label_id = reader.u32()
        if label_id >= len(labels):
            raise FormatError(f"label id {label_id} outside label table of {len(labels)} in {what}")
        provenance = reader.string()
        bundles.append(Bundle(reader.f64(shape), labels[label_id], provenance))
    reader.finish()
    return BndDataset(group_size, point_count, labels, bundles)


def write_bnd(dataset: BndDataset, path):
    _write_file(path, encode_bnd(dataset))
    logger.info(f"Wrote {len(dataset)} bundles to {path}")


def read_bnd(path) -> BndDataset:
    dataset = decode_bnd(_read_file(path), str(path))
    logger.debug(f"Read {len(dataset)} bundles from {path}")
    return dataset


# ---------------------------------------------------------------------------
# TrackVis import

@_decoding
def decode_trackvis(data: bytes, what: str = 'TrackVis data') -> List[np.ndarray]:
    if len(data) < TRK_HEADER_SIZE:
        raise TruncatedFileError(TRK_HEADER_SIZE, len(data), what=f"{what} header")
    header = np.frombuffer(data[:TRK_HEADER_SIZE], dtype=TRK_HEADER_DTYPE)[0]
    if bytes(header['id_string'])[:5] != b'TRACK':
        raise FormatError(f"not a TrackVis file ({what})")
    hdr_size = int(header['hdr_size'])
    if hdr_size != TRK_HEADER_SIZE:
        if hdr_size.to_bytes(4, 'little', signed=True) == TRK_HEADER_SIZE.to_bytes(4, 'big'):
            raise UnsupportedFormatError(f"big-endian TrackVis files are not supported ({what})")
        raise FormatError(f"header size field is {hdr_size}, expected {TRK_HEADER_SIZE} ({what})")
    if int(header['n_scalars']) != 0 or int(header['n_properties']) != 0:
        raise UnsupportedFormatError(
            f"per-point scalars ({int(header['n_scalars'])}) and per-track properties "
            f"({int(header['n_properties'])}) are not supported ({what})"
        )
    declared = int(header['n_count'])
    if declared < 0:
        raise FormatError(f"negative track count {declared} ({what})")

    reader = _ByteReader(data, what)
    reader.offset = TRK_HEADER_SIZE
    tracks = []
    # a zero count means "unknown": read tracks until the end of the file
    while (declared and len(tracks) < declared) or (not declared and reader.offset < len(data)):
        n_points = struct.unpack('<i', reader.take(4))[0]
        if n_points < 1:
            raise FormatError(f"track {len(tracks)} declares {n_points} points ({what})")
        raw = reader.take(n_points * 12)
        tracks.append(np.frombuffer(raw, dtype='<f4').reshape(n_points, 3).astype(np.float64))
    reader.finish()
    return tracks


def import_trackvis(path) -> List[Tuple[np.ndarray, str]]:
    """Streamlines of a .trk file with provenance "<file stem>#<track index>" """
    tracks = decode_trackvis(_read_file(path), str(path))
    stem = Path(path).stem
    logger.info(f"Imported {len(tracks)} streamlines from {path}")
    return [(points, f"{stem}#{i}") for i, points in enumerate(tracks)]


def bundles_from_tracks(tracks: Sequence[Tuple[np.ndarray, str]], label: str, group_size: int,
                        point_count: int, rng: Rng, provenance: str = '') -> List[Bundle]:
    """Resample every streamline to point_count, then group into fixed-size bundles"""
    resampled = [resample_arclength(points, point_count) for points, _ in tracks]
    return make_groups(resampled, group_size, rng, label=label, provenance=provenance)


# ---------------------------------------------------------------------------
# Balancing and splitting

@dataclass
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0
    balance: bool = True


@dataclass
class DatasetSplit:
    train: List[Bundle]
    val: List[Bundle]

    def classes(self) -> List[str]:
        return sorted({b.label for b in self.train} | {b.label for b in self.val})


def _train_count(fraction: float, n: int) -> int:
    n_train = int(np.floor(fraction * n + 0.5))
    n_train = min(max(n_train, 1), n)
    if fraction < 1.0 and n >= 2:
        n_train = min(n_train, n - 1)
    return n_train


def balance_and_split(bundles: Sequence[Bundle], spec: SplitSpec,
                      labels: Optional[Sequence[str]] = None) -> DatasetSplit:
    """Down-sample every class to the smallest class count, then split each class.

    The result does not depend on input order: bundles are sorted by
    (label, provenance, coordinates) before any seeded shuffling.
    """
    if not 0.0 < spec.train_fraction <= 1.0:
        raise DataError(f"train fraction must be in (0, 1], got {spec.train_fraction}")
    by_class: Dict[str, List[Bundle]] = {label: [] for label in (labels or [])}
    for bundle in bundles:
        by_class.setdefault(bundle.label, []).append(bundle)
    empty = sorted(label for label, members in by_class.items() if not members)
    if empty:
        raise DataError(f"classes with no bundles: {', '.join(empty)}")
    if not by_class:
        raise DataError("cannot split an empty dataset")

    minimum = min(len(members) for members in by_class.values())
    root = Rng(spec.seed)
    train, val = [], []
    for class_index, label in enumerate(sorted(by_class)):
        members = sorted(by_class[label], key=lambda b: (b.provenance, b.streamlines.tobytes()))
        order = root.spawn(class_index).permutation(len(members))
        if spec.balance:
            if len(members) > minimum:
                logger.info(f"Down-sampling class {label} from {len(members)} to {minimum} bundles")
            order = order[:minimum]
        n_train = _train_count(spec.train_fraction, len(order))
        train.extend(members[i] for i in order[:n_train])
        val.extend(members[i] for i in order[n_train:])
    logger.info(f"Split {len(train)} train / {len(val)} validation bundles over {len(by_class)} classes")
    return DatasetSplit(train, val)


def prepare_dataset(dataset: BndDataset, spec: SplitSpec) -> Tuple[DatasetSplit, NormStats]:
    """Balance, split and normalize with statistics fitted on the training split"""
    split = balance_and_split(dataset.bundles, spec, labels=dataset.labels)
    train, val, stats = normalize_bundles(split.train, split.val)
    return DatasetSplit(train, val), stats


def save_prepared(directory, split: DatasetSplit, stats: NormStats, group_size: int, point_count: int):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = split.classes()
    write_bnd(BndDataset(group_size, point_count, labels, split.train), directory / 'train.bnd')
    write_bnd(BndDataset(group_size, point_count, labels, split.val), directory / 'val.bnd')
    (directory / 'norm.json').write_text(json.dumps(stats.to_dict(), sort_keys=True, indent=2))


def load_prepared(directory) -> Tuple[DatasetSplit, NormStats]:
    directory = Path(directory)
    try:
        stats = NormStats.from_dict(json.loads((directory / 'norm.json').read_text()))
    except FileNotFoundError:
        raise DataError(f"file not found: {directory / 'norm.json'}")
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed normalization file {directory / 'norm.json'}: {exc}")
    train = read_bnd(directory / 'train.bnd')
    val = read_bnd(directory / 'val.bnd')
    return DatasetSplit(train.bundles, val.bundles), stats


def load_training_data(path, spec: Optional[SplitSpec] = None) -> Tuple[DatasetSplit, NormStats]:
    """A prepared directory as written by save_prepared, or a raw .bnd file prepared in memory"""
    path = Path(path)
    if path.is_dir():
        return load_prepared(path)
    if not path.exists():
        raise DataError(f"data not found: {path}")
    return prepare_dataset(read_bnd(path), spec or SplitSpec(seed=settings.BUNDLECODEC_SEED))


def load_split_bundles(path, split: str = 'val', stats: Optional[NormStats] = None,
                       spec: Optional[SplitSpec] = None) -> List[Bundle]:
    """Normalized bundles of one split ('train', 'val' or 'all').

    A prepared directory is read as is. A raw .bnd file is split with `spec`
    and normalized with `stats` when given (a checkpoint's statistics), or with
    statistics fitted on its own training split.
    """
    if split not in ('train', 'val', 'all'):
        raise DataError(f"unknown split {split!r}; expected train, val or all")
    path = Path(path)
    if path.is_dir() or stats is None:
        prepared, _ = load_training_data(path, spec)
    elif path.exists():
        raw = balance_and_split(read_bnd(path).bundles, spec or SplitSpec(seed=settings.BUNDLECODEC_SEED))
        prepared = DatasetSplit(stats.apply(raw.train), stats.apply(raw.val))
    else:
        raise DataError(f"data not found: {path}")
    if split == 'train':
        return prepared.train
    if split == 'val':
        return prepared.val
    return prepared.train + prepared.val


# ---------------------------------------------------------------------------
# BNL1 latent records

@dataclass
class LatentRecord:
    model_tag: str
    label: str
    provenance: str
    z: np.ndarray  # [S, d]
    s: Optional[np.ndarray] = None  # [S, d] bottleneck output, when the model quantizes

    @property
    def latent_dim(self) -> int:
        return self.z.shape[1]


def encode_latents(records: Sequence[LatentRecord]) -> bytes:
    records = list(records)
    group_size = records[0].z.shape[0] if records else 0
    dim = records[0].latent_dim if records else 0
    parts = [BNL_MAGIC, _pack_u32(FORMAT_VERSION), _pack_u32(len(records)),
             _pack_u32(group_size), _pack_u32(dim)]
    for i, record in enumerate(records):
        if record.z.shape != (group_size, dim):
            raise DataError(f"latent record {i} has shape {record.z.shape}, expected ({group_size}, {dim})")
        if record.s is not None and record.s.shape != record.z.shape:
            raise DataError(f"latent record {i} quantized shape {record.s.shape} differs from {record.z.shape}")
        parts.append(_pack_string(record.model_tag))
        parts.append(_pack_string(record.label))
        parts.append(_pack_string(record.provenance))
        parts.append(struct.pack('<B', 0 if record.s is None else 1))
        parts.append(_pack_f64(record.z))
        if record.s is not None:
            parts.append(_pack_f64(record.s))
    return b''.join(parts)


@_decoding
def decode_latents(data: bytes, what: str = 'BNL1 data') -> List[LatentRecord]:
    reader = _ByteReader(data, what)
    reader.expect_magic(BNL_MAGIC, 'BNL1')
    reader.expect_version()
    count = reader.u32()
    shape = (reader.u32(), reader.u32())
    records = []
    for _ in range(count):
        tag = reader.string()
        label = reader.string()
        provenance = reader.string()
        flag = reader.take(1)[0]
        if flag not in (0, 1):
            raise FormatError(f"invalid quantized flag {flag} in {what}")
        z = reader.f64(shape)
        s = reader.f64(shape) if flag else None
        records.append(LatentRecord(tag, label, provenance, z, s))
    reader.finish()
    return records


def write_latents(records: Sequence[LatentRecord], path):
    _write_file(path, encode_latents(records))
    logger.info(f"Wrote {len(records)} latent records to {path}")


def read_latents(path) -> List[LatentRecord]:
    return decode_latents(_read_file(path), str(path))


def append_latents(records: Sequence[LatentRecord], path):
    existing = read_latents(path) if Path(path).exists() else []
    if existing and records and existing[0].latent_dim != records[0].latent_dim:
        raise DataError(
            f"latent dimension mismatch on append: {path} holds d={existing[0].latent_dim}, "
            f"new records have d={records[0].latent_dim}"
        )
    write_latents(existing + list(records), path)


def export_latents(model, bundles: Iterable[Bundle], path, append: bool = False) -> List[LatentRecord]:
    """One record per bundle in input order; `model` provides latents(bundle) -> (z, s)"""
    records = []
    for bundle in bundles:
        z, s = model.latents(bundle)
        records.append(LatentRecord(model.tag, bundle.label, bundle.provenance, z, s))
    if append:
        append_latents(records, path)
    else:
        write_latents(records, path)
    return records


# ---------------------------------------------------------------------------
# BNC1 checkpoints

def encode_checkpoint(metadata: Dict, tensors: Dict[str, np.ndarray]) -> bytes:
    """metadata must be JSON-serializable; tensors are stored in insertion order"""
    table = [{'name': name, 'shape': list(array.shape)} for name, array in tensors.items()]
    header = dict(metadata, tensors=table)
    blob = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts = [BNC_MAGIC, _pack_u32(FORMAT_VERSION), _pack_u32(len(blob)), blob]
    parts.extend(_pack_f64(array) for array in tensors.values())
    return b''.join(parts)


@_decoding
def decode_checkpoint(data: bytes, what: str = 'BNC1 data') -> Tuple[Dict, Dict[str, np.ndarray]]:
    reader = _ByteReader(data, what)
    reader.expect_magic(BNC_MAGIC, 'BNC1')
    reader.expect_version()
    blob = reader.take(reader.u32())
    try:
        metadata = json.loads(blob.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint metadata is not valid JSON in {what}: {exc}")
    if not isinstance(metadata, dict) or not isinstance(metadata.get('tensors'), list):
        raise FormatError(f"checkpoint metadata lacks a tensor table in {what}")
    tensors = {}
    for entry in metadata.pop('tensors'):
        shape = tuple(int(n) for n in entry['shape'])
        if any(n < 0 for n in shape):
            raise FormatError(f"negative dimension in tensor {entry['name']!r} of {what}")
        tensors[str(entry['name'])] = reader.f64(shape)
    reader.finish()
    return metadata, tensors


def write_checkpoint(path, metadata: Dict, tensors: Dict[str, np.ndarray]):
    _write_file(path, encode_checkpoint(metadata, tensors))
    logger.debug(f"Wrote checkpoint {path} ({len(tensors)} tensors)")


def read_checkpoint(path) -> Tuple[Dict, Dict[str, np.ndarray]]:
    return decode_checkpoint(_read_file(path), str(path))
