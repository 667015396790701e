"""
Training and evaluation loops.
This module turns a prepared dataset and a TrainConfig into checkpoints and a
loss log, resumes interrupted runs bit-exactly, evaluates checkpoints against
a split and compares architectures.
"""

import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from django.conf import settings

from . import dataio
from .codec import KINDS, Model, ModelConfig
from .curves import Bundle, NormStats
from .dataio import DatasetSplit
from .diffnum import AdamState, Rng, Tape, Tensor, adam_step, backward, mse_loss
from .exceptions import ConfigError, DataError, FormatError, TrainingDivergedError
from .metrics import BuanConfig, format_report, score_bundles, summarize_scores

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'bundlecodec-checkpoint'
LOSS_COLUMNS = ['iteration', 'loss', 'wall_ms']

# substream keys under the master seed
INIT_STREAM, SAMPLE_STREAM, NOISE_STREAM = 0, 1, 2


@dataclass
class TrainConfig:
    """Training run options; field names are the JSON config keys"""
    arch: str = 'vqdiff'
    iterations: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    beta_temp: float = 10.0
    sigma_codebook: float = 2.0
    latent_dim: int = 32
    codebook_size: int = 128
    channels: int = 32
    res_blocks: int = 2
    kl_weight: float = 1.0
    commitment: float = 0.25
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    activation: str = 'relu'
    checkpoint_path: str = 'checkpoint.bnc'
    log_path: str = 'loss.csv'
    eval_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if self.arch not in KINDS:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {', '.join(KINDS)}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.eval_every < 0 or self.log_every < 0:
            raise ConfigError("eval_every and log_every must be >= 0")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_options(cls, *layers: Optional[Dict[str, object]]) -> 'TrainConfig':
        """Settings defaults overlaid by each layer in turn; None values are skipped"""
        merged = dict(settings.BUNDLECODEC_TRAIN_DEFAULTS)
        known = set(cls.field_names())
        for layer in layers:
            for key, value in (layer or {}).items():
                if key not in known:
                    raise ConfigError(f"unknown config key {key!r}")
                if value is not None:
                    merged[key] = value
        return cls(**{k: v for k, v in merged.items() if k in known})

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def model_config(self, points: int) -> ModelConfig:
        return ModelConfig(
            kind=self.arch, points=points, channels=self.channels, latent_dim=self.latent_dim,
            codebook_size=self.codebook_size, res_blocks=self.res_blocks, beta_temp=self.beta_temp,
            sigma_codebook=self.sigma_codebook, kl_weight=self.kl_weight, commitment=self.commitment,
            ema_decay=self.ema_decay, ema_eps=self.ema_eps, activation=self.activation,
        )


@dataclass
class Checkpoint:
    model: Model
    adam: AdamState
    config: TrainConfig
    iteration: int
    sample_rng: Rng
    noise_rng: Rng
    stats: Optional[NormStats] = None

    @property
    def arch(self) -> str:
        return self.model.config.kind


def save_checkpoint(path, ckpt: Checkpoint):
    metadata = {
        'kind': CHECKPOINT_KIND,
        'config': ckpt.config.to_dict(),
        'model': ckpt.model.config.to_dict(),
        'seed': ckpt.config.seed,
        'iteration': ckpt.iteration,
        'rng': {'sample': ckpt.sample_rng.get_state(), 'noise': ckpt.noise_rng.get_state()},
        'adam': {'lr': ckpt.adam.lr, 'b1': ckpt.adam.b1, 'b2': ckpt.adam.b2,
                 'eps': ckpt.adam.eps, 't': ckpt.adam.t},
        'norm': ckpt.stats.to_dict() if ckpt.stats is not None else None,
    }
    tensors = ckpt.model.state_tensors()
    names = [name for name, p in ckpt.model.params.items() if p in ckpt.model.trainable()]
    for name, m, v in zip(names, ckpt.adam.m, ckpt.adam.v):
        tensors[f'adam.m.{name}'] = m
        tensors[f'adam.v.{name}'] = v
    dataio.write_checkpoint(path, metadata, tensors)


def load_checkpoint(path) -> Checkpoint:
    metadata, tensors = dataio.read_checkpoint(path)
    if metadata.get('kind') != CHECKPOINT_KIND:
        raise FormatError(f"{path} is not a training checkpoint")
    try:
        config = TrainConfig(**metadata['config'])
        model = Model.from_tensors(ModelConfig.from_dict(metadata['model']), tensors)
        names = [name for name, p in model.params.items() if p in model.trainable()]
        hyper = metadata['adam']
        adam = AdamState(lr=hyper['lr'], b1=hyper['b1'], b2=hyper['b2'], eps=hyper['eps'], t=hyper['t'],
                         m=[np.array(tensors[f'adam.m.{n}']) for n in names],
                         v=[np.array(tensors[f'adam.v.{n}']) for n in names])
        stats = NormStats.from_dict(metadata['norm']) if metadata.get('norm') else None
        return Checkpoint(model, adam, config, int(metadata['iteration']),
                          Rng.from_state(metadata['rng']['sample']),
                          Rng.from_state(metadata['rng']['noise']), stats)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint {path} metadata is incomplete: {exc}")


def stack_bundles(bundles: Sequence[Bundle]) -> np.ndarray:
    """[B * S, 3, P] batch with bundles stacked along the streamline axis"""
    return np.concatenate([b.as_channels() for b in bundles])


def validation_mse(model: Model, bundles: Sequence[Bundle]) -> float:
    if not bundles:
        return float('nan')
    errors = []
    for bundle in bundles:
        diff = model.reconstruct(bundle) - bundle.streamlines
        errors.append(float(np.mean(diff * diff)))
    return float(np.mean(errors))


def write_loss_log(rows: Sequence[Tuple[int, float, float]], path):
    frame = pd.DataFrame(list(rows), columns=LOSS_COLUMNS)
    frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')


def read_loss_log(path) -> pd.DataFrame:
    return pd.read_csv(path)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: pd.DataFrame
    val_mse: float = float('nan')


def _run(ckpt: Checkpoint, split: DatasetSplit, until: int,
         rows: Optional[List[Tuple[int, float, float]]] = None) -> TrainResult:
    config, model = ckpt.config, ckpt.model
    train = split.train
    if not train:
        raise DataError("training split is empty")
    rows = rows if rows is not None else []
    params = model.trainable()
    last_finite = float('nan')
    Path(config.checkpoint_path).parent.mkdir(parents=True, exist_ok=True)

    for iteration in range(ckpt.iteration + 1, until + 1):
        started = time.perf_counter()
        picks = ckpt.sample_rng.integers(0, len(train), size=config.batch_size)
        x = Tensor.wrap(stack_bundles([train[i] for i in picks]))
        with Tape() as tape:
            out = model.forward(x, mode='train', rng=ckpt.noise_rng)
            loss = model.loss(x, out)
        value = loss.item()
        if not np.isfinite(value):
            write_loss_log(rows, config.log_path)
            raise TrainingDivergedError(iteration, last_finite)
        last_finite = value
        grads = backward(loss, tape, wrt=params)
        adam_step(params, grads, ckpt.adam)
        if model.config.kind == 'vqema':
            model.ema_update(out)
        ckpt.iteration = iteration
        rows.append((iteration, value, (time.perf_counter() - started) * 1000.0))

        if config.log_every and iteration % config.log_every == 0:
            logger.info(f"[{model.tag}] iteration {iteration}/{until} loss {value:.6f}")
        if config.eval_every and iteration % config.eval_every == 0 and iteration < until:
            if split.val:
                logger.info(f"[{model.tag}] iteration {iteration} validation mse "
                            f"{validation_mse(model, split.val):.6f}")
            save_checkpoint(config.checkpoint_path, ckpt)
            write_loss_log(rows, config.log_path)

    val_mse = validation_mse(model, split.val)
    if split.val:
        logger.info(f"[{model.tag}] finished at iteration {ckpt.iteration}, validation mse {val_mse:.6f}")
    save_checkpoint(config.checkpoint_path, ckpt)
    write_loss_log(rows, config.log_path)
    return TrainResult(ckpt, pd.DataFrame(rows, columns=LOSS_COLUMNS), val_mse)


def new_checkpoint(config: TrainConfig, points: int, stats: Optional[NormStats] = None) -> Checkpoint:
    root = Rng(config.seed)
    model = Model.create(config.model_config(points), root.spawn(INIT_STREAM))
    adam = AdamState.for_params(model.trainable(), lr=config.learning_rate)
    return Checkpoint(model, adam, config, 0, root.spawn(SAMPLE_STREAM), root.spawn(NOISE_STREAM), stats)


def train_run(config: TrainConfig, split: DatasetSplit, stats: Optional[NormStats] = None) -> TrainResult:
    """Train from scratch for config.iterations; writes the checkpoint and loss log"""
    if not split.train:
        raise DataError("training split is empty")
    ckpt = new_checkpoint(config, split.train[0].points, stats)
    logger.info(f"Training {config.arch} for {config.iterations} iterations "
                f"on {len(split.train)} bundles (seed {config.seed})")
    return _run(ckpt, split, config.iterations)


def resume_run(checkpoint_path, split: DatasetSplit, extra_iterations: int,
               overrides: Optional[Dict[str, object]] = None) -> TrainResult:
    """Continue a saved run; the result matches an uninterrupted run of the total length"""
    if extra_iterations < 1:
        raise ConfigError(f"extra iterations must be >= 1, got {extra_iterations}")
    ckpt = load_checkpoint(checkpoint_path)
    total = ckpt.iteration + extra_iterations
    options = dict(ckpt.config.to_dict(), **(overrides or {}), iterations=total)
    ckpt.config = TrainConfig(**options)
    rows = []
    log_path = Path(ckpt.config.log_path)
    if log_path.exists():
        previous = read_loss_log(log_path)
        rows = [(int(r.iteration), float(r.loss), float(r.wall_ms))
                for r in previous.itertuples(index=False) if r.iteration <= ckpt.iteration]
    logger.info(f"Resuming {ckpt.arch} at iteration {ckpt.iteration} for {extra_iterations} more")
    return _run(ckpt, split, total, rows)


@dataclass
class EvalResult:
    report: pd.DataFrame
    scores: pd.DataFrame
    mean_loss: float

    def summary(self) -> str:
        return f"{format_report(self.report)}\nmean loss {self.mean_loss:.6f}"


def evaluate_split(checkpoint, bundles: Sequence[Bundle], cfg: Optional[BuanConfig] = None,
                   arch: Optional[str] = None, export_path=None, threads: Optional[int] = None) -> EvalResult:
    """Noiseless reconstruction report over every bundle of a split"""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if arch is not None and arch != ckpt.arch:
        raise ConfigError(f"checkpoint holds a {ckpt.arch} model, not {arch}")
    if not bundles:
        raise DataError("evaluation split is empty")
    model = ckpt.model
    scores = score_bundles(model.reconstruct, bundles, cfg, threads)
    report = summarize_scores(scores)
    if export_path is not None:
        recons = [Bundle(model.reconstruct(b), b.label, b.provenance) for b in bundles]
        if ckpt.stats is not None:
            recons = ckpt.stats.invert(recons)
        dataio.write_bnd(dataio.BndDataset.from_bundles(recons), export_path)
    return EvalResult(report, scores, float(scores['mse'].mean()))


def compare_checkpoints(checkpoints: Sequence, bundles: Sequence[Bundle], cfg: Optional[BuanConfig] = None,
                        threads: Optional[int] = None) -> pd.DataFrame:
    """Mean BUAN per class (rows) and architecture (columns)"""
    frames = []
    for checkpoint in checkpoints:
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        report = evaluate_split(ckpt, bundles, cfg, threads=threads).report
        frames.append(report.assign(arch=ckpt.arch))
    table = pd.concat(frames, ignore_index=True).pivot(index='class', columns='arch', values='mean_buan')
    return table.sort_index()


def codebook_gradient_norm(model: Model, batch: np.ndarray, rng: Optional[Rng] = None) -> float:
    """Norm of d(reconstruction MSE)/d(codebook) for one train-mode forward pass"""
    if not model.config.quantized:
        raise ConfigError(f"a {model.config.kind} model has no codebook", module='trainer')
    codebook = model.params['codebook']
    x = Tensor.wrap(batch)
    with Tape() as tape:
        out = model.forward(x, mode='train', rng=rng or Rng(0))
        loss = mse_loss(out.recon, x)
    grad, = backward(loss, tape, wrt=[codebook])
    return float(np.linalg.norm(grad))
