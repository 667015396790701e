"""
Bundle codec module.
This module builds the residual 1D-convolutional encoder and decoder shared by
every architecture, the five bottlenecks (plain autoencoder, variational,
straight-through vector quantization, EMA vector quantization and
Gumbel-weighted differentiable quantization), their training losses, and the
Model wrapper used by training, evaluation and analysis.

Bundles enter as [S, 3, P] (or several bundles stacked to [N, 3, P]); every
streamline is encoded independently with shared weights.
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .curves import Bundle
from .diffnum import (
    GradCheckReport, Rng, Tensor, add, conv1d, conv_transpose1d, detach, exp, gather_rows, grad_check,
    gumbel_from_uniform, linear, matmul,
    mse_loss, mul, no_tape, pairwise_sq_dist, relu, reshape, sample_gumbel, scale,
    softmax_temp, softplus, sq_dist, straight_through, sub, sum_all,
)
from .exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

KINDS = ('ae', 'vae', 'vqvae', 'vqema', 'vqdiff')
QUANTIZED_KINDS = ('vqvae', 'vqema', 'vqdiff')
ACTIVATIONS = {'relu': relu, 'softplus': softplus}
DOWNSAMPLE_STEPS = 2


@dataclass
class ModelConfig:
    """Architecture and bottleneck hyperparameters"""
    kind: str = 'vqdiff'
    points: int = 64
    channels: int = 32
    latent_dim: int = 32
    codebook_size: int = 128
    res_blocks: int = 2
    beta_temp: float = 10.0
    sigma_codebook: float = 2.0
    kl_weight: float = 1.0
    commitment: float = 0.25
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    activation: str = 'relu'

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture {self.kind!r}; expected one of {', '.join(KINDS)}",
                              module='codec')
        factor = 2 ** DOWNSAMPLE_STEPS
        if self.points < factor or self.points % factor:
            raise ConfigError(f"point count {self.points} must be a positive multiple of {factor}",
                              module='codec')
        if self.channels < 1 or self.latent_dim < 1 or self.res_blocks < 0:
            raise ConfigError("channels and latent_dim must be >= 1, res_blocks >= 0", module='codec')
        if self.kind in QUANTIZED_KINDS and self.codebook_size < 2:
            raise ConfigError(f"codebook needs at least 2 entries, got {self.codebook_size}", module='codec')
        if not self.beta_temp > 0:
            raise ConfigError(f"beta_temp must be positive, got {self.beta_temp}", module='codec')
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in (0, 1), got {self.ema_decay}", module='codec')
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", module='codec')

    @property
    def quantized(self) -> bool:
        return self.kind in QUANTIZED_KINDS

    @property
    def bottom_length(self) -> int:
        return self.points // 2 ** DOWNSAMPLE_STEPS

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'ModelConfig':
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


Params = Dict[str, Tensor]


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes in their canonical order"""
    c, d, flat = config.channels, config.latent_dim, config.channels * config.bottom_length
    shapes: Dict[str, Tuple[int, ...]] = OrderedDict()
    shapes['enc.stem.w'], shapes['enc.stem.b'] = (c, 3, 3), (c,)
    for i in range(config.res_blocks):
        for j in (1, 2):
            shapes[f'enc.res{i}.w{j}'], shapes[f'enc.res{i}.b{j}'] = (c, c, 3), (c,)
    for j in range(DOWNSAMPLE_STEPS):
        shapes[f'enc.down{j}.w'], shapes[f'enc.down{j}.b'] = (c, c, 4), (c,)
    heads = ('enc.mu', 'enc.logvar') if config.kind == 'vae' else ('enc.proj',)
    for head in heads:
        shapes[f'{head}.w'], shapes[f'{head}.b'] = (d, flat), (d,)
    shapes['dec.proj.w'], shapes['dec.proj.b'] = (flat, d), (flat,)
    for j in range(DOWNSAMPLE_STEPS):
        shapes[f'dec.up{j}.w'], shapes[f'dec.up{j}.b'] = (c, c, 4), (c,)
    for i in range(config.res_blocks):
        for j in (1, 2):
            shapes[f'dec.res{i}.w{j}'], shapes[f'dec.res{i}.b{j}'] = (c, c, 3), (c,)
    shapes['dec.out.w'], shapes['dec.out.b'] = (3, c, 3), (3,)
    if config.quantized:
        shapes['codebook'] = (config.codebook_size, d)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if len(shape) == 3:
        return shape[1] * shape[2] if not name.startswith('dec.up') else shape[0] * shape[2]
    return shape[1]


def init_params(config: ModelConfig, rng: Rng) -> Params:
    """He-normal weights, zero biases, codebook i.i.d. N(0, sigma_codebook^2).

    The log-variance head starts at zero so the initial posterior is N(mu, I).
    """
    params: Params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name == 'codebook':
            value = rng.normal(shape, scale=config.sigma_codebook)
        elif name.endswith('.b') or name[-2:] in ('b1', 'b2') or name.startswith('enc.logvar'):
            value = np.zeros(shape)
        else:
            value = rng.normal(shape, scale=np.sqrt(2.0 / _fan_in(name, shape)))
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# Encoder / decoder

def _res_block(h: Tensor, params: Params, prefix: str, act) -> Tensor:
    inner = act(conv1d(h, params[f'{prefix}.w1'], padding=1, bias=params[f'{prefix}.b1']))
    return act(add(h, conv1d(inner, params[f'{prefix}.w2'], padding=1, bias=params[f'{prefix}.b2'])))


def _check_input(config: ModelConfig, x: Tensor):
    if x.ndim != 3 or x.shape[1] != 3 or x.shape[2] != config.points:
        raise ShapeError(f"encoder input must be [N, 3, {config.points}], got {x.shape}", module='codec')


def encoder_features(params: Params, config: ModelConfig, x: Tensor) -> Tensor:
    _check_input(config, x)
    act = ACTIVATIONS[config.activation]
    h = act(conv1d(x, params['enc.stem.w'], padding=1, bias=params['enc.stem.b']))
    for i in range(config.res_blocks):
        h = _res_block(h, params, f'enc.res{i}', act)
    for j in range(DOWNSAMPLE_STEPS):
        h = act(conv1d(h, params[f'enc.down{j}.w'], stride=2, padding=1, bias=params[f'enc.down{j}.b']))
    return reshape(h, (x.shape[0], config.channels * config.bottom_length))


def encode(params: Params, config: ModelConfig, x: Tensor) -> Tensor:
    """Latent z per streamline, [N, d]; the mean head for the variational model"""
    head = 'enc.mu' if config.kind == 'vae' else 'enc.proj'
    return linear(encoder_features(params, config, x), params[f'{head}.w'], params[f'{head}.b'])


def encode_vae(params: Params, config: ModelConfig, x: Tensor) -> Tuple[Tensor, Tensor]:
    features = encoder_features(params, config, x)
    mu = linear(features, params['enc.mu.w'], params['enc.mu.b'])
    logvar = linear(features, params['enc.logvar.w'], params['enc.logvar.b'])
    return mu, logvar


def decode(params: Params, config: ModelConfig, s: Tensor) -> Tensor:
    """[N, d] bottleneck output to [N, 3, P] streamlines"""
    if s.ndim != 2 or s.shape[1] != config.latent_dim:
        raise ShapeError(f"decoder input must be [N, {config.latent_dim}], got {s.shape}", module='codec')
    act = ACTIVATIONS[config.activation]
    h = act(linear(s, params['dec.proj.w'], params['dec.proj.b']))
    h = reshape(h, (s.shape[0], config.channels, config.bottom_length))
    for j in range(DOWNSAMPLE_STEPS):
        h = act(conv_transpose1d(h, params[f'dec.up{j}.w'], stride=2, padding=1, bias=params[f'dec.up{j}.b']))
    for i in range(config.res_blocks):
        h = _res_block(h, params, f'dec.res{i}', act)
    return conv1d(h, params['dec.out.w'], padding=1, bias=params['dec.out.b'])


# ---------------------------------------------------------------------------
# Bottlenecks

def quantize_vqdiff(z: Tensor, codebook: Tensor, beta_temp: float, rng: Optional[Rng] = None,
                    mode: str = 'train', noise: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Gumbel-weighted combination of codebook vectors.

    Logits are negative squared distances. In train mode unit Gumbel noise
    scaled by beta_temp is added before the tempered softmax; eval mode uses no
    noise. Gradients reach both z and the codebook.
    """
    logits = scale(sq_dist(z, codebook), -1.0)
    if mode == 'train':
        if noise is None:
            if rng is None:
                raise ConfigError("train-mode quantization needs an rng or explicit noise", module='codec')
            gumbel = sample_gumbel(rng, logits.shape)
        else:
            gumbel = Tensor.wrap(noise)
        logits = add(logits, scale(gumbel, beta_temp))
    elif mode != 'eval':
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}", module='codec')
    weights = softmax_temp(logits, beta_temp)
    return matmul(weights, codebook), weights


def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """argmin over codebook rows; ties go to the lowest index"""
    return np.argmin(pairwise_sq_dist(z, codebook), axis=1)


def quantize_vqvae(z: Tensor, codebook: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Nearest codebook vector forward, gradient copied straight through to z"""
    indices = nearest_codes(z.data, codebook.data)
    return straight_through(z, codebook.data[indices]), indices


@dataclass
class EmaState:
    """Running cluster counts N and sums m of the EMA codebook"""
    counts: np.ndarray
    sums: np.ndarray

    @classmethod
    def from_codebook(cls, codebook: np.ndarray) -> 'EmaState':
        return cls(np.ones(codebook.shape[0]), np.array(codebook, dtype=np.float64))


def quantize_vqema_update(z: np.ndarray, assignments: np.ndarray, codebook: np.ndarray,
                          state: EmaState, decay: float, eps: float) -> np.ndarray:
    """Advance the EMA statistics in place and return the new codebook"""
    if not 0.0 < decay < 1.0:
        raise ConfigError(f"EMA decay must be in (0, 1), got {decay}", module='codec')
    k = codebook.shape[0]
    batch_counts = np.bincount(assignments, minlength=k).astype(np.float64)
    batch_sums = np.zeros_like(state.sums)
    np.add.at(batch_sums, assignments, z)
    state.counts = decay * state.counts + (1.0 - decay) * batch_counts
    state.sums = decay * state.sums + (1.0 - decay) * batch_sums
    total = state.counts.sum()
    smoothed = (state.counts + eps) / (total + k * eps) * total
    return state.sums / smoothed[:, None]


def bottleneck_vae(mu: Tensor, logvar: Tensor, rng: Optional[Rng] = None, mode: str = 'train',
                   noise: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Reparameterized sample and KL to N(0, I), averaged over streamlines"""
    one = Tensor(1.0)
    per_dim = sub(sub(add(mul(mu, mu), exp(logvar)), one), logvar)
    kl = scale(sum_all(per_dim), 0.5 / mu.shape[0])
    if mode == 'eval':
        return mu, kl
    if noise is None:
        if rng is None:
            raise ConfigError("train-mode sampling needs an rng or explicit noise", module='codec')
        noise = rng.normal(mu.shape)
    std = exp(scale(logvar, 0.5))
    return add(mu, mul(std, Tensor.wrap(noise))), kl


# ---------------------------------------------------------------------------
# Forward pass and losses

@dataclass
class ForwardOutputs:
    recon: Tensor
    z: Tensor
    s: Tensor
    weights: Optional[Tensor] = None
    indices: Optional[np.ndarray] = None
    quantized: Optional[Tensor] = None
    logvar: Optional[Tensor] = None
    kl: Optional[Tensor] = None


def bottleneck(params: Params, config: ModelConfig, z: Tensor, mode: str = 'train',
               rng: Optional[Rng] = None, noise: Optional[np.ndarray] = None,
               logvar: Optional[Tensor] = None) -> ForwardOutputs:
    """Run the configured bottleneck on pre-bottleneck latents; recon is filled in by forward"""
    kind = config.kind
    if kind == 'ae':
        return ForwardOutputs(None, z, z)
    if kind == 'vae':
        if logvar is None:
            logvar = Tensor.wrap(np.zeros(z.shape))
        s, kl = bottleneck_vae(z, logvar, rng, mode, noise)
        return ForwardOutputs(None, z, s, logvar=logvar, kl=kl)
    codebook = params['codebook']
    if kind == 'vqdiff':
        s, weights = quantize_vqdiff(z, codebook, config.beta_temp, rng, mode, noise)
        return ForwardOutputs(None, z, s, weights=weights)
    s, indices = quantize_vqvae(z, codebook)
    return ForwardOutputs(None, z, s, indices=indices, quantized=gather_rows(codebook, indices))


def forward(params: Params, config: ModelConfig, x: Tensor, mode: str = 'train',
            rng: Optional[Rng] = None, noise: Optional[np.ndarray] = None) -> ForwardOutputs:
    """Encode, bottleneck and decode a [N, 3, P] batch of streamlines"""
    if config.kind == 'vae':
        z, logvar = encode_vae(params, config, x)
    else:
        z, logvar = encode(params, config, x), None
    out = bottleneck(params, config, z, mode, rng, noise, logvar)
    out.recon = decode(params, config, out.s)
    return out


def model_loss(config: ModelConfig, x: Tensor, out: ForwardOutputs) -> Tensor:
    """Reconstruction MSE plus the auxiliary terms of the bottleneck.

    The differentiable quantizer trains on reconstruction alone. Quantization
    auxiliaries are mean squared, like the reconstruction term.
    """
    loss = mse_loss(out.recon, x)
    kind = config.kind
    if kind == 'vae':
        loss = add(loss, scale(out.kl, config.kl_weight))
    elif kind == 'vqvae':
        loss = add(loss, mse_loss(out.quantized, detach(out.z)))
        loss = add(loss, scale(mse_loss(out.z, detach(out.quantized)), config.commitment))
    elif kind == 'vqema':
        loss = add(loss, scale(mse_loss(out.z, detach(out.quantized)), config.commitment))
    return loss


def codebook_usage(assignments: np.ndarray, codebook_size: int) -> Tuple[np.ndarray, float]:
    """Average weight per codebook entry and the perplexity of that distribution.

    `assignments` is either hard indices [N] or soft weights [N, k].
    """
    assignments = np.asarray(assignments)
    if assignments.ndim == 1:
        usage = np.bincount(assignments.astype(np.int64), minlength=codebook_size) / max(len(assignments), 1)
    else:
        usage = assignments.mean(axis=0)
    nonzero = usage[usage > 0]
    perplexity = float(np.exp(-np.sum(nonzero * np.log(nonzero))))
    return usage.astype(np.float64), perplexity


# ---------------------------------------------------------------------------
# Model wrapper

class Model:
    """Parameters, configuration and EMA state of one trained codec"""

    def __init__(self, config: ModelConfig, params: Params, ema: Optional[EmaState] = None):
        self.config = config
        self.params = params
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ConfigError(f"parameter set does not match a {config.kind} model", module='codec')
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}",
                                 module='codec')
        if config.kind == 'vqema' and ema is None:
            ema = EmaState.from_codebook(params['codebook'].data)
        self.ema = ema

    @classmethod
    def create(cls, config: ModelConfig, rng: Rng) -> 'Model':
        return cls(config, init_params(config, rng))

    @property
    def tag(self) -> str:
        return self.config.kind

    def trainable(self) -> List[Tensor]:
        """Parameters updated by the optimizer; the EMA codebook is excluded"""
        return [p for name, p in self.params.items()
                if not (name == 'codebook' and self.config.kind == 'vqema')]

    def decoder_params(self) -> List[Tensor]:
        return [p for name, p in self.params.items() if name.startswith('dec.')]

    def forward(self, x: Tensor, mode: str = 'train', rng: Optional[Rng] = None,
                noise: Optional[np.ndarray] = None) -> ForwardOutputs:
        return forward(self.params, self.config, x, mode, rng, noise)

    def loss(self, x: Tensor, out: ForwardOutputs) -> Tensor:
        return model_loss(self.config, x, out)

    def ema_update(self, out: ForwardOutputs):
        codebook = self.params['codebook']
        codebook.data = quantize_vqema_update(
            out.z.data, out.indices, codebook.data, self.ema,
            self.config.ema_decay, self.config.ema_eps,
        )

    def _eval(self, x: np.ndarray) -> ForwardOutputs:
        with no_tape():
            return self.forward(Tensor.wrap(x), mode='eval')

    def reconstruct(self, bundle: Bundle) -> np.ndarray:
        """Noiseless reconstruction as [S, P, 3]"""
        out = self._eval(bundle.as_channels())
        return np.ascontiguousarray(out.recon.data.transpose(0, 2, 1))

    def latents(self, bundle: Bundle) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Pre-bottleneck z and, for quantizing models, the bottleneck output s"""
        out = self._eval(bundle.as_channels())
        return out.z.data.copy(), (out.s.data.copy() if self.config.quantized else None)

    def decode_latents(self, z: np.ndarray) -> np.ndarray:
        """Run the eval-mode bottleneck and decoder on given pre-bottleneck latents"""
        with no_tape():
            out = bottleneck(self.params, self.config, Tensor.wrap(z), mode='eval')
            recon = decode(self.params, self.config, out.s)
        return np.ascontiguousarray(recon.data.transpose(0, 2, 1))

    def code_weights(self, bundle: Bundle) -> Optional[np.ndarray]:
        """Soft weights or hard indices of the codebook for one bundle"""
        if not self.config.quantized:
            return None
        out = self._eval(bundle.as_channels())
        return out.weights.data if out.weights is not None else out.indices

    def state_tensors(self) -> Dict[str, np.ndarray]:
        tensors = OrderedDict((name, p.data) for name, p in self.params.items())
        if self.ema is not None:
            tensors['ema.counts'] = self.ema.counts
            tensors['ema.sums'] = self.ema.sums
        return tensors

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: Dict[str, np.ndarray]) -> 'Model':
        names = list(param_shapes(config))
        missing = [n for n in names if n not in tensors]
        if missing:
            raise ConfigError(f"checkpoint lacks tensors for a {config.kind} model: {', '.join(missing[:3])}",
                              module='codec')
        params = OrderedDict((n, Tensor(tensors[n], requires_grad=True, name=n)) for n in names)
        ema = None
        if 'ema.counts' in tensors:
            ema = EmaState(np.array(tensors['ema.counts']), np.array(tensors['ema.sums']))
        return cls(config, params, ema)


# ---------------------------------------------------------------------------
# End-to-end gradient checks

def gradcheck_config(kind: str) -> ModelConfig:
    """Two-streamline toy model; softplus keeps the loss smooth for central differences"""
    return ModelConfig(kind=kind, points=8, channels=4, latent_dim=4, codebook_size=4, res_blocks=1,
                       beta_temp=2.0, sigma_codebook=0.5, activation='softplus')


def end_to_end_check(kind: str, seed: int = 0, step: float = 1e-5, tol: float = 1e-4,
                     max_coords: Optional[int] = None) -> GradCheckReport:
    """Finite-difference check of model_loss for one architecture.

    Stochastic bottlenecks run with fixed noise. The straight-through models
    are checked on decoder parameters only, since their encoder gradient is
    by construction not the derivative of the forward function.
    """
    config = gradcheck_config(kind)
    rng = Rng(seed)
    params = init_params(config, rng.spawn(0))
    x = rng.spawn(1).normal((2, 3, config.points), scale=0.5)
    if kind == 'vqdiff':
        noise = gumbel_from_uniform(rng.spawn(2).uniform_open((2, config.codebook_size)))
    elif kind == 'vae':
        noise = rng.spawn(2).normal((2, config.latent_dim))
    else:
        noise = None
    names = [n for n in params if kind not in ('vqvae', 'vqema') or n.startswith('dec.')]

    def loss_of(*arrays: Tensor) -> Tensor:
        current = OrderedDict(params)
        current.update(zip(names, arrays))
        xt = Tensor.wrap(x)
        out = forward(current, config, xt, mode='train', noise=noise)
        return model_loss(config, xt, out)

    report = grad_check(loss_of, [params[n].data for n in names], step=step, tol=tol,
                        max_coords=max_coords, rng=rng.spawn(3))
    logger.info(f"[{kind}] end-to-end gradient check: max relative error {report.max_rel_err:.3e} "
                f"over {report.checked} coordinates")
    return report
