"""
Differentiable numerics module.
This module holds dense float64 tensors, the recording tape and reverse-mode
gradients, the primitives the codec is built from, the Adam optimizer, seeded
random streams and finite-difference gradient checking.

Primitives record themselves on the innermost active Tape when at least one
input requires a gradient; outside a tape they are plain numpy computations.
Convolutions use the cross-correlation convention (no kernel flip) with zero
padding. Broadcasting is limited to scalar-with-tensor.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

# Uniform draws are clamped here before the Gumbel transform
UNIFORM_LOW = 2.0 ** -53
UNIFORM_HIGH = 1.0 - 2.0 ** -53

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class _State(threading.local):
    def __init__(self):
        self.tapes: List[Optional['Tape']] = []
        self.debug = False


_state = _State()


class Tensor:
    """Dense float64 array that can take part in a gradient tape"""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', '__weakref__')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> 'Tensor':
        """Adopt a float64 array without copying it"""
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class TapeEntry:
    """One recorded primitive application"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of primitive applications, used as a context manager"""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> 'Tape':
        _state.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn):
        self.entries.append(TapeEntry(op, inputs, output, backward_fn))

    def leaves(self) -> List[Tensor]:
        """Gradient-requiring tensors that no recorded op produced, in first-use order"""
        produced = {id(entry.output) for entry in self.entries}
        seen = set()
        found = []
        for entry in self.entries:
            for tensor in entry.inputs:
                key = id(tensor)
                if tensor.requires_grad and key not in produced and key not in seen:
                    seen.add(key)
                    found.append(tensor)
        return found


def current_tape() -> Optional[Tape]:
    return _state.tapes[-1] if _state.tapes else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording inside the block"""
    _state.tapes.append(None)
    try:
        yield
    finally:
        _state.tapes.pop()


@contextmanager
def debug_numerics(enabled: bool = True) -> Iterator[None]:
    """Raise NumericalError as soon as a primitive produces NaN or Inf"""
    previous = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = previous


def set_debug_numerics(enabled: bool):
    _state.debug = bool(enabled)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a primitive's forward value and record it when a tape needs it.

    backward_fn maps the output gradient to one gradient (or None) per input.
    """
    if _state.debug and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    tape = current_tape()
    inputs = tuple(inputs)
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.wrap(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape, wrt: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """Reverse-mode sweep over the tape.

    Populates .grad on every leaf reached and returns the gradients of `wrt`
    (all tape leaves when omitted). Leaves the loss does not depend on get zeros.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for entry in reversed(tape.entries):
        upstream = grads.pop(id(entry.output), None)
        if upstream is None:
            continue
        input_grads = entry.backward(upstream)
        for tensor, grad in zip(entry.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
    targets = list(wrt) if wrt is not None else tape.leaves()
    result = []
    for tensor in targets:
        grad = grads.get(id(tensor))
        if grad is None:
            grad = np.zeros_like(tensor.data)
        else:
            grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
        tensor.grad = grad
        result.append(grad)
    return result


# ---------------------------------------------------------------------------
# Element-wise primitives

def _check_pair(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum())
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair('add', a, b)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_op('add', a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair('sub', a, b)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return make_op('sub', a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair('mul', a, b)

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return make_op('mul', a.data * b.data, (a, b), grad_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_op('scale', x.data * factor, (x,), lambda g: (g * factor,))


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.data)
    return make_op('exp', value, (x,), lambda g: (g * value,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op('relu', np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    """Smooth ReLU, ln(1 + e^x)"""
    slope = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op('softplus', np.logaddexp(0.0, x.data), (x,), lambda g: (g * slope,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    value = x.data.reshape(tuple(shape))
    return make_op('reshape', value, (x,), lambda g: (g.reshape(original),))


def sum_all(x: Tensor) -> Tensor:
    return make_op('sum', np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def grad_fn(g):
        return (np.full(x.shape, float(g) / n),)

    return make_op('mean', np.asarray(x.data.mean()), (x,), grad_fn)


def detach(x: Tensor) -> Tensor:
    """Gradient stop: same values, no path back to x"""
    return Tensor.wrap(x.data)


def straight_through(z: Tensor, quantized) -> Tensor:
    """Forward value of `quantized`, gradient copied unchanged to z"""
    target = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized, dtype=np.float64)
    if target.shape != z.shape:
        raise ShapeError(f"straight_through: {z.shape} vs {target.shape}")
    return make_op('straight_through', target.copy(), (z,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix-matrix or matrix-vector product"""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not match")

    def grad_fn(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return make_op('matmul', a.data @ b.data, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ W.T + b over rows of x"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match output features {weight.shape[0]}")
    value = x.data @ weight.data.T
    if bias is not None:
        value = value + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        grads = (g @ weight.data, g.T @ x.data)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    return make_op('linear', value, inputs, grad_fn)


def pairwise_sq_dist(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """||z_n - e_i||^2 for every row of z against every codebook row"""
    diff = z[:, None, :] - codebook[None, :, :]
    return np.einsum('nkd,nkd->nk', diff, diff)


def sq_dist(z: Tensor, codebook: Tensor) -> Tensor:
    """Squared distances between latent rows (or one vector) and each codebook row"""
    vector = z.ndim == 1
    z2 = z.data[None, :] if vector else z.data
    if codebook.ndim != 2 or z2.ndim != 2 or z2.shape[1] != codebook.shape[1]:
        raise ShapeError(f"sq_dist: latent dimension of {z.shape} does not match codebook {codebook.shape}")
    value = pairwise_sq_dist(z2, codebook.data)

    def grad_fn(g):
        g2 = g[None, :] if vector else g
        gz = 2.0 * (g2.sum(axis=1)[:, None] * z2 - g2 @ codebook.data)
        ge = 2.0 * (g2.sum(axis=0)[:, None] * codebook.data - g2.T @ z2)
        return (gz[0] if vector else gz), ge

    return make_op('sq_dist', value[0] if vector else value, (z, codebook), grad_fn)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return make_op('gather_rows', table.data[indices], (table,), grad_fn)


# ---------------------------------------------------------------------------
# Softmax and losses

def softmax_temp(logits: Tensor, tau: float) -> Tensor:
    """Softmax of logits / tau along the last axis"""
    if not tau > 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}", module='diffnum')
    shifted = (logits.data - logits.data.max(axis=-1, keepdims=True)) / tau
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner) / tau,)

    return make_op('softmax_temp', probs, (logits,), grad_fn)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def grad_fn(g):
        ga = (2.0 * float(g) / n) * diff
        return ga, -ga

    return make_op('mse_loss', np.asarray(np.mean(diff * diff)), (a, b), grad_fn)


# ---------------------------------------------------------------------------
# Convolutions

def _as_batch(x: Tensor, op: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x.data[None], True
    if x.ndim == 3:
        return x.data, False
    raise ShapeError(f"{op}: input must be [C, L] or [N, C, L], got {x.shape}")


def conv1d_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation of x [C_in, L] (or [N, C_in, L]) with weight [C_out, C_in, K]"""
    x3, single = _as_batch(x, 'conv1d')
    if weight.ndim != 3:
        raise ShapeError(f"conv1d: weight must be [C_out, C_in, K], got {weight.shape}")
    c_out, c_in, kernel = weight.shape
    n, channels, length = x3.shape
    if channels != c_in:
        raise ShapeError(f"conv1d: input channels {channels} do not match weight input channels {c_in}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    if kernel > length + 2 * padding:
        raise ShapeError(f"conv1d: kernel size {kernel} exceeds padded length {length + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {bias.shape} does not match output channels {c_out}")

    padded = np.pad(x3, ((0, 0), (0, 0), (padding, padding))) if padding else x3
    l_out = conv1d_output_length(length, kernel, stride, padding)
    windows = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride, :]
    value = np.tensordot(windows, weight.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        value = value + bias.data[None, :, None]
    value = np.ascontiguousarray(value)
    span = stride * (l_out - 1) + 1

    def grad_fn(g):
        g3 = g[None] if single else g
        win = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride, :]
        gw = np.tensordot(g3, win, axes=([0, 2], [0, 2]))
        gpad = np.zeros_like(padded)
        for k in range(kernel):
            gpad[:, :, k:k + span:stride] += np.tensordot(
                g3, weight.data[:, :, k], axes=([1], [0])).transpose(0, 2, 1)
        gx = gpad[:, :, padding:padding + length]
        if single:
            gx = gx[0]
        grads = (gx, gw)
        if bias is not None:
            grads += (g3.sum(axis=(0, 2)),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op('conv1d', value[0] if single else value, inputs, grad_fn)


def conv_transpose1d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
                     bias: Optional[Tensor] = None) -> Tensor:
    """Adjoint of conv1d: x [C_in, L] (or [N, C_in, L]) with weight [C_in, C_out, K].

    Output length is (L - 1) * stride - 2 * padding + K.
    """
    x3, single = _as_batch(x, 'conv_transpose1d')
    if weight.ndim != 3:
        raise ShapeError(f"conv_transpose1d: weight must be [C_in, C_out, K], got {weight.shape}")
    c_in, c_out, kernel = weight.shape
    n, channels, length = x3.shape
    if channels != c_in:
        raise ShapeError(f"conv_transpose1d: input channels {channels} do not match weight input channels {c_in}")
    if stride < 1:
        raise ShapeError(f"conv_transpose1d: stride must be >= 1, got {stride}")
    full_length = (length - 1) * stride + kernel
    l_out = full_length - 2 * padding
    if l_out < 1:
        raise ShapeError(f"conv_transpose1d: padding {padding} leaves no output for length {length}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose1d: bias {bias.shape} does not match output channels {c_out}")

    span = stride * (length - 1) + 1
    full = np.zeros((n, c_out, full_length))
    for k in range(kernel):
        full[:, :, k:k + span:stride] += np.tensordot(
            x3, weight.data[:, :, k], axes=([1], [0])).transpose(0, 2, 1)
    value = full[:, :, padding:padding + l_out]
    if bias is not None:
        value = value + bias.data[None, :, None]
    value = np.ascontiguousarray(value)

    def grad_fn(g):
        g3 = g[None] if single else g
        gfull = np.zeros((n, c_out, full_length))
        gfull[:, :, padding:padding + l_out] = g3
        gx = np.zeros_like(x3)
        gw = np.zeros_like(weight.data)
        for k in range(kernel):
            piece = gfull[:, :, k:k + span:stride]
            gx += np.tensordot(piece, weight.data[:, :, k], axes=([1], [1])).transpose(0, 2, 1)
            gw[:, :, k] = np.tensordot(x3, piece, axes=([0, 2], [0, 2]))
        grads = (gx[0] if single else gx, gw)
        if bias is not None:
            grads += (g3.sum(axis=(0, 2)),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op('conv_transpose1d', value[0] if single else value, inputs, grad_fn)


# ---------------------------------------------------------------------------
# Random streams

class Rng:
    """Seeded PCG64 stream; equal seeds give equal samples on every platform"""

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def spawn(self, key: int) -> 'Rng':
        """Child stream derived from the seed alone, independent of draws made so far"""
        return Rng(self.seed, self.spawn_key + (int(key),))

    def uniform_open(self, shape) -> np.ndarray:
        return np.clip(self._generator.random(shape), UNIFORM_LOW, UNIFORM_HIGH)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)

    def get_state(self) -> dict:
        return {
            'seed': self.seed,
            'spawn_key': list(self.spawn_key),
            'bit_generator': self._generator.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> 'Rng':
        rng = cls(state['seed'], tuple(state.get('spawn_key', ())))
        rng._generator.bit_generator.state = state['bit_generator']
        return rng


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def sample_gumbel(rng: Rng, shape) -> Tensor:
    """Unit-scale Gumbel noise; callers apply scale or temperature"""
    return Tensor.wrap(gumbel_from_uniform(rng.uniform_open(shape)))


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class AdamState:
    """Bias-corrected Adam moments for an ordered parameter list"""
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> 'AdamState':
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One in-place Adam update of params; returns the advanced state"""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    state.t += 1
    bc1 = 1.0 - state.b1 ** state.t
    bc2 = 1.0 - state.b2 ** state.t
    for param, grad, m, v in zip(params, grads, state.m, state.v):
        if grad.shape != param.shape:
            raise ShapeError(f"adam_step: gradient {grad.shape} does not match parameter {param.shape}")
        m *= state.b1
        m += (1.0 - state.b1) * grad
        v *= state.b2
        v += (1.0 - state.b2) * (grad * grad)
        param.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst: Optional[Tuple[int, int]] = None


def grad_check(function: Callable[..., Tensor], point, step: float = 1e-5, tol: float = 1e-4,
               max_coords: Optional[int] = None, rng: Optional[Rng] = None,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar function with central differences.

    `point` is one array or a list of arrays, passed to `function` as Tensors.
    Relative error per coordinate is |a - n| / max(floor, |a| + |n|); the floor
    keeps roundoff on vanishing gradients from counting as failures. With
    max_coords, that many coordinates per input are sampled with `rng`.
    """
    points = [np.array(p, dtype=np.float64) for p in (point if isinstance(point, (list, tuple)) else [point])]
    leaves = [Tensor(p, requires_grad=True) for p in points]
    with Tape() as tape:
        out = function(*leaves)
    if out.shape != ():
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    analytic = backward(out, tape, wrt=leaves)

    def evaluate(arrays):
        with no_tape():
            return function(*[Tensor.wrap(a) for a in arrays]).item()

    worst_err, worst_at, checked = 0.0, None, 0
    for which, base in enumerate(points):
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.sort((rng or Rng(0)).choice(base.size, max_coords))
        for flat in coords:
            arrays = [p.copy() for p in points]
            arrays[which].flat[flat] += step
            f_plus = evaluate(arrays)
            arrays[which].flat[flat] -= 2.0 * step
            f_minus = evaluate(arrays)
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = float(analytic[which].flat[flat])
            err = abs(exact - numeric) / max(floor, abs(exact) + abs(numeric))
            checked += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (which, int(flat))
    report = GradCheckReport(max_rel_err=worst_err, passed=worst_err <= tol, checked=checked, worst=worst_at)
    logger.debug(f"grad_check: {checked} coordinates, max relative error {worst_err:.3e}")
    return report


def _probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <out, weights> so every output coordinate carries a distinct gradient"""
    return sum_all(mul(out, Tensor.wrap(weights)))


def primitive_cases(rng: Rng) -> Dict[str, Tuple[Callable[..., Tensor], List[np.ndarray]]]:
    """Scalar test functions and evaluation points covering every primitive"""
    def arr(*shape, spread=1.0):
        return rng.normal(shape, scale=spread)

    def away_from_zero(*shape):
        u = rng.normal(shape)
        return np.sign(u) * (0.1 + np.abs(u))

    w34 = arr(3, 4)
    probe_conv = arr(2, 3, 4)
    probe_convt = arr(2, 3, 8)
    idx = np.array([0, 2, 2, 1])
    w32, w3, w35, w44 = arr(3, 2), arr(3), arr(3, 5), arr(4, 4)
    codebook_probe = arr(3, 4)
    return {
        'add': (lambda a, b: _probe(add(a, b), w34), [arr(3, 4), arr(3, 4)]),
        'sub': (lambda a, b: _probe(sub(a, b), w34), [arr(3, 4), arr(3, 4)]),
        'mul': (lambda a, b: _probe(mul(a, b), w34), [arr(3, 4), arr(3, 4)]),
        'scale': (lambda a: _probe(scale(a, -1.7), w34), [arr(3, 4)]),
        'exp': (lambda a: _probe(exp(a), w34), [arr(3, 4, spread=0.5)]),
        'relu': (lambda a: _probe(relu(a), w34), [away_from_zero(3, 4)]),
        'softplus': (lambda a: _probe(softplus(a), w34), [arr(3, 4)]),
        'reshape': (lambda a: _probe(reshape(a, (4, 3)), w34.reshape(4, 3)), [arr(3, 4)]),
        'sum_all': (lambda a: scale(sum_all(mul(a, a)), 0.5), [arr(3, 4)]),
        'mean_all': (lambda a: mean_all(mul(a, Tensor.wrap(w34))), [arr(3, 4)]),
        'matmul': (lambda a, b: _probe(matmul(a, b), w32), [arr(3, 4), arr(4, 2)]),
        'matvec': (lambda a, b: _probe(matmul(a, b), w3), [arr(3, 4), arr(4)]),
        'linear': (lambda x, w, b: _probe(linear(x, w, b), w32), [arr(3, 4), arr(2, 4), arr(2)]),
        'sq_dist': (lambda z, e: _probe(sq_dist(z, e), w35), [arr(3, 4), arr(5, 4)]),
        'gather_rows': (lambda e: _probe(gather_rows(e, idx), w44), [arr(5, 4)]),
        'softmax_temp': (lambda a: _probe(softmax_temp(a, 0.7), w34), [arr(3, 4)]),
        'mse_loss': (lambda a, b: mse_loss(a, b), [arr(3, 4), arr(3, 4)]),
        'conv1d': (lambda x, w, b: _probe(conv1d(x, w, stride=2, padding=1, bias=b), probe_conv),
                   [arr(2, 2, 8), arr(3, 2, 4), arr(3)]),
        'conv_transpose1d': (lambda x, w, b: _probe(conv_transpose1d(x, w, stride=2, padding=1, bias=b),
                                                    probe_convt),
                             [arr(2, 2, 4), arr(2, 3, 4), arr(3)]),
        'codebook_mix': (lambda l, e: _probe(matmul(softmax_temp(l, 1.3), e), codebook_probe),
                         [arr(3, 5), arr(5, 4)]),
    }
