"""Minimal reverse-mode differentiation engine and the layer kernels used by
the miniature CNNs.

Every value is a float64 numpy array. A :class:`Tensor` records the tensors it
was computed from plus a closure that pushes its gradient back to them;
:meth:`Tensor.backward` walks the graph in reverse topological order.

Forward kernels that reduce over input channels (``conv2d`` and ``linear``)
accumulate one channel block at a time, in channel order. Dropping a channel
whose activations are exactly zero therefore leaves every remaining partial
sum bit-identical, which is what makes zeroed-versus-removed filters produce
exactly equal logits.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class StateError(RuntimeError):
    """Raised when an operation is called in an invalid state."""


class InputError(ValueError):
    """Raised for invalid non-tensor arguments (labels, hyperparameters)."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")
    return arr


class Tensor:
    """Dense float64 array with a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or (_GRAD_ENABLED and any(p.requires_grad for p in _parents))
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor.

        For a scalar output the seed gradient defaults to one.
        """
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # Interior gradients are transient; leaves keep theirs.
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"backward of {node.name or 'tensor'}")
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg


@dataclass
class Parameter:
    """A trainable tensor plus its momentum buffer."""

    tensor: Tensor
    velocity: np.ndarray = None  # type: ignore[assignment]
    weight_decay_enabled: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.velocity is None:
            self.velocity = np.zeros_like(self.tensor.data)
        if self.velocity.shape != self.tensor.data.shape:
            raise DimensionError("velocity shape must equal tensor shape")

    @classmethod
    def of(cls, values, weight_decay_enabled: bool = True) -> "Parameter":
        return cls(Tensor(np.array(values, dtype=DTYPE), requires_grad=True),
                   weight_decay_enabled=weight_decay_enabled)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def select(self, index, axis: int = 0) -> "Parameter":
        """Copy of this parameter restricted to ``index`` along ``axis``."""
        return Parameter(
            Tensor(np.take(self.tensor.data, index, axis=axis), requires_grad=True),
            velocity=np.take(self.velocity, index, axis=axis),
            weight_decay_enabled=self.weight_decay_enabled,
        )


@dataclass
class BatchNormState:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.data.shape
        if self.beta.data.shape != c or self.running_mean.shape != c or self.running_var.shape != c:
            raise DimensionError("gamma, beta and running statistics must share one channel count")
        if self.epsilon < 0:
            raise InputError("epsilon must be non-negative")
        if not 0.0 < self.momentum < 1.0:
            raise InputError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise InputError("running_var must be non-negative")

    @classmethod
    def create(cls, channels: int, gamma_init: float = 1.0, epsilon: float = 1e-5,
               momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=Parameter.of(np.full(channels, gamma_init), weight_decay_enabled=False),
            beta=Parameter.of(np.zeros(channels), weight_decay_enabled=False),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def select(self, index) -> "BatchNormState":
        return BatchNormState(
            gamma=self.gamma.select(index),
            beta=self.beta.select(index),
            running_mean=self.running_mean[index].copy(),
            running_var=self.running_var[index].copy(),
            epsilon=self.epsilon,
            momentum=self.momentum,
        )


# ---------------------------------------------------------------------------
# matrix helpers


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` that never falls onto the BLAS matrix-vector path.

    OpenBLAS rounds gemv differently from gemm; padding degenerate dimensions
    to two keeps per-element summation order independent of operand widths.
    """
    m, n = a.shape[0], b.shape[1]
    if m >= 2 and n >= 2:
        return a @ b
    if m < 2:
        a = np.concatenate([a, np.zeros((2 - m, a.shape[1]))], axis=0)
    if n < 2:
        b = np.concatenate([b, np.zeros((b.shape[0], 2 - n))], axis=1)
    return (a @ b)[:m, :n]


# ---------------------------------------------------------------------------
# layer kernels


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(f"kernel {kernel} does not fit padded input {size + 2 * padding}")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,Cin,H,W]`` with ``weight[Cout,Cin,Kh,Kw]``."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weights, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise InputError("stride must be >= 1 and padding >= 0")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weights expect {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # windows: (N, Cin, Ho, Wo, Kh, Kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # per-channel patch matrices: (Cin, N*Ho*Wo, Kh*Kw)
    patches = np.ascontiguousarray(win.transpose(1, 0, 2, 3, 4, 5)).reshape(cin, n * ho * wo, kh * kw)
    wmat = weight.data.reshape(cout, cin, kh * kw)
    out = np.zeros((n * ho * wo, cout))
    for c in range(cin):
        out += _mm(patches[c], wmat[:, c, :].T)
    if bias is not None:
        out += bias.data
    # NCHW-contiguous so downstream reductions see one memory layout
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    _check_finite(out, "conv2d")

    def backward(g: np.ndarray):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.tensordot(gt, patches, axes=([1], [1])).reshape(cout, cin, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=1)
        if x.requires_grad:
            # column gradients laid out (Cin, Kh, Kw, N, Ho, Wo) so each shifted add reads contiguous blocks
            gp = (weight.data.reshape(cout, cin * kh * kw).T @ gt).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros((cin, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gp[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor(out, _parents=parents, _backward=backward, name="conv2d")


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over ``x[N,C,H,W]`` (or ``x[N,C]``)."""
    flat = x.data.ndim == 2
    xd = x.data[:, :, None, None] if flat else x.data
    if xd.ndim != 4:
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    n, c, h, w = xd.shape
    if c != state.channels:
        raise DimensionError(f"batchnorm: input has {c} channels, state has {state.channels}")
    gamma, beta = state.gamma.tensor, state.beta.tensor
    shape = (1, c, 1, 1)
    count = n * h * w
    if training:
        if count < 2:
            raise DimensionError("batchnorm in training mode needs at least two values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var * count / (count - 1)
    else:
        mean, var = state.running_mean, state.running_var
    denom = np.sqrt(var + state.epsilon)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            inv_std = 1.0 / denom
        except FloatingPointError as exc:
            raise NumericError("batchnorm: zero variance with epsilon = 0") from exc
    xhat = (xd - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    _check_finite(out, "batchnorm")

    def backward(g: np.ndarray):
        g4 = g[:, :, None, None] if flat else g
        ggamma = (g4 * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g4.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std).reshape(shape)
            if training:
                gsum = g4.sum(axis=(0, 2, 3)).reshape(shape)
                gdot = (g4 * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                gx = scale * (g4 - gsum / count - xhat * gdot / count)
            else:
                gx = scale * g4
            if flat:
                gx = gx[:, :, 0, 0]
        return gx, ggamma, gbeta

    return Tensor(out[:, :, 0, 0] if flat else out, _parents=(x, gamma, beta),
                  _backward=backward, name="batchnorm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, group: int = 1) -> Tensor:
    """Affine map ``x @ weight.T + bias``.

    Input features are reduced in contiguous blocks of ``group`` (one block
    per flattened channel), in order.
    """
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear expects 2-D input and weights, got {x.shape} and {weight.shape}")
    n, f = x.shape
    o, wf = weight.shape
    if wf != f:
        raise DimensionError(f"linear: input has {f} features, weights expect {wf}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({o},)")
    if group < 1 or f % group:
        raise DimensionError(f"linear: {f} features do not split into blocks of {group}")
    out = np.zeros((n, o))
    for s in range(0, f, group):
        out += _mm(x.data[:, s:s + group], weight.data[:, s:s + group].T)
    if bias is not None:
        out += bias.data
    _check_finite(out, "linear")

    def backward(g: np.ndarray):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor(out, _parents=parents, _backward=backward, name="linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,),
                  _backward=lambda g: (g * mask,), name="relu")


def avgpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"avgpool2d: {h}x{w} input is smaller than the {size}x{size} window")
    crop = np.ascontiguousarray(x.data[:, :, :ho * size, :wo * size])
    out = crop.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        gx[:, :, :ho * size, :wo * size] = up
        return (gx,)

    return Tensor(out, _parents=(x,), _backward=backward, name="avgpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.ascontiguousarray(x.data).reshape(n, c, h * w).mean(axis=2)
    return Tensor(out, _parents=(x,),
                  _backward=lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
                  name="global_avgpool")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor(x.data.reshape(shape[0], -1), _parents=(x,),
                  _backward=lambda g: (g.reshape(shape),), name="flatten")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor(a.data + b.data, _parents=(a, b), _backward=lambda g: (g, g), name="add")


def align_add(a: Tensor, a_pos: np.ndarray, b: Tensor, b_pos: np.ndarray, channels: int) -> Tensor:
    """Element-wise sum of two channel subsets placed into a ``channels``-wide map.

    Positions absent from an operand behave as all-zero feature maps.
    """
    if a.data.shape[1] != len(a_pos) or b.data.shape[1] != len(b_pos):
        raise DimensionError("align_add: position lists must match operand channel counts")
    if a.data.shape[2:] != b.data.shape[2:] or a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"align_add: spatial/batch shapes {a.shape} and {b.shape} differ")
    n = a.data.shape[0]
    if len(a_pos) == channels and len(b_pos) == channels:
        return add(a, b)
    out = np.zeros((n, channels) + a.data.shape[2:])
    out[:, a_pos] = a.data
    out[:, b_pos] += b.data
    return Tensor(out, _parents=(a, b),
                  _backward=lambda g: (g[:, a_pos], g[:, b_pos]), name="align_add")


class LossTensor(Tensor):
    """Scalar mean loss that also carries the per-sample losses."""

    __slots__ = ("per_sample",)


def softmax_cross_entropy(logits: Tensor, labels) -> LossTensor:
    """Mean cross-entropy over the batch; ``.per_sample`` holds each sample's loss."""
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InputError(f"labels must be integers in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_sample = lse - shifted[np.arange(n), labels]
    _check_finite(per_sample, "softmax_cross_entropy")

    def backward(g: np.ndarray):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    out = LossTensor(per_sample.mean(), _parents=(logits,), _backward=backward, name="cross_entropy")
    out.per_sample = per_sample
    return out


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: Iterable[Parameter], learning_rate: float, momentum: float = 0.0,
             weight_decay: float = 0.0, nesterov: bool = False) -> None:
    """In-place SGD with undampened (optionally Nesterov) momentum."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter of shape {p.data.shape} has no gradient")
    for p in params:
        g = p.grad
        if weight_decay and p.weight_decay_enabled:
            g = g + weight_decay * p.data
        if momentum:
            p.velocity *= momentum
            p.velocity += g
            step = g + momentum * p.velocity if nesterov else p.velocity
        else:
            step = g
        p.tensor.data -= learning_rate * step
        _check_finite(p.tensor.data, "sgd_step")


# ---------------------------------------------------------------------------
# snapshot container
#
# A snapshot is a numpy ``.npz`` archive: one ``.npy`` member per named array,
# each carrying its own dtype/shape header followed by row-major float64 data.


def save_snapshot(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **{k: np.asarray(v, dtype=DTYPE) for k, v in arrays.items()})


def load_snapshot(path) -> dict[str, np.ndarray]:
    with np.load(Path(path), allow_pickle=False) as archive:
        return {k: archive[k].astype(DTYPE) for k in archive.files}
