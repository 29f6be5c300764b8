"""Central finite-difference gradient checks for the autodiff kernels."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    relative_error: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.relative_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        up = f()
        flat[i] = saved - step
        down = f()
        flat[i] = saved
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
                    rng: np.random.Generator, step: float = 1e-5, name: str = "op") -> list[GradCheckResult]:
    """Compare backprop against finite differences for every input that requires a gradient.

    The scalar objective is ``sum(build(inputs) * R)`` for a fixed random ``R``,
    which exercises every output element with a distinct weight.
    """
    out = build(inputs)
    weights = rng.standard_normal(out.shape)

    def objective() -> float:
        return float((build(inputs).data * weights).sum())

    for t in inputs:
        t.zero_grad()
    out = build(inputs)
    out.backward(weights)
    results = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(objective, t.data, step)
        results.append(GradCheckResult(f"{name}[{i}]", relative_error(analytic, numeric)))
    return results


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    """One randomly shaped instance of every differentiable op: ``(name, build, inputs)``."""
    from .autodiff import (
        BatchNormState, add, align_add, avgpool2d, batchnorm, conv2d, flatten, global_avgpool, linear, relu,
        softmax_cross_entropy,
    )

    def draw(lo, hi):
        return int(rng.integers(lo, hi))

    cases = []
    k = int(rng.choice([1, 3]))
    stride, padding, h = draw(1, 3), draw(0, 2), draw(k, 7)
    conv_in = [_leaf(rng, draw(1, 3), draw(1, 4), h, h)]
    conv_in += [_leaf(rng, draw(1, 4), conv_in[0].shape[1], k, k)]
    conv_in += [_leaf(rng, conv_in[1].shape[0])]
    cases.append(("conv2d", lambda t: conv2d(t[0], t[1], t[2], stride, padding), conv_in))

    for training in (True, False):
        c = draw(1, 4)
        state = BatchNormState.create(c)
        state.gamma.tensor.data[:] = rng.uniform(0.5, 1.5, c)
        state.beta.tensor.data[:] = rng.standard_normal(c)
        saved = (rng.standard_normal(c), rng.uniform(0.5, 2.0, c))

        def build(t, state=state, saved=saved, training=training):
            state.running_mean, state.running_var = saved[0].copy(), saved[1].copy()
            return batchnorm(t[0], state, training)

        x = _leaf(rng, draw(2, 4), c, draw(1, 4), draw(1, 4))
        cases.append((f"batchnorm[{'train' if training else 'eval'}]", build,
                      [x, state.gamma.tensor, state.beta.tensor]))

    group = draw(1, 4)
    f = group * draw(1, 4)
    w = _leaf(rng, draw(1, 4), f)
    cases.append(("linear", lambda t: linear(t[0], t[1], t[2], group), [_leaf(rng, draw(1, 4), f), w,
                                                                         _leaf(rng, w.shape[0])]))

    data = rng.standard_normal((2, 3, 3))
    data += np.sign(data) * 0.1  # stay clear of the kink
    cases.append(("relu", lambda t: relu(t[0]), [Tensor(data, requires_grad=True)]))

    pool_in = _leaf(rng, 2, 2, draw(2, 7), draw(2, 7))
    cases.append(("avgpool2d", lambda t: avgpool2d(t[0], 2), [pool_in]))
    cases.append(("global_avgpool", lambda t: global_avgpool(t[0]), [pool_in]))
    cases.append(("flatten", lambda t: flatten(t[0]), [pool_in]))

    c = draw(2, 6)
    a_pos = np.sort(rng.choice(c, draw(1, c + 1), replace=False))
    b_pos = np.sort(rng.choice(c, draw(1, c + 1), replace=False))
    cases.append(("align_add", lambda t: align_add(t[0], a_pos, t[1], b_pos, c),
                  [_leaf(rng, 2, len(a_pos), 3, 3), _leaf(rng, 2, len(b_pos), 3, 3)]))
    cases.append(("add", lambda t: add(t[0], t[1]), [_leaf(rng, 2, 3), _leaf(rng, 2, 3)]))

    n, classes = draw(1, 5), draw(2, 6)
    labels = rng.integers(0, classes, n)
    cases.append(("softmax_cross_entropy", lambda t: softmax_cross_entropy(t[0], labels),
                  [_leaf(rng, n, classes)]))
    return cases
