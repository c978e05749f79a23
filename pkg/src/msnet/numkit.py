"""Dense float64 kernels with hand-derived backward passes.

All math used by the classifier head lives here: affine maps, tanh,
numerically stable softmax and its cross-entropy fusion, inverted
dropout, batch normalization, a bias-corrected Adam step with decoupled
weight decay, and a central-difference gradient checker.

Arrays are plain numpy ndarrays in row-major order; compute is 64-bit
throughout (32-bit floats exist only in the embedding file format).
Randomness is always explicit: stochastic functions take a numpy
Generator, and :func:`make_rng` builds one from PCG64 seeded with
``SeedSequence([seed, *stream])``, so independent streams are
reproducible by construction and documented by their stream keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, ValidationError


def as_tensor(data, *, checked: bool = True) -> np.ndarray:
    """Copy `data` into a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if checked and not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by (seed, *stream) via SeedSequence."""
    key = [int(seed), *[int(s) for s in stream]]
    if any(k < 0 for k in key):
        raise ConfigError("rng seed/stream keys must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def derive_seed(seed: int, *stream: int) -> int:
    """Deterministically derive a child seed from (seed, *stream)."""
    key = [int(seed), *[int(s) for s in stream]]
    if any(k < 0 for k in key):
        raise ConfigError("rng seed/stream keys must be non-negative")
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


@dataclass
class Parameter:
    """A learnable tensor paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise DimensionError(
                f"parameter value {self.value.shape} and grad {self.grad.shape} differ"
            )

    @classmethod
    def of(cls, data) -> "Parameter":
        value = as_tensor(data)
        return cls(value, np.zeros_like(value))

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "Parameter":
        return Parameter(self.value.copy(), self.grad.copy())


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise DimensionError("adam moments must share a shape")
        if self.t < 0:
            raise ValidationError("adam step count must be >= 0")

    @classmethod
    def for_parameter(cls, p: Parameter) -> "AdamState":
        return cls(np.zeros_like(p.value), np.zeros_like(p.value))


@dataclass
class BatchNormState:
    """Per-feature affine terms plus running statistics."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        shapes = {
            self.gamma.value.shape,
            self.beta.value.shape,
            self.running_mean.shape,
            self.running_var.shape,
        }
        if len(shapes) != 1:
            raise DimensionError("batchnorm feature shapes differ")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError("batchnorm momentum must lie in (0, 1)")
        if self.eps <= 0.0:
            raise ConfigError("batchnorm eps must be positive")
        if np.any(self.running_var < 0.0):
            raise ValidationError("running variance must be non-negative")

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Parameter.of(np.ones(num_features)),
            beta=Parameter.of(np.zeros(num_features)),
            running_mean=np.zeros(num_features),
            running_var=np.ones(num_features),
            momentum=momentum,
            eps=eps,
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            eps=self.eps,
        )


# ---------------------------------------------------------------------------
# forward / backward kernels


def affine(x: np.ndarray, w: Parameter, b: Parameter):
    """x @ W + b over a batch; returns (out, cache) for the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or w.value.ndim != 2 or b.value.ndim != 1:
        raise DimensionError("affine expects x (batch,in), W (in,out), b (out,)")
    if x.shape[1] != w.value.shape[0] or w.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"affine shapes do not conform: x {x.shape}, W {w.value.shape}, b {b.value.shape}"
        )
    out = x @ w.value + b.value
    return out, (x, w, b)


def affine_backward(cache, d_out: np.ndarray) -> np.ndarray:
    """Accumulates W/b grads in place, returns dL/dx."""
    x, w, b = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != (x.shape[0], w.value.shape[1]):
        raise DimensionError("affine_backward: upstream gradient shape mismatch")
    w.grad += x.T @ d_out
    b.grad += d_out.sum(axis=0)
    return d_out @ w.value.T


def tanh_op(x: np.ndarray):
    """Elementwise tanh; cache is the output itself."""
    out = np.tanh(np.asarray(x, dtype=np.float64))
    return out, out


def tanh_backward(cache, d_out: np.ndarray) -> np.ndarray:
    return np.asarray(d_out, dtype=np.float64) * (1.0 - cache * cache)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; positive outputs summing to 1 along `axis`."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape == () or scores.shape[axis] < 1:
        raise ValidationError("softmax needs at least one score")
    if not np.all(np.isfinite(scores)):
        raise NumericError("softmax input contains non-finite values")
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(scores: np.ndarray, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. scores.

    loss = mean_i(-ln p[i, labels[i]]), grad = (p - onehot) / batch.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2:
        raise DimensionError("softmax_xent expects scores of shape (batch, classes)")
    if labels.shape != (scores.shape[0],):
        raise ValidationError("one label per batch row required")
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    k = scores.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValidationError(f"labels must lie in [0, {k})")
    if not np.all(np.isfinite(scores)):
        raise NumericError("softmax_xent input contains non-finite values")

    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = scores.shape[0]
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval.

    Returns (out, mask). The mask already carries the 1/(1-rate) scale and
    is None whenever the op was an identity (so no RNG is consumed).
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValidationError("training-mode dropout requires an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, d_out: np.ndarray) -> np.ndarray:
    d_out = np.asarray(d_out, dtype=np.float64)
    return d_out if mask is None else d_out * mask


def batchnorm(x: np.ndarray, state: BatchNormState, training: bool, *, update_running: bool = True):
    """Batch normalization over features (axis 1).

    Training normalizes by batch statistics and, unless `update_running`
    is disabled (the gradient checker needs a side-effect-free loss),
    folds them into the running estimates; eval normalizes by the
    running statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("batchnorm expects (batch, features)")
    if x.shape[1] != state.gamma.value.shape[0]:
        raise DimensionError("batchnorm feature count mismatch")
    if training:
        n = x.shape[0]
        if n < 2:
            raise ValidationError("batchnorm in training mode needs batch >= 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mean) * inv
        if update_running:
            m = state.momentum
            state.running_mean = (1.0 - m) * state.running_mean + m * mean
            state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1.0))
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean) * inv
    out = state.gamma.value * xhat + state.beta.value
    return out, ("train" if training else "eval", state, xhat, inv)


def batchnorm_backward(cache, d_out: np.ndarray) -> np.ndarray:
    """Accumulates gamma/beta grads, returns dL/dx (training caches only)."""
    mode, state, xhat, inv = cache
    if mode != "train":
        raise ValidationError("batchnorm_backward requires a training-mode cache")
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != xhat.shape:
        raise DimensionError("batchnorm_backward: upstream gradient shape mismatch")
    state.gamma.grad += (d_out * xhat).sum(axis=0)
    state.beta.grad += d_out.sum(axis=0)
    d_xhat = d_out * state.gamma.value
    n = d_out.shape[0]
    return (inv / n) * (
        n * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0)
    )


def adam_step(
    p: Parameter,
    s: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected Adam update in place; weight decay is decoupled
    (value <- value - lr*wd*value before the moment update)."""
    if p.value.shape != s.m.shape:
        raise DimensionError("adam state shape does not match parameter")
    if weight_decay:
        p.value -= lr * weight_decay * p.value
    g = p.grad
    s.t += 1
    s.m = beta1 * s.m + (1.0 - beta1) * g
    s.v = beta2 * s.v + (1.0 - beta2) * g * g
    m_hat = s.m / (1.0 - beta1**s.t)
    v_hat = s.v / (1.0 - beta2**s.t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(loss_fn, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference grads.

    `loss_fn()` must be deterministic (dropout off, fixed batch), return
    the scalar loss, and leave each parameter's analytic gradient in
    `p.grad`. Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    params = list(params)
    probe_a = float(loss_fn())
    probe_b = float(loss_fn())
    if not math.isfinite(probe_a) or probe_a != probe_b:
        raise NumericError(
            f"loss_fn is not deterministic or finite ({probe_a!r} vs {probe_b!r}); "
            "disable dropout and freeze the batch before checking"
        )
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.ravel()
        if not np.shares_memory(flat, p.value):  # ravel must alias the storage
            raise ValidationError("parameter storage must be contiguous")
        a_flat = a.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn())
            flat[i] = orig - eps
            f_minus = float(loss_fn())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    for p, a in zip(params, analytic):
        p.grad[...] = a
    return worst
