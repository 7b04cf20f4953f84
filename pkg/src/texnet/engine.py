"""Layer primitives with hand-derived forward and backward rules.

Feature maps are numpy arrays in NHWC layout. Every forward function is
pure; the matching ``*_backward`` takes the upstream gradient plus whatever
the forward needed and returns fresh gradient arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# upper bound on im2col buffer size per chunk, in elements
_COLS_BUDGET = 8 * 1024 * 1024


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride_h: int = 1
    stride_w: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride_h, self.stride_w) < 1:
            raise ValueError("kernel and stride extents must be >= 1")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def pads(self, h: int, w: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """(top, bottom), (left, right) zero padding for an h x w input."""
        if self.padding == "valid":
            return (0, 0), (0, 0)
        ph = max((-(-h // self.stride_h) - 1) * self.stride_h + self.kernel_h - h, 0)
        pw = max((-(-w // self.stride_w) - 1) * self.stride_w + self.kernel_w - w, 0)
        return (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (pt, pb), (pl, pr) = self.pads(h, w)
        ho = (h + pt + pb - self.kernel_h) // self.stride_h + 1
        wo = (w + pl + pr - self.kernel_w) // self.stride_w + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {self.kernel_h}x{self.kernel_w} does not fit a {h}x{w} input")
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels)


@dataclass
class Param:
    """A trainable (or running-statistic) array and its gradient buffer."""

    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True

    @classmethod
    def of(cls, value: np.ndarray, trainable: bool = True) -> "Param":
        return cls(value, np.zeros_like(value), trainable)

    def zero_grad(self) -> None:
        self.grad[...] = 0


# -- convolution ---------------------------------------------------------

def _check_conv(x, weights, bias, geom):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    if weights.shape != geom.weight_shape:
        raise ShapeError(f"weights {weights.shape} do not match geometry {geom.weight_shape}")
    if x.shape[3] != geom.in_channels:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {geom.in_channels}")
    if bias.shape != (geom.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({geom.out_channels},)")


def _pad(x, geom):
    (pt, pb), (pl, pr) = geom.pads(x.shape[1], x.shape[2])
    if pt or pb or pl or pr:
        return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return x


def _im2col(xp, geom, ho, wo):
    # windows: (N, Ho', Wo', C, kh, kw) -> rows ordered (kh, kw, C) to match weights
    win = sliding_window_view(xp, (geom.kernel_h, geom.kernel_w), axis=(1, 2))
    win = win[:, : (ho - 1) * geom.stride_h + 1 : geom.stride_h, : (wo - 1) * geom.stride_w + 1 : geom.stride_w]
    n = xp.shape[0]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)


def _chunks(n, per_sample):
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    _check_conv(x, weights, bias, geom)
    check_finite(x, "conv2d input")
    n = x.shape[0]
    ho, wo = geom.output_hw(x.shape[1], x.shape[2])
    wmat = weights.reshape(-1, geom.out_channels)
    out = np.empty((n, ho, wo, geom.out_channels), dtype=np.result_type(x, weights))
    xp = _pad(x, geom)
    for sl in _chunks(n, ho * wo * wmat.shape[0]):
        cols = _im2col(xp[sl], geom, ho, wo)
        out[sl] = (cols @ wmat + bias).reshape(-1, ho, wo, geom.out_channels)
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray, geom: ConvGeometry,
                    need_dx: bool = True):
    """Return (dx, dweights, dbias); dx is None when ``need_dx`` is false."""
    n, h, w, _ = x.shape
    ho, wo = dout.shape[1:3]
    kh, kw, sh, sw = geom.kernel_h, geom.kernel_w, geom.stride_h, geom.stride_w
    wmat = weights.reshape(-1, geom.out_channels)
    xp = _pad(x, geom)
    dw = np.zeros_like(wmat)
    db = dout.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp) if need_dx else None
    for sl in _chunks(n, ho * wo * wmat.shape[0]):
        d2 = dout[sl].reshape(-1, geom.out_channels)
        cols = _im2col(xp[sl], geom, ho, wo)
        dw += cols.T @ d2
        if need_dx:
            dcols = (d2 @ wmat.T).reshape(-1, ho, wo, kh, kw, geom.in_channels)
            for i in range(kh):
                for j in range(kw):
                    dxp[sl, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += dcols[:, :, :, i, j]
    dx = None
    if need_dx:
        (pt, _), (pl, _) = geom.pads(h, w)
        dx = dxp[:, pt : pt + h, pl : pl + w]
    return dx, dw.reshape(weights.shape), db


# -- pooling, dense, activations -------------------------------------------

def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"global_avg_pool needs a non-empty NHWC map, got {x.shape}")
    return x.mean(axis=(1, 2), keepdims=True)


def global_avg_pool_backward(dout: np.ndarray, in_shape: Sequence[int]) -> np.ndarray:
    h, w = in_shape[1], in_shape[2]
    return np.broadcast_to(dout / (h * w), tuple(in_shape)).copy()


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def dense_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    return dout @ weights.T, x.T @ dout, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dout, 0).astype(dout.dtype, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and class probabilities.

    The gradient with respect to the logits is ``(probs - onehot) / N``; see
    :func:`softmax_cross_entropy_backward`.
    """
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"logits must be (N, K>=2), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} != ({logits.shape[0]},)")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(logp)


def softmax_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1
    return g / n


# -- concatenation and batch norm ------------------------------------------

def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    lead = inputs[0].shape[:-1]
    for t in inputs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: {t.shape[:-1]} != {lead}")
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=-1)


def concat_channels_backward(dout: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    return np.split(dout, np.cumsum(sizes)[:-1], axis=-1)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, state: BatchNormState,
               mode: str = "train"):
    """Normalize per channel over (N, H, W).

    Returns ``(y, cache)``. In train mode the batch statistics are used and the
    running averages are updated in place; in infer mode the running averages
    are used and ``cache`` is only good for a backward through the fixed
    affine map.
    """
    if x.size == 0:
        raise ShapeError("batch_norm on an empty batch")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std, mode)


def batch_norm_backward(dout: np.ndarray, gamma: np.ndarray, cache):
    """Return (dx, dgamma, dbeta)."""
    xhat, inv_std, mode = cache
    axes = tuple(range(dout.ndim - 1))
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta
