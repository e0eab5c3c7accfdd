"""Differentiable operations.

Each op computes its forward value with numpy and registers a closure that
maps the upstream gradient to one gradient per input. Shapes are checked
explicitly; there is no general broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or a triple, got {v}")
    return v


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def global_avg_pool3d(x: Tensor) -> Tensor:
    """Average over depth, height and width: [N,C,D,H,W] -> [N,C]."""
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool3d expects 5-D input, got shape {x.shape}")
    shape = x.shape
    count = shape[2] * shape[3] * shape[4]
    out = x.data.mean(axis=(2, 3, 4))

    def _backward(g):
        return (np.broadcast_to((g / count)[:, :, None, None, None], shape).astype(g.dtype),)

    return Tensor._from_op(out, (x,), _backward)


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def sum_squares(x: Tensor) -> Tensor:
    out = np.asarray((x.data * x.data).sum(), dtype=x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (2 * g * x.data,))


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with x [N,I], weight [O,I], bias [O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _backward)


def conv3d_output_shape(spatial, kernel, stride, padding) -> tuple[int, int, int]:
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(spatial, kernel, stride, padding))


def _check_conv(x, weight, bias, stride, padding):
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({weight.shape[0]},)")
    out_sp = conv3d_output_shape(x.shape[2:], weight.shape[2:], stride, padding)
    if min(out_sp) < 1 or any(n + 2 * p < k for n, k, p in zip(x.shape[2:], weight.shape[2:], padding)):
        raise ValueError(f"conv3d: non-positive output dims {out_sp} for input {x.shape[2:]}, "
                         f"kernel {weight.shape[2:]}, stride {stride}, padding {padding}")
    return out_sp


def _window_slices(offset, stride, out_sp):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_sp))


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
           method: str = "im2col") -> Tensor:
    """3-D cross-correlation of x [N,C,D,H,W] with weight [F,C,kD,kH,kW].

    ``method="direct"`` accumulates one kernel offset at a time and is kept as
    the reference; ``"im2col"`` gathers patches into a matrix and does a single
    GEMM. Both share the same input-gradient rule.
    """
    stride, padding = _triple(stride), _triple(padding)
    out_sp = _check_conv(x, weight, bias, stride, padding)
    n, c = x.shape[:2]
    f, _, kd, kh, kw = weight.shape
    pd, ph, pw = padding
    w = weight.data
    offsets = [(a, b, e) for a in range(kd) for b in range(kh) for e in range(kw)]
    nk = len(offsets)
    # channel-major padded copy: every window slice below is then a plain strided view
    xc = x.data.transpose(1, 0, 2, 3, 4)
    if any(padding):
        xp = np.zeros((c, n, x.shape[2] + 2 * pd, x.shape[3] + 2 * ph, x.shape[4] + 2 * pw), dtype=x.dtype)
        xp[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]] = xc
    else:
        xp = xc
    lead = (slice(None), slice(None))
    # kernel rows ordered (offset, channel) to match the gathered columns
    w_rows = w.transpose(0, 2, 3, 4, 1).reshape(f, nk * c)

    cols = None
    if method == "im2col":
        cols = np.empty((nk, c, n) + out_sp, dtype=x.dtype)
        for i, off in enumerate(offsets):
            cols[i] = xp[lead + _window_slices(off, stride, out_sp)]
        cols = cols.reshape(nk * c, -1)
        # (P, K*C) @ (K*C, F) runs faster than the skinny (F, K*C) @ (K*C, P) for small F
        out = (cols.T @ w_rows.T).reshape((n,) + out_sp + (f,)).transpose(0, 4, 1, 2, 3)
        out = np.ascontiguousarray(out)
    elif method == "direct":
        out = np.zeros((f, n) + out_sp, dtype=x.dtype)
        for off in offsets:
            patch = xp[lead + _window_slices(off, stride, out_sp)]
            out += np.tensordot(w[lead + off], patch, axes=([1], [0]))
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    else:
        raise ValueError(f"unknown conv3d method {method!r}")
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def _backward(g):
        g_rows = g.transpose(1, 0, 2, 3, 4).reshape(f, -1)
        grads = []
        if x.requires_grad:
            dcols = (w_rows.T @ g_rows).reshape((nk, c, n) + out_sp)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, off in enumerate(offsets):
                dxp[lead + _window_slices(off, stride, out_sp)] += dcols[i]
            dx = dxp[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]]
            grads.append(np.ascontiguousarray(dx.transpose(1, 0, 2, 3, 4)))
        else:
            grads.append(None)
        if weight.requires_grad:
            if cols is not None:
                dw = (g_rows @ cols.T).reshape(f, kd, kh, kw, c).transpose(0, 4, 1, 2, 3)
                grads.append(np.ascontiguousarray(dw))
            else:
                gf = g.transpose(1, 0, 2, 3, 4)
                dw = np.empty_like(w)
                for off in offsets:
                    patch = xp[lead + _window_slices(off, stride, out_sp)]
                    dw[lead + off] = np.tensordot(gf, patch, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
                grads.append(dw)
        else:
            grads.append(None)
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _backward)


@dataclass
class RunningStats:
    """Exponential moving averages of batch statistics used in eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    num_batches: int = field(default=0)

    @classmethod
    def fresh(cls, num_features: int, dtype=np.float32, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(num_features, dtype=dtype), np.ones(num_features, dtype=dtype), momentum)

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * batch_var_unbiased).astype(self.var.dtype)
        self.num_batches += 1


def batch_norm(z: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, training: bool = True,
               running: Optional[RunningStats] = None) -> Tensor:
    """Per-feature normalization over the batch (and any spatial axes).

    Feature axis is 1; [N,K] and [N,C,D,H,W] inputs are both accepted. Train
    mode uses the population variance of the batch and, if ``running`` is
    given, updates it with the unbiased variance. Eval mode reads ``running``.
    """
    if z.ndim < 2:
        raise ValueError(f"batch_norm expects [N,K,...], got shape {z.shape}")
    k = z.shape[1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({k},)")
    axes = (0,) + tuple(range(2, z.ndim))
    bshape = (1, k) + (1,) * (z.ndim - 2)
    m = z.data.size // k

    if training:
        if m < 2:
            raise ValueError("batch_norm in train mode needs at least 2 values per feature (batch of 1)")
        mu = z.data.mean(axis=axes)
        var = z.data.var(axis=axes)
        if running is not None:
            running.update(mu, var * (m / (m - 1)))
    else:
        if running is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        mu, var = running.mean, running.var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(z.dtype)
    xhat = (z.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def _backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dz = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dz = dxhat * inv_std.reshape(bshape)
        return dz, dgamma, dbeta

    return Tensor._from_op(out.astype(z.dtype), (z, gamma, beta), _backward)


# ---------------------------------------------------------------- objective


def mse_l2_objective(predictions: Tensor, targets, params: Sequence[Tensor] = (), lam: float = 0.0) -> Tensor:
    """Mean squared error plus ``lam`` times the summed squares of ``params``.

    Only weight matrices / kernels belong in ``params``; biases and
    normalization parameters are left out of the penalty by the caller.
    """
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=predictions.dtype)
    if predictions.ndim != 1 or y.shape != predictions.shape:
        raise ValueError(f"mse_l2_objective: predictions {predictions.shape} vs targets {y.shape}")
    n = predictions.shape[0]
    if n == 0:
        raise ValueError("mse_l2_objective: empty batch")
    if lam < 0:
        raise ValueError("mse_l2_objective: lambda must be non-negative")
    params = tuple(params)
    resid = predictions.data - y
    value = float((resid.astype(np.float64) ** 2).sum() / n)
    if lam:
        value += lam * sum(float((p.data.astype(np.float64) ** 2).sum()) for p in params)
    out = np.asarray(value, dtype=predictions.dtype)

    def _backward(g):
        grads = [g * (2.0 / n) * resid]
        grads.extend(g * 2.0 * lam * p.data for p in params)
        return grads

    return Tensor._from_op(out, (predictions,) + params, _backward)
