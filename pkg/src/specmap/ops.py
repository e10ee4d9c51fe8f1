"""Differentiable operations on :class:`~specmap.tensor.Tensor`.

Covers everything the four network architectures need: dense and conv
layers, batch normalisation with selectable statistics, inverted dropout,
activations, the two losses, and the structural ops (slicing, stacking,
splicing, pooling) used by the recurrent classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, apply_op, as_tensor


class ShapeError(ValueError):
    """Operand dimensions violate an operation's contract."""


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a row-vector bias against a 2-D left side."""
    if a.shape == b.shape:
        def bw(g, needs):
            return [g if needs[0] else None, g if needs[1] else None]
        return apply_op("add", [a, b], a.data + b.data, bw)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def bw(g, needs):
            return [g if needs[0] else None, g.sum(axis=0) if needs[1] else None]
        return apply_op("add_bias", [a, b], a.data + b.data, bw)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bw(g, needs):
        return [g if needs[0] else None, -g if needs[1] else None]

    return apply_op("sub", [a, b], a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, needs):
        return [g * bd if needs[0] else None, g * ad if needs[1] else None]

    return apply_op("mul", [a, b], ad * bd, bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. the constant)."""
    c = float(c)

    def bw(g, needs):
        return [g * c]

    return apply_op("scale", [a], a.data * c, bw)


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection sum(a * weights); the scalarizer used by grad checks."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {a.shape}")

    def bw(g, needs):
        return [g * w]

    return apply_op("weighted_sum", [a], np.asarray((a.data * w).sum()), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, needs):
        ga = g @ bd.T if needs[0] else None
        gb = ad.T @ g if needs[1] else None
        return [ga, gb]

    return apply_op("matmul", [a, b], ad @ bd, bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over the batch dimension."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} vs weight {w.shape}")
    if b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine: bias {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data

    def bw(g, needs):
        gx = g @ wd.T if needs[0] else None
        gw = xd.T @ g if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return [gx, gw, gb]

    return apply_op("affine", [x, w, b], xd @ wd + b.data, bw)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-n // stride)  # ceil
    return (n - k) // stride + 1


def _conv_geometry(h, w, kh, kw, sh, sw, padding):
    if sh <= 0 or sw <= 0:
        raise ShapeError("conv2d: stride must be positive")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if padding == "valid" and (kh > h or kw > w):
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than input ({h},{w})")
    oh = conv_output_size(h, kh, sh, padding)
    ow = conv_output_size(w, kw, sw, padding)
    if padding == "same":
        pad_h = max((oh - 1) * sh + kh - h, 0)
        pad_w = max((ow - 1) * sw + kw - w, 0)
    else:
        pad_h = pad_w = 0
    # symmetric zero padding, extra sample on the high-index side when odd
    return oh, ow, (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)


def conv2d(x: Tensor, k: Tensor, stride=(1, 1), padding="same",
           bias: Tensor | None = None) -> Tensor:
    """2-D convolution (cross-correlation) over an NCHW batch.

    Output spatial size is ceil(n/stride) for same padding and
    floor((n-k)/stride)+1 for valid. Differentiable w.r.t. input, kernel
    and the optional per-filter bias.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape}, {k.shape}")
    b_, c, h, w = x.shape
    f, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {c} vs kernel channels {ck}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    oh, ow, (ph0, ph1), (pw0, pw1) = _conv_geometry(h, w, kh, kw, sh, sw, padding)

    if ph0 or ph1 or pw0 or pw1:
        xpad = np.zeros((b_, c, h + ph0 + ph1, w + pw0 + pw1))
        xpad[:, :, ph0 : ph0 + h, pw0 : pw0 + w] = x.data
    else:
        xpad = x.data
    hp, wp = xpad.shape[2], xpad.shape[3]
    n = b_ * oh * ow
    cols = kernels.im2col(xpad, kh, kw, sh, sw, oh, ow)   # (C*Kh*Kw, n) scratch
    kmat = k.data.reshape(f, -1)
    out = np.dot(kmat, cols, out=kernels.scratch("conv_out", (f, n)))
    if bias is not None:
        if bias.ndim != 1 or bias.shape[0] != f:
            raise ShapeError(f"conv2d: bias {bias.shape} vs {f} filters")
        out += bias.data[:, None]
    # unconditional copy: `out` is scratch, and for B == 1 the transpose is
    # already contiguous, so ascontiguousarray would alias the arena
    out4 = out.reshape(f, b_, oh, ow).transpose(1, 0, 2, 3).copy()

    inputs = [x, k] if bias is None else [x, k, bias]
    kshape = k.shape

    def bw(g, needs):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n)
        gx = gk = gb = None
        if needs[1]:
            cols_again = kernels.im2col(xpad, kh, kw, sh, sw, oh, ow)
            gk = (gmat @ cols_again.T).reshape(kshape)
        if needs[0]:
            dcols = np.dot(kmat.T, gmat, out=kernels.scratch("conv_dcols", (kmat.shape[1], n)))
            gpad = kernels.col2im_add(dcols, b_, c, hp, wp, kh, kw, sh, sw, oh, ow)
            gx = gpad[:, :, ph0 : ph0 + h, pw0 : pw0 + w]
        if bias is not None and needs[2]:
            gb = gmat.sum(axis=1)
        grads = [gx, gk]
        if bias is not None:
            grads.append(gb)
        return grads

    return apply_op("conv2d", inputs, out4, bw)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data >= 0  # derivative at the kink defined as the positive-side slope

    def bw(g, needs):
        return [g * mask]

    return apply_op("relu", [x], np.maximum(x.data, 0.0), bw)


def leaky_relu(x: Tensor, leak: float = 0.3) -> Tensor:
    slope = np.where(x.data >= 0, 1.0, leak)

    def bw(g, needs):
        return [g * slope]

    return apply_op("leaky_relu", [x], x.data * slope, bw)


def elu(x: Tensor) -> Tensor:
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data >= 0, x.data, neg)
    deriv = np.where(x.data >= 0, 1.0, neg + 1.0)

    def bw(g, needs):
        return [g * deriv]

    return apply_op("elu", [x], out, bw)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g, needs):
        return [g * s * (1.0 - s)]

    return apply_op("sigmoid", [x], s, bw)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bw(g, needs):
        return [g * (1.0 - t * t)]

    return apply_op("tanh", [x], t, bw)


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def apply_activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one feature axis."""

    gamma: Tensor
    beta: Tensor
    moving_mean: np.ndarray
    moving_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.99, eps: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(num_features), requires_grad=True),
            beta=Tensor(np.zeros(num_features), requires_grad=True),
            moving_mean=np.zeros(num_features),
            moving_var=np.ones(num_features),
            momentum=momentum,
            eps=eps,
        )

    @property
    def num_features(self) -> int:
        return self.moving_mean.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "batch_stats",
               update: bool = False) -> Tensor:
    """Normalise per feature (2-D input) or per channel (4-D input).

    ``mode`` selects where the statistics come from: the current batch or the
    moving averages. In moving_stats mode the statistics are constants of the
    graph, so the gradient w.r.t. x is a plain elementwise rescale. ``update``
    blends the batch statistics into the moving ones regardless of mode.
    """
    if mode not in ("batch_stats", "moving_stats"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    n_feat = state.num_features
    if x.ndim == 2:
        axes = (0,)
        pshape = (1, n_feat)
        feat_len = x.shape[1]
    elif x.ndim == 4:
        axes = (0, 2, 3)
        pshape = (1, n_feat, 1, 1)
        feat_len = x.shape[1]
    else:
        raise ShapeError(f"batch_norm: need 2-D or 4-D input, got {x.shape}")
    if feat_len != n_feat:
        raise ShapeError(f"batch_norm: {feat_len} features vs state of {n_feat}")

    xd = x.data
    if mode == "batch_stats" or update:
        batch_mean = xd.mean(axis=axes)
        batch_var = xd.var(axis=axes)

    # normalisation statistics are captured before the moving blend so that
    # moving_stats mode sees true constants of the graph
    if mode == "batch_stats":
        mean, var = batch_mean, batch_var
    else:
        mean, var = state.moving_mean, state.moving_var
    if update:
        m = state.momentum
        state.moving_mean = m * state.moving_mean + (1.0 - m) * batch_mean
        state.moving_var = m * state.moving_var + (1.0 - m) * batch_var

    istd = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean.reshape(pshape)) * istd.reshape(pshape)
    out = state.gamma.data.reshape(pshape) * xhat + state.beta.data.reshape(pshape)

    gamma_p = state.gamma.data.reshape(pshape)
    istd_p = istd.reshape(pshape)

    if mode == "moving_stats":
        def bw(g, needs):
            gx = g * gamma_p * istd_p if needs[0] else None
            gg = (g * xhat).sum(axis=axes) if needs[1] else None
            gb = g.sum(axis=axes) if needs[2] else None
            return [gx, gg, gb]
    else:
        def bw(g, needs):
            gx = None
            if needs[0]:
                dxhat = g * gamma_p
                mean_dxhat = dxhat.mean(axis=axes).reshape(pshape)
                mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes).reshape(pshape)
                gx = istd_p * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
            gg = (g * xhat).sum(axis=axes) if needs[1] else None
            gb = g.sum(axis=axes) if needs[2] else None
            return [gx, gg, gb]

    return apply_op("batch_norm", [x, state.gamma, state.beta], out, bw)


# ---------------------------------------------------------------------------
# dropout


def dropout(x: Tensor, rate: float, mode: str = "train", channel_wise: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes and rescales, eval mode is identity.

    With ``channel_wise`` the mask is drawn once per channel of a 4-D tensor,
    zeroing whole feature maps.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0,1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        def bw(g, needs):
            return [g]
        return apply_op("dropout_id", [x], x.data, bw)

    if rng is None:
        raise ValueError("dropout: train mode with rate > 0 needs an rng")
    if channel_wise:
        if x.ndim != 4:
            raise ShapeError("dropout: channel_wise needs a 4-D tensor")
        mask_shape = (x.shape[0], x.shape[1], 1, 1)
    else:
        mask_shape = x.shape
    keep = rng.random(mask_shape) >= rate
    factor = keep / (1.0 - rate)

    def bw(g, needs):
        return [g * factor]

    return apply_op("dropout", [x], x.data * factor, bw)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the labelled class.

    Uses max subtraction for stability; labels are integer class indices.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: need 2-D logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, d = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} vs batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= d:
        raise ValueError("softmax_cross_entropy: label out of range")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g, needs):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return [g * p / n]

    return apply_op("softmax_cross_entropy", [logits], np.asarray(loss), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g, needs):
        base = g * (2.0 / n) * diff
        return [base if needs[0] else None, -base if needs[1] else None]

    return apply_op("mse", [a, b], np.asarray((diff * diff).mean()), bw)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g, needs):
        return [g.reshape(old)]

    return apply_op("reshape", [x], x.data.reshape(shape), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("slice_cols: need a 2-D tensor")
    width = x.shape[1]

    def bw(g, needs):
        gx = np.zeros((x.shape[0], width))
        gx[:, start:stop] = g
        return [gx]

    return apply_op("slice_cols", [x], x.data[:, start:stop].copy(), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("slice_rows: need a 2-D tensor")
    rows = x.shape[0]

    def bw(g, needs):
        gx = np.zeros((rows, x.shape[1]))
        gx[start:stop] = g
        return [gx]

    return apply_op("slice_rows", [x], x.data[start:stop].copy(), bw)


def concat_cols(parts: list[Tensor]) -> Tensor:
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g, needs):
        return [g[:, bounds[i] : bounds[i + 1]] if needs[i] else None
                for i in range(len(parts))]

    return apply_op("concat_cols", parts, np.concatenate([p.data for p in parts], axis=1), bw)


def concat_rows(parts: list[Tensor]) -> Tensor:
    heights = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + heights)

    def bw(g, needs):
        return [g[bounds[i] : bounds[i + 1]] if needs[i] else None
                for i in range(len(parts))]

    return apply_op("concat_rows", parts, np.concatenate([p.data for p in parts], axis=0), bw)


def splice_rows(x: Tensor, context: int) -> Tensor:
    """Concatenate each row with its +-context neighbours, replicating edges.

    The differentiable twin of :func:`specmap.dsp.splice`, used to rebuild
    classifier context windows from mapped frames.
    """
    if x.ndim != 2:
        raise ShapeError("splice_rows: need a 2-D tensor")
    t, w = x.shape
    idx = np.clip(np.arange(t)[:, None] + np.arange(-context, context + 1)[None, :], 0, t - 1)

    def bw(g, needs):
        gx = np.zeros((t, w))
        np.add.at(gx, idx.ravel(), g.reshape(t * (2 * context + 1), w))
        return [gx]

    return apply_op("splice_rows", [x], x.data[idx].reshape(t, -1), bw)


def rows_from_maps(x: Tensor) -> Tensor:
    """Lay a (1, C, H, W) tensor out as (H, C*W) rows, one per time step.

    Keeps the frequency axis intact inside each row, unlike a frequency
    pool, so downstream layers still see where spectral energy sits.
    """
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"rows_from_maps: need (1,C,H,W), got {x.shape}")
    _, c, h, w = x.shape

    def bw(g, needs):
        return [np.ascontiguousarray(g.reshape(h, c, w).transpose(1, 0, 2))[None]]

    out = np.ascontiguousarray(x.data[0].transpose(1, 0, 2)).reshape(h, c * w)
    return apply_op("rows_from_maps", [x], out, bw)


def repeat_rows(x: Tensor, factor: int, out_rows: int) -> Tensor:
    """Repeat each row ``factor`` times, then trim to ``out_rows`` rows."""
    if x.ndim != 2:
        raise ShapeError("repeat_rows: need a 2-D tensor")
    t, w = x.shape
    if out_rows > t * factor:
        raise ShapeError(f"repeat_rows: cannot produce {out_rows} rows from {t}*{factor}")

    def bw(g, needs):
        gfull = np.zeros((t * factor, w))
        gfull[:out_rows] = g
        return [gfull.reshape(t, factor, w).sum(axis=1)]

    return apply_op("repeat_rows", [x], np.repeat(x.data, factor, axis=0)[:out_rows].copy(), bw)
