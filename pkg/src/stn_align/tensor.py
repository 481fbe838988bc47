"""Dense float tensors and the differentiable layer kernels.

Tensors are plain ``numpy.ndarray`` values, laid out (batch, channel,
height, width) for images and (batch, features) for flat activations.
Every kernel here has an exact analytic backward pass, and every kernel
checks its output for NaN/Inf and raises :class:`NonFiniteError` rather
than letting garbage propagate.

All oracle and gradient tests run in float64; kernels preserve the dtype
of their inputs so networks may train in float32 for throughput.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonFiniteError, ShapeError

LAYER_KINDS = ("conv", "maxpool", "prelu", "fc", "softmax-xent", "center-loss")

# dimensional hyperparameters that must be positive integers
_DIMENSIONAL_KEYS = (
    "kernel", "stride", "in_channels", "out_channels", "in_width",
    "out_width", "channels", "class_count", "feature_width",
)


def check_finite(arr, what="tensor"):
    """Raise :class:`NonFiniteError` if ``arr`` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer in a network stack.

    ``kind`` is one of ``conv``, ``maxpool``, ``prelu``, ``fc``,
    ``softmax-xent``, ``center-loss``; ``options`` holds the
    kind-specific hyperparameters (kernel size, stride, channel counts,
    output width, class count, center-loss weight).
    """

    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for key, value in self.options.items():
            if key in _DIMENSIONAL_KEYS:
                if not isinstance(value, (int, np.integer)) or value <= 0:
                    raise ValueError(f"{self.kind}: {key} must be a positive integer, got {value!r}")
        weight = self.options.get("weight")
        if weight is not None and weight < 0:
            raise ValueError("center-loss weight must be >= 0")


@dataclass(frozen=True)
class LossBundle:
    """Joint classification loss: softmax term plus weighted center term."""

    softmax_loss: float
    center_loss: float
    weight: float
    total: float

    @classmethod
    def make(cls, softmax_loss, center_loss, weight):
        if softmax_loss < 0 or center_loss < 0 or weight < 0:
            raise ValueError("loss terms and weight must be non-negative")
        return cls(float(softmax_loss), float(center_loss), float(weight),
                   float(softmax_loss) + float(weight) * float(center_loss))


# ---------------------------------------------------------------------------
# convolution


def _check_image(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-d (batch, channel, h, w), got shape {x.shape}")


def im2col(x, kh, kw, stride=1, pad=0):
    """Unfold conv windows into a (B, C*kh*kw, OH*OW) column tensor."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeError(f"spatial extents {(h, w)} smaller than kernel ({kh},{kw})")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = x[:, :, ki:ki + stride * oh:stride,
                                   kj:kj + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im_add(dcols, in_shape, kh, kw, stride, pad):
    """Transpose of im2col: scatter-add columns back onto the image plane."""
    b, c, h, w = in_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    grad = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    dview = dcols.reshape(b, c, kh, kw, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            grad[:, :, ki:ki + stride * oh:stride,
                 kj:kj + stride * ow:stride] += dview[:, :, ki, kj]
    if pad:
        grad = grad[:, :, pad:-pad, pad:-pad]
    return grad


def _check_conv_args(x, weights, bias):
    _check_image(x)
    if weights.ndim != 4:
        raise ShapeError(f"weights must be 4-d (out, in, kh, kw), got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {weights.shape[1]}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias must have shape ({weights.shape[0]},), got {bias.shape}")


def conv2d_forward(x, weights, bias, stride=1, pad=0, _cols=None):
    """Cross-correlate ``x`` (B,C,H,W) with ``weights`` (O,C,kh,kw).

    ``pad`` zero-pads the spatial borders before the valid correlation;
    the default 0 is a plain valid convolution with output extent
    floor((in + 2*pad - k) / stride) + 1 per axis. ``_cols``, when given
    a one-element list, receives the unfolded column tensor so a
    following backward pass can reuse it.
    """
    _check_conv_args(x, weights, bias)
    oc, ic, kh, kw = weights.shape
    cols, oh, ow = im2col(x, kh, kw, stride, pad)
    if _cols is not None:
        _cols.append(cols)
    wm = weights.reshape(oc, ic * kh * kw)
    out = np.matmul(wm, cols).reshape(x.shape[0], oc, oh, ow)
    out += bias.reshape(1, -1, 1, 1)
    return check_finite(out, "conv2d output")


def conv2d_backward(upstream, saved_input, weights, stride=1, pad=0,
                    need_input_grad=True, cols=None):
    """Gradients of sum(upstream * conv2d_forward(...)) w.r.t. all inputs.

    Returns (grad_input, grad_weights, grad_bias); ``saved_input`` is the
    unpadded forward input. ``cols`` may pass the column tensor cached by
    the forward pass; ``need_input_grad=False`` skips grad_input (None)
    for first layers whose input is data.
    """
    _check_image(upstream, "upstream")
    oc, ic, kh, kw = weights.shape
    b = saved_input.shape[0]
    oh = (saved_input.shape[2] + 2 * pad - kh) // stride + 1
    ow = (saved_input.shape[3] + 2 * pad - kw) // stride + 1
    if upstream.shape != (b, oc, oh, ow):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match forward output "
            f"({b}, {oc}, {oh}, {ow})")
    if cols is None:
        cols, _, _ = im2col(saved_input, kh, kw, stride, pad)
    grad_bias = upstream.sum(axis=(0, 2, 3))
    up_mat = upstream.reshape(b, oc, oh * ow)
    grad_weights = np.tensordot(up_mat, cols, axes=([0, 2], [0, 2])).reshape(weights.shape)
    grad_x = None
    if need_input_grad:
        wm = weights.reshape(oc, ic * kh * kw)
        dcols = np.matmul(wm.T, up_mat)
        grad_x = _col2im_add(dcols, saved_input.shape, kh, kw, stride, pad)
        check_finite(grad_x, "conv2d grad_input")
    check_finite(grad_weights, "conv2d grad_weights")
    return grad_x, grad_weights, grad_bias


# ---------------------------------------------------------------------------
# 2x2 max pooling


@dataclass
class PoolCache:
    """Winner indices and shapes saved by the pooling forward pass."""

    argmax: np.ndarray          # (B, C, oh, ow) values in 0..3
    padded_shape: tuple
    input_shape: tuple


def maxpool2x2_forward(x):
    """Max over non-overlapping 2x2 windows.

    Odd spatial extents are replication-padded by one row/column on the
    bottom/right edge first. Returns (output, cache) where the cache
    records the winner of every window for the backward pass.
    """
    _check_image(x)
    b, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    hp, wp = x.shape[2], x.shape[3]
    oh, ow = hp // 2, wp // 2
    tiles = x.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, 4)
    arg = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
    check_finite(out, "maxpool output")
    return out, PoolCache(arg, (b, c, hp, wp), (b, c, h, w))


def maxpool2x2_backward(upstream, cache):
    """Route upstream gradient to each window's winning pixel."""
    b, c, hp, wp = cache.padded_shape
    oh, ow = hp // 2, wp // 2
    if upstream.shape != (b, c, oh, ow):
        raise ShapeError(f"upstream shape {upstream.shape}, expected {(b, c, oh, ow)}")
    tiles = np.zeros((b, c, oh, ow, 4), dtype=upstream.dtype)
    np.put_along_axis(tiles, cache.argmax[..., None], upstream[..., None], axis=-1)
    grad_p = tiles.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hp, wp)
    _, _, h, w = cache.input_shape
    grad = grad_p
    if hp > h:
        grad = grad[:, :, :h, :].copy()
        grad[:, :, h - 1, :] += grad_p[:, :, h, :]
    if wp > w:
        tail = grad[:, :, :, w]
        grad = grad[:, :, :, :w].copy()
        grad[:, :, :, w - 1] += tail
    return grad


# ---------------------------------------------------------------------------
# PReLU


def _slope_view(slope, x):
    if slope.ndim != 1 or slope.shape[0] != x.shape[1]:
        raise ShapeError(f"slope must have one entry per channel ({x.shape[1]}), got {slope.shape}")
    return slope.reshape((1, -1) + (1,) * (x.ndim - 2))


def prelu_forward(x, slope):
    """Per-channel parametric ReLU: x if x >= 0 else slope * x."""
    s = _slope_view(slope, x)
    out = np.where(x >= 0, x, s * x)
    return check_finite(out, "prelu output")


def prelu_backward(upstream, saved_input, slope):
    """Returns (grad_input, grad_slope); the kink at 0 uses the positive branch."""
    if upstream.shape != saved_input.shape:
        raise ShapeError("upstream shape must match the forward input")
    s = _slope_view(slope, saved_input)
    neg = saved_input < 0
    grad_x = upstream * np.where(neg, s, np.ones((), dtype=saved_input.dtype))
    contrib = upstream * saved_input * neg
    axes = (0,) + tuple(range(2, saved_input.ndim))
    grad_slope = contrib.sum(axis=axes)
    return grad_x, grad_slope


# ---------------------------------------------------------------------------
# fully connected


def fc_forward(x, weights, bias):
    """Affine map W @ x + b on inputs flattened to (batch, features)."""
    xf = x.reshape(x.shape[0], -1)
    if weights.ndim != 2 or weights.shape[1] != xf.shape[1]:
        raise ShapeError(f"weights {weights.shape} incompatible with flattened input width {xf.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias must have shape ({weights.shape[0]},), got {bias.shape}")
    out = xf @ weights.T + bias
    return check_finite(out, "fc output")


def fc_backward(upstream, saved_input, weights):
    """Returns (grad_input, grad_weights, grad_bias)."""
    xf = saved_input.reshape(saved_input.shape[0], -1)
    if upstream.shape != (xf.shape[0], weights.shape[0]):
        raise ShapeError(f"upstream shape {upstream.shape}, expected {(xf.shape[0], weights.shape[0])}")
    grad_x = (upstream @ weights).reshape(saved_input.shape)
    grad_w = upstream.T @ xf
    grad_b = upstream.sum(axis=0)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# losses


def softmax_xent(logits, labels):
    """Mean negative log-softmax of the true class.

    Returns (loss, grad_logits) with grad = (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(b)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= b
    check_finite(grad, "softmax gradient")
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite softmax loss")
    return loss, grad


def center_loss(features, labels, centers, damping=0.5):
    """Half mean squared distance of each feature to its class center.

    Returns (loss, grad_features, center_updates) where
    grad_features = (x_i - c_{y_i}) / batch (unweighted; the caller
    applies the joint-loss weight), and center_updates is the damped
    per-class mean shift: damping * sum(x_i - c_j) / (1 + n_j). Classes
    absent from the batch get an exactly-zero update.
    """
    if features.ndim != 2:
        raise ShapeError(f"features must be (batch, width), got {features.shape}")
    b, fw = features.shape
    k = centers.shape[0]
    if centers.shape != (k, fw):
        raise ShapeError(f"centers must be (classes, {fw}), got {centers.shape}")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    diffs = features - centers[labels]
    loss = float((diffs * diffs).sum() / (2.0 * b))
    grad_features = diffs / b
    counts = np.bincount(labels, minlength=k).astype(features.dtype)
    sums = np.zeros_like(centers)
    np.add.at(sums, labels, diffs)
    updates = damping * sums / (1.0 + counts)[:, None]
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite center loss")
    return loss, grad_features, updates


# ---------------------------------------------------------------------------
# parameter initialization


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv_weights(rng, out_channels, in_channels, kh, kw, dtype=np.float64):
    fan_in = in_channels * kh * kw
    fan_out = out_channels * kh * kw
    return glorot_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, fan_out, dtype)


def init_fc_weights(rng, out_width, in_width, dtype=np.float64):
    return glorot_uniform(rng, (out_width, in_width), in_width, out_width, dtype)
