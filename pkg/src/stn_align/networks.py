"""Network builders and the end-to-end differentiable alignment pipeline.

Two networks are composed through the transform/sampler machinery:

* a localization net (1..4 conv+PReLU+pool blocks, then 1..2 hidden FC
  layers of width 64, then a regression head) that predicts transform
  parameters from a downsampled input, with the head initialized to emit
  the exact identity transform at step 0 (zero weights, identity bias);
* a residual recognition net (stem conv, identity-shortcut blocks of two
  3x3 convolutions, feature FC) with a classifier head on top of the
  feature embedding.

Layers cache their forward inputs, so each ``backward`` must follow the
matching ``forward``. Parameter updates are the caller's job; layers
only accumulate gradients for one step at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from . import transforms as tf
from .exceptions import ShapeError
from .sampler import sample_backward_batch, sample_batch

DEGENERACY_PENALTY_WEIGHT = 10.0
PRELU_INIT = 0.25


# ---------------------------------------------------------------------------
# layers


class Conv:
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, pad=0,
                 dtype=np.float64, need_input_grad=True):
        self.w = tk.init_conv_weights(rng, out_ch, in_ch, kernel, kernel, dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.stride = stride
        self.pad = pad
        self.need_input_grad = need_input_grad
        self.gw = None
        self.gb = None
        self._x = None
        self._cols = None

    def spec(self):
        return tk.LayerSpec("conv", {
            "in_channels": self.w.shape[1], "out_channels": self.w.shape[0],
            "kernel": self.w.shape[2], "stride": self.stride})

    def forward(self, x):
        self._x = x
        sink = []
        out = tk.conv2d_forward(x, self.w, self.b, self.stride, self.pad, _cols=sink)
        self._cols = sink[0]
        return out

    def backward(self, up):
        dx, self.gw, self.gb = tk.conv2d_backward(
            up, self._x, self.w, self.stride, self.pad,
            need_input_grad=self.need_input_grad, cols=self._cols)
        return dx

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}


class PReLU:
    def __init__(self, channels, dtype=np.float64):
        self.slope = np.full(channels, PRELU_INIT, dtype=dtype)
        self.gslope = None
        self._x = None

    def spec(self):
        return tk.LayerSpec("prelu", {"channels": self.slope.shape[0]})

    def forward(self, x):
        self._x = x
        return tk.prelu_forward(x, self.slope)

    def backward(self, up):
        dx, self.gslope = tk.prelu_backward(up, self._x, self.slope)
        return dx

    def params(self):
        return {"slope": self.slope}

    def grads(self):
        return {"slope": self.gslope}

    def kink_margin(self):
        return float(np.abs(self._x).min()) if self._x is not None else np.inf


class MaxPool:
    def __init__(self):
        self._cache = None
        self._x = None

    def spec(self):
        return tk.LayerSpec("maxpool", {"kernel": 2, "stride": 2})

    def forward(self, x):
        self._x = x
        out, self._cache = tk.maxpool2x2_forward(x)
        return out

    def backward(self, up):
        return tk.maxpool2x2_backward(up, self._cache)

    def params(self):
        return {}

    def grads(self):
        return {}

    def kink_margin(self):
        """Smallest (max - runner-up) gap over all pooling windows.

        Odd extents are padded with -inf here, not edge replication:
        a replicated pixel tying with its own copy is not a kink (the
        copies move together under any perturbation).
        """
        if self._x is None:
            return np.inf
        x = self._x.astype(np.float64)
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            x = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)),
                       constant_values=-np.inf)
        hp, wp = x.shape[2], x.shape[3]
        tiles = x.reshape(b, c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        tiles = np.sort(tiles.reshape(b, c, hp // 2, wp // 2, 4), axis=-1)
        gaps = tiles[..., 3] - tiles[..., 2]
        return float(np.where(np.isfinite(gaps), gaps, np.inf).min())


class Flatten:
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, up):
        return up.reshape(self._shape)

    def params(self):
        return {}

    def grads(self):
        return {}


class Dense:
    def __init__(self, rng, in_w, out_w, dtype=np.float64, zero_init=False, bias_init=None):
        if zero_init:
            self.w = np.zeros((out_w, in_w), dtype=dtype)
        else:
            self.w = tk.init_fc_weights(rng, out_w, in_w, dtype)
        self.b = np.zeros(out_w, dtype=dtype) if bias_init is None \
            else np.asarray(bias_init, dtype=dtype).copy()
        self.gw = None
        self.gb = None
        self._x = None

    def spec(self):
        return tk.LayerSpec("fc", {"in_width": self.w.shape[1], "out_width": self.w.shape[0]})

    def forward(self, x):
        self._x = x
        return tk.fc_forward(x, self.w, self.b)

    def backward(self, up):
        dx, self.gw, self.gb = tk.fc_backward(up, self._x, self.w)
        return dx

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.gw, "b": self.gb}


class ResBlock:
    """Two shape-preserving 3x3 convolutions with an identity shortcut.

    out = x + conv2(prelu(conv1(x))); with zero conv weights and biases
    the block is exactly the identity map.
    """

    def __init__(self, rng, channels, dtype=np.float64):
        self.c1 = Conv(rng, channels, channels, 3, pad=1, dtype=dtype)
        self.act = PReLU(channels, dtype=dtype)
        self.c2 = Conv(rng, channels, channels, 3, pad=1, dtype=dtype)

    def forward(self, x):
        return x + self.c2.forward(self.act.forward(self.c1.forward(x)))

    def backward(self, up):
        return up + self.c1.backward(self.act.backward(self.c2.backward(up)))

    def _inner(self):
        return (("c1", self.c1), ("act", self.act), ("c2", self.c2))

    def params(self):
        return {f"{n}.{k}": v for n, l in self._inner() for k, v in l.params().items()}

    def grads(self):
        return {f"{n}.{k}": v for n, l in self._inner() for k, v in l.grads().items()}


class Seq:
    """Named layer sequence with namespaced parameter access."""

    def __init__(self, layers):
        self.layers = list(layers)  # (name, layer) pairs

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, up):
        for _, layer in reversed(self.layers):
            up = layer.backward(up)
        return up

    def params(self):
        return {f"{n}.{k}": v for n, l in self.layers for k, v in l.params().items()}

    def grads(self):
        return {f"{n}.{k}": v for n, l in self.layers for k, v in l.grads().items()}

    def kink_margin(self):
        margins = [l.kink_margin() for _, l in self.layers if hasattr(l, "kink_margin")]
        return min(margins, default=np.inf)


# ---------------------------------------------------------------------------
# size bookkeeping


def _after_conv(size, kernel):
    if size < kernel:
        raise ValueError(f"spatial extent {size} smaller than kernel {kernel}")
    return size - kernel + 1


def _after_pool(size):
    return (size + 1) // 2


# ---------------------------------------------------------------------------
# localization network


@dataclass(frozen=True)
class LocNetSpec:
    """Architecture of the transform-predicting network.

    The default (3 conv+pool blocks, 1 hidden FC of width 64) is the
    preferred variant; conv_blocks may range 1..4 and fc_layers 1..2 for
    architecture sweeps. ``head_width`` must match the transform kind the
    pipeline uses (8 projective, 6 affine, 4 similarity, 0 identity).
    """

    conv_blocks: int = 3
    fc_layers: int = 1
    head_width: int = 4
    input_size: int = 20
    in_channels: int = 1
    channels: tuple = (16, 32, 64, 64)
    kernels: tuple = (5, 3, 3, 3)
    hidden_width: int = 64

    def __post_init__(self):
        if not 1 <= self.conv_blocks <= 4:
            raise ValueError("conv_blocks must be in 1..4")
        if not 1 <= self.fc_layers <= 2:
            raise ValueError("fc_layers must be in 1..2")
        if self.head_width not in (0, 4, 6, 8):
            raise ValueError("head_width must be one of 0, 4, 6, 8")
        if len(self.channels) < self.conv_blocks or len(self.kernels) < self.conv_blocks:
            raise ValueError("need one channel count and kernel size per conv block")
        self.flat_width()  # validates spatial extents

    def flat_width(self):
        size = self.input_size
        for i in range(self.conv_blocks):
            size = _after_pool(_after_conv(size, self.kernels[i]))
        return self.channels[self.conv_blocks - 1] * size * size

    def name(self):
        return f"{self.conv_blocks}conv+{self.fc_layers}fc"


class LocNet:
    def __init__(self, spec, rng, transform_kind, dtype=np.float64):
        if spec.head_width != tf.head_width(transform_kind):
            raise ValueError(
                f"head_width {spec.head_width} does not match kind {transform_kind!r} "
                f"({tf.head_width(transform_kind)} parameters)")
        self.spec = spec
        self.transform_kind = transform_kind
        layers = []
        ch = spec.in_channels
        for i in range(spec.conv_blocks):
            layers.append((f"conv{i + 1}", Conv(rng, ch, spec.channels[i], spec.kernels[i],
                                                dtype=dtype, need_input_grad=i > 0)))
            layers.append((f"act{i + 1}", PReLU(spec.channels[i], dtype=dtype)))
            layers.append((f"pool{i + 1}", MaxPool()))
            ch = spec.channels[i]
        layers.append(("flat", Flatten()))
        width = spec.flat_width()
        for j in range(spec.fc_layers):
            layers.append((f"fc{j + 1}", Dense(rng, width, spec.hidden_width, dtype=dtype)))
            layers.append((f"fcact{j + 1}", PReLU(spec.hidden_width, dtype=dtype)))
            width = spec.hidden_width
        identity = tf.as_vector(tf.identity_params(transform_kind))
        layers.append(("head", Dense(rng, width, spec.head_width, dtype=dtype,
                                     zero_init=True, bias_init=identity)))
        self.net = Seq(layers)

    def forward(self, x):
        return self.net.forward(x)

    def backward(self, dtheta):
        return self.net.backward(dtheta)

    def params(self):
        return self.net.params()

    def grads(self):
        return self.net.grads()

    def num_params(self):
        return sum(int(p.size) for p in self.params().values())

    def kink_margin(self):
        return self.net.kink_margin()


def build_locnet(spec, seed=0, transform_kind=None, dtype=np.float64):
    """Construct a localization net whose step-0 output is the exact identity.

    ``transform_kind`` defaults to the kind implied by the spec's head
    width.
    """
    if transform_kind is None:
        widths = {4: "similarity", 6: "affine", 8: "projective", 0: "identity"}
        transform_kind = widths[spec.head_width]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    return LocNet(spec, rng, transform_kind, dtype=dtype)


# ---------------------------------------------------------------------------
# recognition network


@dataclass(frozen=True)
class RecNetSpec:
    """Architecture of the recognition/embedding network.

    Identity-shortcut blocks of two 3x3 convolutions; the desk-scale
    default is 3 blocks with a 64-wide feature embedding (the full-scale
    configuration of 9 blocks / 512 features is expressible but slow on
    one core).
    """

    class_count: int
    residual_blocks: int = 3
    feature_width: int = 64
    input_size: int = 16
    in_channels: int = 1
    stem_channels: int = 12
    stem_kernel: int = 3

    def __post_init__(self):
        if self.feature_width < 2:
            raise ValueError("feature_width must be >= 2")
        if self.residual_blocks < 1:
            raise ValueError("need at least one residual block")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        self.flat_width()

    def trace(self):
        size = _after_pool(_after_conv(self.input_size, self.stem_kernel))
        sizes = [size]
        for i in range(self.residual_blocks - 1):
            size = _after_pool(size)
            sizes.append(size)
        return sizes

    def flat_width(self):
        return self.stem_channels * self.trace()[-1] ** 2


class RecNet:
    def __init__(self, spec, rng, dtype=np.float64, input_grad=True):
        self.spec = spec
        self.dtype = dtype
        self.input_grad = input_grad
        self._build(rng)

    def _build(self, rng):
        spec = self.spec
        dtype = self.dtype
        layers = [
            ("stem", Conv(rng, spec.in_channels, spec.stem_channels, spec.stem_kernel,
                          dtype=dtype, need_input_grad=self.input_grad)),
            ("stemact", PReLU(spec.stem_channels, dtype=dtype)),
            ("stempool", MaxPool()),
        ]
        for i in range(spec.residual_blocks):
            layers.append((f"res{i + 1}", ResBlock(rng, spec.stem_channels, dtype=dtype)))
            if i < spec.residual_blocks - 1:
                layers.append((f"pool{i + 1}", MaxPool()))
        layers.append(("flat", Flatten()))
        layers.append(("feat", Dense(rng, spec.flat_width(), spec.feature_width, dtype=dtype)))
        self.trunk = Seq(layers)
        self.head = Dense(rng, spec.feature_width, spec.class_count, dtype=dtype)

    def reinit(self, rng):
        """Re-draw every trunk and head parameter from the init distribution."""
        self._build(rng)

    def forward_features(self, x):
        return self.trunk.forward(x)

    def forward_logits(self, features):
        return self.head.forward(features)

    def backward(self, grad_logits, grad_features=None):
        dfeat = self.head.backward(grad_logits)
        if grad_features is not None:
            dfeat = dfeat + grad_features
        return self.trunk.backward(dfeat)

    def params(self):
        out = {f"trunk.{k}": v for k, v in self.trunk.params().items()}
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out

    def grads(self):
        out = {f"trunk.{k}": v for k, v in self.trunk.grads().items()}
        out.update({f"head.{k}": v for k, v in self.head.grads().items()})
        return out

    def num_params(self):
        return sum(int(p.size) for p in self.params().values())

    def kink_margin(self):
        return self.trunk.kink_margin()


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class PipelineSpec:
    """End-to-end configuration: sizes, transform kind, and sub-network specs."""

    transform_kind: str = "similarity"
    image_size: int = 40
    loc_input_size: int = 20
    warp_size: int = 16
    class_count: int = 40
    dtype: str = "float32"
    loc: LocNetSpec | None = None
    rec: RecNetSpec | None = None

    def __post_init__(self):
        if self.transform_kind not in tf.KINDS:
            raise ValueError(f"unknown transform kind {self.transform_kind!r}")
        if self.loc is None and self.transform_kind != "identity":
            object.__setattr__(self, "loc", LocNetSpec(
                head_width=tf.head_width(self.transform_kind),
                input_size=self.loc_input_size))
        if self.rec is None:
            object.__setattr__(self, "rec", RecNetSpec(
                class_count=self.class_count, input_size=self.warp_size))
        if self.loc is not None:
            if self.loc.input_size != self.loc_input_size:
                raise ValueError("loc spec input_size must equal loc_input_size")
            if self.loc.head_width != tf.head_width(self.transform_kind):
                raise ValueError("loc spec head_width must match the transform kind")
        if self.rec.input_size != self.warp_size:
            raise ValueError("rec spec input_size must equal warp_size")
        if self.rec.class_count != self.class_count:
            raise ValueError("rec spec class_count must equal class_count")

    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class PipelineState:
    """All learnables plus their specs; parameters have single-writer semantics."""

    spec: PipelineSpec
    loc: LocNet | None
    rec: RecNet
    centers: np.ndarray
    frozen_loc: bool = False
    frozen_rec: bool = False

    def params(self):
        out = {}
        if self.loc is not None:
            out.update({f"loc.{k}": v for k, v in self.loc.params().items()})
        out.update({f"rec.{k}": v for k, v in self.rec.params().items()})
        out["centers"] = self.centers
        return out

    def param_snapshot(self):
        return {k: v.copy() for k, v in self.params().items()}

    def load_params(self, tensors):
        current = self.params()
        missing = set(current) - set(tensors)
        extra = set(tensors) - set(current)
        if missing or extra:
            raise ShapeError(f"checkpoint tensor names do not match "
                             f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
        for name, arr in current.items():
            src = np.asarray(tensors[name], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise ShapeError(f"tensor {name} has shape {src.shape}, expected {arr.shape}")
            arr[...] = src


def build_pipeline(spec, seed=0):
    # independent streams: the recognition net's init must not depend on
    # whether a localization net exists (a frozen identity-initialized
    # STN pipeline is then bitwise-equivalent to a plain classifier)
    dtype = spec.np_dtype()
    loc = None
    if spec.transform_kind != "identity":
        rng_loc = np.random.default_rng(np.random.SeedSequence((seed, 7, 0)))
        loc = LocNet(spec.loc, rng_loc, spec.transform_kind, dtype=dtype)
    rng_rec = np.random.default_rng(np.random.SeedSequence((seed, 7, 1)))
    rec = RecNet(spec.rec, rng_rec, dtype=dtype,
                 input_grad=spec.transform_kind != "identity")
    centers = np.zeros((spec.rec.class_count, spec.rec.feature_width), dtype=dtype)
    return PipelineState(spec, loc, rec, centers)


_RESAMPLE_GRID_CACHE = {}


def _identity_coords(out_h, out_w):
    key = (out_h, out_w)
    if key not in _RESAMPLE_GRID_CACHE:
        _RESAMPLE_GRID_CACHE[key] = tf.target_coords(out_h, out_w)
    return _RESAMPLE_GRID_CACHE[key]


def center_resample(images, out_h, out_w):
    """Deterministic full-extent bilinear resample (the identity warp)."""
    xs, ys = _identity_coords(out_h, out_w)
    b = images.shape[0]
    return sample_batch(images,
                        np.broadcast_to(xs, (b, xs.size)),
                        np.broadcast_to(ys, (b, ys.size)), out_h, out_w)


@dataclass
class PipelineForward:
    """Forward activations and the per-sample warp geometry."""

    images: np.ndarray
    theta: np.ndarray | None          # (B, P) predicted parameter vectors
    xs: np.ndarray | None             # (B, N) warp source coordinates
    ys: np.ndarray | None
    zs: np.ndarray | None
    degenerate: np.ndarray | None     # (B,) bool mask of penalized samples
    penalty: float
    penalty_grads: np.ndarray | None  # (B, P) gradient of the penalty term
    warped: np.ndarray
    features: np.ndarray
    logits: np.ndarray

    @property
    def predicted_params(self):
        if self.theta is None:
            return None
        kind = "similarity" if self.theta.shape[1] == 4 else \
            ("affine" if self.theta.shape[1] == 6 else "projective")
        return [tf.from_vector(kind, row) for row in self.theta]


def forward_pipeline(state, images, eps_z=tf.DEFAULT_EPS_Z):
    """Run localization -> grid -> warp -> recognition on a batch.

    Degenerate predicted projective transforms do not abort the batch:
    the offending sample is warped with the identity instead and a
    quadratic penalty on the divisor shortfall (with its gradient w.r.t.
    the two perspective parameters) is reported for the training loss.
    """
    spec = state.spec
    if images.ndim != 4 or images.shape[2] != spec.image_size or images.shape[3] != spec.image_size:
        raise ShapeError(f"expected images (B, C, {spec.image_size}, {spec.image_size}), "
                         f"got {images.shape}")
    b = images.shape[0]
    n = spec.warp_size * spec.warp_size
    theta = xs = ys = zs = None
    degenerate = None
    penalty = 0.0
    penalty_grads = None
    if state.loc is None:
        warped = center_resample(images, spec.warp_size, spec.warp_size)
    else:
        loc_input = center_resample(images, spec.loc_input_size, spec.loc_input_size)
        theta = state.loc.forward(loc_input)
        xs, ys, zs, bad = tf.generate_grid_batch(
            spec.transform_kind, theta.astype(np.float64), spec.warp_size, spec.warp_size, eps_z)
        degenerate = bad
        if bad.any():
            penalty_grads = np.zeros((b, theta.shape[1]))
            ix, iy = _identity_coords(spec.warp_size, spec.warp_size)
            tx, ty = tf.target_coords(spec.warp_size, spec.warp_size)
            for row in np.nonzero(bad)[0]:
                pix = int(np.argmin(np.abs(zs[row])))
                zmin = zs[row][pix]
                shortfall = eps_z - abs(zmin)
                penalty += DEGENERACY_PENALTY_WEIGHT * shortfall ** 2
                # at an exactly-zero divisor, push it positive
                sgn = 1.0 if zmin >= 0 else -1.0
                coeff = -2.0 * DEGENERACY_PENALTY_WEIGHT * shortfall * sgn
                penalty_grads[row, 6] = coeff * tx[pix]
                penalty_grads[row, 7] = coeff * ty[pix]
                xs[row] = ix
                ys[row] = iy
                zs[row] = 1.0
        warped = sample_batch(images, xs, ys, spec.warp_size, spec.warp_size)
    features = state.rec.forward_features(warped)
    logits = state.rec.forward_logits(features)
    return PipelineForward(images, theta, xs, ys, zs, degenerate,
                           penalty, penalty_grads, warped, features, logits)


@dataclass
class PipelineGrads:
    loc: dict
    rec: dict


def backward_pipeline(state, fwd, grad_logits, grad_features=None):
    """Propagate loss gradients to every learnable parameter.

    ``grad_logits`` comes from the classification loss; an optional
    ``grad_features`` term (e.g. the weighted center-loss gradient) is
    added at the embedding. Returns namespaced gradient dicts; center
    updates are handled separately by the center-loss kernel.
    """
    spec = state.spec
    dwarped = state.rec.backward(grad_logits, grad_features)
    loc_grads = {}
    if state.loc is not None:
        _, dxs, dys = sample_backward_batch(
            dwarped, fwd.images, fwd.xs, fwd.ys, need_image_grad=False)
        dtheta = tf.param_jacobian_batch(
            spec.transform_kind, fwd.theta.astype(np.float64),
            spec.warp_size, spec.warp_size,
            dxs.astype(np.float64), dys.astype(np.float64),
            xs=fwd.xs.astype(np.float64), ys=fwd.ys.astype(np.float64),
            zs=fwd.zs.astype(np.float64))
        if fwd.degenerate is not None and fwd.degenerate.any():
            dtheta[fwd.degenerate] = fwd.penalty_grads[fwd.degenerate]
        state.loc.backward(dtheta.astype(fwd.theta.dtype))
        loc_grads = state.loc.grads()
    return PipelineGrads(loc_grads, state.rec.grads())


def extract_embedding(state, images, mirror_average=False):
    """Feature embedding of one or more images.

    With ``mirror_average`` the embedding is the mean of the features of
    each image and of its horizontal mirror.
    """
    if images.ndim == 3:
        images = images[None]
    fwd = forward_pipeline(state, images)
    feats = fwd.features
    if mirror_average:
        flipped = forward_pipeline(state, images[:, :, :, ::-1].copy())
        feats = 0.5 * (feats + flipped.features)
    return feats


def pipeline_kink_margin(state, fwd):
    """Distance of the saved forward pass from the nearest subgradient kink.

    Used by finite-difference checking to reject instances where a
    perturbation could cross a PReLU zero, flip a pooling winner, or move
    a sample point across a pixel boundary.
    """
    margins = [state.rec.kink_margin()]
    if state.loc is not None:
        margins.append(state.loc.kink_margin())
        h = state.spec.warp_size
        w = state.spec.warp_size
        for norm, extent in ((fwd.xs, w), (fwd.ys, h)):
            pix = (norm + 1.0) * 0.5 * (extent - 1)
            frac = pix - np.floor(pix)
            margins.append(float(np.minimum(frac, 1.0 - frac).min()))
    return min(margins)


# ---------------------------------------------------------------------------
# spec serialization (used by the checkpoint format)


def spec_to_text(spec):
    lines = [
        f"transform_kind={spec.transform_kind}",
        f"image_size={spec.image_size}",
        f"loc_input_size={spec.loc_input_size}",
        f"warp_size={spec.warp_size}",
        f"class_count={spec.class_count}",
        f"dtype={spec.dtype}",
    ]
    if spec.loc is not None:
        lines += [
            f"loc.conv_blocks={spec.loc.conv_blocks}",
            f"loc.fc_layers={spec.loc.fc_layers}",
            f"loc.head_width={spec.loc.head_width}",
            f"loc.input_size={spec.loc.input_size}",
            f"loc.in_channels={spec.loc.in_channels}",
            "loc.channels=" + ",".join(str(c) for c in spec.loc.channels),
            "loc.kernels=" + ",".join(str(k) for k in spec.loc.kernels),
            f"loc.hidden_width={spec.loc.hidden_width}",
        ]
    lines += [
        f"rec.residual_blocks={spec.rec.residual_blocks}",
        f"rec.feature_width={spec.rec.feature_width}",
        f"rec.input_size={spec.rec.input_size}",
        f"rec.in_channels={spec.rec.in_channels}",
        f"rec.stem_channels={spec.rec.stem_channels}",
        f"rec.stem_kernel={spec.rec.stem_kernel}",
    ]
    return "\n".join(lines) + "\n"


def spec_from_text(text):
    kv = {}
    for line in text.strip().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    kind = kv["transform_kind"]
    loc = None
    if "loc.conv_blocks" in kv:
        loc = LocNetSpec(
            conv_blocks=int(kv["loc.conv_blocks"]),
            fc_layers=int(kv["loc.fc_layers"]),
            head_width=int(kv["loc.head_width"]),
            input_size=int(kv["loc.input_size"]),
            in_channels=int(kv["loc.in_channels"]),
            channels=tuple(int(c) for c in kv["loc.channels"].split(",")),
            kernels=tuple(int(k) for k in kv["loc.kernels"].split(",")),
            hidden_width=int(kv["loc.hidden_width"]),
        )
    rec = RecNetSpec(
        class_count=int(kv["class_count"]),
        residual_blocks=int(kv["rec.residual_blocks"]),
        feature_width=int(kv["rec.feature_width"]),
        input_size=int(kv["rec.input_size"]),
        in_channels=int(kv["rec.in_channels"]),
        stem_channels=int(kv["rec.stem_channels"]),
        stem_kernel=int(kv["rec.stem_kernel"]),
    )
    return PipelineSpec(
        transform_kind=kind,
        image_size=int(kv["image_size"]),
        loc_input_size=int(kv["loc_input_size"]),
        warp_size=int(kv["warp_size"]),
        class_count=int(kv["class_count"]),
        dtype=kv["dtype"],
        loc=loc,
        rec=rec,
    )
