"""Central finite-difference verification of every analytic gradient.

The relative error metric is |analytic - numeric| / max(1, |analytic|,
|numeric|); the unit floor makes near-zero gradients compare absolutely.
Checks are evaluated away from subgradient kinks (PReLU zeros, pooling
ties, integer-coincident sample coordinates): instances that land within
a safety margin of a kink are redrawn, since no two-sided difference
quotient is meaningful there.

Suites (each returns :class:`CheckResult` objects):

* ``transforms``: parameter Jacobians of grid generation under a random
  fixed quadratic loss on the source coordinates, tolerance 1e-7;
* ``sampler``: coordinate and image gradients of bilinear sampling,
  tolerance 1e-7;
* ``tensor``: the layer kernels (conv, pool, prelu, fc, softmax+xent,
  center loss), tolerance 1e-6;
* ``pipeline``: end-to-end loss gradients w.r.t. every localization
  parameter of a small pipeline, tolerance 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import networks as nw
from . import tensor as tk
from . import transforms as tf
from .sampler import bilinear_backward, bilinear_sample

TRANSFORM_TOL = 1e-7
SAMPLER_TOL = 1e-7
KERNEL_TOL = 1e-6
PIPELINE_TOL = 1e-5

MODULES = ("transforms", "sampler", "tensor", "pipeline")


@dataclass
class CheckResult:
    name: str
    trials: int
    worst: float
    tolerance: float

    @property
    def passed(self):
        return self.trials == 0 or self.worst < self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28s} trials={self.trials:<4d} "
                f"worst_rel_err={self.worst:.3e}  tol={self.tolerance:.1e}")


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def central_diff(f, x, step=1e-6):
    """Numeric gradient of scalar f at flat float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        fp = f(xp)
        xm = x.copy()
        xm[i] -= step
        fm = f(xm)
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


def central_diff_tensor(f, arr, step=1e-5):
    """Numeric gradient of scalar f w.r.t. every element of an ndarray."""
    flat = arr.astype(np.float64).ravel()

    def wrapped(v):
        return f(v.reshape(arr.shape))

    return central_diff(wrapped, flat, step).reshape(arr.shape)


# ---------------------------------------------------------------------------
# transforms suite


def _random_params_vector(kind, rng):
    if kind == "identity":
        return np.zeros(0)
    if kind == "similarity":
        return np.array([rng.uniform(-0.7, 0.7), rng.uniform(0.6, 1.5),
                         rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)])
    if kind == "affine":
        base = np.array([1.0, 0, 0, 0, 1.0, 0])
        return base + rng.uniform(-0.35, 0.35, size=6)
    base = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0])
    vec = base + rng.uniform(-0.3, 0.3, size=8)
    vec[6:] = rng.uniform(-0.25, 0.25, size=2)
    return vec


_KIND_TAGS = {"identity": 0, "similarity": 1, "affine": 2, "projective": 3}


def check_transform_jacobian(kind, trials=100, seed=0, tolerance=TRANSFORM_TOL,
                             out_h=4, out_w=4, step=1e-6):
    rng = np.random.default_rng(np.random.SeedSequence((seed, _KIND_TAGS[kind])))
    n = out_h * out_w
    worst = 0.0
    for _ in range(trials):
        vec = _random_params_vector(kind, rng)
        if kind == "identity":
            continue
        params = tf.from_vector(kind, vec)
        wx, wy = rng.normal(size=(2, n))
        qx, qy = rng.normal(size=(2, n))

        def loss_of(grid_xs, grid_ys):
            return float((wx * grid_xs + wy * grid_ys
                          + 0.5 * (qx * grid_xs ** 2 + qy * grid_ys ** 2)).sum())

        grid = tf.generate_grid(params, out_h, out_w)
        dxs = wx + qx * grid.xs
        dys = wy + qy * grid.ys
        analytic = tf.param_jacobian(params, grid, dxs, dys).values

        def fd_loss(v):
            g = tf.generate_grid(tf.from_vector(kind, v), out_h, out_w)
            return loss_of(g.xs, g.ys)

        numeric = central_diff(fd_loss, vec, step)
        worst = max(worst, rel_error(analytic, numeric))
    return CheckResult(f"transform-jacobian/{kind}", trials, worst, tolerance)


# ---------------------------------------------------------------------------
# sampler suite


def _random_grid(rng, h, w, out_h, out_w, margin=0.05):
    """In-bounds grid with strictly fractional pixel coordinates."""
    n = out_h * out_w
    px = rng.integers(0, w - 1, size=n) + rng.uniform(margin, 1.0 - margin, size=n)
    py = rng.integers(0, h - 1, size=n) + rng.uniform(margin, 1.0 - margin, size=n)
    xs = px / (w - 1) * 2.0 - 1.0
    ys = py / (h - 1) * 2.0 - 1.0
    return tf.SamplingGrid(out_h, out_w, xs, ys, np.ones(n))


def check_sampler(trials=100, seed=0, tolerance=SAMPLER_TOL, step=1e-5):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 505)))
    worst_coord = 0.0
    worst_image = 0.0
    for _ in range(trials):
        h, w = int(rng.integers(4, 7)), int(rng.integers(4, 7))
        out_h, out_w = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        u = rng.random((1, 2, h, w))
        grid = _random_grid(rng, h, w, out_h, out_w)
        upstream = rng.normal(size=(1, 2, out_h, out_w))
        grad_u, dxs, dys = bilinear_backward(upstream, u, grid)

        def loss_xs(xs_vec):
            g = tf.SamplingGrid(out_h, out_w, xs_vec, grid.ys, grid.zs)
            return float((upstream * bilinear_sample(u, g)).sum())

        def loss_ys(ys_vec):
            g = tf.SamplingGrid(out_h, out_w, grid.xs, ys_vec, grid.zs)
            return float((upstream * bilinear_sample(u, g)).sum())

        worst_coord = max(worst_coord,
                          rel_error(dxs, central_diff(loss_xs, grid.xs, step)),
                          rel_error(dys, central_diff(loss_ys, grid.ys, step)))

        def loss_u(img):
            return float((upstream * bilinear_sample(img, grid)).sum())

        worst_image = max(worst_image, rel_error(grad_u, central_diff_tensor(loss_u, u, step)))
    return [CheckResult("sampler/coordinates", trials, worst_coord, tolerance),
            CheckResult("sampler/image", trials, worst_image, tolerance)]


# ---------------------------------------------------------------------------
# layer kernel suite


def _resample_away_from(rng, shape, kink=0.0, margin=1e-3):
    x = rng.normal(size=shape)
    while np.any(np.abs(x - kink) < margin):
        x = rng.normal(size=shape)
    return x


def check_kernels(trials=20, seed=0, tolerance=KERNEL_TOL, step=1e-5):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 606)))
    results = []

    worst = 0.0
    for _ in range(trials):
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3)) * 0.5
        b = rng.normal(size=3)
        up = rng.normal(size=tk.conv2d_forward(x, w, b, stride, pad).shape)
        dx, dw, db = tk.conv2d_backward(up, x, w, stride, pad)
        worst = max(
            worst,
            rel_error(dx, central_diff_tensor(
                lambda v: float((up * tk.conv2d_forward(v, w, b, stride, pad)).sum()), x, step)),
            rel_error(dw, central_diff_tensor(
                lambda v: float((up * tk.conv2d_forward(x, v, b, stride, pad)).sum()), w, step)),
            rel_error(db, central_diff_tensor(
                lambda v: float((up * tk.conv2d_forward(x, w, v, stride, pad)).sum()), b, step)))
    results.append(CheckResult("kernel/conv2d", trials, worst, tolerance))

    worst = 0.0
    for _ in range(trials):
        # keep pooling winners clear of ties under the FD step
        x = rng.normal(size=(2, 2, 5, 6))
        while _pool_gap(x) < 50 * step:
            x = rng.normal(size=(2, 2, 5, 6))
        out, cache = tk.maxpool2x2_forward(x)
        up = rng.normal(size=out.shape)
        dx = tk.maxpool2x2_backward(up, cache)
        worst = max(worst, rel_error(dx, central_diff_tensor(
            lambda v: float((up * tk.maxpool2x2_forward(v)[0]).sum()), x, step)))
    results.append(CheckResult("kernel/maxpool2x2", trials, worst, tolerance))

    worst = 0.0
    for _ in range(trials):
        x = _resample_away_from(rng, (2, 3, 4, 4), margin=100 * step)
        slope = rng.uniform(0.05, 0.6, size=3)
        up = rng.normal(size=x.shape)
        dx, dslope = tk.prelu_backward(up, x, slope)
        worst = max(
            worst,
            rel_error(dx, central_diff_tensor(
                lambda v: float((up * tk.prelu_forward(v, slope)).sum()), x, step)),
            rel_error(dslope, central_diff_tensor(
                lambda v: float((up * tk.prelu_forward(x, v)).sum()), slope, step)))
    results.append(CheckResult("kernel/prelu", trials, worst, tolerance))

    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(3, 7))
        w = rng.normal(size=(4, 7))
        b = rng.normal(size=4)
        up = rng.normal(size=(3, 4))
        dx, dw, db = tk.fc_backward(up, x, w)
        worst = max(
            worst,
            rel_error(dx, central_diff_tensor(
                lambda v: float((up * tk.fc_forward(v, w, b)).sum()), x, step)),
            rel_error(dw, central_diff_tensor(
                lambda v: float((up * tk.fc_forward(x, v, b)).sum()), w, step)),
            rel_error(db, central_diff_tensor(
                lambda v: float((up * tk.fc_forward(x, w, v)).sum()), b, step)))
    results.append(CheckResult("kernel/fc", trials, worst, tolerance))

    worst = 0.0
    for _ in range(trials):
        logits = rng.normal(size=(5, 4)) * 2.0
        labels = rng.integers(0, 4, size=5)
        _, grad = tk.softmax_xent(logits, labels)
        worst = max(worst, rel_error(grad, central_diff_tensor(
            lambda v: tk.softmax_xent(v, labels)[0], logits, step)))
    results.append(CheckResult("kernel/softmax-xent", trials, worst, tolerance))

    worst = 0.0
    for _ in range(trials):
        feats = rng.normal(size=(6, 5))
        centers = rng.normal(size=(3, 5))
        labels = rng.integers(0, 3, size=6)
        _, grad, _ = tk.center_loss(feats, labels, centers)
        worst = max(worst, rel_error(grad, central_diff_tensor(
            lambda v: tk.center_loss(v, labels, centers)[0], feats, step)))
    results.append(CheckResult("kernel/center-loss", trials, worst, tolerance))
    return results


def _pool_gap(x):
    """Smallest max-vs-runner-up gap over all 2x2 pooling windows.

    Odd extents are padded with -inf rather than edge replication:
    replicated pixels tie with their own copies structurally, which is
    not a kink (both copies move together under perturbation).
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        x = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)),
                   constant_values=-np.inf)
    hp, wp = x.shape[2], x.shape[3]
    tiles = x.reshape(b, c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    tiles = np.sort(tiles.reshape(b, c, hp // 2, wp // 2, 4), axis=-1)
    gaps = tiles[..., 3] - tiles[..., 2]
    return float(np.where(np.isfinite(gaps), gaps, np.inf).min())


# ---------------------------------------------------------------------------
# pipeline suite


def _tiny_pipeline_spec(kind):
    loc = None
    if kind != "identity":
        loc = nw.LocNetSpec(conv_blocks=1, fc_layers=1, head_width=tf.head_width(kind),
                            input_size=12, channels=(4,), kernels=(5,), hidden_width=8)
    rec = nw.RecNetSpec(class_count=3, residual_blocks=1, feature_width=6,
                        input_size=10, stem_channels=3)
    return nw.PipelineSpec(transform_kind=kind, image_size=16, loc_input_size=12,
                           warp_size=10, class_count=3, dtype="float64",
                           loc=loc, rec=rec)


def _pipeline_loss(state, images, labels, lam_c=0.01):
    fwd = nw.forward_pipeline(state, images)
    loss_s, dlogits = tk.softmax_xent(fwd.logits, labels)
    loss_c, dfeat, _ = tk.center_loss(fwd.features, labels, state.centers)
    return loss_s + lam_c * loss_c + fwd.penalty, fwd, dlogits, lam_c * dfeat


def check_pipeline(kind, trials=3, seed=0, tolerance=PIPELINE_TOL,
                   step=1e-6, margin=1e-4, max_redraws=200):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 707, _KIND_TAGS[kind])))
    worst = 0.0
    done = 0
    redraws = 0
    while done < trials:
        state = nw.build_pipeline(_tiny_pipeline_spec(kind), seed=int(rng.integers(1 << 30)))
        # random perturbation so gradients are probed away from the identity init
        if state.loc is not None:
            head = dict(state.loc.net.layers)["head"]
            head.w += rng.normal(size=head.w.shape) * 0.02
            head.b += rng.normal(size=head.b.shape) * 0.05
        images = rng.random((2, 1, 16, 16))
        labels = rng.integers(0, 3, size=2)
        loss, fwd, dlogits, dfeat = _pipeline_loss(state, images, labels)
        if nw.pipeline_kink_margin(state, fwd) < margin:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError("could not find a kink-free pipeline instance")
            continue
        nw.backward_pipeline(state, fwd, dlogits, dfeat)
        targets = {}
        if state.loc is not None:
            targets.update({f"loc.{k}": (dict(_loc_layers(state))[k], g)
                            for k, g in state.loc.grads().items()})
        # spot-check a couple of recognition parameters as well
        rec_params = state.rec.params()
        rec_grads = state.rec.grads()
        for name in ("head.w", "trunk.feat.b"):
            targets[f"rec.{name}"] = (rec_params[name], rec_grads[name])

        for name, (param, analytic) in targets.items():
            original = param.copy()

            def fd(vec):
                param[...] = vec.reshape(param.shape)
                value = _pipeline_loss(state, images, labels)[0]
                param[...] = original
                return value

            numeric = central_diff(fd, original.ravel(), step).reshape(param.shape)
            worst = max(worst, rel_error(analytic, numeric))
        done += 1
    return CheckResult(f"pipeline/{kind}", trials, worst, tolerance)


def _loc_layers(state):
    out = {}
    for lname, layer in state.loc.net.layers:
        for pname, arr in layer.params().items():
            out[f"{lname}.{pname}"] = arr
    return out


# ---------------------------------------------------------------------------
# suite driver


def run_suites(module="all", trials=100, tolerance=None, seed=0):
    """Run the requested suites; returns a list of CheckResult."""
    if module not in MODULES + ("all",):
        raise ValueError(f"unknown module {module!r} (choose from {MODULES + ('all',)})")
    results = []
    if module in ("transforms", "all"):
        for kind in ("similarity", "affine", "projective"):
            results.append(check_transform_jacobian(
                kind, trials=trials, seed=seed,
                tolerance=TRANSFORM_TOL if tolerance is None else tolerance))
    if module in ("sampler", "all"):
        results.extend(check_sampler(
            trials=trials, seed=seed,
            tolerance=SAMPLER_TOL if tolerance is None else tolerance))
    if module in ("tensor", "all"):
        results.extend(check_kernels(
            trials=max(1, min(trials, 25)) if trials else 0, seed=seed,
            tolerance=KERNEL_TOL if tolerance is None else tolerance))
    if module in ("pipeline", "all"):
        for kind in tf.KINDS:
            results.append(check_pipeline(
                kind, trials=max(1, min(trials, 3)) if trials else 0, seed=seed,
                tolerance=PIPELINE_TOL if tolerance is None else tolerance))
    return results
