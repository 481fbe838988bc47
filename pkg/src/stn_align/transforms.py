"""Parameterized 2D transforms, sampling grids, and parameter Jacobians.

Four parameterizations are supported, forming a strict subset chain:

* identity (0 parameters)
* non-reflective similarity: rotation angle, uniform scale ``> 0``, and
  translation (4 parameters)
* affine (6 parameters, the matrix entries a11..a23)
* projective / homography (8 parameters a..h of the homogeneous matrix
  ``[[a, b, c], [d, e, f], [g, h, 1]]``)

All coordinates live in the normalized square [-1, 1] x [-1, 1]; a
transform maps a target (output) point to its source (input) point. For
the projective case the source point is divided by z = g*x + h*y + 1;
any |z| below ``eps_z`` is treated as a degeneracy error rather than
clamped, because clamping would silently corrupt gradients.

The parameter Jacobian accumulates, over all grid pixels, the chain-rule
product of per-pixel source-coordinate gradients with the derivative of
the source coordinates w.r.t. each parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateTransformError, ShapeError

KINDS = ("identity", "similarity", "affine", "projective")

PARAM_FIELDS = {
    "identity": (),
    "similarity": ("alpha", "scale", "t1", "t2"),
    "affine": ("a11", "a12", "a13", "a21", "a22", "a23"),
    "projective": ("a", "b", "c", "d", "e", "f", "g", "h"),
}

DEFAULT_EPS_Z = 1e-6


@dataclass(frozen=True)
class IdentityParams:
    kind = "identity"


@dataclass(frozen=True)
class SimilarityParams:
    """Rotation by ``alpha`` radians, uniform ``scale`` > 0, translation (t1, t2)."""

    alpha: float
    scale: float
    t1: float
    t2: float
    kind = "similarity"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"similarity scale must be > 0 (reflections excluded), got {self.scale}")


@dataclass(frozen=True)
class AffineParams:
    a11: float
    a12: float
    a13: float
    a21: float
    a22: float
    a23: float
    kind = "affine"


@dataclass(frozen=True)
class ProjectiveParams:
    a: float
    b: float
    c: float
    d: float
    e: float
    f: float
    g: float
    h: float
    kind = "projective"


TransformParams = IdentityParams | SimilarityParams | AffineParams | ProjectiveParams

_CLASSES = {
    "identity": IdentityParams,
    "similarity": SimilarityParams,
    "affine": AffineParams,
    "projective": ProjectiveParams,
}


@dataclass
class SamplingGrid:
    """Per-output-pixel source coordinates in normalized space.

    ``xs``, ``ys`` and the projective divisor ``zs`` are flat arrays of
    length out_height * out_width in row-major order (y outer, x inner);
    the target coordinates are implied by pixel position and can be
    recomputed with :func:`target_coords`.
    """

    out_height: int
    out_width: int
    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray

    def __post_init__(self):
        n = self.out_height * self.out_width
        if not (len(self.xs) == len(self.ys) == len(self.zs) == n):
            raise ShapeError("grid arrays must have out_height*out_width entries")


@dataclass(frozen=True)
class ParamGrad:
    """One scalar gradient per transform parameter, tagged like its params."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        expected = len(PARAM_FIELDS[self.kind])
        if len(self.values) != expected:
            raise ShapeError(f"{self.kind} gradient needs {expected} entries, got {len(self.values)}")


def identity_params(kind):
    """The exact identity map expressed in the given parameterization."""
    if kind == "identity":
        return IdentityParams()
    if kind == "similarity":
        return SimilarityParams(0.0, 1.0, 0.0, 0.0)
    if kind == "affine":
        return AffineParams(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    if kind == "projective":
        return ProjectiveParams(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)
    raise ValueError(f"unknown transform kind {kind!r}")


def head_width(kind):
    """Number of learnable parameters a predictor needs for this kind."""
    return len(PARAM_FIELDS[kind])


def as_vector(params):
    return np.array([getattr(params, f) for f in PARAM_FIELDS[params.kind]], dtype=np.float64)


def from_vector(kind, vec):
    fields = PARAM_FIELDS[kind]
    if len(vec) != len(fields):
        raise ShapeError(f"{kind} expects {len(fields)} parameters, got {len(vec)}")
    return _CLASSES[kind](*(float(v) for v in vec))


def to_matrix(params):
    """Homogeneous 3x3 matrix of the target -> source map."""
    k = params.kind
    if k == "identity":
        return np.eye(3)
    if k == "similarity":
        c = np.cos(params.alpha) * params.scale
        s = np.sin(params.alpha) * params.scale
        return np.array([[c, -s, params.t1], [s, c, params.t2], [0.0, 0.0, 1.0]])
    if k == "affine":
        return np.array([
            [params.a11, params.a12, params.a13],
            [params.a21, params.a22, params.a23],
            [0.0, 0.0, 1.0],
        ])
    return np.array([
        [params.a, params.b, params.c],
        [params.d, params.e, params.f],
        [params.g, params.h, 1.0],
    ])


def promote(params, kind):
    """Re-express ``params`` in an equal-or-wider parameterization."""
    order = {k: i for i, k in enumerate(KINDS)}
    if order[kind] < order[params.kind]:
        raise ValueError(f"cannot narrow {params.kind} to {kind}")
    if kind == params.kind:
        return params
    if kind == "similarity":
        # only reachable from identity
        return SimilarityParams(0.0, 1.0, 0.0, 0.0)
    m = to_matrix(params)
    if kind == "affine":
        return AffineParams(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])
    return ProjectiveParams(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2], m[2, 0], m[2, 1])


# ---------------------------------------------------------------------------
# grids


def _axis_coords(n):
    if n < 1:
        raise ValueError("grid extents must be >= 1")
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def target_coords(out_h, out_w):
    """Flattened (x_t, y_t) arrays of the uniform [-1,1] target lattice."""
    ys, xs = np.meshgrid(_axis_coords(out_h), _axis_coords(out_w), indexing="ij")
    return xs.ravel(), ys.ravel()


def _source_from_vectors(kind, vec, tx, ty, eps_z):
    """Shared evaluation path: parameter vector(s) -> source coordinates.

    ``vec`` is (P,) for one transform or (B, P) for a batch; tx/ty are
    flat target arrays (N,). Returns (xs, ys, zs) shaped like
    broadcast(vec_batch, N). zs is all-ones for non-projective kinds.
    Degeneracies are reported via the returned ``bad`` mask instead of
    raising, so batch callers can apply per-sample fallbacks.
    """
    v = np.atleast_2d(np.asarray(vec, dtype=np.float64))
    if kind == "identity":
        b = v.shape[0]
        xs = np.broadcast_to(tx, (b, tx.size)).copy()
        ys = np.broadcast_to(ty, (b, ty.size)).copy()
        zs = np.ones_like(xs)
        return xs, ys, zs, np.zeros(b, dtype=bool)
    if kind == "similarity":
        c = np.cos(v[:, 0:1]) * v[:, 1:2]
        s = np.sin(v[:, 0:1]) * v[:, 1:2]
        xs = c * tx - s * ty + v[:, 2:3]
        ys = s * tx + c * ty + v[:, 3:4]
        zs = np.ones_like(xs)
        return xs, ys, zs, np.zeros(v.shape[0], dtype=bool)
    if kind == "affine":
        xs = v[:, 0:1] * tx + v[:, 1:2] * ty + v[:, 2:3]
        ys = v[:, 3:4] * tx + v[:, 4:5] * ty + v[:, 5:6]
        zs = np.ones_like(xs)
        return xs, ys, zs, np.zeros(v.shape[0], dtype=bool)
    if kind == "projective":
        zs = v[:, 6:7] * tx + v[:, 7:8] * ty + 1.0
        bad = (np.abs(zs) < eps_z).any(axis=1)
        zsafe = np.where(np.abs(zs) < eps_z, 1.0, zs)
        xs = (v[:, 0:1] * tx + v[:, 1:2] * ty + v[:, 2:3]) / zsafe
        ys = (v[:, 3:4] * tx + v[:, 4:5] * ty + v[:, 5:6]) / zsafe
        return xs, ys, zs, bad
    raise ValueError(f"unknown transform kind {kind!r}")


def generate_grid(params, out_h, out_w, eps_z=DEFAULT_EPS_Z):
    """Source coordinates of every output pixel under ``params``.

    Raises :class:`DegenerateTransformError` naming the first offending
    pixel if the projective divisor falls below ``eps_z`` in magnitude.
    """
    tx, ty = target_coords(out_h, out_w)
    xs, ys, zs, bad = _source_from_vectors(params.kind, as_vector(params), tx, ty, eps_z)
    if bad[0]:
        idx = int(np.argmin(np.abs(zs[0])))
        raise DegenerateTransformError(
            f"projective divisor |z|={abs(zs[0][idx]):.3e} < {eps_z:g} at pixel {idx} "
            f"(target x={tx[idx]:+.4f}, y={ty[idx]:+.4f})", pixel=idx)
    return SamplingGrid(out_h, out_w, xs[0], ys[0], zs[0])


def generate_grid_batch(kind, param_matrix, out_h, out_w, eps_z=DEFAULT_EPS_Z):
    """Vectorized grid generation for a (B, P) batch of parameter vectors.

    Returns (xs, ys, zs, bad) with coordinate arrays shaped (B, N); rows
    flagged in ``bad`` contain an eps-guarded divisor and must be
    replaced by the caller.
    """
    tx, ty = target_coords(out_h, out_w)
    return _source_from_vectors(kind, param_matrix, tx, ty, eps_z)


def apply_point(params, x_t, y_t, eps_z=DEFAULT_EPS_Z):
    """Map target point(s) to source point(s); accepts scalars or arrays."""
    tx = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    ty = np.atleast_1d(np.asarray(y_t, dtype=np.float64))
    xs, ys, zs, bad = _source_from_vectors(params.kind, as_vector(params), tx.ravel(), ty.ravel(), eps_z)
    if bad[0]:
        raise DegenerateTransformError(
            f"projective divisor below {eps_z:g} at the requested point")
    xs = xs[0].reshape(tx.shape)
    ys = ys[0].reshape(ty.shape)
    if np.isscalar(x_t) or np.asarray(x_t).ndim == 0:
        return float(xs[0]), float(ys[0])
    return xs, ys


def invert(params, eps_det=1e-9):
    """Parameters of the inverse map, in the same parameterization.

    Projective inverses are normalized so the bottom-right matrix entry
    is 1. Raises :class:`DegenerateTransformError` on singular maps.
    """
    k = params.kind
    if k == "identity":
        return IdentityParams()
    if k == "similarity":
        c, s = np.cos(params.alpha), np.sin(params.alpha)
        lam = params.scale
        return SimilarityParams(
            alpha=-params.alpha,
            scale=1.0 / lam,
            t1=-(c * params.t1 + s * params.t2) / lam,
            t2=-(-s * params.t1 + c * params.t2) / lam,
        )
    m = to_matrix(params)
    det = np.linalg.det(m)
    if abs(det) <= eps_det:
        raise DegenerateTransformError(f"transform matrix is singular (|det|={abs(det):.3e})")
    if k == "affine":
        d2 = params.a11 * params.a22 - params.a12 * params.a21
        i11, i12 = params.a22 / d2, -params.a12 / d2
        i21, i22 = -params.a21 / d2, params.a11 / d2
        return AffineParams(i11, i12, -(i11 * params.a13 + i12 * params.a23),
                            i21, i22, -(i21 * params.a13 + i22 * params.a23))
    inv = np.linalg.inv(m)
    scale = np.abs(inv).max()
    if abs(inv[2, 2]) < eps_det * scale:
        raise DegenerateTransformError("inverse has a vanishing bottom-right entry")
    inv = inv / inv[2, 2]
    return ProjectiveParams(inv[0, 0], inv[0, 1], inv[0, 2],
                            inv[1, 0], inv[1, 1], inv[1, 2],
                            inv[2, 0], inv[2, 1])


# ---------------------------------------------------------------------------
# parameter Jacobians


def param_jacobian_batch(kind, param_matrix, out_h, out_w, dxs, dys,
                         xs=None, ys=None, zs=None, eps_z=DEFAULT_EPS_Z):
    """Accumulate per-parameter gradients for a batch of transforms.

    ``dxs`` / ``dys`` are (B, N) gradients of some loss w.r.t. the
    normalized source coordinates. Source coordinates are recomputed
    unless passed in. Returns a (B, P) gradient matrix.
    """
    tx, ty = target_coords(out_h, out_w)
    v = np.atleast_2d(np.asarray(param_matrix, dtype=np.float64))
    dxs = np.atleast_2d(dxs)
    dys = np.atleast_2d(dys)
    if xs is None or ys is None or zs is None:
        xs, ys, zs, _ = _source_from_vectors(kind, v, tx, ty, eps_z)
    if kind == "identity":
        return np.zeros((v.shape[0], 0))
    if kind == "similarity":
        alpha = v[:, 0:1]
        c, s = np.cos(alpha), np.sin(alpha)
        d_alpha = (dxs * (v[:, 3:4] - ys) + dys * (xs - v[:, 2:3])).sum(axis=1)
        d_scale = (dxs * (c * tx - s * ty) + dys * (s * tx + c * ty)).sum(axis=1)
        return np.stack([d_alpha, d_scale, dxs.sum(axis=1), dys.sum(axis=1)], axis=1)
    if kind == "affine":
        return np.stack([
            (dxs * tx).sum(axis=1), (dxs * ty).sum(axis=1), dxs.sum(axis=1),
            (dys * tx).sum(axis=1), (dys * ty).sum(axis=1), dys.sum(axis=1),
        ], axis=1)
    if kind == "projective":
        inv_z = 1.0 / zs
        mix = dxs * xs + dys * ys
        return np.stack([
            (dxs * tx * inv_z).sum(axis=1), (dxs * ty * inv_z).sum(axis=1), (dxs * inv_z).sum(axis=1),
            (dys * tx * inv_z).sum(axis=1), (dys * ty * inv_z).sum(axis=1), (dys * inv_z).sum(axis=1),
            (-(tx * inv_z) * mix).sum(axis=1), (-(ty * inv_z) * mix).sum(axis=1),
        ], axis=1)
    raise ValueError(f"unknown transform kind {kind!r}")


def param_jacobian(params, grid, dl_dxs, dl_dys):
    """Gradient of a loss w.r.t. every transform parameter.

    ``grid`` must have been produced from ``params`` (checked: the grid's
    divisor column is recomputed and compared); dl_dxs / dl_dys hold the
    loss gradient at each grid pixel w.r.t. the source coordinates.
    """
    dl_dxs = np.asarray(dl_dxs, dtype=np.float64).ravel()
    dl_dys = np.asarray(dl_dys, dtype=np.float64).ravel()
    n = grid.out_height * grid.out_width
    if dl_dxs.size != n or dl_dys.size != n:
        raise ShapeError(f"gradient arrays must have {n} entries")
    tx, ty = target_coords(grid.out_height, grid.out_width)
    vec = as_vector(params)
    if params.kind == "projective":
        expected_z = vec[6] * tx + vec[7] * ty + 1.0
    else:
        expected_z = np.ones(n)
    if not np.allclose(expected_z, grid.zs, rtol=1e-12, atol=1e-12):
        raise ShapeError(f"grid was not produced by these {params.kind} parameters "
                         "(divisor mismatch)")
    g = param_jacobian_batch(params.kind, vec, grid.out_height, grid.out_width,
                             dl_dxs, dl_dys,
                             xs=np.atleast_2d(grid.xs), ys=np.atleast_2d(grid.ys),
                             zs=np.atleast_2d(grid.zs))
    return ParamGrad(params.kind, g[0])


# ---------------------------------------------------------------------------
# plain-text records


def to_record(params):
    """Serialize to the interchange record: kind line, then one field per line."""
    lines = [f"kind={params.kind}"]
    for f in PARAM_FIELDS[params.kind]:
        lines.append(f"{f}={getattr(params, f):.17g}")
    return "\n".join(lines) + "\n"


def parse_record(text):
    entries = {}
    for raw in text.strip().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    if "kind" not in entries:
        raise ValueError("transform record is missing the kind line")
    kind = entries.pop("kind")
    if kind not in KINDS:
        raise ValueError(f"unknown transform kind {kind!r}")
    fields = PARAM_FIELDS[kind]
    missing = [f for f in fields if f not in entries]
    if missing:
        raise ValueError(f"transform record is missing fields {missing}")
    return _CLASSES[kind](*(float(entries[f]) for f in fields))


def to_inline_record(params):
    """Single-line variant used inside dataset manifests."""
    return to_record(params).strip().replace("\n", ";")


def parse_inline_record(text):
    return parse_record(text.replace(";", "\n"))
