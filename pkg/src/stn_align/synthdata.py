"""Synthetic desk-scale dataset: glyph identities seen under known warps.

Each identity is a procedurally generated glyph (a composition of
oriented bar and blob primitives, unique and deterministic per
(seed, id)). An observation is the glyph warped by a randomly sampled
transform of the requested kind, plus clamped additive Gaussian noise;
the exact transform used is retained so oracle evaluations can undo it.

Generation is a pure function of its arguments: the same seed always
yields bitwise-identical datasets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import transforms as tf
from . import imageio
from .sampler import bilinear_sample

DEFAULT_IMAGE_SIZE = 40


@dataclass(frozen=True)
class PerturbationRanges:
    """Bounds for sampled transform parameters (uniform draws).

    alpha is the rotation half-range in radians; scale is drawn in
    [scale_lo, scale_hi]; translations in [-translate, translate]; shear
    only applies to affine draws and the perspective bound only to
    projective draws.
    """

    alpha: float = np.pi / 4
    scale_lo: float = 0.7
    scale_hi: float = 1.4
    translate: float = 0.25
    shear: float = 0.15
    perspective: float = 0.2

    def __post_init__(self):
        if not (0 < self.scale_lo <= self.scale_hi):
            raise ValueError("need 0 < scale_lo <= scale_hi")
        if self.alpha < 0 or self.translate < 0 or self.shear < 0 or self.perspective < 0:
            raise ValueError("ranges must be non-negative")

    @classmethod
    def zero(cls):
        return cls(alpha=0.0, scale_lo=1.0, scale_hi=1.0, translate=0.0,
                   shear=0.0, perspective=0.0)


# standard desk-scale acceptance split: 50 identities x 40 observations
STANDARD_IDENTITIES = 50
STANDARD_OBSERVATIONS = 40
STANDARD_SEED = 20240613
STANDARD_PAIRS = 1000
STANDARD_SIMILARITY_RANGES = PerturbationRanges(
    alpha=np.pi / 6, scale_lo=0.8, scale_hi=1.25, translate=0.2)
STANDARD_PROJECTIVE_RANGES = replace(STANDARD_SIMILARITY_RANGES, perspective=0.2)
STANDARD_AFFINE_RANGES = replace(STANDARD_SIMILARITY_RANGES, shear=0.15)


@dataclass
class Identity:
    ident: int
    canonical: np.ndarray  # (S, S) float64 in [0, 1]


@dataclass
class Observation:
    obs_id: str
    label: int
    image: np.ndarray                     # (S, S) noisy, clamped to [0, 1]
    truth_transform: tf.TransformParams
    noise_level: float
    clean: np.ndarray | None = None       # pre-noise warp, kept when generated


@dataclass
class DatasetSplit:
    train: list
    test: list
    pairs: list                           # (test idx a, test idx b, same) tuples
    identities: list
    train_ids: list
    test_ids: list
    meta: dict = field(default_factory=dict)


def _bar(xs, ys, cx, cy, angle, along, across, amp):
    u = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle)
    v = -(xs - cx) * np.sin(angle) + (ys - cy) * np.cos(angle)
    return amp * np.exp(-0.5 * ((u / along) ** 2 + (v / across) ** 2))


def _blob(xs, ys, cx, cy, sigma, amp):
    r2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return amp * np.exp(-0.5 * r2 / sigma ** 2)


def make_canonical_glyph(seed, ident, size):
    """Deterministic glyph for one identity.

    Every glyph shares a fixed structural scaffold (two upper blobs, a
    vertical mid bar, a lower horizontal bar) that defines a canonical
    pose observable on any identity; per-identity bars and blobs encode
    who it is. Without a shared scaffold there would be no
    identity-independent pose cue for an alignment predictor to learn.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(ident), 101)))
    ys, xs = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    img = np.zeros((size, size))
    # shared scaffold, identical for all identities
    img += _blob(xs, ys, -0.30, -0.28, 0.09, 0.85)
    img += _blob(xs, ys, 0.30, -0.28, 0.09, 0.85)
    img += _bar(xs, ys, 0.0, 0.05, np.pi / 2, 0.22, 0.05, 0.7)
    img += _bar(xs, ys, 0.0, 0.45, 0.0, 0.26, 0.055, 0.8)
    # identity-specific details, spread wide so perspective distortion
    # (strongest far from the center) visibly displaces them
    for _ in range(int(rng.integers(2, 4))):
        img += _bar(xs, ys,
                    rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                    rng.uniform(0, np.pi),
                    rng.uniform(0.12, 0.3), rng.uniform(0.03, 0.07),
                    rng.uniform(0.45, 0.8))
    for _ in range(int(rng.integers(2, 4))):
        img += _blob(xs, ys,
                     rng.uniform(-0.62, 0.62), rng.uniform(-0.62, 0.62),
                     rng.uniform(0.04, 0.1), rng.uniform(0.4, 0.75))
    return np.clip(img, 0.0, 1.0)


def sample_perturbation(kind, ranges, rng, max_attempts=64):
    """Draw a random transform of the given kind within the ranges.

    Projective draws whose divisor dips below 0.05 anywhere on the
    [-1, 1] square are rejected and resampled (the divisor is linear in
    the target point, so checking the four corners suffices).
    """
    if kind == "identity":
        return tf.IdentityParams()
    for _ in range(max_attempts):
        alpha = rng.uniform(-ranges.alpha, ranges.alpha)
        scale = rng.uniform(ranges.scale_lo, ranges.scale_hi)
        t1 = rng.uniform(-ranges.translate, ranges.translate)
        t2 = rng.uniform(-ranges.translate, ranges.translate)
        sim = tf.SimilarityParams(alpha, scale, t1, t2)
        if kind == "similarity":
            return sim
        if kind == "affine":
            m = tf.to_matrix(sim)
            s1 = rng.uniform(-ranges.shear, ranges.shear)
            s2 = rng.uniform(-ranges.shear, ranges.shear)
            shear = np.array([[1.0, s1, 0.0], [s2, 1.0, 0.0], [0.0, 0.0, 1.0]])
            ms = m @ shear
            return tf.AffineParams(ms[0, 0], ms[0, 1], ms[0, 2],
                                   ms[1, 0], ms[1, 1], ms[1, 2])
        if kind == "projective":
            g = rng.uniform(-ranges.perspective, ranges.perspective)
            h = rng.uniform(-ranges.perspective, ranges.perspective)
            m = tf.to_matrix(sim)
            params = tf.ProjectiveParams(m[0, 0], m[0, 1], m[0, 2],
                                         m[1, 0], m[1, 1], m[1, 2], g, h)
            corners = np.array([g * sx + h * sy + 1.0 for sx in (-1, 1) for sy in (-1, 1)])
            if np.abs(corners).min() >= 0.05:
                return params
            continue
        raise ValueError(f"unknown perturbation kind {kind!r}")
    raise RuntimeError("could not sample a non-degenerate projective transform")


def warp_canonical(canonical, params, size=None):
    """The generator's warp path: sample the glyph on the transform's grid."""
    size = size or canonical.shape[0]
    grid = tf.generate_grid(params, size, size)
    return bilinear_sample(canonical[None, None], grid)[0, 0]


def generate_dataset(seed, n_identities=STANDARD_IDENTITIES,
                     obs_per_identity=STANDARD_OBSERVATIONS,
                     perturbation_kind="similarity", ranges=None,
                     image_size=DEFAULT_IMAGE_SIZE, noise_sigma=0.02,
                     test_identity_fraction=0.2, n_pairs=600):
    """Build a deterministic train/test split with verification pairs.

    Identities are partitioned so test observations never share an
    identity with training ones; verification pairs are balanced 50/50
    same/different and drawn only from test identities.
    """
    if ranges is None:
        ranges = PerturbationRanges()
    identities = [Identity(i, make_canonical_glyph(seed, i, image_size))
                  for i in range(n_identities)]
    n_test_ids = max(2, int(round(n_identities * test_identity_fraction)))
    id_rng = np.random.default_rng(np.random.SeedSequence((int(seed), 202)))
    order = id_rng.permutation(n_identities)
    test_ids = sorted(int(i) for i in order[:n_test_ids])
    train_ids = sorted(int(i) for i in order[n_test_ids:])

    def observe(ident, obs_index, tag):
        obs_rng = np.random.default_rng(
            np.random.SeedSequence((int(seed), int(ident.ident), int(obs_index), 303)))
        params = sample_perturbation(perturbation_kind, ranges, obs_rng)
        clean = warp_canonical(ident.canonical, params, image_size)
        noise = obs_rng.normal(0.0, noise_sigma, size=clean.shape) if noise_sigma > 0 else 0.0
        image = np.clip(clean + noise, 0.0, 1.0)
        return Observation(f"{tag}-{ident.ident:04d}-{obs_index:04d}", ident.ident,
                           image, params, noise_sigma, clean)

    train = [observe(identities[i], j, "train") for i in train_ids
             for j in range(obs_per_identity)]
    test = [observe(identities[i], j, "test") for i in test_ids
            for j in range(obs_per_identity)]

    pair_rng = np.random.default_rng(np.random.SeedSequence((int(seed), 404)))
    by_id = {}
    for idx, obs in enumerate(test):
        by_id.setdefault(obs.label, []).append(idx)
    pairs = []
    half = n_pairs // 2
    ids = sorted(by_id)
    for _ in range(half):
        ident = ids[pair_rng.integers(len(ids))]
        a, b = pair_rng.choice(by_id[ident], size=2, replace=False)
        pairs.append((int(a), int(b), True))
    for _ in range(n_pairs - half):
        ia, ib = pair_rng.choice(len(ids), size=2, replace=False)
        a = pair_rng.choice(by_id[ids[ia]])
        b = pair_rng.choice(by_id[ids[ib]])
        pairs.append((int(a), int(b), False))

    meta = {
        "seed": int(seed), "n_identities": int(n_identities),
        "obs_per_identity": int(obs_per_identity),
        "perturbation_kind": perturbation_kind,
        "image_size": int(image_size), "noise_sigma": float(noise_sigma),
        "test_identity_fraction": float(test_identity_fraction),
        "n_pairs": int(n_pairs),
        "ranges": ranges,
    }
    return DatasetSplit(train, test, pairs, identities, train_ids, test_ids, meta)


def regenerate(meta):
    """Rebuild a split from its recorded generation arguments."""
    return generate_dataset(
        meta["seed"], meta["n_identities"], meta["obs_per_identity"],
        meta["perturbation_kind"], meta["ranges"], meta["image_size"],
        meta["noise_sigma"], meta["test_identity_fraction"], meta["n_pairs"])


def _flip_params(params):
    """Transform explaining a mirrored observation: compose with x -> -x.

    Mirrored similarities are reflective, so they widen to the affine
    tag; affine and projective stay in their own tags.
    """
    m = tf.to_matrix(params).copy()
    m[:, 0] *= -1.0
    if params.kind == "projective":
        return tf.ProjectiveParams(m[0, 0], m[0, 1], m[0, 2],
                                   m[1, 0], m[1, 1], m[1, 2], m[2, 0], m[2, 1])
    return tf.AffineParams(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])


def augment_flip(split):
    """Double the training set with horizontally mirrored copies."""
    flipped = []
    for obs in split.train:
        flipped.append(Observation(
            obs.obs_id + "-flip", obs.label, obs.image[:, ::-1].copy(),
            _flip_params(obs.truth_transform), obs.noise_level,
            None if obs.clean is None else obs.clean[:, ::-1].copy()))
    return DatasetSplit(split.train + flipped, split.test, split.pairs,
                        split.identities, split.train_ids, split.test_ids,
                        dict(split.meta, flip_augmented=True))


def stack_images(observations, dtype=np.float64):
    """Stack observation images into a (N, 1, S, S) batch tensor."""
    return np.stack([obs.image for obs in observations]).astype(dtype)[:, None]


def labels_of(observations, label_map=None):
    if label_map is None:
        uniq = sorted({obs.label for obs in observations})
        label_map = {ident: i for i, ident in enumerate(uniq)}
    return np.array([label_map[obs.label] for obs in observations]), label_map


# ---------------------------------------------------------------------------
# on-disk form: manifest + image files + pairs


def save_dataset(split, out_dir, image_format="pgm"):
    """Persist a split: images, `manifest.txt`, and `pairs.txt`.

    Manifest lines are `obs_id label transform_record image_path` with
    the transform record inlined as semicolon-joined fields. PGM files
    quantize pixel values to 8 bits; the `raw` format round-trips floats
    exactly.
    """
    if image_format not in ("pgm", "raw"):
        raise ValueError("image_format must be 'pgm' or 'raw'")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    ext = "pgm" if image_format == "pgm" else "ten"
    lines = []
    for name, obs_list in (("train", split.train), ("test", split.test)):
        for obs in obs_list:
            rel = f"images/{obs.obs_id}.{ext}"
            path = os.path.join(out_dir, rel)
            if image_format == "pgm":
                imageio.write_pgm(path, obs.image)
            else:
                imageio.write_tensor(path, obs.image)
            lines.append(f"{obs.obs_id} {obs.label} "
                         f"{tf.to_inline_record(obs.truth_transform)} {rel}")
    meta = split.meta
    header = [
        f"# seed={meta.get('seed', 0)}",
        f"# perturbation_kind={meta.get('perturbation_kind', 'similarity')}",
        f"# image_size={meta.get('image_size', 0)}",
        f"# noise_sigma={meta.get('noise_sigma', 0.0):.17g}",
        f"# train_count={len(split.train)}",
        f"# test_count={len(split.test)}",
    ]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(header + lines) + "\n")
    with open(os.path.join(out_dir, "pairs.txt"), "w") as fh:
        for a, b, same in split.pairs:
            fh.write(f"{a} {b} {int(same)}\n")


def load_dataset(data_dir):
    """Load a persisted split; clean pre-noise images are not recoverable."""
    manifest = os.path.join(data_dir, "manifest.txt")
    train, test = [], []
    header = {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key.strip()] = value.strip()
                continue
            obs_id, label, record, rel = line.split(" ", 3)
            img = imageio.read_image(os.path.join(data_dir, rel))
            obs = Observation(obs_id, int(label), img,
                              tf.parse_inline_record(record),
                              float(header.get("noise_sigma", 0.0)))
            (train if obs_id.startswith("train") else test).append(obs)
    pairs = []
    pairs_path = os.path.join(data_dir, "pairs.txt")
    if os.path.exists(pairs_path):
        with open(pairs_path) as fh:
            for line in fh:
                a, b, same = line.split()
                pairs.append((int(a), int(b), bool(int(same))))
    train_ids = sorted({o.label for o in train})
    test_ids = sorted({o.label for o in test})
    meta = {
        "seed": int(header.get("seed", 0)),
        "perturbation_kind": header.get("perturbation_kind", "similarity"),
        "image_size": int(header.get("image_size", 0) or train[0].image.shape[0]),
        "noise_sigma": float(header.get("noise_sigma", 0.0)),
    }
    return DatasetSplit(train, test, pairs, [], train_ids, test_ids, meta)


def standard_split(perturbation_kind="similarity", seed=STANDARD_SEED):
    """The fixed desk-scale benchmark split used by the acceptance harness."""
    ranges = {
        "identity": PerturbationRanges.zero(),
        "similarity": STANDARD_SIMILARITY_RANGES,
        "affine": STANDARD_AFFINE_RANGES,
        "projective": STANDARD_PROJECTIVE_RANGES,
    }[perturbation_kind]
    return generate_dataset(seed, STANDARD_IDENTITIES, STANDARD_OBSERVATIONS,
                            perturbation_kind, ranges, n_pairs=STANDARD_PAIRS)
