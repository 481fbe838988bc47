"""End-to-end SGD training and verification-style evaluation.

The training recipe: joint softmax + weighted center loss, SGD with
momentum, a step-decay learning-rate schedule applied to both networks,
a localization learning rate 10-100x smaller than the recognition one,
and an optional mid-training reinitialization of the recognition network
(the localization parameters persist across it).

Evaluation follows the verification protocol: embeddings (optionally
averaged with the mirrored image's), PCA fit on the training folds,
cosine similarity scores, threshold chosen on the training folds,
accuracy reported on the held-out fold, averaged over folds.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import networks as nw
from . import synthdata as sd
from . import tensor as tk
from . import transforms as tf
from .exceptions import TrainingDiverged


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; all fields have working desk-scale defaults.

    ``reinit_at`` = 0 (the default) disables the mid-training recognition
    reset; None places it at max_iters // 2. The reset is disabled by
    default at desk scale because the step-decay schedule has already cut
    the learning rate 10x by the halfway point, leaving too little budget
    to retrain a reinitialized recognition net (at full scale, with far
    more iterations per decay step, the halfway reset is the useful
    default).
    """

    batch_size: int = 100
    base_lr: float = 0.01
    lr_decay_every: int = 1000
    lr_decay_factor: float = 0.1
    loc_lr_ratio: float = 0.1
    center_loss_weight: float = 0.008
    center_damping: float = 0.5
    momentum: float = 0.9
    max_iters: int = 3000
    reinit_at: int | None = 0
    reinit_centers: bool = True
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 1

    def __post_init__(self):
        if self.base_lr <= 0 or self.lr_decay_factor <= 0 or self.lr_decay_every <= 0:
            raise ValueError("learning rates and decay settings must be > 0")
        if not 0.0 <= self.loc_lr_ratio <= 1.0:
            raise ValueError("loc_lr_ratio must lie in [0, 1]")
        if self.center_loss_weight < 0:
            raise ValueError("center_loss_weight must be >= 0")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ValueError("batch_size must be >= 1 and max_iters >= 0")

    def resolved_reinit_at(self):
        if self.reinit_at is None:
            return self.max_iters // 2
        return self.reinit_at

    def to_text_dict(self):
        out = {}
        for key in sorted(self.__dataclass_fields__):
            value = getattr(self, key)
            out[key] = f"{value:.17g}" if isinstance(value, float) else str(value)
        return out

    def to_text(self):
        return "\n".join(f"{k}={v}" for k, v in self.to_text_dict().items()) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.strip().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        return cls.from_mapping(kv)

    @classmethod
    def from_mapping(cls, kv):
        kwargs = {}
        for key, value in kv.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown config key {key!r}")
            current = cls.__dataclass_fields__[key].default
            if key == "reinit_at":
                kwargs[key] = None if value in ("None", "none", "auto", None) else int(value)
            elif key == "reinit_centers":
                kwargs[key] = value in ("True", "true", "1", True)
            elif key == "dtype":
                kwargs[key] = str(value)
            elif isinstance(current, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def lr_schedule(config, iteration):
    """lr(i) = base_lr * decay_factor ** floor(i / decay_every)."""
    return config.base_lr * config.lr_decay_factor ** (iteration // config.lr_decay_every)


@dataclass
class MetricsRow:
    iteration: int
    loss_softmax: float
    loss_center: float
    lr_rec: float
    lr_loc: float
    train_acc: float

    def line(self):
        return (f"{self.iteration} {self.loss_softmax:.17g} {self.loss_center:.17g} "
                f"{self.lr_rec:.17g} {self.lr_loc:.17g} {self.train_acc:.17g}")

    @classmethod
    def parse(cls, line):
        parts = line.split()
        return cls(int(parts[0]), float(parts[1]), float(parts[2]),
                   float(parts[3]), float(parts[4]), float(parts[5]))


@dataclass
class TrainRun:
    config: TrainConfig
    state: nw.PipelineState
    transform_kind: str
    iteration: int = 0
    metrics: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    degenerate_batches: int = 0
    label_map: dict = field(default_factory=dict)

    def write_metrics(self, path):
        with open(path, "w") as fh:
            fh.write("# iter loss_softmax loss_center lr_rec lr_loc train_acc\n")
            for row in self.metrics:
                fh.write(row.line() + "\n")


class _Momentum:
    """Classic momentum buffers keyed by parameter name."""

    def __init__(self):
        self.velocity = {}

    def step(self, params, grads, lr, mu):
        for name, p in params.items():
            g = grads[name]
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
                self.velocity[name] = v
            v *= mu
            v -= lr * g.astype(p.dtype, copy=False)
            p += v

    def reset(self, names):
        for name in list(self.velocity):
            if any(name.startswith(prefix) for prefix in names):
                del self.velocity[name]


def default_pipeline_spec(transform_kind, class_count, dtype="float32",
                          image_size=sd.DEFAULT_IMAGE_SIZE):
    # localization sees a 2x downsample; the recognition input is a bit
    # smaller still (2/5 of the crop, floored to even) for throughput
    warp = max(8, (image_size * 2 // 5) & ~1)
    return nw.PipelineSpec(transform_kind=transform_kind,
                           image_size=image_size,
                           loc_input_size=image_size // 2,
                           warp_size=warp,
                           class_count=class_count,
                           dtype=dtype)


def train(config, split, transform_kind, pipeline_spec=None, metrics_path=None):
    """Run the full training loop; deterministic given (config, split).

    Returns a TrainRun holding the final state, the metrics log, and
    parameter snapshots taken before/after the mid-training
    reinitialization plus the final checkpoint.
    """
    labels_all, label_map = sd.labels_of(split.train)
    dtype = np.dtype(config.dtype)
    if pipeline_spec is None:
        size = split.train[0].image.shape[0] if split.train else sd.DEFAULT_IMAGE_SIZE
        pipeline_spec = default_pipeline_spec(transform_kind, len(label_map),
                                              config.dtype, size)
    state = nw.build_pipeline(pipeline_spec, seed=config.seed)
    run = TrainRun(config, state, transform_kind, label_map=label_map)
    if not split.train:
        raise ValueError("training split is empty")

    images_all = sd.stack_images(split.train, dtype)
    n = images_all.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 909)))
    optim = _Momentum()
    reinit_at = config.resolved_reinit_at()
    run.checkpoints["init"] = state.param_snapshot()

    order = np.zeros(0, dtype=np.int64)
    cursor = 0
    for it in range(config.max_iters):
        if it == reinit_at and reinit_at > 0:
            run.checkpoints["pre_reinit"] = state.param_snapshot()
            state.rec.reinit(rng)
            if config.reinit_centers:
                state.centers[...] = 0.0
            optim.reset(("rec.",))
            run.checkpoints["post_reinit"] = state.param_snapshot()

        # epoch-shuffled batch assembly
        take = []
        need = config.batch_size
        while need > 0:
            if cursor >= order.size:
                order = rng.permutation(n)
                cursor = 0
            grab = min(need, order.size - cursor)
            take.append(order[cursor:cursor + grab])
            cursor += grab
            need -= grab
        idx = np.concatenate(take)
        images = images_all[idx]
        labels = labels_all[idx]

        fwd = nw.forward_pipeline(state, images)
        loss_s, dlogits = tk.softmax_xent(fwd.logits, labels)
        loss_c, dfeat_c, center_updates = tk.center_loss(
            fwd.features, labels, state.centers, config.center_damping)
        bundle = tk.LossBundle.make(loss_s, loss_c, config.center_loss_weight)
        if not np.isfinite(bundle.total + fwd.penalty):
            raise TrainingDiverged(
                f"loss became non-finite at iteration {it}", it,
                run.checkpoints.get("post_reinit", run.checkpoints["init"]))
        if fwd.degenerate is not None and fwd.degenerate.any():
            run.degenerate_batches += 1
        grads = nw.backward_pipeline(
            state, fwd, dlogits,
            (config.center_loss_weight * dfeat_c).astype(dtype, copy=False))

        lr_rec = lr_schedule(config, it)
        lr_loc = lr_rec * config.loc_lr_ratio
        if not state.frozen_rec:
            optim.step({f"rec.{k}": v for k, v in state.rec.params().items()},
                       {f"rec.{k}": v for k, v in grads.rec.items()},
                       lr_rec, config.momentum)
            state.centers += center_updates.astype(dtype, copy=False)
        if state.loc is not None and lr_loc > 0 and not state.frozen_loc:
            optim.step({f"loc.{k}": v for k, v in state.loc.params().items()},
                       {f"loc.{k}": v for k, v in grads.loc.items()},
                       lr_loc, config.momentum)

        if config.log_every and (it % config.log_every == 0 or it == config.max_iters - 1):
            acc = float((fwd.logits.argmax(axis=1) == labels).mean())
            run.metrics.append(MetricsRow(it, loss_s, loss_c, lr_rec, lr_loc, acc))
        run.iteration = it + 1

    run.checkpoints["final"] = state.param_snapshot()
    if metrics_path:
        run.write_metrics(metrics_path)
    return run


# ---------------------------------------------------------------------------
# verification evaluation


def _pca_fit(features, dim):
    mean = features.mean(axis=0)
    centered = features - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return mean, vt[:dim]


def _pca_apply(features, mean, components):
    return (features - mean) @ components.T


def cosine_similarity(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = np.maximum(na * nb, 1e-30)
    return (a * b).sum(axis=-1) / denom


@dataclass
class VerificationReport:
    accuracy: float
    fold_accuracies: list
    fold_thresholds: list
    threshold: float
    pca_dim: int
    fold_assignments: np.ndarray
    roc: tuple  # (fpr array, tpr array)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(f"accuracy {self.accuracy:.6f}\n")
            fh.write(f"threshold {self.threshold:.6f}\n")
            fh.write(f"pca_dim {self.pca_dim}\n")
            for i, (acc, thr) in enumerate(zip(self.fold_accuracies, self.fold_thresholds)):
                fh.write(f"fold {i} accuracy {acc:.6f} threshold {thr:.6f}\n")


def _best_threshold(scores, same):
    """Threshold maximizing accuracy of (score >= t) -> same on this set."""
    candidates = np.unique(scores)
    candidates = np.concatenate([[candidates[0] - 1e-6],
                                 (candidates[:-1] + candidates[1:]) / 2.0,
                                 [candidates[-1] + 1e-6]])
    best_t, best_acc = candidates[0], -1.0
    for t in candidates:
        acc = float(((scores >= t) == same).mean())
        if acc > best_acc:
            best_acc, best_t = acc, float(t)
    return best_t


def embed_observations(state, observations, mirror_average=False, batch=200):
    """Feature embeddings (float64) of a list of observations."""
    dtype = state.spec.np_dtype()
    feats = []
    for lo in range(0, len(observations), batch):
        chunk = sd.stack_images(observations[lo:lo + batch], dtype)
        feats.append(nw.extract_embedding(state, chunk, mirror_average).astype(np.float64))
    return np.concatenate(feats, axis=0)


def evaluate_verification(run_or_state, observations, pairs, pca_dim=None,
                          folds=10, mirror_average=False, features=None):
    """Cross-validated pair verification accuracy.

    For each fold, PCA and the decision threshold are fit on the other
    folds' pairs only; accuracy is measured on the held-out fold and
    averaged. ``features`` short-circuits embedding extraction (used by
    harness sanity checks with synthetic embeddings).
    """
    state = run_or_state.state if isinstance(run_or_state, TrainRun) else run_or_state
    if features is None:
        features = embed_observations(state, observations, mirror_average)
    feature_width = features.shape[1]
    if pca_dim is None:
        pca_dim = min(feature_width, 32)
    if pca_dim > feature_width:
        raise ValueError(f"pca_dim {pca_dim} exceeds feature width {feature_width}")

    pairs = list(pairs)
    n_pairs = len(pairs)
    if n_pairs < folds:
        raise ValueError("need at least one pair per fold")
    fold_of = np.arange(n_pairs) % folds
    same = np.array([p[2] for p in pairs], dtype=bool)
    ia = np.array([p[0] for p in pairs])
    ib = np.array([p[1] for p in pairs])

    fold_accs, fold_thrs = [], []
    all_scores = np.zeros(n_pairs)
    for k in range(folds):
        test_mask = fold_of == k
        train_mask = ~test_mask
        train_imgs = np.unique(np.concatenate([ia[train_mask], ib[train_mask]]))
        mean, comps = _pca_fit(features[train_imgs], pca_dim)
        reduced = _pca_apply(features, mean, comps)
        scores = cosine_similarity(reduced[ia], reduced[ib])
        thr = _best_threshold(scores[train_mask], same[train_mask])
        acc = float(((scores[test_mask] >= thr) == same[test_mask]).mean())
        fold_accs.append(acc)
        fold_thrs.append(thr)
        all_scores[test_mask] = scores[test_mask]

    order = np.argsort(-all_scores)
    tp = np.cumsum(same[order])
    fp = np.cumsum(~same[order])
    tpr = tp / max(1, same.sum())
    fpr = fp / max(1, (~same).sum())
    return VerificationReport(
        accuracy=float(np.mean(fold_accs)),
        fold_accuracies=fold_accs,
        fold_thresholds=fold_thrs,
        threshold=float(np.mean(fold_thrs)),
        pca_dim=pca_dim,
        fold_assignments=fold_of,
        roc=(fpr, tpr),
    )


# ---------------------------------------------------------------------------
# localization architecture sweep (supervised parameter regression)


TABLE_ARCHITECTURES = (
    (1, 1), (2, 1), (3, 1), (4, 1), (2, 2), (3, 2),
)


def locnet_sweep_specs(input_size=sd.DEFAULT_IMAGE_SIZE, head_width=6):
    """The six standard architecture variants at the given input size."""
    return [nw.LocNetSpec(conv_blocks=c, fc_layers=f, head_width=head_width,
                          input_size=input_size)
            for c, f in TABLE_ARCHITECTURES]


@dataclass
class SweepRow:
    name: str
    param_count: int
    fit_mse: float

    def line(self):
        return f"{self.name} {self.param_count} {self.fit_mse:.6f}"


def _regression_targets(observations):
    """Aligning-transform parameter vectors (the inverse of each truth warp)."""
    return np.stack([tf.as_vector(tf.invert(o.truth_transform)) for o in observations])


def locnet_regression_sweep(architectures, split, iters=400, batch=50,
                            lr=0.005, momentum=0.9, seed=0, dtype="float64"):
    """Train each architecture to regress the known aligning parameters.

    Every network sees the same data and schedule; reported is the
    held-out mean squared error over all parameter entries, plus the
    parameter count. Images are fed at the architecture's input size.
    """
    rows = []
    np_dtype = np.dtype(dtype)
    train_imgs = sd.stack_images(split.train, np_dtype)
    test_imgs = sd.stack_images(split.test, np_dtype)
    train_t = _regression_targets(split.train)
    test_t = _regression_targets(split.test)
    for spec in architectures:
        if train_imgs.shape[2] != spec.input_size:
            raise ValueError(f"dataset images are {train_imgs.shape[2]} px but the "
                             f"architecture expects {spec.input_size}")
        kind = {4: "similarity", 6: "affine", 8: "projective"}[spec.head_width]
        net = nw.LocNet(spec, np.random.default_rng(np.random.SeedSequence((seed, 31))),
                        kind, dtype=np_dtype)
        targets = train_t.astype(np_dtype)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 32)))
        optim = _Momentum()
        n = train_imgs.shape[0]
        for it in range(iters):
            idx = rng.choice(n, size=min(batch, n), replace=False)
            pred = net.forward(train_imgs[idx])
            err = pred - targets[idx]
            dpred = (2.0 / err.size) * err
            net.backward(dpred.astype(np_dtype))
            optim.step(net.params(), net.grads(), lr, momentum)
        val_pred = net.forward(test_imgs)
        mse = float(((val_pred - test_t.astype(np_dtype)) ** 2).mean())
        rows.append(SweepRow(spec.name(), net.num_params(), mse))
    return rows


# ---------------------------------------------------------------------------
# transform-kind comparison

# The benchmark pipeline deliberately uses a compact recognition net
# (8 stem channels, 32-wide embedding): pose variation has to compete
# for limited capacity, which is the regime where learned alignment can
# show its value on held-out identities. The mid-training recognition
# reset sits inside the first decay step (iteration 500 of 3000) where
# the learning rate is still at its base value; by the literal halfway
# point the desk schedule has already decayed 10x and a re-drawn
# recognition net could not retrain.
BENCHMARK_REINIT_AT = 500


def benchmark_pipeline_spec(transform_kind, class_count=40, dtype="float32"):
    rec = nw.RecNetSpec(class_count=class_count, residual_blocks=3,
                        feature_width=32, input_size=16, stem_channels=8)
    return nw.PipelineSpec(transform_kind=transform_kind, image_size=40,
                           loc_input_size=20, warp_size=16,
                           class_count=class_count, dtype=dtype, rec=rec)


def benchmark_config(seed=0, max_iters=3000):
    return TrainConfig(seed=seed, max_iters=max_iters,
                       reinit_at=min(BENCHMARK_REINIT_AT, max_iters // 2),
                       log_every=100)


@dataclass
class KindResult:
    kind: str
    accuracies: list

    @property
    def median(self):
        return float(np.median(self.accuracies))

    def line(self):
        accs = " ".join(f"{a:.4f}" for a in self.accuracies)
        return f"{self.kind} median={self.median:.4f} seeds=[{accs}]"


def train_and_evaluate(config, split, transform_kind, pca_dim=None,
                       mirror_average=False, pipeline_spec=None):
    run = train(config, split, transform_kind, pipeline_spec=pipeline_spec)
    report = evaluate_verification(run, split.test, split.pairs, pca_dim=pca_dim,
                                   mirror_average=mirror_average)
    return run, report


def compare_transform_kinds(config, split, kinds=tf.KINDS, seeds=(0, 1, 2),
                            pca_dim=None, progress=None, spec_builder=None):
    """Train one pipeline per (kind, seed) on the same split; report accuracy.

    Only the transform kind and the head width differ between runs. By
    default each run uses the compact benchmark recognition net (see
    :func:`benchmark_pipeline_spec`).
    """
    if spec_builder is None:
        spec_builder = benchmark_pipeline_spec
    results = []
    for kind in kinds:
        accs = []
        for seed in seeds:
            cfg = replace(config, seed=seed)
            classes = len({o.label for o in split.train})
            spec = spec_builder(kind, class_count=classes, dtype=cfg.dtype)
            _, report = train_and_evaluate(cfg, split, kind, pca_dim=pca_dim,
                                           pipeline_spec=spec)
            accs.append(report.accuracy)
            if progress:
                progress(kind, seed, report.accuracy)
        results.append(KindResult(kind, accs))
    return results


def write_kind_table(path, results):
    with open(path, "w") as fh:
        fh.write("# kind median_accuracy per_seed_accuracies\n")
        for r in results:
            fh.write(r.line() + "\n")


# ---------------------------------------------------------------------------
# artifact directory helpers


def write_manifest(out_dir, entries):
    """Record every artifact a command produced under its output directory."""
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for name in entries:
            fh.write(name + "\n")
