"""End-to-end alignment learning at a reduced scale.

Trains two small pipelines on the same perturbed glyph dataset, one with
a fixed identity transform and one with a learned similarity transform,
then compares verification accuracy on held-out identities. Uses fewer
iterations than the full benchmark so it finishes in a couple of
minutes; expect a visible but smaller gap.
"""

import time

from stn_align import synthdata as sd
from stn_align import training as tr

split = sd.standard_split("similarity")
print(f"{len(split.train)} train / {len(split.test)} test observations")

for kind in ("identity", "similarity"):
    config = tr.TrainConfig(seed=0, max_iters=1200, lr_decay_every=1000, log_every=200)
    t0 = time.time()
    run = tr.train(config, split, kind)
    report = tr.evaluate_verification(run, split.test, split.pairs)
    last = run.metrics[-1]
    print(f"{kind:>10s}: verification accuracy {report.accuracy:.4f} "
          f"(train acc {last.train_acc:.2f}, softmax {last.loss_softmax:.3f}, "
          f"{time.time() - t0:.0f} s)")
    print("            lr trace:", " ".join(
        f"{m.iteration}:{m.lr_rec:g}" for m in run.metrics[::2]))
