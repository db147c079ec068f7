"""
Overfit a handful of phantoms
=============================

The fastest end-to-end sanity check of the whole stack: 8 paired samples,
200 SGD iterations, and the model should rebuild its own training masks
almost perfectly. Takes well under a minute on a laptop CPU.

The dataset is generated at the coarse-view resolution on purpose. At a
larger native size the score saturates around the nearest-neighbour
upsampling ceiling instead of 1.0, which says nothing about optimization.
"""

import tempfile
import time

from braidseg import (ModelConfig, TrainConfig, build_model, evaluate,
                      generate_dataset, train)
from braidseg.data import select

cfg = ModelConfig()                     # m=3, C=96, coarse view 32px
tcfg = TrainConfig(epochs=50, batch=2, lr0=1e-2, momentum=0.9,
                   augment=False, seed=0)

with tempfile.TemporaryDirectory() as root:
    samples = generate_dataset(root, seed=11, n_train=4, n_val=1, n_test=1,
                               size=cfg.x_c, paired=True)
    train_sel = select(samples, split="train")
    print(f"{len(train_sel)} training samples at {cfg.x_c}px")

    model = build_model(cfg, seed=0)
    n = sum(p.size for _, p in model.named_params())
    print(f"model: {n:,} parameters")

    t0 = time.time()
    rows = train(model, root, train_sel, tcfg,
                 log=lambda msg: print("  " + msg))
    print(f"{len(rows) - 1} iterations in {time.time() - t0:.0f}s")

    report = evaluate(model, root, train_sel)
    print()
    print(report.to_text())
