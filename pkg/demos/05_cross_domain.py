"""
Crossing the domain gap
=======================

The two phantom renderers disagree about polarity: domain A draws lesions
darker than their surroundings, domain B draws them brighter. A model
trained on raw A images is worse than useless on B. Contrast-inversion
augmentation (show 1-x half the time) closes most of that gap without the
model ever seeing a B image.

This demo uses a reduced budget (24 geometries, 10 epochs) to stay quick;
the evaluation harness's full protocol lives in the test suite.
"""

import tempfile
import time

from braidseg import (ModelConfig, TrainConfig, build_model, evaluate,
                      generate_dataset, train)
from braidseg.data import select


def score(model, root, samples, domain):
    sel = select(samples, split="test", domain=domain)
    return evaluate(model, root, sel).overall_mean_pct


with tempfile.TemporaryDirectory() as root:
    samples = generate_dataset(root, seed=3, n_train=24, n_val=4, n_test=10,
                               size=64, paired=True)
    train_a = select(samples, split="train", domain="A")
    print(f"training pool: {len(train_a)} domain-A images")

    results = {}
    untrained = build_model(ModelConfig(), seed=0)
    results["untrained"] = (score(untrained, root, samples, "A"),
                            score(untrained, root, samples, "B"))

    for label, invert in (("plain aug", 0.0), ("with inversion", 0.5)):
        model = build_model(ModelConfig(), seed=0)
        tcfg = TrainConfig(epochs=10, batch=2, lr0=1e-2, momentum=0.9,
                           invert_prob=invert, seed=0)
        t0 = time.time()
        train(model, root, train_a, tcfg)
        print(f"trained ({label}) in {time.time() - t0:.0f}s")
        results[label] = (score(model, root, samples, "A"),
                          score(model, root, samples, "B"))

    print()
    print(f"{'':<16} {'dice A %':>9} {'dice B %':>9}")
    for label, (a, b) in results.items():
        print(f"{label:<16} {a:>9.2f} {b:>9.2f}")
