"""Acceptance suite: one test, one verdict line, per shipped guarantee.

Run with -v for the per-criterion pass/fail roll-up, add -s to see the
measured numbers on passing runs too. The heavyweight criteria (full-config
gradient audit, overfit run, cross-domain run) dominate the wall time;
the whole file finishes in a few minutes on a desktop CPU.
"""

import json
import os
import shutil
import time
from dataclasses import replace

import numpy as np
import pytest

from braidseg.cli import main
from braidseg.data import (generate_dataset, load_checkpoint, save_checkpoint,
                           select, DataError)
from braidseg.evaluate import evaluate, write_report
from braidseg.fusion import CycleError, build_plan
from braidseg.gradcheck import check_model
from braidseg.model import ModelConfig, build_model
from braidseg.tensor import Tensor
from braidseg.train import TrainConfig, poly_lr, sgd_step, SgdState, train

# frozen wiring for the default depth, kept in sync with test_fusion.py
GOLDEN_TRACE_M3 = """\
prior[1..3]
rfin[0]: prior[3] -> domain[3]
domain[1]
domain[2]
domain[3]
prior[4..6]
rfin[1]: prior[6] -> domain[4]
domain[4]
prior[7..9]
rfin[2]: prior[9] -> domain[5]
domain[5]
domain[6]
dkin[0]: domain[6] -> prior[10]
prior[10..10]
domain[7]
dkin[1]: domain[7] -> prior[11]
prior[11..11]
domain[8]
dkin[2]: domain[8] -> prior[12]
prior[12..12]
fuse
"""

TINY = ModelConfig(m=2, C=16, C_c=8, C_d=8, heads=2, x_c=8, x_s=32,
                   window=2, rfin_count=2, dkin_count=2)


# verdict lines collected here; conftest replays them after the run so the
# measured numbers survive pytest's output capture on passing tests
RECORDED = []


def _verdict(num, label, ok, detail):
    line = f"[criterion {num}] {'PASS' if ok else 'FAIL'} {label}: {detail}"
    RECORDED.append(line)
    print(line)
    assert ok, f"criterion {num} ({label}): {detail}"


def _tree_bytes(root):
    out = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            path = os.path.join(dirpath, fn)
            with open(path, "rb") as f:
                out[os.path.relpath(path, root)] = f.read()
    return out


@pytest.fixture(scope="module")
def overfit_corpus(tmp_path_factory):
    """8 paired samples (4 geometries x 2 domains) at the coarse-view size."""
    root = tmp_path_factory.mktemp("overfit32")
    samples = generate_dataset(root, seed=11, n_train=4, n_val=1, n_test=1,
                               size=32, paired=True)
    return str(root), samples


@pytest.fixture(scope="module")
def crossdomain_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("twodomain")
    samples = generate_dataset(root, seed=3, n_train=60, n_val=12, n_test=24,
                               size=64, paired=True)
    return str(root), samples


def test_criterion_1_gradient_integrity():
    """Every parameter tensor of the full config passes a finite-difference
    audit at f64 (central differences, h=1e-5, relative error < 1e-4)."""
    t0 = time.time()
    rows, max_err, seconds = check_model(ModelConfig(), seed=0, h=1e-5,
                                         tol=1e-4)
    wall = time.time() - t0
    n_params = len(build_model(ModelConfig(), seed=0).named_params())
    failures = [name for name, _, e_dir, e_probe in rows
                if max(e_dir, e_probe) >= 1e-4]
    ok = (len(rows) == n_params and not failures and max_err < 1e-4
          and wall < 600.0)
    _verdict(1, "gradient integrity", ok,
             f"{len(rows)}/{n_params} tensors, max rel err {max_err:.2e} "
             f"(tol 1e-4), {wall:.0f}s (budget 600s), failures={failures[:3]}")


def test_criterion_2_wiring_fidelity():
    """The default-depth plan wires exactly the documented coupler pairs and
    a too-deep feedback request fails with a cycle error."""
    plan = build_plan(3, 3, 3)
    rfin_ok = plan.rfin_pairs == [(3, 3), (6, 4), (9, 5)]
    dkin_ok = plan.dkin_pairs == [(6, 10), (7, 11), (8, 12)]
    trace_ok = plan.trace() == GOLDEN_TRACE_M3
    try:
        build_plan(2, 3, 3)
        cycle_ok = False
    except CycleError:
        cycle_ok = True
    ok = rfin_ok and dkin_ok and trace_ok and cycle_ok
    _verdict(2, "wiring fidelity", ok,
             f"rfin={plan.rfin_pairs} dkin={plan.dkin_pairs} "
             f"trace={'match' if trace_ok else 'MISMATCH'} "
             f"cycle_raises={cycle_ok}")


def test_criterion_3_zero_fusion_identity():
    """Zeroing every coupler parameter makes the coupled model output
    bitwise-equal to the uncoupled (0,0) model on 10 random inputs."""
    cfg = ModelConfig()
    coupled = build_model(cfg, seed=0)
    plain = build_model(replace(cfg, rfin_count=0, dkin_count=0), seed=0)
    zeroed = 0
    for name, p in coupled.named_params():
        if name.startswith(("rfins.", "dkins.")):
            p.data = np.zeros_like(p.data)
            zeroed += 1
    rng = np.random.default_rng(0)
    matches = 0
    for _ in range(10):
        xc = rng.random((1, 1, cfg.x_c, cfg.x_c), dtype=np.float32)
        xs = rng.random((1, 1, cfg.x_s, cfg.x_s), dtype=np.float32)
        a = coupled.forward(Tensor(xc.copy()), Tensor(xs.copy())).data
        b = plain.forward(Tensor(xc.copy()), Tensor(xs.copy())).data
        matches += int(a.tobytes() == b.tobytes())
    ok = matches == 10 and zeroed > 0
    _verdict(3, "zero-fusion identity", ok,
             f"{matches}/10 inputs bitwise-equal after zeroing "
             f"{zeroed} coupler tensors")


def test_criterion_4_overfit_sanity(overfit_corpus):
    """200 iterations on 8 paired samples reach train-set mean Dice >= 0.95."""
    root, samples = overfit_corpus
    train_sel = select(samples, split="train")
    assert len(train_sel) == 8
    model = build_model(ModelConfig(), seed=0)
    cfg = TrainConfig(epochs=50, batch=2, lr0=1e-2, momentum=0.9,
                      augment=False, seed=0)
    t0 = time.time()
    rows = train(model, root, train_sel, cfg)
    wall = time.time() - t0
    report = evaluate(model, root, train_sel)
    mean = report.overall_mean_pct / 100.0
    ok = (len(rows) - 1 == 200) and mean >= 0.95 and wall < 900.0
    _verdict(4, "overfit sanity", ok,
             f"train-set mean Dice {mean:.4f} (need >= 0.95) after "
             f"{len(rows) - 1} iterations in {wall:.0f}s (budget 900s)")


def test_criterion_5_cross_domain_harness(crossdomain_corpus, tmp_path):
    """Train on domain A (60 samples, 10 epochs), evaluate on both domains;
    both reports are emitted and the cross-domain score is finite and at
    least the untrained model's."""
    root, samples = crossdomain_corpus
    train_a = select(samples, split="train", domain="A")
    test_a = select(samples, split="test", domain="A")
    test_b = select(samples, split="test", domain="B")
    assert len(train_a) == 60

    untrained = build_model(ModelConfig(), seed=0)
    floor_b = evaluate(untrained, root, test_b).overall_mean_pct

    model = build_model(ModelConfig(), seed=0)
    cfg = TrainConfig(epochs=10, batch=2, lr0=1e-2, momentum=0.9,
                      invert_prob=0.5, seed=0)
    train(model, root, train_a, cfg)

    rep_a = evaluate(model, root, test_a)
    rep_b = evaluate(model, root, test_b)
    paths = (write_report(rep_a, tmp_path, "in_domain_A")
             + write_report(rep_b, tmp_path, "cross_domain_B"))
    emitted = all(os.path.getsize(p) > 0 for p in paths)
    structured = all(r.cls and r.domain == "B" and r.n > 0 for r in rep_b.rows)

    ok = (emitted and structured and np.isfinite(rep_b.overall_mean_pct)
          and rep_b.overall_mean_pct >= floor_b)
    _verdict(5, "cross-domain harness", ok,
             f"in-domain A {rep_a.overall_mean_pct:.2f}%, cross B "
             f"{rep_b.overall_mean_pct:.2f}% vs untrained B {floor_b:.2f}%, "
             f"reports={'emitted' if emitted else 'MISSING'}")


def test_criterion_6_ablation_grid(tmp_path):
    """At depth parameter 6 the sweep completes all 12 (r,d) grid cells and
    the (3,3) cell is marked as the default configuration."""
    root = tmp_path / "data"
    generate_dataset(root, seed=7, n_train=2, n_val=2, n_test=0, size=16)
    cfg = tmp_path / "m6.json"
    cfg.write_text(json.dumps(dict(m=6, C=16, C_c=8, C_d=8, heads=2,
                                   x_c=8, x_s=32, window=2,
                                   rfin_count=3, dkin_count=3)))
    out = tmp_path / "sweep"
    t0 = time.time()
    rc = main(["ablate", "--data", str(root), "--out", str(out),
               "--config", str(cfg), "--rfin", "0,1,2,3",
               "--dkin", "1,3,6", "--epochs", "1", "--seed", "0"])
    wall = time.time() - t0
    lines = (out / "ablation.csv").read_text().splitlines()
    body = [line.split(",") for line in lines[1:]]
    grid = [row for row in body if (int(row[0]), int(row[1])) != (0, 0)]
    complete = (len(grid) == 12
                and all(row[3] == "ok" and row[2] for row in grid))
    default_marked = any(int(r[0]) == 3 and int(r[1]) == 3
                         and r[4] == "default config" for r in body)
    ok = rc == 0 and complete and default_marked
    _verdict(6, "ablation grid", ok,
             f"{len(grid)}/12 grid cells complete in {wall:.0f}s, "
             f"(3,3) default-marked={default_marked}")


def test_criterion_7_determinism(overfit_corpus, tmp_path):
    """Two identically seeded training runs write bitwise-identical loss
    logs and checkpoints."""
    root, _ = overfit_corpus
    outs = []
    for tag in ("one", "two"):
        out = tmp_path / tag
        rc = main(["train", "--data", root, "--out", str(out),
                   "--epochs", "2", "--batch", "2", "--lr", "1e-3",
                   "--seed", "0"])
        assert rc == 0
        outs.append(_tree_bytes(out))
    same_names = sorted(outs[0]) == sorted(outs[1])
    diffs = [k for k in outs[0] if outs[0][k] != outs[1].get(k)]
    ok = same_names and not diffs
    _verdict(7, "determinism", ok,
             f"{len(outs[0])} files compared, differing={diffs[:3]}")


def test_criterion_8_serialization(tmp_path):
    """Checkpoint save -> load -> forward is bitwise-stable, and corrupted
    checkpoints fail with errors naming the offending tensor."""
    model = build_model(TINY, seed=5)
    ckpt = tmp_path / "ckpt"
    save_checkpoint(model, ckpt, epoch=1, seed=5)
    back, _ = load_checkpoint(ckpt)
    rng = np.random.default_rng(1)
    xc = rng.random((1, 1, 8, 8), dtype=np.float32)
    xs = rng.random((1, 1, 32, 32), dtype=np.float32)
    a = model.forward(Tensor(xc.copy()), Tensor(xs.copy())).data
    b = back.forward(Tensor(xc.copy()), Tensor(xs.copy())).data
    bitwise = a.tobytes() == b.tobytes()

    meta = json.loads((ckpt / "meta.json").read_text())
    victim = sorted(meta["tensors"])[0]

    bad1 = tmp_path / "bad_shape"
    shutil.copytree(ckpt, bad1)
    m1 = json.loads((bad1 / "meta.json").read_text())
    m1["tensors"][victim]["shape"] = [1, 2, 3]
    (bad1 / "meta.json").write_text(json.dumps(m1))
    try:
        load_checkpoint(bad1)
        named_shape = False
    except DataError as e:
        named_shape = victim in str(e)

    bad2 = tmp_path / "bad_file"
    shutil.copytree(ckpt, bad2)
    os.remove(bad2 / meta["tensors"][victim]["file"])
    try:
        load_checkpoint(bad2)
        named_missing = False
    except DataError as e:
        named_missing = victim in str(e)

    ok = bitwise and named_shape and named_missing
    _verdict(8, "serialization", ok,
             f"forward bitwise={bitwise}, shape error names tensor="
             f"{named_shape}, missing file names tensor={named_missing}")


def test_criterion_9_schedule_and_step():
    """Poly schedule endpoints are exact (3e-4 at epoch 0, 0 at the end) and
    the momentum/decay update matches the two-step hand example to 1e-12."""
    start_exact = poly_lr(3e-4, 0, 50) == 3e-4
    end_exact = poly_lr(3e-4, 50, 50) == 0.0

    p = Tensor(np.zeros((1,), dtype=np.float64), requires_grad=True)
    state = SgdState()
    for _ in range(2):
        p.grad = np.ones((1,), dtype=np.float64)
        sgd_step([("p", p)], state, lr=1.0, momentum=0.99, weight_decay=0.0)
    step_err = abs(float(p.data[0]) - (-2.99))

    ok = start_exact and end_exact and step_err < 1e-12
    _verdict(9, "schedule and update rule", ok,
             f"lr(0)=3e-4 exact={start_exact}, lr(end)=0 exact={end_exact}, "
             f"two-step error {step_err:.2e} (tol 1e-12)")
