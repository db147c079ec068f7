"""Finite-difference verification of the backward pass.

The numeric side is deliberately independent of the autodiff machinery:
it only re-evaluates a scalar-valued closure at perturbed float64 inputs
and forms central differences. Per-op element-wise checks live in the
test suite; check_model() covers every parameter tensor of a full model
with a random-direction derivative (which touches every element) plus a
few exact single-element probes per tensor.
"""

from __future__ import annotations

import time

import numpy as np

from .tensor import Tensor


def numeric_grad(f, x, h=1e-5):
    """Element-wise central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        keep = flat_x[i]
        flat_x[i] = keep + h
        fp = float(f(x))
        flat_x[i] = keep - h
        fm = float(f(x))
        flat_x[i] = keep
        flat_g[i] = (fp - fm) / (2.0 * h)
    return g


def directional_grad(f, x, v, h=1e-5):
    """Central difference of f along unit direction v."""
    x = np.asarray(x, dtype=np.float64)
    fp = float(f(x + h * v))
    fm = float(f(x - h * v))
    return (fp - fm) / (2.0 * h)


def rel_error(a, b, floor=1e-12):
    """Scale-relative disagreement between two gradients (arrays or scalars)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_op(op, args, wrt, h=1e-5, reduce_to_scalar=True):
    """Compare backward of `op(*args)` against numeric_grad for args[wrt].

    args are float64 numpy arrays; the op output is folded to a scalar by a
    fixed random weighting so every output element influences the check.
    Returns the relative error.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=(i == wrt))
               for i, a in enumerate(args)]
    out = op(*tensors)
    rng = np.random.default_rng(20260819)
    weights = rng.standard_normal(out.shape) if reduce_to_scalar else np.ones(out.shape)

    def run(x):
        probe = [Tensor(x if i == wrt else np.asarray(a, dtype=np.float64))
                 for i, a in enumerate(args)]
        return (op(*probe).data * weights).sum()

    loss = _weighted_sum(out, weights)
    loss.backward()
    analytic = tensors[wrt].grad
    numeric = numeric_grad(run, np.asarray(args[wrt], dtype=np.float64), h=h)
    return rel_error(analytic, numeric)


def _weighted_sum(t, weights):
    from .tensor import mul, tensor_sum
    return tensor_sum(mul(t, Tensor(weights.astype(t.dtype))))


def check_model(cfg, seed=0, h=1e-5, tol=1e-4, probes=1, log=None):
    """Finite-difference check of every parameter tensor of a full model.

    Builds the model at float64, computes one analytic backward pass of the
    segmentation loss on a fixed random batch, then for each parameter
    tensor verifies (a) a seeded random-direction directional derivative,
    which sweeps all elements at once, and (b) `probes` individual
    elements by exact central differences.

    Returns (rows, max_err, seconds): rows are
    (name, size, directional_err, worst_probe_err).

    Central differences are only meaningful where the loss is smooth in the
    parameter, so tensors that start at exactly zero (coupler projections,
    biases, norm shifts) are redrawn from a small normal first: at zero the
    couplers park their activations precisely on the leaky-relu kink and
    give their instance norms a degenerate zero-variance input, and a
    derivative estimate straddling either of those points says nothing
    about the correctness of the backward pass.
    """
    from .model import build_model
    from .train import seg_loss

    t0 = time.time()
    model = build_model(cfg, seed=seed, dtype=np.float64)
    for name, p in model.named_params():
        if (p.init_kind or "zeros").partition(":")[0] == "zeros":
            prng = np.random.default_rng(
                np.random.SeedSequence([seed, 0xA1, _stable_hash(name)]))
            p.data = prng.normal(0.0, 0.02, size=p.shape)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFD]))
    xc = rng.uniform(0.0, 1.0, size=(1, 1, cfg.x_c, cfg.x_c))
    xs = rng.uniform(0.0, 1.0, size=(1, 1, cfg.x_s, cfg.x_s))
    # blob-ish target so the dice term sees both classes
    yy, xx = np.mgrid[0:cfg.x_c, 0:cfg.x_c]
    target = (((yy - cfg.x_c / 2) ** 2 + (xx - cfg.x_c / 2) ** 2)
              < (cfg.x_c / 4) ** 2).astype(np.float64)[None, None]

    def loss_value():
        return seg_loss(model.forward(xc, xs), target)

    loss = loss_value()
    loss.backward()

    rows = []
    max_err = 0.0
    params = model.named_params()
    for name, p in params:
        analytic = p.grad
        gscale = float(np.abs(analytic).max())

        # direction aligned with the analytic gradient: the derivative along
        # it is as large as this tensor allows, which keeps the estimate
        # far above the finite-difference noise floor, and any backward bug
        # with a component along the gradient shows up as a mismatch
        gnorm = float(np.linalg.norm(analytic))
        if gnorm > 0:
            direction = analytic / gnorm
        else:
            direction = np.random.default_rng(
                np.random.SeedSequence([seed, _stable_hash(name)])).standard_normal(p.shape)
            direction /= max(np.linalg.norm(direction), 1e-30)

        keep = p.data.copy()
        p.data = keep + h * direction
        fp = float(loss_value().data)
        p.data = keep - h * direction
        fm = float(loss_value().data)
        p.data = keep
        numeric_dir = (fp - fm) / (2.0 * h)
        analytic_dir = float((analytic * direction).sum())
        # the 1e-4 floor marks the resolution limit of the method: an O(1)
        # loss evaluated at f64 carries ~1e-13 of rounding, so a central
        # difference over 2h = 2e-5 cannot certify derivatives much below
        # 1e-8; tensors whose whole gradient sits down there are held to
        # the equivalent absolute bar |a - n| < tol * 1e-4 instead
        err_dir = abs(analytic_dir - numeric_dir) / max(abs(analytic_dir),
                                                        abs(numeric_dir), 1e-4)

        # spot probes: exact per-element central differences, judged on the
        # tensor's own gradient scale (an element whose true derivative is
        # orders below that scale cannot be resolved by f64 differences of
        # a full forward pass, and a bug that small is invisible anyway)
        err_probe = 0.0
        prng = np.random.default_rng(np.random.SeedSequence([seed, _stable_hash(name), 7]))
        for _ in range(probes):
            idx = tuple(prng.integers(0, d) for d in p.shape) if p.ndim else ()
            keep_v = p.data[idx]
            p.data[idx] = keep_v + h
            fp = float(loss_value().data)
            p.data[idx] = keep_v - h
            fm = float(loss_value().data)
            p.data[idx] = keep_v
            numeric_el = (fp - fm) / (2.0 * h)
            analytic_el = float(analytic[idx])
            scale = max(gscale, abs(numeric_el), 1e-5)
            err_probe = max(err_probe, abs(analytic_el - numeric_el) / scale)

        err = max(err_dir, err_probe)
        max_err = max(max_err, err)
        rows.append((name, p.size, err_dir, err_probe))
        if log is not None:
            status = "ok" if err < tol else "FAIL"
            log(f"{status:4s} {name:60s} n={p.size:<8d} dir={err_dir:.3e} probe={err_probe:.3e}")
    return rows, max_err, time.time() - t0


def _stable_hash(name):
    import zlib
    return zlib.crc32(name.encode("utf-8"))
