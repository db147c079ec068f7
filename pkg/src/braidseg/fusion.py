"""Cross-branch couplers and the interleaved execution plan.

Two directed coupler families connect the branches:

* forward couplers (token branch -> conv branch): the tap from global
  token layer i is reshaped to a map, passed through a 1x1 conv to the
  conv-branch width, instance-normalized and LeakyReLU-gated; the result
  is added to conv layer j's output. Pairs, in order: (m,3), (2m,4),
  (3m,5); an ablation count r in 0..3 keeps the first r of them.

* feedback couplers (conv branch -> token branch): a conv layer output is
  aligned to the token width by a 1x1 conv (skipped outright when the
  widths already match), reshaped to tokens, and handed to a late token
  layer where it joins the attention residual under its own LN. With d
  sites they attach to token layers {4m-d+1 .. 4m}, sources cycling
  8,7,6,8,7,6,... backwards from the last layer, which reproduces the
  reference wiring (6,7,8 -> 4m-2,4m-1,4m) at d=3.

Both coupler output projections are zero-initialized, so a freshly built
model computes exactly the two independent branches.

The plan is a static step list: running prior segments, running conv
layers, applying couplers, and a final element-wise fuse of the two
projected maps. Scheduling requires every feedback target to come after
the last forward-coupler source (3m < 4m-d+1, i.e. d <= m); otherwise
construction fails with an error naming the layers on the cycle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import Block, Conv, InstanceNorm, LayerNorm

RFIN_TABLE = ((1, 3), (2, 4), (3, 5))       # (prior multiple of m, domain layer)
DKIN_SOURCES = (8, 7, 6)                    # cycled backwards from layer 4m


class CycleError(ValueError):
    """Raised when the requested wiring cannot be scheduled acyclically."""


class RfinModule(Block):
    """Forward coupler: token tap -> conv-width map (zero-initialized)."""

    def __init__(self, c, c_c, dtype=np.float32):
        self.proj = Conv(c, c_c, 1, dtype, init="zeros")
        self.norm = InstanceNorm(c_c, dtype)

    def forward(self, tap_tokens):
        h = T.tokens_to_map(tap_tokens)
        h = self.proj.forward(h)
        return T.leaky_relu(self.norm.forward(h))


class DkinModule(Block):
    """Feedback coupler: conv map -> tokens plus the LN its target applies.

    The width alignment is skipped entirely when C_c == C (identity); the
    target transformer layer applies self.ln to the injected tokens inside
    its residual sum.
    """

    def __init__(self, c_c, c, dtype=np.float32):
        self.proj = Conv(c_c, c, 1, dtype, init="zeros") if c_c != c else None
        self.ln = LayerNorm(c, dtype)

    def forward(self, fmap):
        if self.proj is not None:
            fmap = self.proj.forward(fmap)
        return T.map_to_tokens(fmap)


# ---------------------------------------------------------------------
# the plan
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class RunPrior:
    lo: int
    hi: int
    inject_at: int | None = None     # layer index fed by a pending injection


@dataclass(frozen=True)
class RunDomain:
    j: int


@dataclass(frozen=True)
class ApplyRfin:
    idx: int
    src_prior: int
    dst_domain: int


@dataclass(frozen=True)
class ApplyDkin:
    idx: int
    src_domain: int
    dst_prior: int


@dataclass(frozen=True)
class FinalFuse:
    pass


class FusionPlan:
    """Static interleaving of the two branches for given (m, r, d)."""

    def __init__(self, m, rfin_count, dkin_count):
        if m < 1:
            raise ValueError(f"plan: m must be >= 1, got {m}")
        if not (0 <= rfin_count <= len(RFIN_TABLE)):
            raise ValueError(f"plan: forward coupler count must be 0..3, got {rfin_count}")
        if dkin_count < 0:
            raise ValueError(f"plan: feedback coupler count must be >= 0, got {dkin_count}")
        self.m = m
        self.rfin_count = rfin_count
        self.dkin_count = dkin_count
        self.rfin_pairs = [(k * m, j) for k, j in RFIN_TABLE[:rfin_count]]
        targets = list(range(4 * m - dkin_count + 1, 4 * m + 1))
        sources = [DKIN_SOURCES[i % 3] for i in range(dkin_count)]   # from 4m backwards
        self.dkin_pairs = list(zip(sources[::-1], targets))          # ascending targets
        if dkin_count and targets[0] <= 3 * m:
            raise CycleError(
                f"cyclic wiring: feedback target prior layer {targets[0]} does not come "
                f"after forward-coupler source prior layer {3 * m} "
                f"(prior {targets[0]} needs domain {self.dkin_pairs[0][0]}, which needs "
                f"domain 3..5, which needs prior {3 * m} >= {targets[0]}); requires d <= m")
        self.steps = self._build()

    def _build(self):
        m, r = self.m, self.rfin_count
        steps = []
        dom_cursor = 0
        prior_cursor = 0

        def run_domain_through(j):
            nonlocal dom_cursor
            while dom_cursor < j:
                dom_cursor += 1
                steps.append(RunDomain(dom_cursor))

        for k, (seg_end, dst) in enumerate(((m, 3), (2 * m, 4), (3 * m, 5))):
            steps.append(RunPrior(prior_cursor + 1, seg_end))
            prior_cursor = seg_end
            if k < r:
                steps.append(ApplyRfin(k, seg_end, dst))
            run_domain_through(dst)

        for idx, (src, tgt) in enumerate(self.dkin_pairs):
            run_domain_through(src)
            steps.append(ApplyDkin(idx, src, tgt))
            steps.append(RunPrior(prior_cursor + 1, tgt, inject_at=tgt))
            prior_cursor = tgt

        run_domain_through(8)
        if prior_cursor < 4 * m:
            steps.append(RunPrior(prior_cursor + 1, 4 * m))
        steps.append(FinalFuse())
        return steps

    @property
    def injection_layers(self):
        return tuple(t for _, t in self.dkin_pairs)

    def trace(self):
        """Deterministic one-step-per-line text rendering of the schedule."""
        lines = []
        for s in self.steps:
            if isinstance(s, RunPrior):
                lines.append(f"prior[{s.lo}..{s.hi}]")
            elif isinstance(s, RunDomain):
                lines.append(f"domain[{s.j}]")
            elif isinstance(s, ApplyRfin):
                lines.append(f"rfin[{s.idx}]: prior[{s.src_prior}] -> domain[{s.dst_domain}]")
            elif isinstance(s, ApplyDkin):
                lines.append(f"dkin[{s.idx}]: domain[{s.src_domain}] -> prior[{s.dst_prior}]")
            else:
                lines.append("fuse")
        return "\n".join(lines) + "\n"


def build_plan(m, rfin_count, dkin_count):
    return FusionPlan(m, rfin_count, dkin_count)


def final_fuse(prior_map, domain_map):
    """Element-wise addition of the two decoder-width maps."""
    if prior_map.shape != domain_map.shape:
        raise ValueError(
            f"fuse: branch outputs disagree: {prior_map.shape} vs {domain_map.shape}")
    return T.add(prior_map, domain_map)
