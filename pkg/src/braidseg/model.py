"""Model configuration and the assembled two-branch network.

BraidNet executes the fusion plan over an explicit state record: token
stream position, conv stream position, recorded taps, pending
injections. The interpreter is instrumented: every step asserts that the
tensors it consumes were already produced and that layers run exactly
once and in order, so a malformed plan fails loudly instead of silently
reading stale features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import Block, init_params
from .decoder import MaskDecoder, PromptEncoder
from .domain import N_LAYERS, DomainBranch
from .fusion import (ApplyDkin, ApplyRfin, DkinModule, FinalFuse, FusionPlan,
                     RfinModule, RunDomain, RunPrior, build_plan, final_fuse)
from .prior import PriorBranch
from .tensor import Tensor

CONFIG_KEYS = ("m", "C", "C_c", "C_d", "heads", "x_c", "x_s", "window",
               "rfin_count", "dkin_count")


@dataclass
class ModelConfig:
    """Architecture hyperparameters (the desk-scale defaults)."""

    m: int = 3
    C: int = 96
    C_c: int = 64
    C_d: int = 64
    heads: int = 3
    x_c: int = 32
    x_s: int = 128
    window: int = 4
    rfin_count: int = 3
    dkin_count: int = 3

    def validate(self):
        if self.x_s != 4 * self.x_c:
            raise ValueError(
                f"config: x_s must equal 4*x_c so the branch grids match "
                f"(16x downsampled tokens vs 4x downsampled conv map); "
                f"got x_s={self.x_s}, x_c={self.x_c}")
        if self.x_s % 16 != 0:
            raise ValueError(f"config: x_s must be a multiple of the 16-pixel patch, got {self.x_s}")
        grid = self.x_s // 16
        if self.window < 1 or grid % self.window != 0:
            raise ValueError(f"config: window {self.window} must divide token grid {grid}")
        if self.C % self.heads != 0:
            raise ValueError(f"config: C={self.C} not divisible by heads={self.heads}")
        if self.C_c % 2 != 0:
            raise ValueError(f"config: C_c must be even, got {self.C_c}")
        if self.C_d % 4 != 0:
            raise ValueError(f"config: C_d must be divisible by 4, got {self.C_d}")
        if self.m < 1:
            raise ValueError(f"config: m must be >= 1, got {self.m}")
        return self

    @property
    def grid(self):
        return self.x_s // 16

    def to_dict(self):
        return {k: getattr(self, k) for k in CONFIG_KEYS}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(CONFIG_KEYS)
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        cfg = cls(**{k: int(v) for k, v in d.items()})
        return cfg.validate()

    @classmethod
    def from_json_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


class BraidNet(Block):
    """Two-branch encoder + coupling plan + prompt-conditioned decoder."""

    def __init__(self, cfg, dtype=np.float32):
        cfg.validate()
        # plan construction first: invalid wiring must fail before any
        # parameter exists (this is where the cycle error surfaces)
        plan = build_plan(cfg.m, cfg.rfin_count, cfg.dkin_count)
        self.patch_prior = PriorBranch(cfg, dtype, injection_layers=plan.injection_layers)
        self.conv_domain = DomainBranch(cfg, dtype)
        self.rfins = [RfinModule(cfg.C, cfg.C_c, dtype) for _ in range(cfg.rfin_count)]
        self.dkins = [DkinModule(cfg.C_c, cfg.C, dtype) for _ in range(cfg.dkin_count)]
        self.prompt = PromptEncoder(cfg.C_d, dtype)
        self.decoder = MaskDecoder(cfg.C_d, dtype)
        self._cfg = cfg
        self._plan = plan
        self._dtype = np.dtype(dtype)

    @property
    def cfg(self):
        return self._cfg

    @property
    def plan(self):
        return self._plan

    @property
    def dtype(self):
        return self._dtype

    def forward(self, x_c, x_s):
        """x_c [B,1,x_c,x_c], x_s [B,1,x_s,x_s] arrays -> logits [B,1,x_c,x_c]."""
        fused = self.encode(x_c, x_s)
        prompts = self.prompt.forward(fused.shape[0])
        return self.decoder.forward(fused, prompts)

    def encode(self, x_c, x_s):
        """Run both branches under the plan; returns the fused [B,C_d,g,g] map."""
        x_c = self._as_input(x_c, self._cfg.x_c, "x_c")
        x_s = self._as_input(x_s, self._cfg.x_s, "x_s")
        state = _PlanState(self, x_c, x_s)
        for step in self._plan.steps:
            state.run(step)
        return state.finish()

    def _as_input(self, x, extent, name):
        if isinstance(x, Tensor):
            x = x.data
        x = np.asarray(x, dtype=self._dtype)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != extent or x.shape[3] != extent:
            raise ValueError(f"{name}: expected [B,1,{extent},{extent}], got {x.shape}")
        return Tensor(x)


class _PlanState:
    """Instrumented interpreter state for one forward pass."""

    def __init__(self, net, x_c, x_s):
        self.net = net
        self.tokens = net.patch_prior.embed_tokens(x_s)
        self.dmap = x_c
        self.prior_done = 0
        self.domain_done = 0
        self.taps = {}               # prior global layer -> tokens
        self.domain_out = {}         # domain layer -> map
        self.pending_domain = {}     # domain layer -> map to add after the block
        self.pending_prior = {}      # prior layer -> (tokens, LayerNorm)
        self.fused = None

    def run(self, step):
        if self.fused is not None:
            raise RuntimeError("plan bug: step after final fuse")
        if isinstance(step, RunPrior):
            if step.lo != self.prior_done + 1:
                raise RuntimeError(
                    f"plan bug: prior segment [{step.lo}..{step.hi}] but "
                    f"{self.prior_done} layers done")
            inj = {}
            if step.inject_at is not None:
                if step.inject_at not in self.pending_prior:
                    raise RuntimeError(
                        f"plan bug: prior layer {step.inject_at} expects an "
                        f"injection that was never produced")
                inj[step.inject_at] = self.pending_prior.pop(step.inject_at)
            self.tokens, taps = self.net.patch_prior.forward_segment(
                self.tokens, step.lo, step.hi, inj)
            self.taps.update(taps)
            self.prior_done = step.hi
        elif isinstance(step, RunDomain):
            if step.j != self.domain_done + 1:
                raise RuntimeError(
                    f"plan bug: domain layer {step.j} but {self.domain_done} done")
            self.dmap = self.net.conv_domain.forward_layer(
                step.j, self.dmap, self.pending_domain.pop(step.j, None))
            self.domain_out[step.j] = self.dmap
            self.domain_done = step.j
        elif isinstance(step, ApplyRfin):
            if step.src_prior not in self.taps:
                raise RuntimeError(
                    f"plan bug: forward coupler reads prior tap {step.src_prior} "
                    f"before it exists")
            if step.dst_domain <= self.domain_done:
                raise RuntimeError(
                    f"plan bug: forward coupler targets domain {step.dst_domain} "
                    f"which already ran")
            self.pending_domain[step.dst_domain] = \
                self.net.rfins[step.idx].forward(self.taps[step.src_prior])
        elif isinstance(step, ApplyDkin):
            if step.src_domain not in self.domain_out:
                raise RuntimeError(
                    f"plan bug: feedback coupler reads domain {step.src_domain} "
                    f"before it ran")
            if step.dst_prior <= self.prior_done:
                raise RuntimeError(
                    f"plan bug: feedback coupler targets prior {step.dst_prior} "
                    f"which already ran")
            mod = self.net.dkins[step.idx]
            self.pending_prior[step.dst_prior] = (
                mod.forward(self.domain_out[step.src_domain]), mod.ln)
        elif isinstance(step, FinalFuse):
            if self.prior_done != len(self.net.patch_prior.layers):
                raise RuntimeError(
                    f"plan bug: fuse with only {self.prior_done} prior layers done")
            if self.domain_done != N_LAYERS:
                raise RuntimeError(
                    f"plan bug: fuse with only {self.domain_done} domain layers done")
            if self.pending_domain or self.pending_prior:
                raise RuntimeError("plan bug: unconsumed coupler outputs at fuse")
            self.fused = final_fuse(self.net.patch_prior.project(self.tokens),
                                    self.net.conv_domain.project(self.dmap))
        else:
            raise RuntimeError(f"plan bug: unknown step {step!r}")

    def finish(self):
        if self.fused is None:
            raise RuntimeError("plan bug: no final fuse step")
        return self.fused


def build_model(cfg, seed=0, dtype=np.float32):
    """Construct and initialize a BraidNet.

    Parameter values depend only on (seed, parameter name), never on
    which submodules exist, so e.g. an (r=0, d=0) model shares bits with
    the corresponding parameters of a fully coupled one.
    """
    net = BraidNet(cfg, dtype=dtype)
    init_params(net, seed)
    return net
