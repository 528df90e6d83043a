"""Seeded draws of percentiles, CDF anchors and minibatches.

Each purpose (init, shuffle, tau, ytilde, anchors) owns an independent
PCG64 stream spawned from one SeedSequence, so changing how many draws one
purpose makes never perturbs another.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossSamples

TAU_CLIP = 1e-4
DECILES = tuple(round(0.1 * i, 1) for i in range(1, 10))
STREAMS = ("init", "shuffle", "tau", "ytilde", "anchor")


@dataclass
class SamplerConfig:
    seed: int = 0
    batch_size: int = 128
    tau_clip: float = TAU_CLIP
    tau_prior: str = "uniform"  # or "beta"
    beta_a: float = 1.0
    beta_b: float = 1.0
    ytilde_min: float | None = None
    ytilde_max: float | None = None
    tau_anchors: tuple = DECILES
    ytilde_anchors: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.tau_clip < 0.5:
            raise ValueError("tau_clip must lie in (0, 0.5)")
        if self.tau_prior not in ("uniform", "beta"):
            raise ValueError(f"unknown tau prior {self.tau_prior!r}")
        if self.tau_prior == "beta" and not (self.beta_a > 0 and self.beta_b > 0):
            raise ValueError("beta prior parameters must be positive")


class Sampler:
    def __init__(self, cfg):
        self.cfg = cfg
        children = np.random.SeedSequence(cfg.seed).spawn(len(STREAMS))
        self.rngs = {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(STREAMS, children)}

    def rng(self, purpose):
        return self.rngs[purpose]

    def sample_tau(self, n):
        if n < 1:
            raise ValueError("n must be >= 1")
        r = self.rngs["tau"]
        if self.cfg.tau_prior == "beta":
            t = r.beta(self.cfg.beta_a, self.cfg.beta_b, size=n)
        else:
            t = r.uniform(0.0, 1.0, size=n)
        return np.clip(t, self.cfg.tau_clip, 1.0 - self.cfg.tau_clip)

    def sample_ytilde(self, n):
        lo, hi = self.cfg.ytilde_min, self.cfg.ytilde_max
        if lo is None or hi is None:
            raise ValueError("ytilde bounds are unset; record them from the training split first")
        if not lo < hi:
            raise ValueError(f"need ytilde_min < ytilde_max, got {lo}, {hi}")
        return self.rngs["ytilde"].uniform(lo, hi, size=n)

    def sample_anchors(self, anchors, n):
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.size == 0:
            raise ValueError("anchor set is empty")
        return anchors[self.rngs["anchor"].integers(0, anchors.size, size=n)]

    def loss_samples(self, n, with_f=True):
        tau = self.sample_tau(n)
        tau_a = self.sample_anchors(self.cfg.tau_anchors, n)
        if with_f:
            yt = self.sample_ytilde(n)
            yt_a = self.sample_anchors(self.cfg.ytilde_anchors, n)
        else:
            yt = yt_a = np.zeros(n)
        return LossSamples(tau, tau_a, yt, yt_a)

    def batch_indices(self, n_rows):
        """Index arrays for one epoch: a fresh permutation, last short batch kept."""
        if n_rows < 1:
            raise ValueError("dataset is empty")
        perm = self.rngs["shuffle"].permutation(n_rows)
        bs = self.cfg.batch_size
        return [perm[i:i + bs] for i in range(0, n_rows, bs)]

    def minibatches(self, x, y):
        """One epoch of shuffled (x batch, y batch) pairs."""
        for idx in self.batch_indices(len(y)):
            yield x[idx], y[idx]


def empirical_deciles(y):
    return tuple(float(v) for v in np.quantile(np.asarray(y, dtype=np.float64), DECILES))
