"""Mixup primitives and the two episode augmentations: support-set mixing
with soft-label weight aggregation, and query-set mixing of in-episode
samples against out-of-episode ones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, SamplingError
from .nets import (ClassifierParams, FeatureExtractor, HyperNetwork,
                   aggregate_codes, split_codes)
from .synthdata import Episode, one_hot, uniform_label


@dataclass(frozen=True)
class MixConfig:
    """Beta shapes for the two mixing weights, augmentation counts, and the
    weight of the uniform-label outlier term. Counts of None mean "match":
    n_param_mix matches the support size, n_ooe_mix the IND query count."""

    a_pm: float = 2.0
    b_pm: float = 5.0
    a_om: float = 20.0
    b_om: float = 20.0
    n_param_mix: int | None = None
    n_ooe_mix: int | None = None
    beta_oe: float = 1.0

    def __post_init__(self):
        if min(self.a_pm, self.b_pm, self.a_om, self.b_om) <= 0:
            raise ConfigError("Beta shape parameters must be positive")
        for n in (self.n_param_mix, self.n_ooe_mix):
            if n is not None and n < 0:
                raise ConfigError("mix counts must be >= 0")
        if self.beta_oe < 0:
            raise ConfigError("beta_oe must be >= 0")


@dataclass
class MixedSample:
    x: np.ndarray
    y: np.ndarray  # soft label over the episode's classes


def mixup(s1, s2, lam: float) -> MixedSample:
    """Convex combination of two labeled samples: lam * s1 + (1 - lam) * s2."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"mixing weight {lam} outside [0, 1]")
    x1, y1 = s1
    x2, y2 = s2
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    y1, y2 = np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise DimensionError(f"mixup shapes differ: {x1.shape}/{x2.shape}, {y1.shape}/{y2.shape}")
    return MixedSample(x=lam * x1 + (1.0 - lam) * x2, y=lam * y1 + (1.0 - lam) * y2)


def parammix_augment(support_x: np.ndarray, support_y: np.ndarray, n_way: int,
                     n_mix: int, beta_shapes: tuple[float, float],
                     rng: np.random.Generator, stats: dict | None = None):
    """Original support (one-hot labels) plus n_mix mixed samples, each from
    a uniformly random ordered pair of distinct support entries with a fresh
    Beta-drawn weight. Returns (xs, soft_labels)."""
    s0 = len(support_y)
    if s0 < 2 and n_mix > 0:
        raise SamplingError("need at least 2 support samples to mix")
    soft0 = np.zeros((s0, n_way))
    soft0[np.arange(s0), np.asarray(support_y, dtype=int)] = 1.0

    xs, soft, same_class = [support_x], [soft0], 0
    for _ in range(n_mix):
        i = int(rng.integers(0, s0))
        j = int(rng.integers(0, s0 - 1))
        j += j >= i
        lam = float(rng.beta(*beta_shapes))
        m = mixup((support_x[i], soft0[i]), (support_x[j], soft0[j]), lam)
        xs.append(m.x[None, :])
        soft.append(m.y[None, :])
        same_class += int(support_y[i] == support_y[j])
    if stats is not None:
        stats["same_class_pairs"] = same_class
        stats["n_mixed"] = n_mix
    return np.concatenate(xs, axis=0), np.concatenate(soft, axis=0)


def parammix_aggregate(hyper: HyperNetwork, extractor: FeatureExtractor,
                       xs: np.ndarray, soft_labels: np.ndarray) -> ClassifierParams:
    """Soft-label weighted aggregation of the generated weight codes; with
    all-one-hot labels this reduces to the plain per-class mean."""
    codes = hyper.codes_np(extractor.features(xs))
    return split_codes(aggregate_codes(codes, soft_labels))


def ooemix_augment(episode: Episode, n_mix: int, beta_shapes: tuple[float, float],
                   rng: np.random.Generator):
    """Extra queries mixing an unused in-episode sample (one-hot label)
    against an OOE sample carrying the uniform label. Returns (xs, soft)."""
    if episode.ooe_pool.n_classes == 0:
        raise SamplingError("OOE pool is empty; cannot build mixed queries")
    if len(episode.ine_reserve_y) == 0:
        raise SamplingError("no unused in-episode samples left for mixing")
    n_way = episode.n_way
    xs, soft = [], []
    for _ in range(n_mix):
        a = int(rng.integers(0, len(episode.ine_reserve_y)))
        ine = (episode.ine_reserve_x[a], one_hot(n_way, int(episode.ine_reserve_y[a])))
        ooe = (episode.ooe_pool.draw(rng, 1)[0], uniform_label(n_way))
        lam = float(rng.beta(*beta_shapes))
        m = mixup(ine, ooe, lam)
        xs.append(m.x[None, :])
        soft.append(m.y[None, :])
    if n_mix == 0:
        d = episode.query_x.shape[1]
        return np.zeros((0, d)), np.zeros((0, n_way))
    return np.concatenate(xs, axis=0), np.concatenate(soft, axis=0)
