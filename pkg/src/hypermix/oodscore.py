"""Inference-time OOD scores over a frozen episode-adapted model.

Every score is oriented so that higher means more in-distribution; the
entropy score is therefore the negated Shannon entropy. All scores stay
finite on finite inputs via the shared log floor and covariance ridge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import EPS_LOG
from .errors import DomainError
from .nets import ClassifierParams, FeatureExtractor, softmax_np

# Ridge scale for degenerate few-shot covariance / data matrices: the
# empirical covariance of K*N support features is rank deficient whenever
# K*N - N < d, so inversion needs a scale-aware floor.
COV_RIDGE_SCALE = 1e-6
COV_RIDGE_MIN = 1e-12


@dataclass
class ScoreRecord:
    query_id: int
    method: str
    score: float
    predicted_class: int
    truth: int


class AdaptedModel:
    """Frozen extractor + generated classifier for one episode."""

    def __init__(self, extractor: FeatureExtractor, cparams: ClassifierParams):
        self.extractor = extractor
        self.cparams = cparams

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.cparams.logits(self.extractor.features(x))

    def probs(self, x: np.ndarray) -> np.ndarray:
        p = softmax_np(self.logits(x))
        return p[0] if np.asarray(x).ndim == 1 else p

    def probs_graph(self, x_node: dc.DiffValue, temperature: float) -> dc.DiffValue:
        """Private temperature-scaled softmax graph over constant weights."""
        feats = self.extractor.frozen_forward_graph(x_node)
        w_t = dc.DiffValue(self.cparams.W.T.copy())
        b = dc.DiffValue(self.cparams.b[None, :].copy())
        logits = dc.add_bias(dc.matmul(feats, w_t), b)
        return dc.softmax_rows(dc.scale(logits, 1.0 / temperature))


def predicted_class(probs: np.ndarray) -> int:
    """Argmax with ties resolved to the lowest index."""
    return int(np.argmax(probs))


def score_msp(probs: np.ndarray) -> float:
    return float(np.max(probs))


def score_entropy(probs: np.ndarray) -> float:
    """Negative Shannon entropy: sum_c p_c log p_c (log floored at EPS_LOG)."""
    p = np.asarray(probs, dtype=np.float64)
    return float(np.sum(p * np.log(np.clip(p, EPS_LOG, 1.0 - EPS_LOG))))


def score_odin_batch(model: AdaptedModel, x: np.ndarray, temperature: float,
                     eps: float) -> np.ndarray:
    """ODIN scores for a whole query batch in one gradient graph. Rows pass
    through the model independently, so the gradient of the summed per-row
    loss recovers each row's own input gradient exactly."""
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    if eps < 0:
        raise DomainError(f"perturbation magnitude must be >= 0, got {eps}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if eps > 0:
        # gradient of -log max_c p(Y=c|x; T); rowmax(p) >= 1/N keeps log safe
        grad = dc.input_gradient(
            lambda xn: model.probs_graph(xn, temperature),
            x,
            lambda p: dc.scale(dc.sum_all(dc.log(dc.rowmax(p))), -1.0),
        )
        x = x - eps * np.sign(grad)
    probs = softmax_np(model.logits(x) / temperature)
    return probs.max(axis=1)


def score_odin(model: AdaptedModel, x: np.ndarray, temperature: float,
               eps: float) -> float:
    """Temperature-scaled max softmax probability after a gradient-sign
    input perturbation that increases the max class's scaled probability."""
    return float(score_odin_batch(model, np.atleast_2d(x), temperature, eps)[0])


def default_odin_temperature(k_shot: int) -> float:
    """Grid-selected values: 1.0 for 5-shot, 10.0 for 10-shot and beyond."""
    return 1.0 if k_shot <= 5 else 10.0


@dataclass
class LayerGaussian:
    means: np.ndarray      # (n_classes, d)
    cov: np.ndarray        # unregularized pooled MLE covariance (d, d)
    eps_cov: float
    precision: np.ndarray  # inverse of cov + eps_cov * I
    logdet: float          # log det of the regularized covariance


@dataclass
class GaussianStats:
    layers: list[LayerGaussian]


def _ridge(mat: np.ndarray) -> float:
    return max(COV_RIDGE_SCALE * float(np.trace(mat)) / mat.shape[0], COV_RIDGE_MIN)


def fit_gaussian_stats(extractor: FeatureExtractor, support_x: np.ndarray,
                       support_y: np.ndarray) -> GaussianStats:
    """Class means and one pooled covariance per tap point (each hidden
    layer output plus the final embedding), ridge-regularized for inversion."""
    y = np.asarray(support_y, dtype=int)
    n_way = int(y.max()) + 1
    layers = []
    for feats in extractor.layer_outputs_np(support_x):
        means = np.stack([feats[y == c].mean(axis=0) for c in range(n_way)])
        centered = feats - means[y]
        cov = centered.T @ centered / feats.shape[0]
        eps = _ridge(cov)
        reg = cov + eps * np.eye(cov.shape[0])
        sign, logdet = np.linalg.slogdet(reg)
        layers.append(LayerGaussian(means=means, cov=cov, eps_cov=eps,
                                    precision=np.linalg.inv(reg), logdet=float(logdet)))
    return GaussianStats(layers=layers)


def score_dm_batch(stats: GaussianStats, extractor: FeatureExtractor,
                   x: np.ndarray) -> np.ndarray:
    """DM scores for a query batch: per layer, the best class-conditional
    Gaussian log-density; then the best layer per query."""
    feats_per_layer = extractor.layer_outputs_np(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    best = None
    for feats, layer in zip(feats_per_layer, stats.layers):
        d = feats.shape[1]
        delta = feats[:, None, :] - layer.means[None, :, :]  # (q, n_classes, d)
        maha = np.einsum("qcd,de,qce->qc", delta, layer.precision, delta)
        log_density = -0.5 * (d * np.log(2.0 * np.pi) + layer.logdet + maha)
        layer_best = log_density.max(axis=1)
        best = layer_best if best is None else np.maximum(best, layer_best)
    return best


def score_dm(stats: GaussianStats, extractor: FeatureExtractor, x: np.ndarray) -> float:
    """max over layers of max over classes of the Gaussian log-density with
    the layer's shared covariance. Class prediction still comes from the
    adapted classifier, not from these densities."""
    return float(score_dm_batch(stats, extractor, np.atleast_2d(x))[0])


@dataclass
class PnmlStats:
    precision: np.ndarray  # (X^T X + eps I)^-1 over support embeddings
    eps: float


def fit_pnml_stats(extractor: FeatureExtractor, support_x: np.ndarray) -> PnmlStats:
    feats = extractor.features(support_x)
    gram = feats.T @ feats
    eps = _ridge(gram)
    return PnmlStats(precision=np.linalg.inv(gram + eps * np.eye(gram.shape[0])), eps=eps)


def score_pnml_batch(probs: np.ndarray, feats: np.ndarray, stats: PnmlStats) -> np.ndarray:
    p = np.clip(np.atleast_2d(np.asarray(probs, dtype=np.float64)), EPS_LOG, 1.0)
    f = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    r = np.einsum("qd,de,qe->q", f, stats.precision, f)
    regret = np.log(np.sum(p / (p + p ** r[:, None] * (1.0 - p)), axis=1))
    return 1.0 - regret


def score_pnml(probs: np.ndarray, x_feat: np.ndarray, stats: PnmlStats) -> float:
    """1 minus the single-layer regret
    log sum_i p_i / (p_i + p_i^r (1 - p_i)) with r = x^T (X^T X + eps I)^-1 x."""
    return float(score_pnml_batch(np.atleast_2d(probs), np.atleast_2d(x_feat), stats)[0])
