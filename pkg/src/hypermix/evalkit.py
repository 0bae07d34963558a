"""Episode-level evaluation: exact AUROC / FPR@TPR metrics, the meta-test
harness over all scoring methods, and the covariance-rank diagnostic.

The reported half-width is the 95% normal-approximation confidence interval
1.96 * std(ddof=1) / sqrt(n) over episode-level metrics; the convention is
fixed here and echoed in output headers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MetricError
from .nets import (FeatureExtractor, HyperNetwork, generate_classifier,
                   protonet_classify)
from .oodscore import (AdaptedModel, ScoreRecord, default_odin_temperature,
                       fit_gaussian_stats, fit_pnml_stats, score_dm_batch,
                       score_entropy, score_odin_batch, score_pnml_batch)
from .synthdata import (OOD_TRUTH, STREAM_EVAL, Dataset,
                        default_noise_pairing, inject_support_noise,
                        mix_ood_testset, rng_stream, sample_episode)

SCORE_METHODS = ("msp", "entropy", "odin", "dm", "pnml", "protonet")

CI_Z = 1.96


def auroc(ind_scores, ood_scores) -> float:
    """Probability a random IND score exceeds a random OOD score, ties
    counted one half; computed as the exact rank statistic, no binning."""
    ind = np.asarray(ind_scores, dtype=np.float64)
    ood = np.asarray(ood_scores, dtype=np.float64)
    if len(ind) == 0 or len(ood) == 0:
        raise MetricError("auroc needs non-empty IND and OOD score lists")
    scores = np.concatenate([ind, ood])
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    n = len(ind)
    u = ranks[:n].sum() - 0.5 * n * (n + 1)
    return u / (n * len(ood))


def fpr_at_tpr(ind_scores, ood_scores, tpr_target: float = 0.9) -> float:
    """False-positive rate at the largest threshold keeping IND recall at or
    above the target; both comparisons are inclusive (>=)."""
    ind = np.asarray(ind_scores, dtype=np.float64)
    ood = np.asarray(ood_scores, dtype=np.float64)
    if len(ind) == 0 or len(ood) == 0:
        raise MetricError("fpr_at_tpr needs non-empty IND and OOD score lists")
    if not 0.0 < tpr_target <= 1.0:
        raise MetricError(f"tpr_target {tpr_target} outside (0, 1]")
    n = len(ind)
    # smallest k with k/n >= target, judged on the float fractions themselves
    k = max(1, min(n, int(np.ceil(tpr_target * n))))
    while k > 1 and (k - 1) / n >= tpr_target:
        k -= 1
    while k < n and k / n < tpr_target:
        k += 1
    tau = np.sort(ind)[::-1][k - 1]  # k-th largest IND score
    return float(np.mean(ood >= tau))


def ind_accuracy(records: list[ScoreRecord]) -> float:
    ind = [r for r in records if r.truth != OOD_TRUTH]
    if not ind:
        raise MetricError("no IND-truth queries to score accuracy on")
    return float(np.mean([r.predicted_class == r.truth for r in ind]))


@dataclass
class MetricSummary:
    mean: float
    half_width: float


@dataclass
class EvalReport:
    method: str
    n_episodes: int
    seed: int
    ind_acc: MetricSummary
    auroc: MetricSummary
    fpr90: MetricSummary
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_episodes": self.n_episodes,
            "seed": self.seed,
            "ind_acc": {"mean": self.ind_acc.mean, "hw": self.ind_acc.half_width},
            "auroc": {"mean": self.auroc.mean, "hw": self.auroc.half_width},
            "fpr90": {"mean": self.fpr90.mean, "hw": self.fpr90.half_width},
            "config": self.config,
        }


def _summary(values) -> MetricSummary:
    v = np.asarray(values, dtype=np.float64)
    hw = 0.0 if len(v) < 2 else float(CI_Z * np.std(v, ddof=1) / np.sqrt(len(v)))
    return MetricSummary(mean=float(v.mean()), half_width=hw)


def _episode_scores(method, model, episode, extractor, hyper, odin_t, odin_eps):
    """Scores plus class predictions for every query under one method."""
    if method == "protonet":
        pprobs = protonet_classify(extractor, episode.support_x, episode.support_y,
                                   episode.query_x)
        return pprobs.max(axis=1), np.argmax(pprobs, axis=1)
    probs = model.probs(episode.query_x)
    preds = np.argmax(probs, axis=1)
    if method == "msp":
        scores = probs.max(axis=1)
    elif method == "entropy":
        scores = np.array([score_entropy(p) for p in probs])
    elif method == "odin":
        scores = score_odin_batch(model, episode.query_x, odin_t, odin_eps)
    elif method == "dm":
        stats = fit_gaussian_stats(extractor, episode.support_x, episode.support_y)
        scores = score_dm_batch(stats, extractor, episode.query_x)
    elif method == "pnml":
        stats = fit_pnml_stats(extractor, episode.support_x)
        scores = score_pnml_batch(probs, extractor.features(episode.query_x), stats)
    else:
        raise ConfigError(f"unknown scoring method {method!r}; valid: {', '.join(SCORE_METHODS)}")
    return scores, preds


def evaluate(extractor: FeatureExtractor, hyper: HyperNetwork | None, dataset: Dataset,
             methods, n_episodes: int = 400, n_way: int = 5, k_shot: int = 5,
             q_ind: int = 10, q_ood: int = 10, noise_frac: float = 0.0,
             seed: int = 0, split: str = "novel", odin_t: float | None = None,
             odin_eps: float = 0.002, ood_mix_mode: str | None = None,
             ood_mix_beta: tuple[float, float] = (20.0, 20.0),
             config_snapshot: dict | None = None):
    """Meta-test protocol: per episode, sample support and queries, optionally
    inject support noise, adapt the classifier from the (possibly noisy)
    support, score every query under every method, then aggregate episode
    metrics. Returns (reports, records); records carry an `episode` column.
    """
    methods = list(methods)
    if not methods:
        raise ConfigError("empty method list")
    for m in methods:
        if m not in SCORE_METHODS:
            raise ConfigError(f"unknown scoring method {m!r}; valid: {', '.join(SCORE_METHODS)}")
    if hyper is None and any(m != "protonet" for m in methods):
        raise ConfigError("all methods except protonet need a trained hypernetwork")
    odin_t = odin_t if odin_t is not None else default_odin_temperature(k_shot)

    per_method = {m: {"acc": [], "auroc": [], "fpr": []} for m in methods}
    records: list[tuple[int, ScoreRecord]] = []
    for i in range(n_episodes):
        ep_rng = rng_stream(seed, STREAM_EVAL, i, 0)
        episode = sample_episode(dataset, split, n_way, k_shot, q_ind, q_ood, ep_rng)
        if ood_mix_mode is not None:
            mix_rng = rng_stream(seed, STREAM_EVAL, i, 2)
            episode = mix_ood_testset(episode, ood_mix_mode, ood_mix_beta, mix_rng)
        if noise_frac > 0:
            noise_rng = rng_stream(seed, STREAM_EVAL, i, 1)
            pairing = default_noise_pairing(episode, noise_rng)
            episode = inject_support_noise(episode, noise_frac, pairing, noise_rng)

        model = None
        if hyper is not None:
            cparams = generate_classifier(hyper, extractor, episode.support_x,
                                          episode.support_y, n_way)
            model = AdaptedModel(extractor, cparams)

        ind_mask = episode.ind_query_mask()
        for m in methods:
            scores, preds = _episode_scores(m, model, episode, extractor, hyper,
                                            odin_t, odin_eps)
            ep_records = [
                ScoreRecord(query_id=q, method=m, score=float(scores[q]),
                            predicted_class=int(preds[q]), truth=int(episode.query_truth[q]))
                for q in range(len(scores))
            ]
            records.extend((i, r) for r in ep_records)
            per_method[m]["acc"].append(ind_accuracy(ep_records))
            per_method[m]["auroc"].append(auroc(scores[ind_mask], scores[~ind_mask]))
            per_method[m]["fpr"].append(fpr_at_tpr(scores[ind_mask], scores[~ind_mask]))

    reports = [
        EvalReport(method=m, n_episodes=n_episodes, seed=seed,
                   ind_acc=_summary(per_method[m]["acc"]),
                   auroc=_summary(per_method[m]["auroc"]),
                   fpr90=_summary(per_method[m]["fpr"]),
                   config=dict(config_snapshot or {}))
        for m in methods
    ]
    return reports, records


def covariance_rank_diagnostic(extractor: FeatureExtractor, dataset: Dataset,
                               shots_list, n_way: int = 5, split: str = "novel",
                               seed: int = 0):
    """For each shot count, fit the pooled embedding covariance on one
    sampled support set and report its singular values, sorted descending.
    Returns a list of (shots, singular_values) pairs, plot-ready."""
    out = []
    for idx, k in enumerate(shots_list):
        rng = rng_stream(seed, STREAM_EVAL, 10_000 + idx)
        episode = sample_episode(dataset, split, n_way, int(k), 0, 0, rng)
        stats = fit_gaussian_stats(extractor, episode.support_x, episode.support_y)
        sv = np.linalg.svd(stats.layers[-1].cov, compute_uv=False)
        out.append((int(k), sv))
    return out
