"""Episodic meta-training of the hypernetwork (optionally fine-tuning the
extractor), with the mixing augmentations and the two outlier-exposure
style objectives selected by method token."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigError
from .mixing import MixConfig, ooemix_augment, parammix_augment
from .nets import FeatureExtractor, HyperNetwork
from .synthdata import (STREAM_TRAIN, Dataset, rng_stream, sample_episode,
                        uniform_label)

# Training-time method tokens; `protonet` is a valid CLI token but is an
# evaluation-only head over the pretrained extractor, so metatrain rejects it.
TRAIN_METHODS = ("plain", "parammix", "ooemix", "hypermix", "oe", "oec")


@dataclass
class TrainConfig:
    method: str = "plain"
    epochs: int = 50
    batches_per_epoch: int = 50
    episodes_per_batch: int = 4
    n_way: int = 5
    k_shot: int = 5
    q_ind: int = 10
    lr: float = 0.001
    momentum: float = 0.0
    weight_decay: float = 0.0
    finetune_extractor: bool = True
    seed: int = 0


@dataclass
class MetaTrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    parammix_same_class_pairs: int = 0
    parammix_pairs: int = 0


def oe_loss(ind_probs: dc.DiffValue, ind_targets: np.ndarray,
            ooe_probs: dc.DiffValue, beta: float) -> dc.DiffValue:
    """CCE on IND queries plus beta times CCE of OOE queries against the
    uniform label."""
    if beta < 0:
        raise ConfigError(f"beta_oe must be >= 0, got {beta}")
    n_way = ind_probs.data.shape[1]
    l_ind = dc.cce_loss(ind_probs, ind_targets)
    uniform = np.tile(uniform_label(n_way), (ooe_probs.data.shape[0], 1))
    return dc.add(l_ind, dc.scale(dc.cce_loss(ooe_probs, uniform), beta))


def oec_loss(ind_scores: dc.DiffValue, ooe_scores: dc.DiffValue) -> dc.DiffValue:
    """Binary IND-vs-OOE objective over the per-query scores
    s = max_c log p(Y=c|x): -sum log sigmoid(s_ind) - sum log(1 - sigmoid(s_ooe))."""
    si = dc.sigmoid(ind_scores)
    so = dc.sigmoid(ooe_scores)
    ones = dc.DiffValue(np.ones_like(so.data))
    l_ind = dc.scale(dc.sum_all(dc.log(si)), -1.0)
    l_ooe = dc.scale(dc.sum_all(dc.log(dc.add(ones, dc.scale(so, -1.0)))), -1.0)
    return dc.add(l_ind, l_ooe)


def max_log_prob(probs: dc.DiffValue) -> dc.DiffValue:
    """Per-row max_c log p_c as a graph node; safe because max_c p >= 1/N."""
    return dc.log(dc.rowmax(probs))


def _classifier_nodes(hyper: HyperNetwork, extractor: FeatureExtractor,
                      xs: np.ndarray, soft_labels: np.ndarray):
    """Graph version of the weighted code aggregation; the normalized label
    matrix is a constant, so gradient flows through the codes only."""
    mass = soft_labels.sum(axis=0)
    if np.any(mass <= 0):
        raise ConfigError("a class received zero label mass during training")
    agg = np.ascontiguousarray(soft_labels.T) / mass[:, None]
    codes = hyper.forward_graph(extractor.forward_graph(dc.DiffValue(xs)))
    wb = dc.matmul(dc.DiffValue(agg), codes)
    d_feat = hyper.d_feat
    w = dc.slice_cols(wb, 0, d_feat)
    b_row = dc.transpose(dc.slice_cols(wb, d_feat, d_feat + 1))
    return w, b_row


def _query_probs(extractor, w, b_row, xq: np.ndarray) -> dc.DiffValue:
    feats = extractor.forward_graph(dc.DiffValue(xq))
    return dc.softmax_rows(dc.add_bias(dc.matmul(feats, dc.transpose(w)), b_row))


def metatrain(extractor: FeatureExtractor, hyper: HyperNetwork, dataset: Dataset,
              cfg: TrainConfig, mix: MixConfig | None = None) -> MetaTrainResult:
    """Train in place over episodic batches; one optimizer step per batch.

    Method semantics: `parammix` mixes the support set before aggregation,
    `ooemix` appends mixed soft-label queries, `hypermix` does both, `oe`
    and `oec` append pure OOE queries under their respective objectives.
    """
    if cfg.method not in TRAIN_METHODS:
        raise ConfigError(
            f"unknown training method {cfg.method!r}; valid: {', '.join(TRAIN_METHODS)} "
            "(protonet is evaluation-only)")
    mix = mix if mix is not None else MixConfig()
    use_parammix = cfg.method in ("parammix", "hypermix")
    use_ooemix = cfg.method in ("ooemix", "hypermix")
    needs_pool = use_ooemix or cfg.method in ("oe", "oec")
    base_classes = len(dataset.split_classes("base"))
    if needs_pool and base_classes <= cfg.n_way:
        raise ConfigError(
            f"method {cfg.method!r} needs out-of-episode classes at meta-train; "
            f"base split has {base_classes} classes for {cfg.n_way}-way episodes")

    n_param_mix = mix.n_param_mix if mix.n_param_mix is not None else cfg.n_way * cfg.k_shot
    n_ooe = mix.n_ooe_mix if mix.n_ooe_mix is not None else cfg.q_ind

    params = dc.ParamSet()
    for name, p in hyper.params.items():
        params.add(name, p)
    if cfg.finetune_extractor:
        for name, p in extractor.params.items():
            params.add(name, p)
    opt = dc.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    res = MetaTrainResult()
    n_way = cfg.n_way
    eye = np.eye(n_way)
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for b in range(cfg.batches_per_epoch):
            episode_losses = []
            for e in range(cfg.episodes_per_batch):
                ep_rng = rng_stream(cfg.seed, STREAM_TRAIN, 1, epoch, b, e)
                mix_rng = rng_stream(cfg.seed, STREAM_TRAIN, 2, epoch, b, e)
                ep = sample_episode(dataset, "base", n_way, cfg.k_shot, cfg.q_ind, 0, ep_rng)

                if use_parammix and n_param_mix > 0:
                    stats = {}
                    xs, soft = parammix_augment(ep.support_x, ep.support_y, n_way,
                                                n_param_mix, (mix.a_pm, mix.b_pm),
                                                mix_rng, stats)
                    res.parammix_same_class_pairs += stats["same_class_pairs"]
                    res.parammix_pairs += stats["n_mixed"]
                else:
                    xs, soft = ep.support_x, eye[ep.support_y]
                w, b_row = _classifier_nodes(hyper, extractor, xs, soft)

                xq, tq = ep.query_x, eye[ep.query_truth]
                if use_ooemix and n_ooe > 0:
                    mx, msoft = ooemix_augment(ep, n_ooe, (mix.a_om, mix.b_om), mix_rng)
                    xq = np.concatenate([xq, mx], axis=0)
                    tq = np.concatenate([tq, msoft], axis=0)
                probs = _query_probs(extractor, w, b_row, xq)

                if cfg.method == "oe":
                    ooe_x = ep.ooe_pool.draw(mix_rng, n_ooe)
                    ooe_probs = _query_probs(extractor, w, b_row, ooe_x)
                    loss = oe_loss(probs, tq, ooe_probs, mix.beta_oe)
                elif cfg.method == "oec":
                    ooe_x = ep.ooe_pool.draw(mix_rng, n_ooe)
                    ooe_probs = _query_probs(extractor, w, b_row, ooe_x)
                    loss = dc.add(dc.cce_loss(probs, tq),
                                  oec_loss(max_log_prob(probs), max_log_prob(ooe_probs)))
                else:
                    loss = dc.cce_loss(probs, tq)
                episode_losses.append(loss)

            batch_loss = episode_losses[0]
            for l in episode_losses[1:]:
                batch_loss = dc.add(batch_loss, l)
            batch_loss = dc.scale(batch_loss, 1.0 / len(episode_losses))

            hyper.params.zero_grads()
            extractor.params.zero_grads()
            batch_loss.backward()
            opt.step()
            res.batch_losses.append(float(batch_loss.data))
            epoch_loss += float(batch_loss.data)
        res.epoch_losses.append(epoch_loss / cfg.batches_per_epoch)
    return res
