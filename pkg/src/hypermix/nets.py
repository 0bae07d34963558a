"""Feature extractor, hypernetwork, generated linear classifier, and the
prototype-distance comparison head, plus supervised pretraining of the
extractor on the base classes.

Each net keeps its weights as live DiffValue leaves for training; inference
paths (`*_np`) read the same arrays without building a graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import AggregationError, ConfigError, DimensionError
from .synthdata import STREAM_PRETRAIN, Dataset, rng_stream


def softmax_np(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis of a 1-D or 2-D array."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Mlp:
    """Fully connected net: relu on hidden layers, linear output."""

    def __init__(self, layer_sizes, rng: np.random.Generator, prefix: str = "",
                 out_scale: float = 1.0):
        if len(layer_sizes) < 2:
            raise ConfigError(f"need at least input and output sizes, got {layer_sizes}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.prefix = prefix
        self.params = dc.ParamSet()
        self._layers = []
        n_layers = len(self.layer_sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            std = np.sqrt(2.0 / fan_in) * (out_scale if i == n_layers - 1 else 1.0)
            w = dc.DiffValue(rng.normal(0.0, std, size=(fan_in, fan_out)))
            b = dc.DiffValue(np.zeros((1, fan_out)))
            self.params.add(f"{prefix}w{i}", w)
            self.params.add(f"{prefix}b{i}", b)
            self._layers.append((w, b))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward_graph(self, x: dc.DiffValue) -> dc.DiffValue:
        h = x
        for i, (w, b) in enumerate(self._layers):
            h = dc.add_bias(dc.matmul(h, w), b)
            if i < len(self._layers) - 1:
                h = dc.relu(h)
        return h

    def frozen_forward_graph(self, x: dc.DiffValue) -> dc.DiffValue:
        """Same forward, but over fresh constant leaves so the live
        parameters can never receive gradient from this graph."""
        h = x
        for i, (w, b) in enumerate(self._layers):
            h = dc.add_bias(dc.matmul(h, dc.DiffValue(w.data.copy())), dc.DiffValue(b.data.copy()))
            if i < len(self._layers) - 1:
                h = dc.relu(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        for i, (w, b) in enumerate(self._layers):
            h = h @ w.data + b.data
            if i < len(self._layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def layer_outputs_np(self, x: np.ndarray) -> list[np.ndarray]:
        """Post-activation output of every layer (hidden relus, then final)."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        outs = []
        for i, (w, b) in enumerate(self._layers):
            h = h @ w.data + b.data
            if i < len(self._layers) - 1:
                h = np.maximum(h, 0.0)
            outs.append(h)
        return outs


class FeatureExtractor(Mlp):
    """Embedding net F; desk-scale stand-in for a deep convolutional encoder."""

    def __init__(self, input_dim: int, hidden=(64, 64), d_feat: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
        super().__init__([input_dim, *hidden, d_feat], rng, prefix="f.")

    @property
    def d_feat(self) -> int:
        return self.out_dim

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.forward_np(x)


class HyperNetwork(Mlp):
    """Maps a support embedding to one weight code of length d_feat + 1;
    the first d_feat entries become a classifier row, the last the bias.

    The output layer starts near zero so a fresh hypernetwork yields a
    near-uniform classifier (first-batch loss close to log N)."""

    def __init__(self, d_feat: int, hidden=(256, 256), rng: np.random.Generator | None = None,
                 out_scale: float = 0.01):
        rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
        super().__init__([d_feat, *hidden, d_feat + 1], rng, prefix="h.", out_scale=out_scale)
        self.d_feat = d_feat

    def codes_np(self, feats: np.ndarray) -> np.ndarray:
        return self.forward_np(feats)


@dataclass
class ClassifierParams:
    """Generated linear classifier: W is (N, d_feat), b is (N,)."""

    W: np.ndarray
    b: np.ndarray

    @property
    def n_way(self) -> int:
        return self.W.shape[0]

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return np.atleast_2d(feats) @ self.W.T + self.b


def aggregate_codes(codes: np.ndarray, soft_labels: np.ndarray) -> np.ndarray:
    """Soft-label weighted mean of weight codes, one output row per class.

    Row n is sum_s y_n^(s) c_s / sum_s y_n^(s); with one-hot labels this is
    the per-class mean. Rows are summed in a canonical lexicographic order,
    so the result is bitwise independent of support ordering, and both
    aggregation paths share this kernel so they agree bitwise too.
    """
    soft = np.asarray(soft_labels, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if soft.ndim != 2 or soft.shape[0] != codes.shape[0]:
        raise DimensionError(f"labels {soft.shape} vs codes {codes.shape}")
    key = np.concatenate([codes, soft], axis=1)
    order = np.lexsort(key.T[::-1])
    codes, soft = codes[order], soft[order]
    mass = soft.sum(axis=0)
    dead = np.where(mass <= 0)[0]
    if len(dead):
        raise AggregationError(f"class {int(dead[0])} has zero total label mass")
    return (soft.T @ codes) / mass[:, None]


def split_codes(agg: np.ndarray) -> ClassifierParams:
    return ClassifierParams(W=agg[:, :-1], b=agg[:, -1])


def generate_classifier(hyper: HyperNetwork, extractor: FeatureExtractor,
                        support_x: np.ndarray, support_y: np.ndarray,
                        n_way: int) -> ClassifierParams:
    """Per-class mean of sample-specific weight codes from the support set."""
    y = np.asarray(support_y, dtype=int)
    soft = np.zeros((len(y), n_way))
    soft[np.arange(len(y)), y] = 1.0
    codes = hyper.codes_np(extractor.features(support_x))
    return split_codes(aggregate_codes(codes, soft))


def classify(cparams: ClassifierParams, extractor: FeatureExtractor, x: np.ndarray) -> np.ndarray:
    """softmax(W f(x) + b); returns a single probability row for vector input."""
    x = np.asarray(x, dtype=np.float64)
    probs = softmax_np(cparams.logits(extractor.features(x)))
    return probs[0] if x.ndim == 1 else probs


def protonet_classify(extractor: FeatureExtractor, support_x: np.ndarray,
                      support_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """softmax over negative squared Euclidean distance to class prototypes."""
    feats = extractor.features(support_x)
    y = np.asarray(support_y, dtype=int)
    n_way = int(y.max()) + 1
    protos = np.stack([feats[y == c].mean(axis=0) for c in range(n_way)])
    x = np.asarray(x, dtype=np.float64)
    fx = extractor.features(x)
    d2 = ((fx[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    probs = softmax_np(-d2)
    return probs[0] if x.ndim == 1 else probs


def pretrain_extractor(dataset: Dataset, epochs: int = 50, batch_size: int = 64,
                       lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 5e-4,
                       decay_at=(0.6, 0.8), decay_factor: float = 0.2,
                       hidden=(64, 64), d_feat: int = 32, seed: int = 0):
    """Supervised pretraining of F on the base classes with a temporary
    |C_b|-way linear head, discarded afterwards. Returns (extractor,
    per-epoch mean losses)."""
    init_rng = rng_stream(seed, STREAM_PRETRAIN, 0)
    extractor = FeatureExtractor(dataset.input_dim, hidden=hidden, d_feat=d_feat, rng=init_rng)
    base = dataset.split_classes("base")
    head = Mlp([d_feat, len(base)], init_rng, prefix="head.")

    X = dataset.samples[base].reshape(-1, dataset.input_dim)
    labels = np.repeat(np.arange(len(base)), dataset.samples_per_class)
    targets = np.zeros((len(labels), len(base)))
    targets[np.arange(len(labels)), labels] = 1.0

    params = extractor.params.merged_with(head.params)
    opt = dc.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    decay_epochs = {int(f * epochs) for f in decay_at}
    order_rng = rng_stream(seed, STREAM_PRETRAIN, 1)

    losses = []
    for epoch in range(epochs):
        if epoch in decay_epochs and epoch > 0:
            opt.lr *= decay_factor
        perm = order_rng.permutation(len(X))
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, len(X), batch_size):
            idx = perm[lo:lo + batch_size]
            xb = dc.DiffValue(X[idx])
            probs = dc.softmax_rows(head.forward_graph(extractor.forward_graph(xb)))
            loss = dc.cce_loss(probs, targets[idx])
            params.zero_grads()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data)
            n_batches += 1
        losses.append(epoch_loss / n_batches)
    return extractor, losses


# ---------------------------------------------------------------------------
# checkpoints: layer sizes ride along as an "arch" tensor so a file is
# self-describing.


def save_net(path, net: Mlp):
    tensors = {"arch": np.array(net.layer_sizes, dtype=np.float64)}
    tensors.update(net.params.to_arrays())
    dc.save_checkpoint(path, tensors)


def _load_arch(path):
    tensors = dc.load_checkpoint(path)
    arch = [int(v) for v in tensors.pop("arch")]
    return arch, tensors


def load_extractor(path) -> FeatureExtractor:
    arch, tensors = _load_arch(path)
    net = FeatureExtractor(arch[0], hidden=tuple(arch[1:-1]), d_feat=arch[-1])
    net.params.load_arrays(tensors)
    return net


def load_hypernetwork(path) -> HyperNetwork:
    arch, tensors = _load_arch(path)
    net = HyperNetwork(arch[0], hidden=tuple(arch[1:-1]))
    if net.out_dim != arch[-1]:
        raise ConfigError(f"{path}: hypernetwork output dim {arch[-1]} != d_feat+1")
    net.params.load_arrays(tensors)
    return net
