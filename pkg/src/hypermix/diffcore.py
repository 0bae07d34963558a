"""Minimal reverse-mode autodiff over dense float64 arrays (rank <= 2).

Graphs are rebuilt per forward pass (define-by-run). A backward pass first
computes the whole gradient map for the pass, then accumulates it into each
node's persistent ``grad`` slot, so calling ``backward`` twice without
zeroing doubles every gradient exactly.

Everything is float64; reproducibility outranks speed at this scale.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

# Floor applied inside cce_loss and score logs; prevents NaN from a
# degenerate softmax without visibly biasing desk-scale losses.
EPS_LOG = 1e-12


class DiffValue:
    """One node of the computation graph: a value plus its gradient slot."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"rank {arr.ndim} > 2 not supported (shape {arr.shape})")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self._parents = tuple(_parents)
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """Accumulate d(self)/d(node) into every node's grad, seeding with ones."""
        _run_backward(self, targets=None)

    def __repr__(self):
        return f"DiffValue(shape={self.data.shape}, leaf={self._vjp is None})"


def _topo_order(root):
    """Post-order over the graph; each node appears exactly once."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root, targets=None):
    order = _topo_order(root)
    pass_grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pass_grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            acc = pass_grads.get(id(parent))
            if acc is None:
                pass_grads[id(parent)] = pg.astype(np.float64, copy=True)
            else:
                acc += pg
    if targets is None:
        for node in order:
            g = pass_grads.get(id(node))
            if g is not None:
                node.grad = node.grad + g
    else:
        wanted = {id(t) for t in targets}
        for node in order:
            if id(node) in wanted and id(node) in pass_grads:
                node.grad = node.grad + pass_grads[id(node)]


class ParamSet:
    """Named collection of trainable leaf DiffValues."""

    def __init__(self):
        self._params: dict[str, DiffValue] = {}

    def add(self, name: str, value: DiffValue) -> DiffValue:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if any(p is value for p in self._params.values()):
            raise ConfigError(f"leaf registered twice (as {name!r})")
        self._params[name] = value
        return value

    def merged_with(self, other: "ParamSet") -> "ParamSet":
        out = ParamSet()
        for name, p in list(self._params.items()) + list(other._params.items()):
            out.add(name, p)
        return out

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Frozen snapshot: plain arrays, no graph; safe to share read-only."""
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.copy()


# ---------------------------------------------------------------------------
# primitives


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = a.data @ b.data
    return DiffValue(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    _require_same_shape(a, b, "add")
    return DiffValue(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    _require_same_shape(a, b, "mul")
    return DiffValue(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def relu(a: DiffValue) -> DiffValue:
    mask = a.data > 0  # derivative at exactly 0 is 0
    return DiffValue(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: DiffValue) -> DiffValue:
    out = np.exp(a.data)
    return DiffValue(out, (a,), lambda g: (g * out,))


def log(a: DiffValue) -> DiffValue:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive entry")
    return DiffValue(np.log(a.data), (a,), lambda g: (g / a.data,))


def scale(a: DiffValue, c: float) -> DiffValue:
    c = float(c)
    return DiffValue(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: DiffValue) -> DiffValue:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return DiffValue(out, (a,), lambda g: (g * out * (1.0 - out),))


def add_bias(a: DiffValue, b: DiffValue) -> DiffValue:
    """Row-broadcast add: (m, n) + (1, n)."""
    if a.data.ndim != 2 or b.data.shape != (1, a.data.shape[1]):
        raise DimensionError(f"add_bias: shapes {a.data.shape} and {b.data.shape}")
    return DiffValue(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def transpose(a: DiffValue) -> DiffValue:
    return DiffValue(a.data.T, (a,), lambda g: (g.T,))


def slice_cols(a: DiffValue, j0: int, j1: int) -> DiffValue:
    if a.data.ndim != 2 or not (0 <= j0 < j1 <= a.data.shape[1]):
        raise DimensionError(f"slice_cols: [{j0}:{j1}] on shape {a.data.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        return (full,)

    return DiffValue(a.data[:, j0:j1], (a,), vjp)


def rowmax(a: DiffValue) -> DiffValue:
    """Per-row maximum, (m, n) -> (m, 1); ties resolve to the lowest index."""
    if a.data.ndim != 2:
        raise DimensionError(f"rowmax: need rank 2, got shape {a.data.shape}")
    idx = np.argmax(a.data, axis=1)
    out = a.data[np.arange(a.data.shape[0]), idx][:, None]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[np.arange(a.data.shape[0]), idx] = g[:, 0]
        return (full,)

    return DiffValue(out, (a,), vjp)


def sum_all(a: DiffValue) -> DiffValue:
    return DiffValue(np.float64(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


def softmax_rows(logits: DiffValue) -> DiffValue:
    """Row-wise softmax, stabilized by max subtraction."""
    if not np.all(np.isfinite(logits.data)):
        raise DomainError("softmax_rows: non-finite entry")
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_rows: need rank 2, got shape {logits.data.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return DiffValue(p, (logits,), vjp)


def cce_loss(probs: DiffValue, soft_targets: np.ndarray) -> DiffValue:
    """Mean over rows of -sum_c y_c log p_c, with p clipped to [eps, 1-eps].

    Targets are constants: each row must be a distribution. Gradient flows
    to probs only (zero where the clip is active).
    """
    y = np.asarray(soft_targets, dtype=np.float64)
    if y.shape != probs.data.shape:
        raise DimensionError(f"cce_loss: probs {probs.data.shape} vs targets {y.shape}")
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-6):
        raise DomainError("cce_loss: target rows must be distributions")
    m = y.shape[0]
    p = np.clip(probs.data, EPS_LOG, 1.0 - EPS_LOG)
    loss = -(y * np.log(p)).sum() / m
    active = (probs.data > EPS_LOG) & (probs.data < 1.0 - EPS_LOG)

    def vjp(g):
        return ((-y / p) * active * (float(g) / m),)

    return DiffValue(np.float64(loss), (probs,), vjp)


def input_gradient(model_fn, x: np.ndarray, loss_selector) -> np.ndarray:
    """Gradient of a scalar w.r.t. the input, with parameters left untouched.

    ``model_fn`` maps a leaf DiffValue to the model output node and
    ``loss_selector`` reduces that output to a scalar node. Only the input
    leaf receives gradient; anything else in the graph is ignored.
    """
    x_leaf = DiffValue(np.asarray(x, dtype=np.float64))
    loss = loss_selector(model_fn(x_leaf))
    if loss.data.size != 1:
        raise DimensionError(f"loss_selector must produce a scalar, got shape {loss.data.shape}")
    _run_backward(loss, targets=(x_leaf,))
    return x_leaf.grad.copy()


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with Nesterov momentum and decoupled L2 weight decay.

    Velocity buffers are zero-initialized and persist across step() calls.
    """

    def __init__(self, params: ParamSet, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, nesterov: bool = True):
        if lr < 0:
            raise ConfigError(f"negative learning rate {lr}")
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.nesterov = nesterov
        self._velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if self.momentum != 0.0:
                v = self._velocity[name]
                v *= self.momentum
                v += g
                update = g + self.momentum * v if self.nesterov else v
            else:
                update = g
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data


# ---------------------------------------------------------------------------
# checkpoint format: header line "hypermix-ckpt v1", then one line per tensor
# "name rank dims... values..." with 17 significant digits so a reload
# reproduces the doubles exactly.

CKPT_HEADER = "hypermix-ckpt v1"


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    lines = [CKPT_HEADER]
    for name, arr in tensors.items():
        if " " in name or "\n" in name:
            raise ConfigError(f"tensor name {name!r} may not contain whitespace")
        a = np.asarray(arr, dtype=np.float64)
        dims = " ".join(str(d) for d in a.shape)
        vals = " ".join(f"{v:.17g}" for v in a.reshape(-1))
        lines.append(f"{name} {a.ndim} {dims} {vals}".rstrip())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CKPT_HEADER:
            raise ConfigError(f"{path}: bad checkpoint header {header!r}")
        tensors = {}
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            name, rank = parts[0], int(parts[1])
            dims = tuple(int(d) for d in parts[2:2 + rank])
            vals = np.array([float(v) for v in parts[2 + rank:]], dtype=np.float64)
            tensors[name] = vals.reshape(dims)
    return tensors
