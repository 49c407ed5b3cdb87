"""The three parametric networks: classifier MLP, instance-weight net, splitter.

Parameters live in a ParamSet: one flat float64 vector with named, shaped
views aliasing it, plus the momentum velocity buffer. Forward passes come in
two flavors: taped (for gradients) and plain numpy (for evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class ModelError(ValueError):
    pass


class ParamSet:
    """Flat parameter vector with aliasing structured views and velocity."""

    def __init__(self, segments):
        # segments: list of (name, shape)
        self.names = [name for name, _ in segments]
        self.shapes = [tuple(shape) for _, shape in segments]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.flat = np.zeros(self.offsets[-1])
        self.velocity = np.zeros_like(self.flat)

    def views(self):
        return [self.flat[a:b].reshape(s)
                for a, b, s in zip(self.offsets[:-1], self.offsets[1:], self.shapes)]

    def tensors(self):
        """Leaf tensors aliasing the flat storage, ready for taping."""
        return [ad.Tensor(v, requires_grad=True) for v in self.views()]

    def copy(self):
        out = ParamSet(list(zip(self.names, self.shapes)))
        out.flat[:] = self.flat
        out.velocity[:] = self.velocity
        return out

    def grads_flat(self, tensors):
        """Gather .grad from `tensors` (as produced by .tensors()) into flat layout."""
        flat = np.zeros_like(self.flat)
        for a, b, t in zip(self.offsets[:-1], self.offsets[1:], tensors):
            if t.grad is not None:
                flat[a:b] = t.grad.ravel()
        return flat

    @property
    def size(self):
        return self.flat.size


def sgd_step(p, grads, lr, momentum=0.0):
    """In-place SGD with momentum: v <- momentum*v + g; p <- p - lr*v."""
    g = np.asarray(grads, dtype=np.float64).ravel()
    if g.shape != p.flat.shape:
        raise ModelError(f"gradient size {g.size} does not match parameter size {p.size}")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))[0]
        seg = np.searchsorted(p.offsets, bad, side="right") - 1
        raise ModelError(f"non-finite gradient in parameter {p.names[seg]}")
    p.velocity *= momentum
    p.velocity += g
    p.flat -= lr * p.velocity
    return p


_ACTIVATIONS = {"relu": (ad.relu, lambda x: np.maximum(x, 0.0)),
                "tanh": (ad.tanh, np.tanh)}


@dataclass
class Mlp:
    """Fully connected net; layer_widths includes input and output widths."""

    layer_widths: list
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_widths) < 2 or any(w < 1 for w in self.layer_widths):
            raise ModelError(f"bad layer widths {self.layer_widths}")
        if self.activation not in _ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")

    def segments(self):
        segs = []
        for i, (a, b) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            segs.append((f"layer{i}.W", (a, b)))
            segs.append((f"layer{i}.b", (b,)))
        return segs

    def init(self, seed, scheme="uniform_glorot"):
        """Deterministic Glorot-uniform weights, zero biases."""
        if scheme != "uniform_glorot":
            raise ModelError(f"unknown init scheme {scheme!r}")
        rng = np.random.default_rng(seed)
        p = ParamSet(self.segments())
        for name, view in zip(p.names, p.views()):
            if name.endswith(".W"):
                fan_in, fan_out = view.shape
                a = np.sqrt(6.0 / (fan_in + fan_out))
                view[:] = rng.uniform(-a, a, size=view.shape)
        return p

    def forward(self, ptensors, x, dropout_rate=0.0, dropout_rng=None):
        """Taped forward; `ptensors` from ParamSet.tensors(), x a Tensor."""
        if x.data.ndim != 2 or x.data.shape[1] != self.layer_widths[0]:
            raise ModelError(
                f"input shape {x.data.shape} does not match first width {self.layer_widths[0]}")
        act, _ = _ACTIVATIONS[self.activation]
        h = x
        n_layers = len(self.layer_widths) - 1
        for i in range(n_layers):
            w, b = ptensors[2 * i], ptensors[2 * i + 1]
            h = ad.add(ad.matmul(h, w), b)
            if i < n_layers - 1:
                h = act(h)
                if dropout_rate > 0.0 and dropout_rng is not None:
                    mask = (dropout_rng.random(h.data.shape) >= dropout_rate) / (1.0 - dropout_rate)
                    h = ad.mul(h, ad.Tensor(mask))
        return h

    def forward_np(self, p, x):
        """Untaped forward for evaluation."""
        _, act = _ACTIVATIONS[self.activation]
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.layer_widths[0]:
            raise ModelError(
                f"input shape {h.shape} does not match first width {self.layer_widths[0]}")
        views = p.views()
        n_layers = len(self.layer_widths) - 1
        for i in range(n_layers):
            h = h @ views[2 * i] + views[2 * i + 1]
            if i < n_layers - 1:
                h = act(h)
        return h

    def hidden_np(self, p, x):
        """Last hidden activation; input for nets sharing the classifier backbone."""
        _, act = _ACTIVATIONS[self.activation]
        h = np.asarray(x, dtype=np.float64)
        views = p.views()
        for i in range(len(self.layer_widths) - 2):
            h = act(h @ views[2 * i] + views[2 * i + 1])
        return h


def classifier_forward(m, p, x):
    """Logits [batch x n_classes] for a feature batch, untaped."""
    return m.forward_np(p, x)


@dataclass
class MetaNet:
    """Instance-weight network: MLP backbone, scalar sigmoid head."""

    backbone: Mlp

    @classmethod
    def build(cls, in_dim, hidden, activation="relu"):
        return cls(Mlp([in_dim] + list(hidden) + [1], activation))

    def init(self, seed, scheme="uniform_glorot"):
        p = self.backbone.init(seed, scheme)
        # zero the head so training starts from exactly uniform weights;
        # a random initial weighting is pure noise the meta updates would
        # first have to unlearn
        p.views()[-1][:] = 0.0
        p.views()[-2][:] = 0.0
        return p

    def raw_weights_taped(self, ptensors, x):
        logits = self.backbone.forward(ptensors, x)
        return ad.sigmoid(logits)  # [batch, 1], in (0,1)

    def weights_np(self, p, x):
        raw = _sigmoid_np(self.backbone.forward_np(p, x)[:, 0])
        # sigmoid underflows to exactly 0.0 below ~-745; shift it so the
        # mean-1 renormalization stays finite and weights stay positive
        raw = raw + 1e-12
        return raw / raw.mean()


def _sigmoid_np(x):
    return ad._sigmoid(np.asarray(x, dtype=np.float64))


def meta_weights(m, p, x):
    """Per-instance training weights, batch-renormalized to mean exactly 1."""
    x = np.asarray(x)
    if len(x) == 0:
        raise ModelError("meta_weights: empty batch")
    return m.weights_np(p, x)


def meta_weights_taped(m, ptensors, x_np):
    """Taped mean-1 weights as a [batch] tensor differentiable in the net."""
    raw = ad.add(m.raw_weights_taped(ptensors, ad.Tensor(x_np)), ad.Tensor(1e-12))
    inv_mean = ad.reciprocal(ad.tmean(raw))
    w = ad.mul(raw, inv_mean)
    return ad.reshape(w, (w.data.shape[0],))


@dataclass
class SplitterNet:
    """Split-probability network over x concatenated with one-hot(y)."""

    backbone: Mlp
    n_classes: int

    @classmethod
    def build(cls, in_dim, n_classes, hidden, activation="relu"):
        return cls(Mlp([in_dim + n_classes] + list(hidden) + [1], activation), n_classes)

    def init(self, seed, scheme="uniform_glorot"):
        return self.backbone.init(seed, scheme)

    def inputs(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.intp)
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ModelError(f"label outside [0, {self.n_classes})")
        onehot = np.zeros((len(y), self.n_classes))
        onehot[np.arange(len(y)), y] = 1.0
        return np.concatenate([x, onehot], axis=1)

    def logits_taped(self, ptensors, x, y):
        return self.backbone.forward(ptensors, ad.Tensor(self.inputs(x, y)))

    def probabilities_np(self, p, x, y):
        return _sigmoid_np(self.backbone.forward_np(p, self.inputs(x, y))[:, 0])


def split_probability(s, p, x, y):
    """P(z=1 | x, y): probability of pseudotrain membership, in (0,1)."""
    return s.probabilities_np(p, x, y)


CHECKPOINT_MAGIC = "lrwlab-params v1"


def save_params(p, path):
    """Exact textual dump: segment names/shapes plus float64 hex values."""
    lines = [CHECKPOINT_MAGIC, str(len(p.names))]
    for name, shape in zip(p.names, p.shapes):
        lines.append(f"{name} {' '.join(str(d) for d in shape)}")
    lines.extend(v.hex() for v in p.flat)
    lines.extend(v.hex() for v in p.velocity)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a parameter checkpoint")
    n_seg = int(lines[1])
    segments = []
    for line in lines[2:2 + n_seg]:
        parts = line.split()
        segments.append((parts[0], tuple(int(d) for d in parts[1:])))
    p = ParamSet(segments)
    values = lines[2 + n_seg:]
    if len(values) != 2 * p.size:
        raise ModelError(f"{path}: expected {2 * p.size} values, got {len(values)}")
    p.flat[:] = [float.fromhex(v) for v in values[:p.size]]
    p.velocity[:] = [float.fromhex(v) for v in values[p.size:]]
    return p
