"""Minimal residual-MLP engine with hand-written backpropagation.

Architecture of a :class:`MicroNet` with ``n_blocks >= 1``::

    x -> stem: relu(x @ W_s + b_s)                      (input_dim -> width)
      -> block_i: h + relu(h @ W_i + b_i), i < n_blocks (width -> width)
      -> head: h @ W_h + b_h                            (width -> classes)

A net with ``n_blocks == 0`` is the head alone applied to the raw input,
i.e. a linear classifier.

All weights live in one flat float64 vector; ``MicroNet.layer`` returns
views into it, so an optimizer step on the flat vector updates every layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"MNET"
CHECKPOINT_VERSION = 1
# magic, version, input_dim, width, n_blocks, classes, n_params
_HEADER = struct.Struct("<4sHIIIIQ")


def layer_shapes(input_dim: int, width: int, n_blocks: int, classes: int) -> list[tuple[str, int, int]]:
    """Ordered ``(name, fan_in, fan_out)`` for every dense layer."""
    if n_blocks == 0:
        return [("head", input_dim, classes)]
    shapes = [("stem", input_dim, width)]
    shapes += [(f"block{i}", width, width) for i in range(n_blocks)]
    shapes.append(("head", width, classes))
    return shapes


def param_count(input_dim: int, width: int, n_blocks: int, classes: int) -> int:
    return sum(fi * fo + fo for _, fi, fo in layer_shapes(input_dim, width, n_blocks, classes))


@dataclass
class MicroNet:
    """Residual MLP classifier; used for both the teacher and device students."""

    input_dim: int
    width: int
    n_blocks: int
    classes: int
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        expected = param_count(self.input_dim, self.width, self.n_blocks, self.classes)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (expected,):
            raise ValueError(f"parameter vector has length {self.params.size}, architecture needs {expected}")
        self._offsets = {}
        pos = 0
        for name, fi, fo in self.shapes:
            self._offsets[name] = (pos, fi, fo)
            pos += fi * fo + fo

    @classmethod
    def zeros(cls, input_dim, width, n_blocks, classes) -> MicroNet:
        return cls(input_dim, width, n_blocks, classes,
                   np.zeros(param_count(input_dim, width, n_blocks, classes)))

    @classmethod
    def init(cls, input_dim, width, n_blocks, classes, rng: np.random.Generator) -> MicroNet:
        """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``; biases start at zero."""
        net = cls.zeros(input_dim, width, n_blocks, classes)
        for name, fi, fo in net.shapes:
            w, _ = net.layer(name)
            bound = 1.0 / np.sqrt(fi)
            w[...] = rng.uniform(-bound, bound, size=(fi, fo))
        return net

    @property
    def shapes(self) -> list[tuple[str, int, int]]:
        return layer_shapes(self.input_dim, self.width, self.n_blocks, self.classes)

    @property
    def architecture_id(self) -> str:
        return f"resmlp-{self.input_dim}-{self.width}x{self.n_blocks}-{self.classes}"

    def layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(W, b)`` views into ``params`` for the named layer."""
        pos, fi, fo = self._offsets[name]
        w = self.params[pos:pos + fi * fo].reshape(fi, fo)
        b = self.params[pos + fi * fo:pos + fi * fo + fo]
        return w, b

    def copy(self) -> MicroNet:
        return MicroNet(self.input_dim, self.width, self.n_blocks, self.classes, self.params.copy())

    def with_params(self, params: np.ndarray) -> MicroNet:
        return MicroNet(self.input_dim, self.width, self.n_blocks, self.classes, params)

    # checkpoint format: little-endian header (see _HEADER) followed by float64 params
    def to_bytes(self) -> bytes:
        header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.input_dim, self.width,
                              self.n_blocks, self.classes, self.params.size)
        return header + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> MicroNet:
        if len(blob) < _HEADER.size:
            raise ValueError("checkpoint truncated")
        magic, version, input_dim, width, n_blocks, classes, n = _HEADER.unpack_from(blob)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a MicroNet checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        body = blob[_HEADER.size:]
        if len(body) != 8 * n:
            raise ValueError("checkpoint body length does not match header")
        return cls(input_dim, width, n_blocks, classes, np.frombuffer(body, dtype="<f8").astype(np.float64))


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    split: str

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> LabeledSet:
        return LabeledSet(self.inputs[idx], self.labels[idx], self.split)


@dataclass(frozen=True)
class TaskSpec:
    """Gaussian-mixture classification task standing in for an image dataset."""

    input_dim: int = 16
    classes: int = 10
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 1000
    center_scale: float = 6.0
    spread: float = 6.0

    def validate(self) -> list[str]:
        errors = []
        if self.classes < 2:
            errors.append("task.classes must be >= 2")
        if self.input_dim < 2:
            errors.append("task.input_dim must be >= 2")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            errors.append("task split sizes must be >= 1")
        if self.spread < 0:
            errors.append("task.spread must be >= 0")
        if self.center_scale <= 0:
            errors.append("task.center_scale must be > 0")
        return errors


def make_synthetic_task(spec: TaskSpec, seed: int) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    """One isotropic Gaussian cluster per class; labels balanced within one sample per split."""
    errors = spec.validate()
    if errors:
        raise ValueError("; ".join(errors))
    rng = np.random.default_rng([seed, 0x7A5C])
    centers = rng.normal(0.0, spec.center_scale, size=(spec.classes, spec.input_dim))

    def draw(n, tag):
        labels = np.arange(n) % spec.classes
        rng.shuffle(labels)
        x = centers[labels] + spec.spread * rng.normal(size=(n, spec.input_dim))
        return LabeledSet(x, labels.astype(np.int64), tag)

    return draw(spec.n_train, "train"), draw(spec.n_val, "val"), draw(spec.n_test, "test")


@dataclass
class ForwardPass:
    """Recorded forward pass: input, per-layer pre-activations and hidden states."""

    x: np.ndarray
    hidden: list[np.ndarray]      # hidden[0] = stem output, hidden[i+1] = block i output
    pre: list[np.ndarray]         # pre-relu values of stem and each block
    logits: np.ndarray

    @property
    def features(self) -> np.ndarray:
        """Output of the last residual block (the extracted semantics)."""
        return self.hidden[-1] if self.hidden else self.x


def forward(net: MicroNet, x: np.ndarray) -> ForwardPass:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"expected input of shape (n, {net.input_dim}), got {x.shape}")
    hidden, pre = [], []
    h = x
    if net.n_blocks > 0:
        w, b = net.layer("stem")
        z = h @ w + b
        h = np.maximum(z, 0.0)
        pre.append(z)
        hidden.append(h)
        for i in range(net.n_blocks):
            w, b = net.layer(f"block{i}")
            z = h @ w + b
            h = h + np.maximum(z, 0.0)
            pre.append(z)
            hidden.append(h)
    w, b = net.layer("head")
    return ForwardPass(x, hidden, pre, h @ w + b)


def backward(net: MicroNet, fp: ForwardPass | None, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector.

    ``dlogits`` is dL/dlogits for the batch recorded in ``fp``.
    """
    if fp is None:
        raise ValueError("backward needs a recorded forward pass")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != fp.logits.shape:
        raise ValueError(f"upstream gradient shape {dlogits.shape} != logits shape {fp.logits.shape}")
    grad = np.zeros_like(net.params)
    view = net.with_params(grad)

    h_last = fp.features
    gw, gb = view.layer("head")
    w, _ = net.layer("head")
    gw[...] = h_last.T @ dlogits
    gb[...] = dlogits.sum(axis=0)
    if net.n_blocks == 0:
        return grad
    dh = dlogits @ w.T
    for i in reversed(range(net.n_blocks)):
        h_in = fp.hidden[i]
        dz = dh * (fp.pre[i + 1] > 0)
        gw, gb = view.layer(f"block{i}")
        w, _ = net.layer(f"block{i}")
        gw[...] = h_in.T @ dz
        gb[...] = dz.sum(axis=0)
        dh = dh + dz @ w.T
    dz = dh * (fp.pre[0] > 0)
    gw, gb = view.layer("stem")
    gw[...] = fp.x.T @ dz
    gb[...] = dz.sum(axis=0)
    return grad


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float = 0.001) -> np.ndarray:
    if params.shape != grad.shape:
        raise ValueError(f"parameter/gradient length mismatch: {params.shape} vs {grad.shape}")
    return params - lr * grad


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its gradient w.r.t. the logits."""
    n = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def predict(net: MicroNet, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(net, x).logits, axis=1)


def evaluate_accuracy(net: MicroNet, data: LabeledSet) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    return float(np.mean(predict(net, data.inputs) == data.labels))


def numerical_gradient(loss_fn, params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``loss_fn(params) -> float``."""
    params = np.array(params, dtype=np.float64)
    grad = np.empty_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        up = loss_fn(params)
        params[i] = orig - step
        down = loss_fn(params)
        params[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_cross_entropy(net: MicroNet, data: LabeledSet, *, epochs: int, lr: float, batch_size: int,
                        rng: np.random.Generator, callback=None) -> MicroNet:
    """Plain minibatch SGD on cross-entropy; returns a new net.

    ``callback(epoch, net)`` runs after every epoch; returning True stops training.
    """
    net = net.copy()
    for epoch in range(epochs):
        for idx in minibatches(len(data), batch_size, rng):
            fp = forward(net, data.inputs[idx])
            loss, dlogits = cross_entropy(fp.logits, data.labels[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"cross-entropy diverged at epoch {epoch}")
            net.params = sgd_step(net.params, backward(net, fp, dlogits), lr)
        if callback is not None and callback(epoch, net):
            break
    return net
