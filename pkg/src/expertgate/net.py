"""Small feed-forward network kernel with hand-derived gradients.

The architecture is fixed (ReLU hidden layers, identity output), so
backpropagation is written out directly instead of pulling in an autodiff
framework.  Gradients are exact; the test suite cross-checks them against
central finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

NET_MAGIC = b"EGNETV01"
ENSEMBLE_MAGIC = b"EGENSV01"
CODEC_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A loss or gradient went NaN/Inf; parameters are left untouched."""


def one_hot(states: np.ndarray | int, n_states: int) -> np.ndarray:
    """Tabular state featurization: exactly one entry set to 1."""
    states = np.atleast_1d(np.asarray(states, dtype=np.int64))
    out = np.zeros((states.shape[0], n_states))
    out[np.arange(states.shape[0]), states] = 1.0
    return out


class MlpNet:
    """MLP mapping a feature vector to one value per action.

    Weights and biases initialize uniform in +-1/sqrt(fan_in) from the
    given seed, so distinct seeds give distinct members in an ensemble.
    forward() caches activations; backward() consumes the cache.
    """

    def __init__(self, layer_sizes, seed: int | np.random.Generator = 0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"layer_sizes needs >= 2 positive entries, got {layer_sizes}")
        rng = np.random.default_rng(seed)
        self.layer_sizes = sizes
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self._cache = None

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpNet":
        dup = MlpNet.__new__(MlpNet)
        dup.layer_sizes = list(self.layer_sizes)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        dup._cache = None
        return dup

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network; output shape follows the input shape."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise ValueError(f"input width {x.shape} does not match {self.n_inputs}")
        pre = []
        act = [x]
        h = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if k == len(self.weights) - 1 else np.maximum(z, 0.0)
            act.append(h)
        self._cache = (pre, act)
        return h[0] if squeeze else h

    def backward(self, grad_out: np.ndarray):
        """Backpropagate d(loss)/d(output) through the cached forward pass.

        Returns [(dW, db), ...] per layer.  The scalar whose gradient
        arrives in grad_out defines the scaling (callers bake any 1/batch
        factor into grad_out).
        """
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward pass")
        pre, act = self._cache
        delta = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if delta.shape != pre[-1].shape:
            raise ValueError(f"grad_out shape {delta.shape} does not match output {pre[-1].shape}")
        grads = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            grads[k] = (act[k].T @ delta, delta.sum(axis=0))
            if k > 0:
                delta = (delta @ self.weights[k].T) * (pre[k - 1] > 0.0)
        return grads

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def same_architecture(self, other: "MlpNet") -> bool:
        return self.layer_sizes == other.layer_sizes


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one network."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(net: MlpNet, grads, opt: AdamState) -> None:
    """Apply one adaptive-moment update in place.

    Raises NonFiniteError before touching any parameter if a gradient
    contains NaN/Inf, so training can abort with state preserved.
    """
    flat_grads = []
    for (dw, db), w, b in zip(grads, net.weights, net.biases):
        if dw.shape != w.shape or db.shape != b.shape:
            raise ValueError("gradient shape does not match network parameters")
        flat_grads.extend((dw, db))
    if any(not np.all(np.isfinite(g)) for g in flat_grads):
        raise NonFiniteError("non-finite gradient")
    params = [p for pair in zip(net.weights, net.biases) for p in pair]
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for p, g, m, v in zip(params, flat_grads, opt.m, opt.v):
        m += (1.0 - opt.beta1) * (g - m)
        v += (1.0 - opt.beta2) * (g * g - v)
        p -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


def soft_update(target: MlpNet, online: MlpNet, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, elementwise."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if not target.same_architecture(online):
        raise ValueError("soft_update requires identical architectures")
    for tp, op in zip(target.parameters(), online.parameters()):
        tp *= 1.0 - tau
        tp += tau * op


# ---------------------------------------------------------------------------
# Checkpoint codec: magic, version, layer sizes, then raw little-endian
# float64 parameters in layer order (W then b per layer).
# ---------------------------------------------------------------------------


def dump_net(net: MlpNet) -> bytes:
    parts = [NET_MAGIC, struct.pack("<II", CODEC_VERSION, len(net.layer_sizes))]
    parts.append(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
    for p in net.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def load_net_bytes(blob: bytes) -> MlpNet:
    if blob[:8] != NET_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    version, n_sizes = struct.unpack_from("<II", blob, 8)
    if version != CODEC_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, 16)
    offset = 16 + 4 * n_sizes
    net = MlpNet.__new__(MlpNet)
    net.layer_sizes = list(sizes)
    net.weights = []
    net.biases = []
    net._cache = None
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n = fan_in * fan_out
        w = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(fan_in, fan_out)
        offset += 8 * n
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        net.weights.append(w.astype(float))
        net.biases.append(b.astype(float))
    if offset != len(blob):
        raise ValueError("checkpoint has trailing or missing bytes")
    return net


def save_net(net: MlpNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_net(net))


def load_net(path) -> MlpNet:
    with open(path, "rb") as fh:
        return load_net_bytes(fh.read())
