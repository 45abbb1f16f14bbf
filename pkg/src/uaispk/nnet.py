"""Small feedforward network core: dense layers, ReLU, dropout noise,
softmax cross-entropy / MSE losses, Adam and a finite-difference checker.

Weights follow the ``(out_dim, in_dim)`` convention and batches are rows,
so a layer computes ``a @ W.T + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"NNET v1\n"


@dataclass(frozen=True)
class NetworkSpec:
    layer_dims: tuple[int, ...]
    hidden_activation: str = "relu"
    l2_coeff: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least input and output dims")
        if any(d <= 0 for d in self.layer_dims):
            raise ValueError(f"layer dims must be positive: {self.layer_dims}")
        if self.hidden_activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be nonnegative")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class Network:
    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # bumped on every in-place parameter update so stale caches are caught
    version: int = 0

    def __post_init__(self):
        dims = self.spec.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("parameter count does not match layer_dims")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                raise ValueError(f"layer {k}: bad parameter shapes {w.shape}, {b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Network":
        return Network(self.spec, [w.copy() for w in self.weights],
                       [b.copy() for b in self.biases], self.version)

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def init_network(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(spec, weights, biases)


@dataclass(frozen=True)
class NoiseSpec:
    keep_prob: float = 0.25
    kind: str = "multiplicative-dropout"

    def __post_init__(self):
        if self.kind != "multiplicative-dropout":
            raise ValueError(f"unsupported noise kind {self.kind!r}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")


def dropout_mask(shape, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 1/keep_prob or 0."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return np.ones(shape)
    keep = rng.random(shape) < keep_prob
    return keep / keep_prob


def apply_noise(h: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.keep_prob == 1.0:
        return np.array(h, dtype=float, copy=True)
    return h * dropout_mask(h.shape, spec.keep_prob, rng)


@dataclass
class ForwardCache:
    net_id: int
    version: int
    inputs: list[np.ndarray]   # input to each layer (post-noise for layer 0)
    preacts: list[np.ndarray]
    mask: np.ndarray | None = None


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray | None = None

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def scale(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases],
                         None if self.inputs is None else self.inputs * factor)


def zero_gradients(net: Network) -> Gradients:
    return Gradients([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


def add_gradients(a: Gradients, b: Gradients) -> Gradients:
    inputs = None
    if a.inputs is not None and b.inputs is not None:
        inputs = a.inputs + b.inputs
    return Gradients([x + y for x, y in zip(a.weights, b.weights)],
                     [x + y for x, y in zip(a.biases, b.biases)], inputs)


def forward(net: Network, batch: np.ndarray, noise: NoiseSpec | None = None,
            rng: np.random.Generator | None = None) -> tuple[ForwardCache, np.ndarray]:
    """Run the network on a ``[B, in_dim]`` batch.

    When ``noise`` is given, dropout is applied to the input batch first and
    its mask is kept in the cache so ``backward`` routes through it.
    """
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.spec.in_dim:
        raise ValueError(f"expected batch of shape [B, {net.spec.in_dim}], got {x.shape}")
    mask = None
    if noise is not None and noise.keep_prob < 1.0:
        if rng is None:
            raise ValueError("noise requires an rng")
        mask = dropout_mask(x.shape, noise.keep_prob, rng)
        x = x * mask
    relu = net.spec.hidden_activation == "relu"
    inputs, preacts = [], []
    a = x
    last = net.n_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w.T + b
        preacts.append(z)
        a = np.maximum(z, 0.0) if (relu and k < last) else z
    return ForwardCache(id(net), net.version, inputs, preacts, mask), a


def backward(net: Network, cache: ForwardCache, upstream: np.ndarray) -> Gradients:
    """Backpropagate ``upstream = dLoss/dOutput``; also returns dLoss/dInput."""
    if cache.net_id != id(net) or cache.version != net.version:
        raise ValueError("cache does not belong to the current state of this network")
    g = np.asarray(upstream, dtype=float)
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {cache.preacts[-1].shape}")
    relu = net.spec.hidden_activation == "relu"
    dws: list[np.ndarray] = [None] * net.n_layers  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * net.n_layers  # type: ignore[list-item]
    for k in range(net.n_layers - 1, -1, -1):
        if relu and k < net.n_layers - 1:
            g = g * (cache.preacts[k] > 0)
        dws[k] = g.T @ cache.inputs[k]
        dbs[k] = g.sum(axis=0)
        g = g @ net.weights[k]
    if cache.mask is not None:
        g = g * cache.mask
    return Gradients(dws, dbs, g)


def l2_penalty(net: Network, coeff: float) -> tuple[float, Gradients]:
    """``coeff * sum ||W||^2`` over weight matrices; biases are not penalized."""
    value = coeff * sum(float(np.sum(w * w)) for w in net.weights)
    grads = Gradients([2.0 * coeff * w for w in net.weights], [np.zeros_like(b) for b in net.biases])
    return value, grads


def loss_softmax_ce(logits: np.ndarray, labels: np.ndarray,
                    l2: tuple[float, Sequence[np.ndarray]] | None = None) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    ``l2=(coeff, weights)`` adds ``coeff * sum ||W||^2`` to the loss value;
    the matching parameter gradient comes from :func:`l2_penalty`.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    n, k = logits.shape
    if k < 2:
        raise ValueError("softmax cross-entropy needs at least 2 classes")
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("labels must be class indices in [0, K)")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -float(np.mean(log_p[rows, labels]))
    dlogits = np.exp(log_p)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    if l2 is not None:
        coeff, weights = l2
        loss += coeff * sum(float(np.sum(w * w)) for w in weights)
    return loss, dlogits


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    if n == 0:
        return 0.0, np.zeros_like(diff)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_network(cls, net: Network, lr: float = 0.0002, **kw) -> "AdamState":
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        return cls([np.zeros_like(p) for p in net.params()],
                   [np.zeros_like(p) for p in net.params()], lr=lr, **kw)


def adam_step(net: Network, grads: Gradients, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``net`` and ``state``."""
    gs = grads.params()
    ps = net.params()
    if len(gs) != len(ps) or any(g.shape != p.shape for g, p in zip(gs, ps)):
        raise ValueError("gradient shapes do not match network")
    if not all(np.all(np.isfinite(g)) for g in gs):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(ps, gs, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    net.version += 1


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error with the denominator floored at 1e-8."""
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / denom


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def gradient_check(net: Network, loss_fn: LossFn, batch: np.ndarray, tolerance: float = 1e-4,
                   h: float = 1e-5, grads: Gradients | None = None,
                   max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic parameter gradients to central finite differences.

    ``loss_fn(output) -> (loss, dloss/doutput)``. Each parameter array gets a
    norm-wise relative error; the report carries the maximum. Passing
    ``grads`` checks those instead of freshly computed ones (fault injection).
    ``max_entries`` samples that many coordinates per array for large nets.
    """
    if grads is None:
        cache, out = forward(net, batch)
        _, dout = loss_fn(out)
        grads = backward(net, cache, dout)
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = []
    n_checked = 0
    for p, g in zip(net.params(), grads.params()):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        if max_entries is not None and flat_p.size > max_entries:
            idx = np.sort(rng.choice(flat_p.size, size=max_entries, replace=False))
        else:
            idx = np.arange(flat_p.size)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp, _ = loss_fn(forward(net, batch)[1])
            flat_p[i] = orig - h
            lm, _ = loss_fn(forward(net, batch)[1])
            flat_p[i] = orig
            numeric[j] = (lp - lm) / (2.0 * h)
        errors.append(relative_error(flat_g[idx], numeric))
        n_checked += idx.size
    return GradCheckReport(max(errors), errors, tolerance, n_checked)


# -- checkpoints -------------------------------------------------------------

def save_network(net: Network, path, step_count: int = 0, seed: int | None = None) -> None:
    header = {
        "format": "NNET v1",
        "spec": {"layer_dims": list(net.spec.layer_dims),
                 "hidden_activation": net.spec.hidden_activation,
                 "l2_coeff": net.spec.l2_coeff},
        "step_count": int(step_count),
        "seed": seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in net.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_network(path) -> tuple[Network, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an NNET v1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + n].decode("utf-8"))
    off += n
    spec = NetworkSpec(**header["spec"])
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape in ((fan_out, fan_in), (fan_out,)):
            count = int(np.prod(shape))
            end = off + 8 * count
            if end > len(data):
                raise ValueError(f"{path}: truncated parameter payload")
            arr = np.frombuffer(data[off:end], dtype="<f8").astype(float).reshape(shape)
            (weights if len(shape) == 2 else biases).append(arr)
            off = end
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter payload")
    return Network(spec, weights, biases), header
