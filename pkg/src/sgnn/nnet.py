"""Dense networks with hand-written reverse-mode gradients, losses and Adam.

Everything is batched over rows: a ``(B, d)`` input goes through every layer
as one matrix product, and :func:`backward` walks the cached activations in
reverse to produce parameter gradients.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .simcore import RngStream

ACTIVATIONS = ("relu", "gelu", "tanh", "linear")
HEADS = ("linear", "softmax")
LOSS_KINDS = ("mse", "cross_entropy", "l1", "huber")
CE_FLOOR = 1e-12

_CKPT_MAGIC = b"SGNNNET1"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class NetworkSpec:
    widths: tuple[int, ...]
    activation: str = "gelu"
    head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("need input, at least one hidden layer, and output widths")
        if min(self.widths) < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown output head {self.head!r}")


@dataclass
class Network:
    spec: NetworkSpec
    weights: list  # weights[l] has shape (fan_in, fan_out)
    biases: list
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        w = self.spec.widths
        if len(self.weights) != len(w) - 1 or len(self.biases) != len(w) - 1:
            raise ValueError("layer count does not match spec")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (w[l], w[l + 1]) or b.shape != (w[l + 1],):
                raise ValueError(f"layer {l} parameter shapes inconsistent with spec")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite parameters")
        if self.input_shift is None:
            self.input_shift = np.zeros(w[0])
        if self.input_scale is None:
            self.input_scale = np.ones(w[0])

    @property
    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "Network":
        return Network(self.spec, [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                       self.input_shift.copy(), self.input_scale.copy())

    def set_standardization(self, inputs: np.ndarray):
        """Fix input centering/scaling from training inputs; kept in checkpoints."""
        self.input_shift = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        self.input_scale = np.where(std > 0, 1.0 / np.where(std > 0, std, 1.0), 1.0)

    def set_global_scaling(self, inputs: np.ndarray):
        """One shift and one scale for every input coordinate.

        Preserves Euclidean geometry of the inputs up to a constant factor,
        which per-feature standardization does not.
        """
        std = float(inputs.std())
        self.input_shift = np.full(inputs.shape[1], float(inputs.mean()))
        self.input_scale = np.full(inputs.shape[1], 1.0 / std if std > 0 else 1.0)


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Glorot-uniform weights, zero biases."""
    rng = RngStream(seed, 0)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform((fan_in, fan_out), -bound, bound))
        biases.append(np.zeros(fan_out))
    return Network(spec, weights, biases)


# ---------------------------------------------------------------- activations

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "linear":
        return z
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _act_grad(kind, z):
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if kind == "linear":
        return np.ones_like(z)
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class _Cache:
    inputs: list  # input to each layer (post-activation of previous)
    pre: list  # pre-activations of each layer
    output: np.ndarray


def _forward(net: Network, X: np.ndarray) -> _Cache:
    h = (X - net.input_shift) * net.input_scale
    inputs, pre = [], []
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = _act(net.spec.activation, z) if l < last else z
    out = _softmax(h) if net.spec.head == "softmax" else h
    return _Cache(inputs, pre, out)


def forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (output, embedding) for one vector or a batch of rows.

    The embedding is the last hidden layer's activations.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != net.spec.widths[0]:
        raise ValueError(f"input length {X.shape[1]} != network input width {net.spec.widths[0]}")
    c = _forward(net, X)
    emb = c.inputs[-1]
    return (c.output[0], emb[0]) if single else (c.output, emb)


def predict(net: Network, X: np.ndarray, batch: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.concatenate([forward(net, X[i:i + batch])[0] for i in range(0, len(X), batch)])


def embed(net: Network, X: np.ndarray, batch: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.concatenate([forward(net, X[i:i + batch])[1] for i in range(0, len(X), batch)])


def backward(net: Network, cache: _Cache, grad_out: Optional[np.ndarray],
             grad_emb: Optional[np.ndarray] = None, grad_logits: Optional[np.ndarray] = None) -> list:
    """Parameter gradients, ordered like ``net.params``.

    Supply the upstream gradient either w.r.t. the head output
    (``grad_out``) or directly w.r.t. the pre-head logits (``grad_logits``,
    used for the fused softmax/cross-entropy). ``grad_emb`` adds a gradient
    arriving at the embedding layer.
    """
    if grad_logits is not None:
        g = grad_logits
    elif net.spec.head == "softmax":
        p = cache.output
        g = p * (grad_out - np.sum(grad_out * p, axis=1, keepdims=True))
    else:
        g = grad_out
    grads = []
    for l in range(len(net.weights) - 1, -1, -1):
        grads.append(g.sum(axis=0))
        grads.append(cache.inputs[l].T @ g)
        if l == 0:
            break
        g = g @ net.weights[l].T
        if l == len(net.weights) - 1 and grad_emb is not None:
            g = g + grad_emb
        g = g * _act_grad(net.spec.activation, cache.pre[l - 1])
    # grads were collected as (b_L, W_L, ..., b_0, W_0)
    grads.reverse()
    return grads


# --------------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    delta: float = 1.0  # Huber only

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("Huber delta must be > 0")


def per_example_loss(spec: LossSpec, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row-wise losses for (B, q) arrays; each row is summed over its dims."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    r = pred - target
    if spec.kind == "mse":
        return np.sum(r * r, axis=1)
    if spec.kind == "l1":
        return np.sum(np.abs(r), axis=1)
    if spec.kind == "huber":
        a = np.abs(r)
        return np.sum(np.where(a <= spec.delta, 0.5 * r * r, spec.delta * (a - 0.5 * spec.delta)), axis=1)
    return -np.sum(target * np.log(np.maximum(pred, CE_FLOOR)), axis=1)


def loss_value(spec: LossSpec, pred, target) -> float:
    return float(per_example_loss(spec, np.asarray(pred, float), np.asarray(target, float))[0])


def loss_grad(spec: LossSpec, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of the row-summed loss w.r.t. ``pred`` (not averaged)."""
    r = pred - target
    if spec.kind == "mse":
        return 2.0 * r
    if spec.kind == "l1":
        return np.sign(r)
    if spec.kind == "huber":
        return np.clip(r, -spec.delta, spec.delta)
    return np.where(pred > CE_FLOOR, -target / np.maximum(pred, CE_FLOOR), 0.0)


def _loss_backward(net: Network, cache: _Cache, Y, spec: LossSpec, grad_emb=None) -> list:
    """Backprop the batch-mean loss over the first ``len(Y)`` rows of ``cache``."""
    nb = len(Y)
    preds = cache.output[:nb]
    g = np.zeros_like(cache.output)
    if spec.kind == "cross_entropy" and net.spec.head == "softmax":
        g[:nb] = (preds - Y) / nb
        return backward(net, cache, None, grad_emb, grad_logits=g)
    g[:nb] = loss_grad(spec, preds, Y) / nb
    return backward(net, cache, g, grad_emb)


def batch_loss_and_grads(net: Network, X, Y, spec: LossSpec):
    """Mean loss over rows and its parameter gradients."""
    cache = _forward(net, X)
    losses = per_example_loss(spec, cache.output, Y)
    return float(losses.mean()), _loss_backward(net, cache, Y, spec)


# ------------------------------------------------------------------ grad check

@dataclass
class GradCheckResult:
    max_rel_error: float
    skipped: bool = False
    reason: str = ""


def _near_kink(net: Network, x, y, spec: LossSpec, tol: float) -> str:
    cache = _forward(net, x[None, :])
    if net.spec.activation == "relu" and any(np.any(np.abs(z) < tol) for z in cache.pre[:-1]):
        return "relu kink"
    r = cache.output[0] - y
    if spec.kind == "l1" and np.any(np.abs(r) < tol):
        return "l1 kink"
    if spec.kind == "huber" and np.any(np.abs(np.abs(r) - spec.delta) < tol):
        return "huber kink"
    return ""


def grad_check(net: Network, x, y, spec: LossSpec, step: float = 1e-5,
               kink_tol: float = 1e-4) -> GradCheckResult:
    """Compare reverse-mode gradients with central finite differences.

    Relative error per coordinate is ``|g_fd - g| / max(1, |g|)``. Points
    within ``kink_tol`` of a non-differentiable kink are reported as
    skipped rather than checked.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    reason = _near_kink(net, x, y, spec, kink_tol)
    if reason:
        return GradCheckResult(float("nan"), True, reason)
    _, grads = batch_loss_and_grads(net, x[None, :], y[None, :], spec)

    def f():
        return float(per_example_loss(spec, _forward(net, x[None, :]).output, y[None, :])[0])

    worst = 0.0
    for p, g in zip(net.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            fp = f()
            flat[j] = old - step
            fm = f()
            flat[j] = old
            fd = (fp - fm) / (2 * step)
            worst = max(worst, abs(fd - gflat[j]) / max(1.0, abs(gflat[j])))
    return GradCheckResult(worst)


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    align_weight: float = 0.0  # lambda for the alignment hook
    final_lr: Optional[float] = None  # geometric per-epoch decay from lr to final_lr

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.align_weight >= 0:
            raise ValueError("align_weight must be >= 0")
        if self.final_lr is not None and not self.final_lr > 0:
            raise ValueError("final_lr must be > 0")

    def lr_at(self, epoch: int) -> float:
        if self.final_lr is None or self.epochs == 1:
            return self.lr
        return self.lr * (self.final_lr / self.lr) ** (epoch / (self.epochs - 1))


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    align: float = float("nan")
    extra: dict = field(default_factory=dict)


class AlignmentHook:
    """Extra embedding-space objective mixed into training.

    ``library_rows(net, rng)`` returns inputs to embed alongside each batch;
    ``loss_and_grad(query_emb, library_emb, batch_idx)`` returns the scalar
    term and its gradients w.r.t. both embedding blocks.
    """

    def on_epoch_start(self, net: Network, epoch: int):
        pass

    def library_rows(self, net: Network, rng: RngStream) -> np.ndarray:
        raise NotImplementedError

    def loss_and_grad(self, query_emb, library_emb, batch_idx):
        raise NotImplementedError


def train(net: Network, train_ds, cfg: TrainConfig, loss: LossSpec,
          hook: Optional[AlignmentHook] = None,
          on_epoch_end: Optional[Callable[[Network, int], dict]] = None):
    """Minibatch training; returns (trained copy, list of EpochRecord).

    Batch order comes from ``RngStream(cfg.seed, epoch + 1)``; together with a
    seeded initialization this makes training bit-reproducible.
    """
    net = net.copy()
    X, Y = train_ds.inputs, train_ds.targets
    if X.shape[1] != net.spec.widths[0] or Y.shape[1] != net.spec.widths[-1]:
        raise ValueError("dataset shapes incompatible with network")
    opt = (Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) if cfg.optimizer == "adam"
           else SGD(net.params, cfg.lr))
    use_hook = hook is not None and cfg.align_weight > 0
    n = len(X)
    history = []
    for epoch in range(cfg.epochs):
        rng = RngStream(cfg.seed, epoch + 1)
        order = rng.permutation(n)
        opt.lr = cfg.lr_at(epoch)
        if use_hook:
            hook.on_epoch_start(net, epoch)
        tot, tot_align, count = 0.0, 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if use_hook:
                nb = len(idx)
                cache = _forward(net, np.concatenate([X[idx], hook.library_rows(net, rng)]))
                emb = cache.inputs[-1]
                lv = float(per_example_loss(loss, cache.output[:nb], Y[idx]).mean())
                align, gq, gl = hook.loss_and_grad(emb[:nb], emb[nb:], idx)
                g_emb = cfg.align_weight * np.concatenate([gq, gl])
                grads = _loss_backward(net, cache, Y[idx], loss, g_emb)
            else:
                lv, grads = batch_loss_and_grads(net, X[idx], Y[idx], loss)
                align = 0.0
            total = lv + cfg.align_weight * align
            if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLossError(epoch, b)
            opt.step(net.params, grads)
            tot += lv * len(idx)
            tot_align += align * len(idx)
            count += len(idx)
        rec = EpochRecord(epoch, tot / count, tot_align / count if use_hook else float("nan"))
        if on_epoch_end is not None:
            rec.extra = on_epoch_end(net, epoch) or {}
        history.append(rec)
    return net, history


# ---------------------------------------------------------------- checkpoints

def save_network(net: Network, path) -> Path:
    path = Path(path)
    header = json.dumps({"widths": list(net.spec.widths), "activation": net.spec.activation,
                         "head": net.spec.head}, sort_keys=True).encode()
    arrays = [net.input_shift, net.input_scale] + net.params
    payload = b"".join(np.ascontiguousarray(a, "<f8").tobytes() for a in arrays)
    path.write_bytes(_CKPT_MAGIC + struct.pack("<I", len(header)) + header + payload)
    return path


def load_network(path) -> Network:
    blob = Path(path).read_bytes()
    if not blob.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a network checkpoint")
    off = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + hlen])
    off += hlen
    spec = NetworkSpec(tuple(meta["widths"]), meta["activation"], meta["head"])
    w = spec.widths
    shapes = [(w[0],), (w[0],)]
    for a, b in zip(w[:-1], w[1:]):
        shapes += [(a, b), (b,)]
    need = off + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    arrays = []
    for s in shapes:
        cnt = int(np.prod(s))
        arrays.append(np.frombuffer(blob, "<f8", cnt, off).reshape(s).copy())
        off += 8 * cnt
    return Network(spec, arrays[2::2], arrays[3::2], arrays[0], arrays[1])
