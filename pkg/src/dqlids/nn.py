"""Feed-forward Q-network written directly against numpy.

Every layer is ``relu(x @ W + b)``, the output layer included, so Q-value
estimates are never negative. Training minimizes the mean squared error
between the Q-value of each record's chosen action and its target.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"DQLCKPT1"


class DivergenceError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class LayerSpec:
    in_width: int
    out_width: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_width <= 0 or self.out_width <= 0:
            raise ValueError(f"layer widths must be positive, got {self.in_width}->{self.out_width}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")


def default_layers(input_width: int = 41, hidden: Sequence[int] = (100, 100), n_actions: int = 5) -> list[LayerSpec]:
    widths = [input_width, *hidden, n_actions]
    return [LayerSpec(a, b) for a, b in zip(widths[:-1], widths[1:])]


def check_chain(layers: Sequence[LayerSpec]) -> None:
    if not layers:
        raise ValueError("network needs at least one layer")
    for t, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
        if a.out_width != b.in_width:
            raise ValueError(f"layer {t} outputs {a.out_width} values but layer {t + 1} expects {b.in_width}")


@dataclass
class QNetwork:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        check_chain(self.layers)
        for spec, w, b in zip(self.layers, self.weights, self.biases, strict=True):
            if w.shape != (spec.in_width, spec.out_width) or b.shape != (spec.out_width,):
                raise ValueError(f"parameter shapes {w.shape}/{b.shape} do not match {spec}")

    @property
    def input_width(self) -> int:
        return self.layers[0].in_width

    @property
    def n_actions(self) -> int:
        return self.layers[-1].out_width

    def copy(self) -> "QNetwork":
        return QNetwork(list(self.layers), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        """Weights and biases interleaved per layer: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_network(layers: Sequence[LayerSpec], seed: int) -> QNetwork:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    layers = list(layers)
    check_chain(layers)
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, 1.0 / np.sqrt(s.in_width), size=(s.in_width, s.out_width)) for s in layers]
    biases = [np.zeros(s.out_width) for s in layers]
    return QNetwork(layers, weights, biases)


def _as_batch(net: QNetwork, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_width:
        raise ValueError(f"batch width {x.shape[-1]} does not match network input width {net.input_width}")
    return x


def _forward_cache(net: QNetwork, x: np.ndarray):
    pre, post = [], [x]
    a = x
    for w, b in zip(net.weights, net.biases):
        z = a @ w + b
        a = np.maximum(z, 0.0)
        pre.append(z)
        post.append(a)
    return pre, post


def forward(net: QNetwork, batch) -> np.ndarray:
    """Q-values, shape (records, n_actions)."""
    x = _as_batch(net, batch)
    a = x
    for w, b in zip(net.weights, net.biases):
        a = np.maximum(a @ w + b, 0.0)
    return a


def masked_mse(q: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> float:
    n = q.shape[0]
    diff = q[np.arange(n), actions] - targets
    return float(np.mean(diff * diff))


def backward(net: QNetwork, batch, actions, targets) -> tuple[float, GradientSet]:
    """Loss and gradients of mean((Q(s_i, a_i) - target_i)^2).

    Only the chosen action's output carries error; ReLU's derivative at 0 is 0.
    """
    x = _as_batch(net, batch)
    actions = np.asarray(actions)
    targets = np.asarray(targets, dtype=np.float64)
    n = x.shape[0]
    if actions.shape != (n,) or targets.shape != (n,):
        raise ValueError(f"need one (action, target) pair per record: {n} records, "
                         f"{actions.shape} actions, {targets.shape} targets")
    if n and not np.issubdtype(actions.dtype, np.integer):
        raise ValueError("action indices must be integers")
    if n and (actions.min() < 0 or actions.max() >= net.n_actions):
        bad = actions[(actions < 0) | (actions >= net.n_actions)][0]
        raise ValueError(f"action index {bad} outside 0..{net.n_actions - 1}")

    pre, post = _forward_cache(net, x)
    q = post[-1]
    rows = np.arange(n)
    diff = q[rows, actions] - targets
    loss = float(np.mean(diff * diff)) if n else 0.0

    delta = np.zeros_like(q)
    if n:
        delta[rows, actions] = (2.0 / n) * diff
    gw = [None] * len(net.weights)
    gb = [None] * len(net.biases)
    for t in range(len(net.weights) - 1, -1, -1):
        delta = delta * (pre[t] > 0)
        gw[t] = post[t].T @ delta
        gb[t] = delta.sum(axis=0)
        if t:
            delta = delta @ net.weights[t].T
    return loss, GradientSet(gw, gb)


# --- optimizers -----------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    kind = "adam"


@dataclass
class SGDState:
    step: int = 0

    kind = "sgd"


def make_optimizer(kind: str = "adam"):
    if kind == "adam":
        return AdamState()
    if kind == "sgd":
        return SGDState()
    raise ValueError(f"unknown optimizer {kind!r}")


def apply_update(net: QNetwork, grads: GradientSet, state, learning_rate: float) -> QNetwork:
    """Take one optimizer step. Parameters and ``state`` are updated in place."""
    params = net.parameters()
    gparams = grads.parameters()
    if len(params) != len(gparams):
        raise ValueError("gradient set does not match network")
    for p, g in zip(params, gparams):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")

    state.step += 1
    if isinstance(state, SGDState):
        for p, g in zip(params, gparams):
            p -= learning_rate * g
        return net

    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, gparams, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return net


# --- checkpoints ----------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
# (sorted keys), then the float64 LE arrays listed in header["arrays"] in order.

@dataclass
class Checkpoint:
    net: QNetwork
    optimizer: AdamState | SGDState
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    net, opt = ckpt.net, ckpt.optimizer
    arrays: list[tuple[str, np.ndarray]] = []
    for t, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays += [(f"W{t}", w), (f"b{t}", b)]
    optimizer = {"kind": opt.kind, "step": opt.step}
    if isinstance(opt, AdamState):
        optimizer.update(beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps, initialized=bool(opt.m))
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays += [(f"adam_m{i}", m), (f"adam_v{i}", v)]
    header = {
        "format": 1,
        "layers": [[s.in_width, s.out_width, s.activation] for s in net.layers],
        "optimizer": optimizer,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + body


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{os.fspath(path)}: not a Q-network checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += count * 8
    if offset != len(blob):
        raise ValueError(f"{os.fspath(path)}: checkpoint size does not match its header")

    layers = [LayerSpec(a, b, act) for a, b, act in header["layers"]]
    net = QNetwork(layers, [arrays[f"W{t}"] for t in range(len(layers))], [arrays[f"b{t}"] for t in range(len(layers))])
    o = header["optimizer"]
    if o["kind"] == "adam":
        opt = AdamState(beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        if o["initialized"]:
            n = 2 * len(layers)
            opt.m = [arrays[f"adam_m{i}"] for i in range(n)]
            opt.v = [arrays[f"adam_v{i}"] for i in range(n)]
    else:
        opt = SGDState(step=o["step"])
    return Checkpoint(net, opt, header["rng_state"], header["meta"])
