"""A small ReLU MLP with hand-written backward pass, and Adam."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1


@dataclass
class MlpParams:
    """Layer weights ``W[i]`` of shape (out, in) and biases ``b[i]``."""

    weights: list
    biases: list

    @classmethod
    def init(cls, sizes, seed=None, output_scale: float = 1.0) -> MlpParams:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        Ws, bs = [], []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            std = np.sqrt((1.0 if last else 2.0) / a)
            Ws.append(rng.normal(0.0, std, (b, a)) * (output_scale if last else 1.0))
            bs.append(np.zeros(b))
        return cls(Ws, bs)

    @classmethod
    def zeros_like(cls, p: MlpParams) -> MlpParams:
        return cls([np.zeros_like(W) for W in p.weights], [np.zeros_like(b) for b in p.biases])

    def copy(self) -> MlpParams:
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def arrays(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, v) -> MlpParams:
        v = np.asarray(v, dtype=float)
        Ws, bs = [], []
        i = 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(v[i:i + W.size].reshape(W.shape))
            i += W.size
            bs.append(v[i:i + b.size].copy())
            i += b.size
        return MlpParams(Ws, bs)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def to_dict(self):
        return {"version": FORMAT_VERSION, "sizes": self.sizes,
                "weights": [W.tolist() for W in self.weights], "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d) -> MlpParams:
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported weights version {d.get('version')}")
        return cls([np.array(W, float) for W in d["weights"]], [np.array(b, float) for b in d["biases"]])

    def to_bytes(self) -> bytes:
        """Little-endian binary: magic, version, layer count, sizes, then float64 data."""
        sizes = self.sizes
        head = b"GMLP" + struct.pack("<II", FORMAT_VERSION, len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
        return head + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> MlpParams:
        if data[:4] != b"GMLP":
            raise ValueError("not a weights file")
        version, nl = struct.unpack("<II", data[4:12])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        sizes = struct.unpack(f"<{nl}I", data[12:12 + 4 * nl])
        flat = np.frombuffer(data[12 + 4 * nl:], dtype="<f8").astype(float)
        return cls.init(list(sizes), seed=0).with_flat(flat)


def mlp_forward(params: MlpParams, X):
    """Affine/ReLU stack, linear output. ``X`` has one sample per row."""
    X = np.atleast_2d(X)
    acts = [X]
    pre = []
    h = X
    L = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < L - 1 else z
        acts.append(h)
    return h, (acts, pre)


def mlp_backward(params: MlpParams, cache, dY) -> MlpParams:
    """Gradients of ``sum(dY * Y)`` with respect to every weight and bias."""
    acts, pre = cache
    L = len(params.weights)
    gW = [None] * L
    gb = [None] * L
    d = dY
    for i in range(L - 1, -1, -1):
        if i < L - 1:
            d = d * (pre[i] > 0)
        gW[i] = d.T @ acts[i]
        gb[i] = d.sum(axis=0)
        if i > 0:
            d = d @ params.weights[i]
    return MlpParams(gW, gb)


class Adam:
    """Adam with the usual defaults (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: MlpParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: MlpParams, grads: MlpParams) -> MlpParams:
        """Update ``params`` in place and return it."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    def load_state_dict(self, d):
        self.t = int(d["t"])
        self.lr = float(d["lr"])
        self.m = [np.array(a, float) for a in d["m"]]
        self.v = [np.array(a, float) for a in d["v"]]


def adam_step(params: MlpParams, grads: MlpParams, state: Adam | None, lr: float):
    """Functional form: returns updated (params, state)."""
    if state is None:
        state = Adam(params, lr)
    state.lr = lr
    state.step(params, grads)
    return params, state


def save_weights(path, params: MlpParams, optimizer: Adam | None = None, meta: dict | None = None):
    d = {"params": params.to_dict(), "meta": meta or {}}
    if optimizer is not None:
        d["optimizer"] = optimizer.state_dict()
    with open(path, "w") as f:
        json.dump(d, f)


def load_weights(path):
    with open(path) as f:
        d = json.load(f)
    return MlpParams.from_dict(d["params"]), d.get("meta", {}), d.get("optimizer")
