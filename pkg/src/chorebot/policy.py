"""Behavior policies over observation histories.

Two variants share one fully-connected trunk (flattened H-frame history ->
128 -> 128, tanh):

  * ``vqbet``: per-quantizer-layer classification heads over discrete action
    codes plus a continuous offset head regressing the quantization
    residual. Sampling the code heads keeps multimodal demonstrations
    multimodal.
  * ``bc``: plain regression of the action chunk (the offset head alone),
    which mode-averages under multimodal data.

Everything is float64 with hand-written gradients, so analytic gradients can
be checked against central finite differences tightly.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NumericError
from .geom import RelAction
from .rvq import Codebook

MAGIC = b"RUMPOLI1\n"
HIDDEN = (128, 128)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    offset_weight: float = 1.0  # lambda on the offset L1 term
    temperature: float = 1.0  # inference sampling temperature

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0 or self.offset_weight < 0 or self.temperature <= 0:
            raise ValueError("rates and temperature must be positive")


@dataclass
class PolicyParams:
    """Trunk + head weights. ``code_W``/``code_b`` are empty for the bc variant."""

    variant: str
    in_dim: int
    chunk_dim: int
    n_codes: int
    n_layers: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    code_W: list = field(default_factory=list)
    code_b: list = field(default_factory=list)
    off_W: np.ndarray = None
    off_b: np.ndarray = None

    def items(self):
        """(name, array) pairs over every trainable tensor, fixed order."""
        out = [("W1", self.W1), ("b1", self.b1), ("W2", self.W2), ("b2", self.b2)]
        for l in range(len(self.code_W)):
            out.append((f"code_W{l}", self.code_W[l]))
            out.append((f"code_b{l}", self.code_b[l]))
        out.append(("off_W", self.off_W))
        out.append(("off_b", self.off_b))
        return out

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            variant=self.variant, in_dim=self.in_dim, chunk_dim=self.chunk_dim,
            n_codes=self.n_codes, n_layers=self.n_layers,
            W1=self.W1.copy(), b1=self.b1.copy(),
            W2=self.W2.copy(), b2=self.b2.copy(),
            code_W=[w.copy() for w in self.code_W],
            code_b=[b.copy() for b in self.code_b],
            off_W=self.off_W.copy(), off_b=self.off_b.copy(),
        )

    def save(self, path) -> None:
        tensors = self.items()
        header = {
            "variant": self.variant, "in_dim": self.in_dim,
            "chunk_dim": self.chunk_dim, "n_codes": self.n_codes,
            "n_layers": self.n_layers,
            "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        }
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for _, a in tensors:
                flat = np.ascontiguousarray(a, dtype="<f8")
                f.write(struct.pack("<Q", flat.size))
                f.write(flat.tobytes())

    @staticmethod
    def load(path) -> "PolicyParams":
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise FormatError(f"{path}: not a policy parameter file")
            header = json.loads(f.readline().decode())
            arrays = {}
            for spec in header["tensors"]:
                (size,) = struct.unpack("<Q", f.read(8))
                a = np.frombuffer(f.read(8 * size), dtype="<f8").copy()
                arrays[spec["name"]] = a.reshape(spec["shape"])
        n_layers = header["n_layers"] if header["variant"] == "vqbet" else 0
        return PolicyParams(
            variant=header["variant"], in_dim=header["in_dim"],
            chunk_dim=header["chunk_dim"], n_codes=header["n_codes"],
            n_layers=header["n_layers"],
            W1=arrays["W1"], b1=arrays["b1"], W2=arrays["W2"], b2=arrays["b2"],
            code_W=[arrays[f"code_W{l}"] for l in range(n_layers)],
            code_b=[arrays[f"code_b{l}"] for l in range(n_layers)],
            off_W=arrays["off_W"], off_b=arrays["off_b"],
        )


def init_params(variant: str, in_dim: int, chunk_dim: int, n_codes: int = 0,
                n_layers: int = 0, seed: int = 0, zeros: bool = False) -> PolicyParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init; zeros=True for tests."""
    if variant not in ("vqbet", "bc"):
        raise ValueError(f"unknown policy variant {variant!r}")
    if variant == "vqbet" and (n_codes < 1 or n_layers < 1):
        raise ValueError("vqbet variant needs n_codes and n_layers >= 1")
    if variant == "bc":
        n_codes, n_layers = 0, 0
    rng = np.random.default_rng(seed)

    def mat(fan_in, fan_out):
        if zeros:
            return np.zeros((fan_in, fan_out))
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    h1, h2 = HIDDEN
    return PolicyParams(
        variant=variant, in_dim=in_dim, chunk_dim=chunk_dim,
        n_codes=n_codes, n_layers=n_layers,
        W1=mat(in_dim, h1), b1=np.zeros(h1),
        W2=mat(h1, h2), b2=np.zeros(h2),
        code_W=[mat(h2, n_codes) for _ in range(n_layers)],
        code_b=[np.zeros(n_codes) for _ in range(n_layers)],
        off_W=mat(h2, chunk_dim), off_b=np.zeros(chunk_dim),
    )


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {name}")


def forward(params: PolicyParams, X: np.ndarray):
    """Batched forward pass.

    X is (B, in_dim) or a single (in_dim,) history. Returns
    (logits (B, L, K) or None for bc, offset (B, chunk_dim), cache).
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != params.in_dim:
        raise FormatError(f"input dim {X.shape[1]} != expected {params.in_dim}")
    z1 = X @ params.W1 + params.b1
    a1 = np.tanh(z1)
    z2 = a1 @ params.W2 + params.b2
    a2 = np.tanh(z2)
    _check_finite("trunk activations", a2)
    offset = a2 @ params.off_W + params.off_b
    _check_finite("offset head", offset)
    logits = None
    if params.variant == "vqbet":
        logits = np.stack([a2 @ W + b for W, b in zip(params.code_W, params.code_b)],
                          axis=1)
        _check_finite("code heads", logits)
    cache = (X, a1, a2)
    if single:
        return (logits[0] if logits is not None else None), offset[0], cache
    return logits, offset, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(logits, dtype=float) / temperature))


def loss_and_grads(params: PolicyParams, X: np.ndarray, Y: np.ndarray,
                   codebook: Codebook | None, offset_weight: float = 1.0):
    """Mean batch loss and analytic gradients for every parameter.

    vqbet: sum-over-layers cross entropy on the chunk's codes plus
    offset_weight * L1 between the offset head and the quantization
    residual. bc: squared error between the offset head and the raw chunk.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    B = X.shape[0]
    if B == 0:
        raise FormatError("empty batch")
    logits, offset, (Xc, a1, a2) = forward(params, X)

    grads = {name: np.zeros_like(a) for name, a in params.items()}
    if params.variant == "vqbet":
        if codebook is None:
            raise FormatError("vqbet loss requires a fitted codebook")
        codes = codebook.encode_batch(Y)
        resid = Y - codebook.decode_batch(codes)
        logp = _log_softmax(logits)
        ce = 0.0
        dlogits = np.exp(logp)  # softmax probabilities
        for l in range(params.n_layers):
            ce -= float(np.sum(logp[np.arange(B), l, codes[:, l]]))
            dlogits[np.arange(B), l, codes[:, l]] -= 1.0
        diff = offset - resid
        loss = (ce + offset_weight * float(np.sum(np.abs(diff)))) / B
        dlogits /= B
        doffset = offset_weight * np.sign(diff) / B
        da2 = doffset @ params.off_W.T
        for l in range(params.n_layers):
            grads[f"code_W{l}"] = a2.T @ dlogits[:, l, :]
            grads[f"code_b{l}"] = dlogits[:, l, :].sum(axis=0)
            da2 += dlogits[:, l, :] @ params.code_W[l].T
    else:
        diff = offset - Y
        loss = float(np.sum(diff * diff)) / B
        doffset = 2.0 * diff / B
        da2 = doffset @ params.off_W.T

    grads["off_W"] = a2.T @ doffset
    grads["off_b"] = doffset.sum(axis=0)
    dz2 = da2 * (1.0 - a2 * a2)
    grads["W2"] = a1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ params.W2.T
    dz1 = da1 * (1.0 - a1 * a1)
    grads["W1"] = Xc.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, grads


def loss_value(params: PolicyParams, X, Y, codebook, offset_weight: float = 1.0) -> float:
    """Scalar loss only (used by finite-difference checks)."""
    return loss_and_grads(params, X, Y, codebook, offset_weight)[0]


class _Adam:
    """Adam with bias correction, beta = (0.9, 0.999), eps = 1e-8."""

    def __init__(self, params: PolicyParams, lr: float):
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = {n: np.zeros_like(a) for n, a in params.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.items()}

    def step(self, params: PolicyParams, grads: dict) -> None:
        self.t += 1
        for name, a in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            a -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(X: np.ndarray, Y: np.ndarray, cfg: TrainConfig,
          codebook: Codebook | None, variant: str = "vqbet",
          params: PolicyParams | None = None):
    """Minibatch Adam training; deterministic per seed.

    Returns (params, loss_curve) where loss_curve[e] is the mean minibatch
    loss of epoch e.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] == 0:
        raise FormatError("empty training set")
    if params is None:
        params = init_params(
            variant, in_dim=X.shape[1], chunk_dim=Y.shape[1],
            n_codes=codebook.K if codebook is not None else 0,
            n_layers=codebook.L if codebook is not None else 0,
            seed=cfg.seed,
        )
    else:
        params = params.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    opt = _Adam(params, cfg.learning_rate)
    n = X.shape[0]
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(params, X[idx], Y[idx], codebook,
                                         cfg.offset_weight)
            opt.step(params, grads)
            total += loss
            batches += 1
        curve.append(total / batches)
    return params, curve


def predict_chunk(params: PolicyParams, history: np.ndarray,
                  codebook: Codebook | None, mode: str = "sample",
                  temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Flat chunk vector for one observation history."""
    logits, offset, _ = forward(params, np.asarray(history, dtype=float).reshape(-1))
    if params.variant == "bc":
        return offset
    if mode == "argmax":
        codes = [int(np.argmax(logits[l])) for l in range(params.n_layers)]
    elif mode == "sample":
        if rng is None:
            rng = np.random.default_rng()
        codes = []
        for l in range(params.n_layers):
            p = softmax(logits[l], temperature)
            codes.append(int(rng.choice(params.n_codes, p=p / p.sum())))
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    return codebook.decode(codes) + offset


def predict_action(params: PolicyParams, history: np.ndarray,
                   codebook: Codebook | None, chunk_len: int,
                   mode: str = "sample", temperature: float = 1.0,
                   rng: np.random.Generator | None = None) -> list[RelAction]:
    """Chunk of RelActions; gripper components clamped into [0, 1]."""
    vec = predict_chunk(params, history, codebook, mode, temperature, rng)
    per_step = vec.shape[0] // chunk_len
    return [RelAction.from_vector(vec[i * per_step:(i + 1) * per_step])
            for i in range(chunk_len)]


def save_loss_curve(curve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve):
            w.writerow([i, f"{v:.17g}"])
