"""Residual vector quantization of flattened action chunks.

Stacked k-means codebooks: layer 1 clusters the raw vectors, each further
layer clusters the residuals left by the layers before it. Fitting is
offline Lloyd's algorithm with seeded k-means++ initialization, so results
are bit-reproducible per seed.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InsufficientDataError

MAGIC = b"RVQBOOK1\n"
SHIFT_TOL = 1e-9


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ seeding: first centroid uniform, rest prop. to D^2."""
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # all points coincide with a chosen centroid; any pick works
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centroids[j]) ** 2, axis=1))
    return centroids


def _assign(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # squared distances; argmin breaks ties toward the lowest index
    d2 = (
        np.sum(X * X, axis=1, keepdims=True)
        - 2.0 * X @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def _lloyd_once(X: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    centroids = _kmeans_pp_init(X, k, rng)
    labels = _assign(X, centroids)
    for _ in range(iters):
        new_centroids = centroids.copy()
        for j in range(k):
            members = X[labels == j]
            if members.shape[0] == 0:
                # reseed an empty cluster at the point farthest from its centroid
                dist = np.sum((X - centroids[labels]) ** 2, axis=1)
                far = int(np.argmax(dist))
                new_centroids[j] = X[far]
            else:
                new_centroids[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        labels = _assign(X, centroids)
        if shift < SHIFT_TOL:
            break
    inertia = float(np.sum((X - centroids[labels]) ** 2))
    return centroids, labels, inertia


def _lloyd(X: np.ndarray, k: int, iters: int, rng: np.random.Generator,
           restarts: int = 10):
    """Best of several seeded k-means++ runs; restarts escape local optima."""
    best = None
    for _ in range(max(1, restarts)):
        result = _lloyd_once(X, k, iters, rng)
        if best is None or result[2] < best[2]:
            best = result
    return best


@dataclass
class Codebook:
    """Stack of per-layer centroid matrices, each (K, d)."""

    layers: list = field(default_factory=list)
    K: int = 0
    L: int = 0
    iters: int = 0
    seed: int = 0
    inertia: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.layers[0].shape[1])

    def encode(self, v: np.ndarray) -> list[int]:
        """Greedy nearest centroid per layer on the running residual."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise FormatError(f"vector dim {v.shape} != codebook dim ({self.dim},)")
        codes = []
        resid = v.copy()
        for C in self.layers:
            idx = int(_assign(resid[None, :], C)[0])
            codes.append(idx)
            resid = resid - C[idx]
        return codes

    def encode_batch(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        codes = np.empty((V.shape[0], self.L), dtype=np.int64)
        resid = V.copy()
        for l, C in enumerate(self.layers):
            idx = _assign(resid, C)
            codes[:, l] = idx
            resid = resid - C[idx]
        return codes

    def decode(self, codes) -> np.ndarray:
        out = np.zeros(self.dim)
        if len(codes) != self.L:
            raise FormatError(f"expected {self.L} codes, got {len(codes)}")
        for C, idx in zip(self.layers, codes):
            idx = int(idx)
            if not 0 <= idx < C.shape[0]:
                raise IndexError(f"code {idx} out of range for {C.shape[0]} centroids")
            out = out + C[idx]
        return out

    def decode_batch(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        out = np.zeros((codes.shape[0], self.dim))
        for l, C in enumerate(self.layers):
            out += C[codes[:, l]]
        return out

    def reconstruct(self, V: np.ndarray) -> np.ndarray:
        return self.decode_batch(self.encode_batch(V))

    def save(self, path) -> None:
        header = {
            "K": self.K, "L": self.L, "dim": self.dim,
            "iters": self.iters, "seed": self.seed, "inertia": self.inertia,
        }
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for C in self.layers:
                f.write(struct.pack("<II", C.shape[0], C.shape[1]))
                f.write(np.ascontiguousarray(C, dtype="<f8").tobytes())

    @staticmethod
    def load(path) -> "Codebook":
        with open(path, "rb") as f:
            if f.read(len(MAGIC)) != MAGIC:
                raise FormatError(f"{path}: not a codebook file")
            header = json.loads(f.readline().decode())
            layers = []
            for _ in range(header["L"]):
                k, d = struct.unpack("<II", f.read(8))
                C = np.frombuffer(f.read(8 * k * d), dtype="<f8").copy().reshape(k, d)
                layers.append(C)
        return Codebook(layers=layers, K=header["K"], L=header["L"],
                        iters=header["iters"], seed=header["seed"],
                        inertia=header["inertia"])


def fit(vectors: np.ndarray, K: int = 16, L: int = 2, iters: int = 100,
        seed: int = 0, restarts: int = 10) -> Codebook:
    """Fit an L-layer residual codebook with K centroids per layer."""
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2:
        raise FormatError("expected a 2-D array of vectors")
    if X.shape[0] < K:
        raise InsufficientDataError(f"need >= {K} vectors to fit {K} centroids, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    layers, inertias = [], []
    resid = X.copy()
    for _ in range(L):
        centroids, labels, inertia = _lloyd(resid, K, iters, rng, restarts=restarts)
        layers.append(centroids)
        inertias.append(inertia)
        resid = resid - centroids[labels]
    return Codebook(layers=layers, K=K, L=L, iters=iters, seed=seed, inertia=inertias)
