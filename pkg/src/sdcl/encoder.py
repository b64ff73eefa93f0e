"""Small two-layer encoder mapping inputs onto the radius-gamma hypersphere.

Feature inputs go through input -> tanh(hidden) -> output, then the output u
is projected to gamma * u / ||u||.  Token inputs are first pooled to the mean
of their embedding-table rows and share the same MLP.  All arithmetic is
float64; gradients are exact, including through the projection (Jacobian
gamma * (I/||u|| - u u^T / ||u||^3)) and through gamma when it is trainable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .mixture import DataPoint

NORM_FLOOR = 1e-12


@dataclass
class EncoderParams:
    """MLP weights, optional token embedding table, and the sphere radius."""

    w1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)
    token_embed: Optional[np.ndarray]  # (vocab, input)
    gamma: float
    gamma_trainable: bool = False

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        for name in ("w1", "b1", "w2", "b2"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            token_embed=None if self.token_embed is None else self.token_embed.copy(),
            gamma=self.gamma,
            gamma_trainable=self.gamma_trainable,
        )

    def array_fields(self) -> list[str]:
        names = ["w1", "b1", "w2", "b2"]
        if self.token_embed is not None:
            names.append("token_embed")
        return names


@dataclass
class EncoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    token_embed: Optional[np.ndarray]
    gamma: float = 0.0

    @staticmethod
    def zeros_like(params: EncoderParams) -> "EncoderGrads":
        return EncoderGrads(
            w1=np.zeros_like(params.w1),
            b1=np.zeros_like(params.b1),
            w2=np.zeros_like(params.w2),
            b2=np.zeros_like(params.b2),
            token_embed=None if params.token_embed is None else np.zeros_like(params.token_embed),
            gamma=0.0,
        )

    def add_(self, other: "EncoderGrads") -> None:
        self.w1 += other.w1
        self.b1 += other.b1
        self.w2 += other.w2
        self.b2 += other.b2
        if self.token_embed is not None and other.token_embed is not None:
            self.token_embed += other.token_embed
        self.gamma += other.gamma

    def scale_(self, factor: float) -> None:
        self.w1 *= factor
        self.b1 *= factor
        self.w2 *= factor
        self.b2 *= factor
        if self.token_embed is not None:
            self.token_embed *= factor
        self.gamma *= factor


def init_params(
    input_dim: int,
    hidden_dim: int,
    embed_dim: int,
    rng: np.random.Generator,
    gamma: float = np.sqrt(2.0),
    gamma_trainable: bool = False,
    vocab_size: Optional[int] = None,
) -> EncoderParams:
    """Random init: weight scales 1/sqrt(fan_in); small nonzero biases keep
    the pre-projection output away from the degenerate zero vector."""
    w1 = rng.standard_normal((hidden_dim, input_dim)) / np.sqrt(input_dim)
    b1 = 0.01 * rng.standard_normal(hidden_dim)
    w2 = rng.standard_normal((embed_dim, hidden_dim)) / np.sqrt(hidden_dim)
    b2 = 0.01 * rng.standard_normal(embed_dim)
    token_embed = None
    if vocab_size is not None:
        token_embed = rng.standard_normal((vocab_size, input_dim)) / np.sqrt(input_dim)
    return EncoderParams(
        w1=w1, b1=b1, w2=w2, b2=b2, token_embed=token_embed,
        gamma=float(gamma), gamma_trainable=gamma_trainable,
    )


@dataclass
class ForwardCache:
    x: np.ndarray          # (B, input)
    a1: np.ndarray         # (B, hidden) post-tanh
    u: np.ndarray          # (B, out) pre-projection
    norms: np.ndarray      # (B,)
    uhat: np.ndarray       # (B, out)
    token_seqs: Optional[Sequence[Sequence[int]]] = None


def forward_features(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batch forward pass; returns embeddings (B, D) with rows of norm gamma."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a1 = np.tanh(x @ params.w1.T + params.b1)
    u = a1 @ params.w2.T + params.b2
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms < NORM_FLOOR):
        raise ValueError("pre-projection norm below 1e-12; degenerate embedding")
    uhat = u / norms[:, None]
    emb = params.gamma * uhat
    return emb, ForwardCache(x=x, a1=a1, u=u, norms=norms, uhat=uhat)


def _pool_tokens(params: EncoderParams, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
    if params.token_embed is None:
        raise ValueError("encoder has no token embedding table")
    pooled = np.empty((len(token_seqs), params.token_embed.shape[1]), dtype=np.float64)
    for i, seq in enumerate(token_seqs):
        idx = np.asarray(seq, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("token sequence must be nonempty")
        pooled[i] = params.token_embed[idx].mean(axis=0)
    return pooled


def forward_tokens(
    params: EncoderParams, token_seqs: Sequence[Sequence[int]]
) -> tuple[np.ndarray, ForwardCache]:
    """Token path: mean of embedding rows feeds the shared MLP."""
    pooled = _pool_tokens(params, token_seqs)
    emb, cache = forward_features(params, pooled)
    cache.token_seqs = [tuple(int(t) for t in s) for s in token_seqs]
    return emb, cache


def encode(params: EncoderParams, point: DataPoint, use_tokens: bool = False) -> np.ndarray:
    """Single-point convenience wrapper returning the (D,) embedding."""
    if use_tokens:
        if point.tokens is None:
            raise ValueError("data point has no tokens")
        emb, _ = forward_tokens(params, [point.tokens])
    else:
        emb, _ = forward_features(params, point.features[None, :])
    return emb[0]


def similarity(e1: np.ndarray, e2: np.ndarray) -> float:
    """Dot product of two embeddings; bounded by gamma^2 in magnitude."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ValueError(f"dimension mismatch: {e1.shape} vs {e2.shape}")
    return float(e1 @ e2)


def backward(params: EncoderParams, cache: ForwardCache, d_emb: np.ndarray) -> EncoderGrads:
    """Exact parameter gradients given d(loss)/d(embedding) for the batch.

    Raises on non-finite intermediate values rather than clamping.
    """
    d_emb = np.atleast_2d(np.asarray(d_emb, dtype=np.float64))
    grads = EncoderGrads.zeros_like(params)
    if params.gamma_trainable:
        grads.gamma = float(np.sum(d_emb * cache.uhat))
    # projection: du = gamma/||u|| * (dE - uhat (uhat . dE))
    inner = np.sum(d_emb * cache.uhat, axis=1, keepdims=True)
    du = params.gamma / cache.norms[:, None] * (d_emb - cache.uhat * inner)
    grads.w2 = du.T @ cache.a1
    grads.b2 = du.sum(axis=0)
    da1 = du @ params.w2
    dz1 = da1 * (1.0 - cache.a1**2)
    grads.w1 = dz1.T @ cache.x
    grads.b1 = dz1.sum(axis=0)
    if cache.token_seqs is not None:
        dx = dz1 @ params.w1
        for i, seq in enumerate(cache.token_seqs):
            contribution = dx[i] / len(seq)
            for t in seq:
                grads.token_embed[t] += contribution
    for name in ("w1", "b1", "w2", "b2"):
        if not np.all(np.isfinite(getattr(grads, name))):
            raise FloatingPointError(f"non-finite gradient in {name}")
    return grads


# ---------------------------------------------------------------------------
# Checkpoints: flat little-endian float64 array plus a JSON sidecar
# ---------------------------------------------------------------------------


def params_to_flat(params: EncoderParams) -> np.ndarray:
    parts = [getattr(params, name).ravel() for name in params.array_fields()]
    parts.append(np.array([params.gamma], dtype=np.float64))
    return np.concatenate(parts)


def params_from_flat(template: EncoderParams, flat: np.ndarray) -> EncoderParams:
    out = template.copy()
    offset = 0
    for name in template.array_fields():
        arr = getattr(template, name)
        setattr(out, name, flat[offset : offset + arr.size].reshape(arr.shape).copy())
        offset += arr.size
    out.gamma = float(flat[offset])
    return out


def save_checkpoint(params: EncoderParams, path, meta: dict | None = None) -> None:
    import json

    flat = params_to_flat(params).astype("<f8")
    flat.tofile(str(path))
    sidecar = {
        "shapes": {name: list(getattr(params, name).shape) for name in params.array_fields()},
        "gamma_trainable": params.gamma_trainable,
        "dtype": "<f8",
    }
    sidecar.update(meta or {})
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)


def load_checkpoint(path) -> EncoderParams:
    import json

    with open(str(path) + ".json") as f:
        sidecar = json.load(f)
    flat = np.fromfile(str(path), dtype="<f8")
    shapes = sidecar["shapes"]
    arrays = {}
    offset = 0
    for name in ("w1", "b1", "w2", "b2", "token_embed"):
        if name not in shapes:
            arrays[name] = None
            continue
        shape = tuple(shapes[name])
        size = int(np.prod(shape))
        arrays[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    return EncoderParams(
        w1=arrays["w1"],
        b1=arrays["b1"],
        w2=arrays["w2"],
        b2=arrays["b2"],
        token_embed=arrays["token_embed"],
        gamma=float(flat[offset]),
        gamma_trainable=bool(sidecar["gamma_trainable"]),
    )
