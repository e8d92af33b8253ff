"""Comparison compressors: vanilla pass-through, pooling, Perceiver-style
cross-attention and full self-attention over the concatenated sequence.

All attention here is single-layer, single-head, without positional encodings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CapacityError, QueryGrid, ShapeError, TokenGrid, declare_buffer, flatten
from .selector import adaptive_pool3d


@dataclass(frozen=True)
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    latents: np.ndarray | None = None  # (M, d), Perceiver only

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")
        if self.latents is not None:
            if self.latents.ndim != 2 or self.latents.shape[1] != d or len(self.latents) < 1:
                raise ShapeError(f"latents must be (M>=1, {d}), got {self.latents.shape}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def num_latents(self) -> int:
        return 0 if self.latents is None else len(self.latents)


def init_attention_params(d: int, rng: np.random.Generator,
                          num_latents: int = 0) -> AttentionParams:
    s = 1.0 / np.sqrt(d)
    mats = [s * rng.standard_normal((d, d)) for _ in range(4)]
    latents = rng.standard_normal((num_latents, d)) if num_latents else None
    return AttentionParams(*mats, latents=latents)


def softmax_rows(scores: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Row softmax with max subtraction; may work in place when ``out is scores``."""
    if out is None:
        out = np.empty_like(scores)
    np.subtract(scores, scores.max(axis=-1, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def vanilla_pass(Z: TokenGrid) -> np.ndarray:
    return flatten(Z)


def pool_compress(Z: TokenGrid, T_out: int, h_out: int, w_out: int) -> QueryGrid:
    return adaptive_pool3d(Z, T_out, h_out, w_out)


def perceiver_compress(Z: TokenGrid | np.ndarray, p: AttentionParams,
                       return_weights: bool = False):
    """Latents cross-attend over all video tokens; returns ``(M, d)`` outputs."""
    tokens = flatten(Z) if isinstance(Z, TokenGrid) else np.asarray(Z)
    if p.latents is None:
        raise ShapeError("perceiver needs latents")
    if tokens.ndim != 2 or tokens.shape[1] != p.d:
        raise ShapeError(f"tokens must be (L, {p.d}), got {tokens.shape}")
    dt = tokens.dtype
    q = p.latents.astype(dt) @ p.w_q.astype(dt)
    k = tokens @ p.w_k.astype(dt)
    v = tokens @ p.w_v.astype(dt)
    declare_buffer((len(q), len(k)), dt)
    weights = q @ k.T
    weights *= dt.type(1.0 / np.sqrt(p.d))
    softmax_rows(weights, out=weights)
    out = (weights @ v) @ p.w_o.astype(dt)
    return (out, weights) if return_weights else out


def attention_compress(Z: TokenGrid | np.ndarray, Q: TokenGrid | np.ndarray,
                       p: AttentionParams, budget_bytes: int | None = None,
                       return_weights: bool = False):
    """Self-attention over ``[Z; Q]``, returning the ``N`` query rows.

    The full ``L' x L'`` score matrix is materialised; it is declared to the
    active buffer meter, and ``budget_bytes`` turns an oversize request into
    :class:`CapacityError` before allocation.
    """
    video = flatten(Z) if isinstance(Z, TokenGrid) else np.asarray(Z)
    queries = flatten(Q) if isinstance(Q, TokenGrid) else np.asarray(Q)
    if video.shape[1:] != (p.d,) or queries.shape[1:] != (p.d,):
        raise ShapeError(f"tokens must have {p.d} channels")
    dt = video.dtype
    seq = np.concatenate([video, queries.astype(dt)])
    n = len(seq)
    nbytes = n * n * dt.itemsize
    if budget_bytes is not None and nbytes > budget_bytes:
        raise CapacityError(nbytes, budget_bytes)
    declare_buffer((n, n), dt)
    qh = seq @ p.w_q.astype(dt)
    kh = seq @ p.w_k.astype(dt)
    vh = seq @ p.w_v.astype(dt)
    try:
        scores = qh @ kh.T
    except MemoryError as exc:
        raise CapacityError(nbytes, budget_bytes) from exc
    scores *= dt.type(1.0 / np.sqrt(p.d))
    softmax_rows(scores, out=scores)
    mixed = scores @ vh
    out = mixed[len(video):] @ p.w_o.astype(dt)
    return (out, scores) if return_weights else out
