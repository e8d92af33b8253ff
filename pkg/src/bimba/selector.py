"""Spatiotemporal token selector.

Pipeline: pool the grid into initial queries, lay queries out among the video
tokens (optionally behind a question prefix), then per block
``s = s + scan(LN(s))`` and finally read back the query slots.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .core import QueryGrid, ShapeError, TokenGrid, declare_buffer, flatten, make_rng
from .ssm import SsmParams, derive_params, init_ssm_params, run_scan


class Layout(str, enum.Enum):
    APPEND_END = "append"
    INTERLEAVED = "interleave"


class Direction(str, enum.Enum):
    UNI = "uni"
    BI = "bi"


class Slot(NamedTuple):
    kind: str  # "question" | "video" | "query"
    index: int


QUESTION, VIDEO, QUERY = "question", "video", "query"


@dataclass(frozen=True)
class SequenceLayout:
    """Ordered slot tags of the combined sequence.

    ``kinds`` holds 0/1/2 for question/video/query and ``index`` the per-class
    index, so large layouts stay cheap.
    """

    kinds: np.ndarray
    index: np.ndarray
    num_video: int
    num_query: int
    num_question: int

    KIND_CODES = {QUESTION: 0, VIDEO: 1, QUERY: 2}

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def slots(self) -> list[Slot]:
        names = (QUESTION, VIDEO, QUERY)
        return [Slot(names[k], int(i)) for k, i in zip(self.kinds, self.index)]

    def positions(self, kind: str) -> np.ndarray:
        """Sequence positions of ``kind`` slots in increasing per-class index."""
        return np.flatnonzero(self.kinds == self.KIND_CODES[kind])

    def query_gaps(self) -> list[int]:
        """Number of video slots immediately preceding each query slot."""
        q = self.positions(QUERY)
        return (np.diff(q, prepend=self.num_question - 1) - 1).tolist()


def build_layout(L: int, N: int, mode: Layout | str = Layout.APPEND_END,
                 L_q: int = 0) -> SequenceLayout:
    mode = Layout(mode)
    if L < 1 or N < 0 or L_q < 0:
        raise ValueError(f"invalid counts L={L}, N={N}, L_q={L_q}")
    q_kinds = np.zeros(L_q, np.int8)
    q_idx = np.arange(L_q)
    if mode is Layout.APPEND_END or N == 0:
        kinds = np.concatenate([q_kinds, np.ones(L, np.int8), np.full(N, 2, np.int8)])
        index = np.concatenate([q_idx, np.arange(L), np.arange(N)])
    else:
        if N > L:
            raise ValueError(f"interleaving needs N <= L, got N={N}, L={L}")
        base, extra = divmod(L, N)
        # the first `extra` blocks hold base+1 video tokens, the rest base;
        # every block is followed by its query
        q = np.arange(1, N + 1)
        query_pos = q * (base + 1) + np.minimum(q, extra) - 1
        kinds = np.ones(L + N, np.int8)
        kinds[query_pos] = 2
        # a video slot's index is its position minus the queries before it
        index = np.arange(L + N) - np.searchsorted(query_pos, np.arange(L + N))
        index[query_pos] = q - 1
        kinds = np.concatenate([q_kinds, kinds])
        index = np.concatenate([q_idx, index])
    return SequenceLayout(kinds, index, L, N, L_q)


# --------------------------------------------------------------------------


def _bin_edges(n: int, m: int) -> np.ndarray:
    return (np.arange(m + 1) * n) // m


def adaptive_pool3d(Z: TokenGrid, T_out: int, h_out: int, w_out: int) -> QueryGrid:
    """Average pool into ``(T_out, h_out, w_out)`` bins ``[floor(i*n/m), floor((i+1)*n/m))``."""
    T, h, w, d = Z.shape
    for name, m, n in (("T", T_out, T), ("h", h_out, h), ("w", w_out, w)):
        if not 1 <= m <= n:
            raise ValueError(f"target {name}={m} must lie in [1, {n}]")
    data = Z.data
    declare_buffer((T_out, h_out, w_out, d), data.dtype)
    if T % T_out == 0 and h % h_out == 0 and w % w_out == 0:
        ft, fh, fw = T // T_out, h // h_out, w // w_out
        out = data.reshape(T_out, ft, h, w, d).sum(axis=1)
        out = out.reshape(T_out, h_out, fh, w, d).sum(axis=2)
        out = out.reshape(T_out, h_out, w_out, fw, d).sum(axis=3)
        out /= out.dtype.type(ft * fh * fw)
        return QueryGrid(out)
    # integral-image sums along each axis keep this O(T*h*w*d)
    out = data
    for axis, (n, m) in enumerate(((T, T_out), (h, h_out), (w, w_out))):
        e = _bin_edges(n, m)
        if n % m == 0:
            shape = out.shape[:axis] + (m, n // m) + out.shape[axis + 1:]
            out = out.reshape(shape).sum(axis=axis + 1)
        else:
            zero = np.zeros(out.shape[:axis] + (1,) + out.shape[axis + 1:], out.dtype)
            cs = np.concatenate([zero, np.cumsum(out, axis=axis)], axis=axis)
            out = np.take(cs, e[1:], axis=axis) - np.take(cs, e[:-1], axis=axis)
    counts = (np.diff(_bin_edges(T, T_out))[:, None, None]
              * np.diff(_bin_edges(h, h_out))[None, :, None]
              * np.diff(_bin_edges(w, w_out))[None, None, :])
    return QueryGrid(out / counts[..., None].astype(out.dtype))


def assemble(Z: TokenGrid, Q: TokenGrid, X: np.ndarray | None,
             layout: SequenceLayout) -> np.ndarray:
    video = flatten(Z)
    queries = flatten(Q)
    d = Z.d
    if Q.d != d:
        raise ShapeError(f"query channels {Q.d} != video channels {d}")
    if X is None:
        X = np.zeros((0, d), video.dtype)
    X = np.asarray(X, dtype=video.dtype)
    if X.ndim != 2 or X.shape[1] != d:
        raise ShapeError(f"question must be (L_q, {d}), got {X.shape}")
    if (layout.num_video, layout.num_query, layout.num_question) != (
            len(video), len(queries), len(X)):
        raise ShapeError(
            f"layout counts {(layout.num_video, layout.num_query, layout.num_question)}"
            f" do not match inputs {(len(video), len(queries), len(X))}")
    declare_buffer((len(layout), d), video.dtype)
    out = np.empty((len(layout), d), video.dtype)
    out[layout.positions(QUESTION)] = X
    out[layout.positions(VIDEO)] = video
    out[layout.positions(QUERY)] = queries
    return out


def extract(seq: np.ndarray, layout: SequenceLayout) -> np.ndarray:
    seq = np.asarray(seq)
    if seq.shape[0] != len(layout):
        raise ShapeError(f"sequence length {seq.shape[0]} != layout length {len(layout)}")
    return seq[layout.positions(QUERY)]


def layer_norm(seq: np.ndarray, gamma=None, beta=None, eps: float = 1e-12) -> np.ndarray:
    """Per-token normalisation over channels (population variance), then ``gamma*z + beta``."""
    seq = np.asarray(seq)
    mu = seq.mean(axis=-1, keepdims=True)
    centered = seq - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    z = centered / np.sqrt(var + eps)
    if gamma is not None:
        z = z * gamma
    if beta is not None:
        z = z + beta
    return z


def scan(seq: np.ndarray, p: SsmParams, chunk_len: int | None = 64) -> np.ndarray:
    return run_scan(seq, derive_params(seq, p), p, chunk_len)


def bidirectional_scan(seq: np.ndarray, p_fwd: SsmParams, p_bwd: SsmParams,
                       chunk_len: int | None = 64) -> np.ndarray:
    """Forward scan plus the time-reversed scan of the reversed sequence."""
    fwd = scan(seq, p_fwd, chunk_len)
    bwd = scan(seq[::-1], p_bwd, chunk_len)[::-1]
    return fwd + bwd


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectorConfig:
    t_factor: int = 4
    s_factor: int = 2
    layout: Layout = Layout.INTERLEAVED
    direction: Direction = Direction.BI
    question: bool = False
    state_size: int = 8
    depth: int = 1
    seed: int = 0
    chunk_len: int | None = 64
    ln_eps: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.t_factor < 1 or self.s_factor < 1:
            raise ValueError("compression factors must be >= 1")
        if self.state_size < 1 or self.depth < 1:
            raise ValueError("state_size and depth must be >= 1")

    def query_shape(self, T: int, h: int, w: int) -> tuple[int, int, int]:
        for name, n, f in (("T", T, self.t_factor), ("h", h, self.s_factor),
                           ("w", w, self.s_factor)):
            if n % f:
                raise ValueError(f"{name}={n} is not divisible by factor {f}")
        return T // self.t_factor, h // self.s_factor, w // self.s_factor


@dataclass(frozen=True)
class ScanBlock:
    fwd: SsmParams
    bwd: SsmParams | None
    gamma: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class SelectorParams:
    blocks: tuple[ScanBlock, ...] = field(default_factory=tuple)

    @property
    def d(self) -> int:
        return self.blocks[0].fwd.d


def init_selector_params(d: int, cfg: SelectorConfig, dt_init: float = 0.05,
                         rng: np.random.Generator | None = None,
                         beta_scale: float = 0.0) -> SelectorParams:
    """Fresh parameters; LN shift is zero unless ``beta_scale`` draws a random one."""
    rng = make_rng(cfg.seed) if rng is None else rng
    blocks = []
    for _ in range(cfg.depth):
        fwd = init_ssm_params(d, cfg.state_size, rng, dt_init)
        bwd = init_ssm_params(d, cfg.state_size, rng, dt_init) if cfg.direction is Direction.BI else None
        beta = beta_scale * rng.standard_normal(d) if beta_scale else np.zeros(d)
        blocks.append(ScanBlock(fwd, bwd, np.ones(d), beta))
    return SelectorParams(tuple(blocks))


def selector_block(seq: np.ndarray, block: ScanBlock, direction: Direction,
                   chunk_len: int | None = 64, ln_eps: float = 1e-12) -> np.ndarray:
    normed = layer_norm(seq, block.gamma.astype(seq.dtype), block.beta.astype(seq.dtype), ln_eps)
    if direction is Direction.BI:
        if block.bwd is None:
            raise ValueError("bidirectional scan needs backward parameters")
        out = bidirectional_scan(normed, block.fwd, block.bwd, chunk_len)
    else:
        out = scan(normed, block.fwd, chunk_len)
    return seq + out


def select_tokens(Z: TokenGrid, X: np.ndarray | None, cfg: SelectorConfig,
                  params: SelectorParams, return_sequence: bool = False):
    """Compress ``Z`` to ``(T/tf, h/sf, w/sf)`` query tokens."""
    T_out, h_out, w_out = cfg.query_shape(Z.T, Z.h, Z.w)
    if params.d != Z.d:
        raise ShapeError(f"params built for d={params.d}, grid has d={Z.d}")
    if len(params.blocks) != cfg.depth:
        raise ShapeError(f"config depth {cfg.depth} != {len(params.blocks)} parameter blocks")
    if cfg.question and X is None:
        raise ValueError("question conditioning enabled but no question given")
    if not cfg.question:
        X = None
    Q = adaptive_pool3d(Z, T_out, h_out, w_out)
    L_q = 0 if X is None else len(X)
    layout = build_layout(Z.num_tokens, Q.num_tokens, cfg.layout, L_q)
    seq = assemble(Z, Q, X, layout)
    for block in params.blocks:
        seq = selector_block(seq, block, cfg.direction, cfg.chunk_len, cfg.ln_eps)
    out = extract(seq, layout).reshape(T_out, h_out, w_out, Z.d)
    result = QueryGrid(out)
    if return_sequence:
        return result, seq, layout
    return result


def synthetic_question(rng: np.random.Generator, length: int, d: int) -> np.ndarray:
    """Stand-in question embeddings (unit-variance Gaussian vectors)."""
    return rng.standard_normal((length, d))


def compression_summary(shape: Sequence[int], t_factor: int, s_factor: int) -> dict:
    T, h, w = shape[:3]
    cfg = SelectorConfig(t_factor=t_factor, s_factor=s_factor)
    T_o, h_o, w_o = cfg.query_shape(T, h, w)
    L, N = T * h * w, T_o * h_o * w_o
    return {"input_shape": (T, h, w), "output_shape": (T_o, h_o, w_o),
            "input_tokens": L, "output_tokens": N, "ratio": L / N}
