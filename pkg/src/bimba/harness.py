"""Desk-scale experiments: needle retention with a ridge probe, scaling
benchmarks with buffer accounting, and finite-difference gradient checks."""
from __future__ import annotations

import itertools
import logging
import math
import statistics
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines
from .core import (BufferMeter, CapacityError, TokenGrid, declare_buffer, flatten,
                   make_rng, read_csv, write_csv)
from .selector import (Direction, Layout, SelectorConfig, adaptive_pool3d,
                       init_selector_params, select_tokens, synthetic_question)
from .ssm import SsmParams, init_ssm_params, scan_sequential, scan_vjp

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# needle data


@dataclass(frozen=True)
class NeedleSpec:
    direction: np.ndarray
    frame: int
    y: int
    x: int
    amplitude: float = 4.0
    noise: float = 0.5

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("needle direction must have unit norm")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")


@dataclass
class NeedleDataset:
    samples: list[tuple[TokenGrid, int]]
    positions: list[int]
    specs: list[NeedleSpec]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[tuple[TokenGrid, int]]:
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.samples])


def default_positions(T: int, k: int) -> list[int]:
    """``k`` frame indices spread evenly over ``[0, T)``."""
    return [int(round(v)) for v in np.linspace(0, T - 1, k)]


def gen_needle_dataset(T: int, h: int, w: int, d: int, n_samples: int,
                       positions: Sequence[int], rng: np.random.Generator,
                       amplitude: float = 4.0, noise: float = 0.5,
                       spatial: tuple[int, int] | None = None) -> NeedleDataset:
    """Gaussian background plus one needle token at the labelled frame.

    One needle direction and spatial site are drawn per dataset; labels cycle
    through ``positions`` and are then shuffled, so class counts differ by at
    most one.
    """
    positions = [int(p) for p in positions]
    if not positions:
        raise ValueError("positions must be nonempty")
    for f in positions:
        if not 0 <= f < T:
            raise ValueError(f"needle frame {f} outside [0, {T})")
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    if spatial is None:
        spatial = (int(rng.integers(h)), int(rng.integers(w)))
    y, x = spatial
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"needle site {spatial} outside {h}x{w}")
    labels = rng.permutation(np.arange(n_samples) % len(positions))
    samples, specs = [], []
    for lab in labels:
        spec = NeedleSpec(direction, positions[lab], y, x, amplitude, noise)
        data = noise * rng.standard_normal((T, h, w, d))
        data[spec.frame, y, x] += amplitude * direction
        samples.append((TokenGrid(data), int(lab)))
        specs.append(spec)
    return NeedleDataset(samples, positions, specs)


# --------------------------------------------------------------------------
# ridge probe


def ridge_probe(features: np.ndarray, labels: np.ndarray, lam: float) -> np.ndarray:
    """Closed-form ``(F^T F + lam I)^-1 F^T Y``; uses the dual form when p > n."""
    F = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    if F.ndim != 2 or Y.ndim != 2 or len(F) != len(Y) or len(F) < 1:
        raise ValueError(f"bad probe shapes {F.shape}, {Y.shape}")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    n, p = F.shape
    try:
        if p <= n:
            A = F.T @ F + lam * np.eye(p)
            if lam == 0:
                _check_conditioning(A)
            return np.linalg.solve(A, F.T @ Y)
        A = F @ F.T + lam * np.eye(n)
        if lam == 0:
            _check_conditioning(A)
        return F.T @ np.linalg.solve(A, Y)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"ridge system is singular (lam={lam})") from exc


def _check_conditioning(A: np.ndarray) -> None:
    if np.linalg.cond(A) > 1e14:
        raise np.linalg.LinAlgError("ridge system is numerically singular")


def probe_predict(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(features) @ weights, axis=1)


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# --------------------------------------------------------------------------
# needle evaluation

BASELINE_METHODS = ("pool", "perceiver", "attention", "vanilla")


@dataclass(frozen=True)
class NeedleResult:
    method: str
    seed: int
    accuracy: float
    per_position: tuple[float, ...]


def method_name(method) -> str:
    if isinstance(method, SelectorConfig):
        name = f"bimba-{method.layout.value}-{method.direction.value}"
        return name + ("-q" if method.question else "")
    return str(method)


def make_compressor(method, d: int, seed: int, t_factor: int = 4,
                    s_factor: int = 2, dt_init: float = 0.05,
                    beta_scale: float = 0.0) -> Callable[[TokenGrid], np.ndarray]:
    """Frozen, seeded compressor mapping a grid to a flat feature vector."""
    rng = make_rng(seed)
    if isinstance(method, SelectorConfig):
        cfg = method
        params = init_selector_params(d, cfg, dt_init, rng=rng, beta_scale=beta_scale)
        X = synthetic_question(rng, 8, d) if cfg.question else None
        return lambda Z: select_tokens(Z, X, cfg, params).data.ravel()
    if method == "pool":
        def pool(Z):
            return adaptive_pool3d(Z, Z.T // t_factor, Z.h // s_factor, Z.w // s_factor).data.ravel()
        return pool
    if method == "vanilla":
        return lambda Z: baselines.vanilla_pass(Z).ravel()
    if method in ("perceiver", "attention"):
        ap = baselines.init_attention_params(d, rng)

        def attend(Z):
            Q = adaptive_pool3d(Z, Z.T // t_factor, Z.h // s_factor, Z.w // s_factor)
            if method == "attention":
                return baselines.attention_compress(Z, Q, ap).ravel()
            lat = baselines.AttentionParams(ap.w_q, ap.w_k, ap.w_v, ap.w_o,
                                            latents=baselines.flatten(Q))
            return baselines.perceiver_compress(Z, lat).ravel()
        return attend
    raise ValueError(f"unknown method {method!r}")


def run_needle_eval(method, dataset: NeedleDataset, lam: float,
                    rng: np.random.Generator, seed: int = 0,
                    shuffle_labels: bool = False, t_factor: int = 4,
                    s_factor: int = 2, dt_init: float = 0.05,
                    beta_scale: float = 0.0) -> NeedleResult:
    """Probe accuracy of a frozen compressor on a 70/30 split."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    d = dataset[0][0].d
    compress = make_compressor(method, d, seed, t_factor, s_factor, dt_init, beta_scale)
    feats = np.stack([compress(Z) for Z, _ in dataset])
    labels = dataset.labels
    if shuffle_labels:
        labels = rng.permutation(labels)
    k = len(dataset.positions)
    order = rng.permutation(len(dataset))
    n_train = int(round(0.7 * len(dataset)))
    train, test = order[:n_train], order[n_train:]
    if len(train) == 0 or len(test) == 0:
        raise ValueError("train/test split is empty")
    mu = feats[train].mean(axis=0)
    Y = one_hot(labels[train], k)
    ybar = Y.mean(axis=0)
    W = ridge_probe(feats[train] - mu, Y - ybar, lam)
    pred = np.argmax((feats[test] - mu) @ W + ybar, axis=1)
    hit = pred == labels[test]
    per_pos = []
    for c in range(k):
        mask = labels[test] == c
        per_pos.append(float(hit[mask].mean()) if mask.any() else float("nan"))
    return NeedleResult(method_name(method), seed, float(hit.mean()), tuple(per_pos))


@dataclass(frozen=True)
class NeedleDefaults:
    T: int = 32
    h: int = 8
    w: int = 8
    d: int = 16
    state_size: int = 8
    amplitude: float = 4.0
    noise: float = 0.5
    lam: float = 1e-3
    n_samples: int = 200
    n_positions: int = 8
    t_factor: int = 4
    s_factor: int = 2
    dt_init: float = 0.05
    beta_scale: float = 0.0
    ln_eps: float = 1e-12

    def selector(self, layout, direction, question: bool = False) -> SelectorConfig:
        return SelectorConfig(self.t_factor, self.s_factor, layout, direction, question,
                              state_size=self.state_size, ln_eps=self.ln_eps)


def needle_experiment(methods: Sequence, seeds: Sequence[int],
                      cfg: NeedleDefaults = NeedleDefaults()) -> list[NeedleResult]:
    """Run every method on the same per-seed dataset."""
    results = []
    positions = default_positions(cfg.T, cfg.n_positions)
    for seed in seeds:
        data_rng = make_rng(seed)
        ds = gen_needle_dataset(cfg.T, cfg.h, cfg.w, cfg.d, cfg.n_samples, positions,
                                data_rng, cfg.amplitude, cfg.noise)
        for m in methods:
            rng = make_rng(seed + 1_000_003)
            results.append(run_needle_eval(m, ds, cfg.lam, rng, seed=seed,
                                           t_factor=cfg.t_factor, s_factor=cfg.s_factor,
                                           dt_init=cfg.dt_init, beta_scale=cfg.beta_scale))
    return results


def write_needle_csv(path, results: Sequence[NeedleResult]) -> None:
    k = max(len(r.per_position) for r in results)
    header = ["method", "seed", "accuracy"] + [f"pos_{i}" for i in range(k)]
    write_csv(path, header, ([r.method, r.seed, r.accuracy, *r.per_position] for r in results))


def read_needle_csv(path) -> list[NeedleResult]:
    header, rows = read_csv(path)
    return [NeedleResult(r[0], int(r[1]), float(r[2]), tuple(float(v) for v in r[3:]))
            for r in rows]


# --------------------------------------------------------------------------
# scaling benchmarks

BENCH_METHODS = ("selector", "pool", "perceiver", "attention", "vanilla")
BENCH_COLUMNS = ("method", "tokens", "median_seconds", "peak_bytes", "status", "accuracy")


@dataclass(frozen=True)
class BenchmarkRecord:
    method: str
    tokens: int
    median_seconds: float
    peak_bytes: int
    status: str = "ok"
    accuracy: float | None = None

    def __post_init__(self):
        if self.peak_bytes <= 0:
            raise ValueError("peak_bytes must be positive")
        if self.status == "ok" and not self.median_seconds > 0:
            raise ValueError("median_seconds must be positive")
        if self.accuracy is not None and not 0 <= self.accuracy <= 1:
            raise ValueError("accuracy must lie in [0, 1]")


@dataclass(frozen=True)
class BenchConfig:
    d: int = 16
    state_size: int = 8
    frame_side: int = 16
    t_factor: int = 4
    s_factor: int = 2
    num_latents: int = 256
    repeats: int = 5
    dtype: str = "float64"
    budget_bytes: int | None = None
    threads: int | None = 1
    min_batch_seconds: float = 0.05
    inputs_per_size: int = 4
    rotation_bytes: int = 64 << 20


def _bench_grid(L: int, cfg: BenchConfig, rng: np.random.Generator) -> TokenGrid:
    per_frame = cfg.frame_side ** 2
    if L % (per_frame * cfg.t_factor):
        raise ValueError(f"token count {L} must be a multiple of "
                         f"{per_frame * cfg.t_factor} (frame_side^2 * t_factor)")
    T = L // per_frame
    data = rng.standard_normal((T, cfg.frame_side, cfg.frame_side, cfg.d)).astype(cfg.dtype)
    return TokenGrid(data)


def _bench_callable(method: str, Z: TokenGrid, cfg: BenchConfig,
                    rng: np.random.Generator) -> tuple[Callable[[], object], int]:
    """Returns ``(fn, L')`` where ``L'`` is the processed sequence length."""
    T_o, h_o, w_o = Z.T // cfg.t_factor, Z.h // cfg.s_factor, Z.w // cfg.s_factor
    N = T_o * h_o * w_o
    if method == "selector":
        sc = SelectorConfig(cfg.t_factor, cfg.s_factor, Layout.INTERLEAVED, Direction.BI,
                            state_size=cfg.state_size)
        params = init_selector_params(Z.d, sc, rng=rng)
        return (lambda: select_tokens(Z, None, sc, params)), Z.num_tokens + N
    if method == "pool":
        return (lambda: adaptive_pool3d(Z, T_o, h_o, w_o)), Z.num_tokens
    if method == "vanilla":
        def vanilla():
            declare_buffer((Z.num_tokens, Z.d), Z.data.dtype)
            return baselines.vanilla_pass(Z).copy()
        return vanilla, Z.num_tokens
    if method == "perceiver":
        ap = baselines.init_attention_params(Z.d, rng, num_latents=cfg.num_latents)
        return (lambda: baselines.perceiver_compress(Z, ap)), Z.num_tokens
    if method == "attention":
        ap = baselines.init_attention_params(Z.d, rng)
        Q = adaptive_pool3d(Z, T_o, h_o, w_o)
        return (lambda: baselines.attention_compress(Z, Q, ap, cfg.budget_bytes)), Z.num_tokens + N
    raise ValueError(f"unknown method {method!r}; expected one of {BENCH_METHODS}")


def _rotating(fns: Sequence[Callable[[], object]]) -> Callable[[], object]:
    """Cycle through ``fns`` one call at a time.

    Timing several independent inputs averages out how a single allocation
    happens to land in the cache hierarchy. Sizing the rotation by bytes
    (see ``BenchConfig.rotation_bytes``) gives small and large sizes the same
    cold-cache starting point, so a doubling compares like with like.
    """
    it = itertools.cycle(fns)
    return lambda: next(it)()


def calibrate_number(fn: Callable[[], object], min_seconds: float = 0.05) -> int:
    """Calls per timed repeat so that one repeat lasts at least ``min_seconds``."""
    number = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        if time.perf_counter() - t0 >= min_seconds or number >= 1 << 20:
            return number
        number *= 2


def _time_batch(fn: Callable[[], object], number: int) -> float:
    t0 = time.perf_counter()
    for _ in range(number):
        fn()
    return (time.perf_counter() - t0) / number


def time_median(fn: Callable[[], object], repeats: int = 5, warmup: int = 1,
                number: int = 1) -> float:
    """Median per-call seconds over ``repeats`` timed batches of ``number`` calls."""
    for _ in range(warmup):
        fn()
    return statistics.median(_time_batch(fn, number) for _ in range(repeats))


def bench_scaling(methods: Sequence[str], token_counts: Sequence[int],
                  rng: np.random.Generator,
                  cfg: BenchConfig = BenchConfig()) -> list[BenchmarkRecord]:
    """Median wall time and peak declared scratch buffer per (method, size).

    ``token_counts`` are video-token counts ``L``; the record's ``tokens`` is
    the length the method actually processes (``L + N`` for methods that
    concatenate queries). A budget overrun is recorded with status
    ``capacity`` instead of raising.

    Each size gets one warm-up call (which also measures the buffer peak).
    The timed batches then go round-robin over the sizes of a method, so slow
    drift in machine speed affects every size alike.
    """
    for m in methods:
        if m not in BENCH_METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {BENCH_METHODS}")
    if list(token_counts) != sorted(token_counts):
        raise ValueError("token counts must be ascending")
    if cfg.repeats < 5:
        raise ValueError("at least 5 timed repeats are required")
    records = []
    limit = threadpool_limits(cfg.threads) if cfg.threads else nullcontext()
    with limit:
        for method in methods:
            cells = []  # (length, fn or None, peak bytes)
            for L in token_counts:
                grid_bytes = L * cfg.d * np.dtype(cfg.dtype).itemsize
                count = max(cfg.inputs_per_size, -(-cfg.rotation_bytes // grid_bytes))
                fns = []
                for _ in range(count):
                    fn, length = _bench_callable(method, _bench_grid(L, cfg, rng), cfg, rng)
                    fns.append(fn)
                fn = fns[0] if len(fns) == 1 else _rotating(fns)
                try:
                    with BufferMeter(cfg.budget_bytes) as meter:
                        fn()
                    cells.append((length, fn, meter.peak))
                except CapacityError as exc:
                    log.info("%s at %d tokens: capacity (%d bytes)", method, length, exc.requested)
                    cells.append((length, None, exc.requested))
            runnable = [c for c in cells if c[1] is not None]
            times: dict[int, list[float]] = {length: [] for length, _, _ in runnable}
            if runnable:
                # one call count per method so every size is timed alike
                number = calibrate_number(runnable[0][1], cfg.min_batch_seconds)
                for _ in range(cfg.repeats):
                    for length, fn, _ in runnable:
                        times[length].append(_time_batch(fn, number))
            for length, fn, peak in cells:
                if fn is None:
                    records.append(BenchmarkRecord(method, length, float("nan"), peak, "capacity"))
                    continue
                seconds = statistics.median(times[length])
                log.info("%s at %d tokens: %.4fs, %d bytes", method, length, seconds, peak)
                records.append(BenchmarkRecord(method, length, seconds, peak))
    return records


def write_bench_csv(path, records: Sequence[BenchmarkRecord]) -> None:
    write_csv(path, BENCH_COLUMNS,
              ([r.method, r.tokens, r.median_seconds, r.peak_bytes, r.status, r.accuracy]
               for r in records))


def read_bench_csv(path) -> list[BenchmarkRecord]:
    header, rows = read_csv(path)
    if tuple(header[:5]) != BENCH_COLUMNS[:5]:
        raise ValueError(f"{path}: unexpected header {header}")
    out = []
    for r in rows:
        acc = float(r[5]) if len(r) > 5 and r[5] != "" else None
        out.append(BenchmarkRecord(r[0], int(r[1]), float(r[2]), int(r[3]), r[4], acc))
    return out


def capacity_threshold(budget_bytes: int, itemsize: int = 8) -> int:
    """Smallest sequence length whose square score matrix exceeds the budget."""
    n = math.isqrt(budget_bytes // itemsize)
    while n * n * itemsize <= budget_bytes:
        n += 1
    return n


def doubling_ratios(records: Sequence[BenchmarkRecord], method: str) -> dict[int, float]:
    """``t(2L')/t(L')`` keyed by ``L'`` for consecutive doubled sizes."""
    recs = sorted((r for r in records if r.method == method and r.status == "ok"),
                  key=lambda r: r.tokens)
    out = {}
    for a, b in zip(recs, recs[1:]):
        if b.tokens == 2 * a.tokens:
            out[a.tokens] = b.median_seconds / a.median_seconds
    return out


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# --------------------------------------------------------------------------
# finite-difference checks

FD_OPS = ("quadratic", "scan")


@dataclass
class ScanPoint:
    x: np.ndarray
    params: SsmParams
    dy: np.ndarray


def random_scan_point(rng: np.random.Generator, L: int = 3, d: int = 1,
                      state_size: int = 1, dt_init: float = 0.5) -> ScanPoint:
    p = init_ssm_params(d, state_size, rng, dt_init)
    p = p.replace(d_skip=rng.standard_normal(d))
    return ScanPoint(rng.standard_normal((L, d)), p, rng.standard_normal((L, d)))


_PARAM_FIELDS = ("a_diag", "w_B", "w_C", "w_delta", "delta_bias", "d_skip")


def _scan_objective(pt: ScanPoint, x, p) -> float:
    return float(np.sum(pt.dy * scan_sequential(x, p)))


def _scan_probe(pt: ScanPoint, rng: np.random.Generator, step: float):
    v_x = rng.standard_normal(pt.x.shape)
    v_p = {f: rng.standard_normal(np.shape(getattr(pt.params, f))) for f in _PARAM_FIELDS}

    def shifted(sign):
        vals = {f: np.asarray(getattr(pt.params, f)) + sign * step * v_p[f] for f in _PARAM_FIELDS}
        vals["delta_bias"] = float(vals["delta_bias"])
        return _scan_objective(pt, pt.x + sign * step * v_x, pt.params.replace(**vals))

    fd = (shifted(+1) - shifted(-1)) / (2 * step)
    dx, grads = scan_vjp(pt.x, pt.params, pt.dy)
    an = float(np.sum(dx * v_x))
    an += sum(float(np.sum(np.asarray(getattr(grads, f)) * v_p[f])) for f in _PARAM_FIELDS)
    scale = np.sqrt(np.sum(dx ** 2) + sum(np.sum(np.asarray(getattr(grads, f)) ** 2)
                                          for f in _PARAM_FIELDS))
    return fd, an, scale


def fd_check(op_id: str, point, step: float = 1e-5, n_probes: int = 8,
             seed: int = 0) -> float:
    """Worst relative error between central differences and the analytic
    directional derivative over ``n_probes`` random directions."""
    if step <= 0:
        raise ValueError("step must be positive")
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        if op_id == "quadratic":
            x = np.asarray(point, dtype=np.float64)
            v = rng.standard_normal(x.shape)
            f = lambda z: float(z.ravel() @ z.ravel())
            with np.errstate(over="ignore", invalid="ignore"):
                fd = (f(x + step * v) - f(x - step * v)) / (2 * step)
            an = float(2 * x.ravel() @ v.ravel())
            scale = 2 * np.linalg.norm(x)
        elif op_id == "scan":
            try:
                fd, an, scale = _scan_probe(point, rng, step)
            except ValueError as exc:
                raise FloatingPointError(f"finite-difference probe left the domain: {exc}") from exc
        else:
            raise ValueError(f"unknown op {op_id!r}; expected one of {FD_OPS}")
        if not (np.isfinite(fd) and np.isfinite(an)):
            raise FloatingPointError("non-finite value during finite-difference check")
        denom = max(abs(fd), abs(an), 1e-6 * scale, 1e-300)
        worst = max(worst, abs(fd - an) / denom)
    return worst
