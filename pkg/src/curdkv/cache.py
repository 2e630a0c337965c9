"""Grouped KV-cache model, a single-layer toy attention and synthetic cache generators."""

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError, as_matrix, matmul, softmax_rows


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class KVCache:
    """Keys and values of ``g`` groups, each ``n x d``.

    ``positions`` (shape ``(g, n)``) records the original token index of every
    row, so a compressed cache still knows where its rows came from. ``info`` carries
    free-form provenance (generator kind, planted rows, ...).
    """

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if keys.ndim != 3 or values.ndim != 3:
            raise ShapeError(f"keys and values must be 3-D (g, n, d), got {keys.shape} and {values.shape}")
        if keys.shape != values.shape:
            raise ShapeError(f"key shape {keys.shape} differs from value shape {values.shape}")
        g, n, d = keys.shape
        if g < 1 or d < 1:
            raise ShapeError(f"cache needs g >= 1 and d >= 1, got g={g}, d={d}")
        if not (np.all(np.isfinite(keys)) and np.all(np.isfinite(values))):
            raise ValueError("cache contains NaN or Inf entries")
        if self.positions is None:
            positions = np.broadcast_to(np.arange(n), (g, n))
        else:
            positions = np.asarray(self.positions, dtype=np.int64)
        if positions.shape != (g, n):
            raise ShapeError(f"positions must have shape {(g, n)}, got {positions.shape}")
        object.__setattr__(self, "keys", _frozen(keys))
        object.__setattr__(self, "values", _frozen(values))
        positions = np.array(positions, dtype=np.int64)
        positions.flags.writeable = False
        object.__setattr__(self, "positions", positions)

    @property
    def groups(self) -> int:
        return self.keys.shape[0]

    @property
    def tokens(self) -> int:
        return self.keys.shape[1]

    @property
    def dim(self) -> int:
        return self.keys.shape[2]

    @property
    def shape(self) -> tuple:
        return self.keys.shape

    @classmethod
    def empty(cls, groups: int, dim: int) -> "KVCache":
        z = np.zeros((groups, 0, dim))
        return cls(z, z.copy())

    def group(self, i: int) -> tuple:
        return self.keys[i], self.values[i]

    def equals(self, other: "KVCache") -> bool:
        """Bit-exact equality of keys, values and positions."""
        return (
            self.shape == other.shape
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.positions, other.positions)
        )


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Per-group projections, each stacked as ``(g, d_model, d_head)``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(w, dtype=np.float64) for w in (self.wq, self.wk, self.wv)]
        if any(w.ndim != 3 for w in arrs) or not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ShapeError(
                "wq, wk, wv must share one (g, d_model, d_head) shape, got "
                + ", ".join(str(w.shape) for w in arrs)
            )
        for name, w in zip(("wq", "wk", "wv"), arrs):
            object.__setattr__(self, name, _frozen(w))

    @property
    def groups(self) -> int:
        return self.wq.shape[0]

    @property
    def d_model(self) -> int:
        return self.wq.shape[1]

    @property
    def d_head(self) -> int:
        return self.wq.shape[2]

    @classmethod
    def random(cls, groups: int, d_model: int, d_head: int, seed: int) -> "AttentionWeights":
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((3, groups, d_model, d_head)) / np.sqrt(d_model)
        return cls(w[0], w[1], w[2])


def _check_hidden(x, weights: AttentionWeights) -> np.ndarray:
    x = as_matrix(x, "hidden states", allow_empty=True)
    if x.shape[1] != weights.d_model:
        raise ShapeError(
            f"hidden states have width {x.shape[1]} but weights expect d_model={weights.d_model} "
            f"(x is {x.shape[0]}x{x.shape[1]}, weights are {weights.wk.shape})"
        )
    return x


def project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stack ``x @ w[i]`` over groups into ``(g, n, d_head)``.

    Rows are projected one at a time so a row's result never depends on how
    many rows were projected alongside it (BLAS may switch kernels by shape),
    which keeps prefill and stepwise appends bit-identical.
    """
    g, _, d_head = w.shape
    out = np.empty((g, x.shape[0], d_head))
    for i in range(g):
        for j in range(x.shape[0]):
            out[i, j] = matmul(x[j : j + 1], w[i])[0]
    return out


def prefill(x, weights: AttentionWeights) -> KVCache:
    x = _check_hidden(x, weights)
    return KVCache(project(x, weights.wk), project(x, weights.wv))


def queries(x, weights: AttentionWeights) -> np.ndarray:
    """Query states ``x @ W_q`` per group, shape ``(g, rows, d_head)``."""
    return project(_check_hidden(x, weights), weights.wq)


def append_step(cache: KVCache, x, weights: AttentionWeights) -> KVCache:
    """Return a new cache with the projections of one hidden-state row appended."""
    x = _check_hidden(x, weights)
    if x.shape[0] != 1:
        raise ShapeError(f"append_step takes a single row, got {x.shape[0]} rows")
    if weights.groups != cache.groups or weights.d_head != cache.dim:
        raise ShapeError(
            f"weights of shape {weights.wk.shape} do not match cache (g={cache.groups}, d={cache.dim})"
        )
    keys = np.concatenate([cache.keys, project(x, weights.wk)], axis=1)
    values = np.concatenate([cache.values, project(x, weights.wv)], axis=1)
    next_pos = cache.positions[:, -1:] + 1 if cache.tokens else np.zeros((cache.groups, 1), dtype=np.int64)
    return KVCache(keys, values, np.concatenate([cache.positions, next_pos], axis=1), dict(cache.info))


def attention_output(q, keys, values, scaled=False) -> np.ndarray:
    """``softmax(q keys^T) values``; ``scaled`` divides logits by sqrt(d) (off by default)."""
    q = as_matrix(q, "queries")
    keys = as_matrix(keys, "keys")
    values = as_matrix(values, "values")
    if q.shape[1] != keys.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} differs from key width {keys.shape[1]}")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(f"{keys.shape[0]} keys but {values.shape[0]} values")
    logits = matmul(q, keys.T)
    if scaled:
        logits /= math.sqrt(keys.shape[1])
    return matmul(softmax_rows(logits), values)


SYNTHETIC_KINDS = ("iid_gaussian", "planted_heavy", "sink_pattern")


def generate_synthetic(kind: str, g: int, n: int, d: int, seed: int, **params) -> KVCache:
    """Seeded synthetic cache.

    ``iid_gaussian``: all entries N(0, 1).
    ``planted_heavy``: ``ceil(p * n)`` token rows (shared across groups) scaled
    by ``m`` in both keys and values; defaults ``p=0.1, m=10``. The planted
    indices are stored under ``info["planted"]``.
    ``sink_pattern``: the first ``sinks`` keys scaled by ``scale``; defaults
    ``sinks=4, scale=10``.
    """
    if min(g, n, d) < 1:
        raise ValueError(f"dimensions must be positive, got g={g}, n={n}, d={d}")
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    allowed = {"iid_gaussian": set(), "planted_heavy": {"p", "m"}, "sink_pattern": {"sinks", "scale"}}[kind]
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"unknown parameters for {kind}: {sorted(unknown)}")

    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((g, n, d))
    values = rng.standard_normal((g, n, d))
    info = {"kind": kind, "seed": int(seed)}

    if kind == "planted_heavy":
        p = float(params.get("p", 0.1))
        m = float(params.get("m", 10.0))
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"planted fraction p must lie in [0, 1], got {p}")
        if m <= 0:
            raise ValueError(f"planted scale m must be positive, got {m}")
        count = math.ceil(p * n - 1e-12)
        planted = np.sort(rng.choice(n, size=count, replace=False))
        keys[:, planted] *= m
        values[:, planted] *= m
        info.update(p=p, m=m, planted=planted.tolist())
    elif kind == "sink_pattern":
        sinks = int(params.get("sinks", 4))
        scale = float(params.get("scale", 10.0))
        if not 0 <= sinks <= n:
            raise ValueError(f"sink count must lie in [0, n={n}], got {sinks}")
        if scale <= 0:
            raise ValueError(f"sink scale must be positive, got {scale}")
        keys[:, :sinks] *= scale
        info.update(sinks=sinks, scale=scale)

    return KVCache(keys, values, info=info)
