"""Token-selection policies turning per-group scores into retained index sets.

Every policy keeps the first ``s`` tokens as attention sinks and breaks score
ties in favour of the lower token index.
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .cache import KVCache
from .linalg import ShapeError, derive_seed
from .scoring import DEFAULT_OBS_WINDOW, DEFAULT_SKETCH_DIM, Method, ScoreVector, recency_scores, score_group

DEFAULT_SINKS = 4
DEFAULT_ALPHA = 0.20


class Policy(str, Enum):
    CURDKV = "curdkv"
    ADACURDKV = "adacurdkv"
    WINDOW_SINKS = "window_sinks"
    CHUNKED = "chunked"

    def __str__(self):
        return self.value


class BudgetError(ValueError):
    """The requested budget cannot be honoured for this cache."""


@dataclass(frozen=True)
class CompressionConfig:
    budget_k: int = None
    compression_ratio: float = None
    sketch_dim: int = DEFAULT_SKETCH_DIM
    sinks: int = DEFAULT_SINKS
    method: Method = Method.SKETCH_KV
    adaptive: bool = False
    safeguard_alpha: float = DEFAULT_ALPHA
    seed: int = 0
    obs_window: int = DEFAULT_OBS_WINDOW
    # cross-group ranking in the adaptive policy uses raw instead of per-group normalized scores
    adaptive_raw_scores: bool = False
    knorm_retain_low: bool = True

    def __post_init__(self):
        if (self.budget_k is None) == (self.compression_ratio is None):
            raise ValueError("set exactly one of budget_k and compression_ratio")
        if self.budget_k is not None and self.budget_k < 1:
            raise ValueError(f"budget_k must be >= 1, got {self.budget_k}")
        if self.compression_ratio is not None and not 0.0 <= self.compression_ratio < 1.0:
            raise ValueError(f"compression_ratio must lie in [0, 1), got {self.compression_ratio}")
        if self.sketch_dim < 1:
            raise ValueError(f"sketch_dim must be >= 1, got {self.sketch_dim}")
        if self.sinks < 0:
            raise ValueError(f"sinks must be >= 0, got {self.sinks}")
        if not 0.0 <= self.safeguard_alpha <= 1.0:
            raise ValueError(f"safeguard_alpha must lie in [0, 1], got {self.safeguard_alpha}")
        if self.obs_window < 1:
            raise ValueError(f"obs_window must be >= 1, got {self.obs_window}")
        object.__setattr__(self, "method", Method(self.method))

    def budget(self, n: int) -> int:
        """Per-group budget ``k`` for a cache of ``n`` tokens.

        A ratio is converted as ``max(s, round_half_up((1 - ratio) * n))`` and
        clamped to ``[1, n]``; an explicit ``budget_k`` above ``n`` is an error.
        """
        if self.budget_k is not None:
            if self.budget_k > n:
                raise BudgetError(f"budget_k={self.budget_k} exceeds the {n} cached tokens")
            return self.budget_k
        kept = math.floor((1.0 - self.compression_ratio) * n + 0.5)
        return min(max(self.sinks, kept, 1), n)

    def with_ratio(self, ratio: float) -> "CompressionConfig":
        return replace(self, budget_k=None, compression_ratio=ratio)


@dataclass(frozen=True, eq=False)
class SelectionResult:
    indices: tuple
    sinks: tuple
    scores: tuple
    requested_k: int
    tokens: int
    policy: Policy
    method: Method = None
    info: dict = field(default_factory=dict)

    @property
    def groups(self) -> int:
        return len(self.indices)

    @property
    def granted(self) -> list:
        return [int(ix.size) for ix in self.indices]

    @property
    def total_retained(self) -> int:
        return sum(self.granted)

    @property
    def uniform(self) -> bool:
        return len(set(self.granted)) == 1

    def evicted(self, group: int) -> np.ndarray:
        return np.setdiff1d(np.arange(self.tokens), self.indices[group])

    def to_dict(self) -> dict:
        return {
            "policy": str(self.policy),
            "method": None if self.method is None else str(self.method),
            "tokens": self.tokens,
            "requested_k": self.requested_k,
            "granted": self.granted,
            "sinks": [ix.tolist() for ix in self.sinks],
            "indices": [ix.tolist() for ix in self.indices],
            **self.info,
        }


def top_k_after_sinks(scores: np.ndarray, k: int, s: int) -> np.ndarray:
    """Sinks ``{0..s-1}`` plus the ``k - s`` best-scoring later tokens, sorted.

    When ``k <= s`` only the first ``k`` tokens are kept.
    """
    n = scores.shape[0]
    if k > n:
        raise BudgetError(f"cannot retain {k} of {n} tokens")
    if k <= s:
        return np.arange(k)
    order = np.argsort(-scores[s:], kind="stable")[: k - s] + s
    return np.concatenate([np.arange(s), np.sort(order)])


def _ranking_scores(sv: ScoreVector) -> ScoreVector:
    # all-zero scores fall back to recency: the most recent tokens are kept
    if sv.all_zero:
        return recency_scores(len(sv)).normalize()
    return sv


def group_scores(cache: KVCache, cfg: CompressionConfig, obs_queries=None) -> list:
    """Score every group; group ``i`` uses the sketch seed ``derive_seed(cfg.seed, i)``."""
    if obs_queries is not None:
        obs_queries = np.asarray(obs_queries, dtype=np.float64)
        if obs_queries.ndim != 3 or obs_queries.shape[0] != cache.groups or obs_queries.shape[2] != cache.dim:
            raise ShapeError(
                f"observation queries must have shape ({cache.groups}, w, {cache.dim}), got {obs_queries.shape}"
            )
    out = []
    for i in range(cache.groups):
        k_i, v_i = cache.group(i)
        out.append(
            score_group(
                k_i,
                v_i,
                cfg.method,
                sketch_dim=cfg.sketch_dim,
                seed=derive_seed(cfg.seed, i),
                obs_queries=None if obs_queries is None else obs_queries[i],
                obs_window=cfg.obs_window,
                knorm_retain_low=cfg.knorm_retain_low,
            )
        )
    return out


def _resolve_scores(cache, cfg, obs_queries, scores):
    if scores is None:
        return group_scores(cache, cfg, obs_queries)
    scores = list(scores)
    if len(scores) != cache.groups or any(len(sv) != cache.tokens for sv in scores):
        raise ShapeError(f"need {cache.groups} score vectors of length {cache.tokens}")
    return scores


def _sink_sets(g, k, s):
    return tuple(np.arange(min(s, k)) for _ in range(g))


def select_curdkv(cache: KVCache, cfg: CompressionConfig, obs_queries=None, scores=None) -> SelectionResult:
    """Per-group top-k on the configured scores, sinks always kept."""
    n, s = cache.tokens, cfg.sinks
    k = cfg.budget(n)
    scores = _resolve_scores(cache, cfg, obs_queries, scores)
    indices = tuple(top_k_after_sinks(_ranking_scores(sv).scores, k, s) for sv in scores)
    return SelectionResult(indices, _sink_sets(cache.groups, k, s), tuple(scores), k, n, Policy.CURDKV, cfg.method)


def select_adacurdkv(cache: KVCache, cfg: CompressionConfig, obs_queries=None, scores=None) -> SelectionResult:
    """Layer-wide budget ``g * k`` shared across groups.

    Each group first gets its sinks plus local top tokens up to the floor
    ``max(s, ceil(alpha * k))``; the rest of the pool goes to the globally
    highest scores over all groups (ties: lower group, then lower token).
    """
    if not cfg.adaptive:
        raise ValueError("select_adacurdkv needs a config with adaptive=True")
    g, n, s = cache.groups, cache.tokens, cfg.sinks
    k = cfg.budget(n)
    pool = g * k
    if pool > g * n:
        raise BudgetError(f"layer budget {pool} exceeds the {g * n} cached rows")
    scores = _resolve_scores(cache, cfg, obs_queries, scores)
    ranked = [_ranking_scores(sv) for sv in scores]
    if not cfg.adaptive_raw_scores:
        ranked = [sv.normalize() for sv in ranked]

    floor = min(k, max(s, math.ceil(cfg.safeguard_alpha * k - 1e-9)))
    local = [top_k_after_sinks(sv.scores, floor, s) for sv in ranked]

    flat = np.concatenate([sv.scores for sv in ranked])
    taken = np.zeros(g * n, dtype=bool)
    for i, ix in enumerate(local):
        taken[i * n + ix] = True
    remaining = pool - g * floor
    candidates = np.flatnonzero(~taken)
    order = candidates[np.argsort(-flat[candidates], kind="stable")][:remaining]
    taken[order] = True

    indices = tuple(np.flatnonzero(taken[i * n : (i + 1) * n]) for i in range(g))
    info = {"floor": floor, "pool": pool}
    return SelectionResult(
        indices, _sink_sets(g, k, s), tuple(scores), k, n, Policy.ADACURDKV, cfg.method, info
    )


def select_window_sinks(cache: KVCache, cfg: CompressionConfig) -> SelectionResult:
    """Streaming window: sinks plus the most recent ``k - s`` tokens, regardless of content."""
    n, s = cache.tokens, cfg.sinks
    k = cfg.budget(n)
    ix = np.arange(k) if k <= s else np.concatenate([np.arange(s), np.arange(n - (k - s), n)])
    return SelectionResult(
        tuple(ix.copy() for _ in range(cache.groups)),
        _sink_sets(cache.groups, k, s),
        tuple(None for _ in range(cache.groups)),
        k,
        n,
        Policy.WINDOW_SINKS,
        Method.POSITION_RECENCY,
    )


def chunk_quotas(sizes, budget: int) -> list:
    """Largest-remainder apportionment of ``budget`` over chunks of the given sizes.

    Remainder ties go to the earlier chunk.
    """
    sizes = [int(m) for m in sizes]
    total = sum(sizes)
    if budget > total:
        raise BudgetError(f"cannot apportion {budget} slots over {total} tokens")
    if total == 0:
        return [0] * len(sizes)
    quotas = [budget * m // total for m in sizes]
    remainders = [budget * m % total for m in sizes]
    leftover = budget - sum(quotas)
    for c in sorted(range(len(sizes)), key=lambda c: (-remainders[c], c))[:leftover]:
        quotas[c] += 1
    return quotas


def select_chunked(
    cache: KVCache, cfg: CompressionConfig, chunk_len: int, obs_queries=None, scores=None
) -> SelectionResult:
    """ChunkKV-style selection.

    Tokens are split into contiguous chunks of ``chunk_len``. Sinks are forced
    in; the other ``k - s`` slots are apportioned over chunks in proportion to
    their non-sink token counts and filled with each chunk's top scores.
    """
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    n, s = cache.tokens, cfg.sinks
    k = cfg.budget(n)
    scores = _resolve_scores(cache, cfg, obs_queries, scores)
    starts = list(range(0, n, chunk_len))
    bounds = [(max(a, s), min(a + chunk_len, n)) for a in starts]
    quotas = chunk_quotas([max(0, b - a) for a, b in bounds], max(0, k - s)) if k > s else None

    indices = []
    for sv in scores:
        sc = _ranking_scores(sv).scores
        if quotas is None:
            indices.append(np.arange(k))
            continue
        picked = [np.arange(s)]
        for (a, b), q in zip(bounds, quotas):
            if q:
                picked.append(np.argsort(-sc[a:b], kind="stable")[:q] + a)
        indices.append(np.sort(np.concatenate(picked)))
    return SelectionResult(
        tuple(indices),
        _sink_sets(cache.groups, k, s),
        tuple(scores),
        k,
        n,
        Policy.CHUNKED,
        cfg.method,
        {"chunk_len": chunk_len, "chunk_quotas": quotas},
    )


def select(policy, cache: KVCache, cfg: CompressionConfig, obs_queries=None, chunk_len: int = 32) -> SelectionResult:
    policy = Policy(policy)
    if policy is Policy.CURDKV:
        return select_curdkv(cache, cfg, obs_queries)
    if policy is Policy.ADACURDKV:
        return select_adacurdkv(cache, replace(cfg, adaptive=True), obs_queries)
    if policy is Policy.WINDOW_SINKS:
        return select_window_sinks(cache, cfg)
    return select_chunked(cache, cfg, chunk_len, obs_queries)


def _check_selection(cache: KVCache, sel: SelectionResult):
    if sel.groups != cache.groups or sel.tokens != cache.tokens:
        raise ShapeError(
            f"selection for {sel.groups} groups x {sel.tokens} tokens does not match cache "
            f"with {cache.groups} groups x {cache.tokens} tokens"
        )
    for ix in sel.indices:
        if ix.size and (ix.min() < 0 or ix.max() >= cache.tokens):
            raise IndexError(f"selection index out of range [0, {cache.tokens})")


def apply_selection(cache: KVCache, sel: SelectionResult) -> KVCache:
    """Gather retained rows (order-preserving) from the original, unprojected cache.

    Requires every group to retain the same number of tokens; ragged adaptive
    selections go through :func:`apply_selection_per_group`.
    """
    _check_selection(cache, sel)
    if not sel.uniform:
        raise ShapeError(f"ragged selection {sel.granted}; use apply_selection_per_group")
    ix = np.stack(sel.indices)
    rows = np.arange(cache.groups)[:, None]
    return KVCache(cache.keys[rows, ix], cache.values[rows, ix], cache.positions[rows, ix], dict(cache.info))


def apply_selection_per_group(cache: KVCache, sel: SelectionResult) -> list:
    """One single-group cache per group, allowing different retained counts."""
    _check_selection(cache, sel)
    return [
        KVCache(cache.keys[i : i + 1, ix], cache.values[i : i + 1, ix], cache.positions[i : i + 1, ix], dict(cache.info))
        for i, ix in enumerate(sel.indices)
    ]
