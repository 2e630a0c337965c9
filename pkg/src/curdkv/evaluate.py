"""Reconstruction losses, the zero-padding error bound, cache-size accounting and sweeps.

Two compressed-attention semantics are kept apart on purpose:

* sub-matrix: the softmax is renormalised over retained rows only, as a real
  compressed cache behaves; used by :func:`eviction_loss`.
* zero-padded: evicted rows of K and V are set to zero but keep their slot;
  used by :func:`qk_loss` and :func:`lemma1_check`.
"""

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cache import KVCache, attention_output
from .linalg import ShapeError, as_matrix, frobenius_norm, softmax_rows
from .policy import CompressionConfig, Policy, apply_selection_per_group, select
from .scoring import Method

BOUND_TOL = 1e-9
DEFAULT_BYTES_PER_ELEMENT = 2

CSV_COLUMNS = (
    "policy",
    "method",
    "ratio",
    "seed",
    "group",
    "eviction_loss",
    "qk_loss",
    "bound_lhs",
    "bound_rhs",
    "cache_bytes_full",
    "cache_bytes_compressed",
    "eviction_loss_rel",
    "qk_loss_rel",
    "bound_holds",
    "retained",
    "error",
)


def _comp_group(cache_full: KVCache, cache_comp: KVCache, group: int) -> int:
    if cache_comp.groups == cache_full.groups:
        return group
    if cache_comp.groups == 1:
        return 0
    raise ShapeError(
        f"compressed cache has {cache_comp.groups} groups; expected {cache_full.groups} or a single group"
    )


def eviction_loss(q, cache_full: KVCache, cache_comp: KVCache, group: int, relative: bool = False) -> float:
    """``||attn(q, K, V) - attn(q, K_kept, V_kept)||_F`` for one group.

    ``cache_comp`` is either a compressed cache with the same groups or a
    single-group cache (as produced by ``apply_selection_per_group``).
    """
    cg = _comp_group(cache_full, cache_comp, group)
    k_full, v_full = cache_full.group(group)
    k_comp, v_comp = cache_comp.group(cg)
    pos = cache_comp.positions[cg]
    if k_comp.shape[1] != k_full.shape[1]:
        raise ShapeError(f"compressed width {k_comp.shape[1]} differs from full width {k_full.shape[1]}")
    if pos.size and (pos.min() < 0 or pos.max() >= cache_full.tokens):
        raise ShapeError("compressed cache positions fall outside the full cache")
    if not (np.array_equal(k_full[pos], k_comp) and np.array_equal(v_full[pos], v_comp)):
        raise ValueError(f"compressed rows of group {group} are not rows of the full cache")
    full_out = attention_output(q, k_full, v_full)
    if k_comp.shape[0] == 0:
        diff = full_out
    else:
        diff = full_out - attention_output(q, k_comp, v_comp)
    loss = frobenius_norm(diff)
    if relative:
        ref = frobenius_norm(full_out)
        return loss / ref if ref > 0 else 0.0
    return loss


def qk_loss(q, cache_full: KVCache, sel, group: int, relative: bool = False) -> float:
    """``||Q K^T - Q K'^T||_F`` with K' the zero-padded compressed keys."""
    q = as_matrix(q, "queries")
    keys = cache_full.keys[group]
    if q.shape[1] != keys.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} differs from key width {keys.shape[1]}")
    padded = np.zeros_like(keys)
    kept = sel.indices[group]
    padded[kept] = keys[kept]
    full = q @ keys.T
    loss = frobenius_norm(full - q @ padded.T)
    if relative:
        ref = frobenius_norm(full)
        return loss / ref if ref > 0 else 0.0
    return loss


@dataclass(frozen=True)
class BoundRecord:
    lhs: float
    rhs: float
    holds: bool

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs == 0 else math.inf


def lemma1_check(q, k, v, evicted) -> BoundRecord:
    """Evaluate the zero-padding eviction bound.

    ``lhs = ||softmax(QK^T)V - softmax(QK'^T)V'||_F`` and
    ``rhs = sqrt(n) ||V - V'||_F + 2 sqrt(n) ||V'||_F``, where K', V' zero out
    the evicted rows. ``n`` is the token count; with more query rows than
    tokens the query row count is used, since the row-stochastic operator
    norm is bounded by the square root of the number of rows.
    """
    q = as_matrix(q, "queries")
    k = as_matrix(k, "keys")
    v = as_matrix(v, "values")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible shapes q={q.shape}, k={k.shape}, v={v.shape}")
    n = k.shape[0]
    ev = np.unique(np.asarray(list(evicted), dtype=np.int64))
    if ev.size and (ev.min() < 0 or ev.max() >= n):
        raise IndexError(f"evicted indices must lie in [0, {n})")
    k_pad, v_pad = k.copy(), v.copy()
    k_pad[ev] = 0.0
    v_pad[ev] = 0.0
    lhs = frobenius_norm(softmax_rows(q @ k.T) @ v - softmax_rows(q @ k_pad.T) @ v_pad)
    root = math.sqrt(max(n, q.shape[0]))
    rhs = root * frobenius_norm(v - v_pad) + 2.0 * root * frobenius_norm(v_pad)
    return BoundRecord(lhs, rhs, lhs <= rhs + BOUND_TOL)


def random_bound_trials(trials: int, max_n: int = 32, max_d: int = 16, seed: int = 0) -> list:
    """Bound records on random ``Q, K, V`` (n x d each) with random eviction sets."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        n = int(rng.integers(1, max_n + 1))
        d = int(rng.integers(1, max_d + 1))
        scale = float(rng.choice([0.1, 1.0, 5.0]))
        q, k, v = (scale * rng.standard_normal((n, d)) for _ in range(3))
        evicted = np.flatnonzero(rng.random(n) < rng.random())
        out.append(lemma1_check(q, k, v, evicted))
    return out


def cache_bytes(cache, bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> int:
    """Key plus value storage, ``2 * g * n * d * bytes``; a list of caches is summed."""
    if isinstance(cache, KVCache):
        g, n, d = cache.shape
        return 2 * g * n * d * bytes_per_element
    return sum(cache_bytes(c, bytes_per_element) for c in cache)


def gaussian_queries(groups: int, window: int, dim: int, seed: int) -> np.ndarray:
    """Seeded N(0, 1) observation queries, shape ``(g, w, d)``."""
    return np.random.default_rng(seed).standard_normal((groups, window, dim))


def tail_queries(cache: KVCache, window: int) -> np.ndarray:
    """The last ``window`` keys of each group, used as stand-in queries."""
    return np.array(cache.keys[:, -window:])


@dataclass
class EvalReport:
    policy: str
    method: str
    ratio: float
    seed: int
    eviction_loss: list = field(default_factory=list)
    qk_loss: list = field(default_factory=list)
    eviction_loss_rel: list = field(default_factory=list)
    qk_loss_rel: list = field(default_factory=list)
    bound_lhs: list = field(default_factory=list)
    bound_rhs: list = field(default_factory=list)
    bound_holds: list = field(default_factory=list)
    retained: list = field(default_factory=list)
    cache_bytes_full: int = 0
    cache_bytes_compressed: int = 0
    error: str = None

    @property
    def mean_eviction_loss(self) -> float:
        return float(np.mean(self.eviction_loss)) if self.eviction_loss else math.nan

    @property
    def mean_qk_loss(self) -> float:
        return float(np.mean(self.qk_loss)) if self.qk_loss else math.nan

    @property
    def ok(self) -> bool:
        return self.error is None and all(self.bound_holds)

    def rows(self, per_group: bool = False) -> list:
        base = {"policy": self.policy, "method": self.method, "ratio": self.ratio, "seed": self.seed}
        if self.error is not None:
            return [{**base, "group": "mean", "error": self.error}]

        def mean(xs):
            return float(np.mean(xs))

        out = [
            {
                **base,
                "group": "mean",
                "eviction_loss": mean(self.eviction_loss),
                "qk_loss": mean(self.qk_loss),
                "bound_lhs": mean(self.bound_lhs),
                "bound_rhs": mean(self.bound_rhs),
                "cache_bytes_full": self.cache_bytes_full,
                "cache_bytes_compressed": self.cache_bytes_compressed,
                "eviction_loss_rel": mean(self.eviction_loss_rel),
                "qk_loss_rel": mean(self.qk_loss_rel),
                "bound_holds": all(self.bound_holds),
                "retained": sum(self.retained),
            }
        ]
        if per_group:
            g = len(self.eviction_loss)
            for i in range(g):
                out.append(
                    {
                        **base,
                        "group": i,
                        "eviction_loss": self.eviction_loss[i],
                        "qk_loss": self.qk_loss[i],
                        "bound_lhs": self.bound_lhs[i],
                        "bound_rhs": self.bound_rhs[i],
                        "cache_bytes_full": self.cache_bytes_full // g,
                        "cache_bytes_compressed": self.cache_bytes_compressed * self.retained[i] // max(1, sum(self.retained)),
                        "eviction_loss_rel": self.eviction_loss_rel[i],
                        "qk_loss_rel": self.qk_loss_rel[i],
                        "bound_holds": self.bound_holds[i],
                        "retained": self.retained[i],
                    }
                )
        return out


def evaluate_selection(cache: KVCache, sel, q_groups, bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT, **labels) -> EvalReport:
    """Losses and bound quantities for an existing selection; ``q_groups`` is ``(g, w, d)``."""
    q_groups = np.asarray(q_groups, dtype=np.float64)
    if q_groups.ndim != 3 or q_groups.shape[0] != cache.groups or q_groups.shape[2] != cache.dim:
        raise ShapeError(f"queries must have shape ({cache.groups}, w, {cache.dim}), got {q_groups.shape}")
    report = EvalReport(**labels)
    comp = apply_selection_per_group(cache, sel)
    for i in range(cache.groups):
        q = q_groups[i]
        report.eviction_loss.append(eviction_loss(q, cache, comp[i], i))
        report.eviction_loss_rel.append(eviction_loss(q, cache, comp[i], i, relative=True))
        report.qk_loss.append(qk_loss(q, cache, sel, i))
        report.qk_loss_rel.append(qk_loss(q, cache, sel, i, relative=True))
        k_i, v_i = cache.group(i)
        bound = lemma1_check(q, k_i, v_i, sel.evicted(i))
        report.bound_lhs.append(bound.lhs)
        report.bound_rhs.append(bound.rhs)
        report.bound_holds.append(bound.holds)
        report.retained.append(int(sel.indices[i].size))
    report.cache_bytes_full = cache_bytes(cache, bytes_per_element)
    report.cache_bytes_compressed = cache_bytes(comp, bytes_per_element)
    return report


def _resolve(source, *args):
    return source(*args) if callable(source) else source


@dataclass(frozen=True)
class SweepCell:
    policy: Policy
    method: Method
    ratio: float
    seed: int


def sweep_grid(policies, methods, ratios, seeds) -> list:
    """Grid cells in deterministic order; window_sinks ignores scores and gets one cell per (ratio, seed)."""
    if not (policies and methods and ratios and seeds):
        raise ValueError("sweep grid must have at least one policy, method, ratio and seed")
    cells = []
    for p in map(Policy, policies):
        ms = [Method.POSITION_RECENCY] if p is Policy.WINDOW_SINKS else list(dict.fromkeys(map(Method, methods)))
        for m in ms:
            for r in ratios:
                for s in seeds:
                    cells.append(SweepCell(p, m, float(r), int(s)))
    return cells


def run_cell(cell: SweepCell, cache_source, queries_source, base_cfg: CompressionConfig, chunk_len: int = 32, bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> EvalReport:
    labels = dict(policy=str(cell.policy), method=str(cell.method), ratio=cell.ratio, seed=cell.seed)
    try:
        cache = _resolve(cache_source, cell.seed)
        q = _resolve(queries_source, cache, cell.seed)
        cfg = replace(base_cfg, budget_k=None, compression_ratio=cell.ratio, method=cell.method, seed=cell.seed)
        sel = select(cell.policy, cache, cfg, obs_queries=None, chunk_len=chunk_len)
        return evaluate_selection(cache, sel, q, bytes_per_element, **labels)
    except Exception as exc:  # recorded per cell, the sweep continues
        return EvalReport(**labels, error=f"{type(exc).__name__}: {exc}")


def run_sweep(
    cache_source,
    policies,
    methods,
    ratios,
    seeds,
    queries_source,
    base_cfg: CompressionConfig = None,
    chunk_len: int = 32,
    bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT,
    workers: int = 1,
) -> list:
    """Evaluate every grid cell.

    ``cache_source`` is a :class:`KVCache` or a callable ``seed -> KVCache``;
    ``queries_source`` is a ``(g, w, d)`` array or a callable
    ``(cache, seed) -> array``. Reports come back in grid order whatever the
    number of workers.
    """
    if base_cfg is None:
        base_cfg = CompressionConfig(compression_ratio=0.0)
    cells = sweep_grid(policies, methods, ratios, seeds)

    def run(cell):
        return run_cell(cell, cache_source, queries_source, base_cfg, chunk_len, bytes_per_element)

    if workers <= 1:
        return [run(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, cells))


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def reports_to_csv(reports, per_group: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        for row in rep.rows(per_group):
            writer.writerow({c: _csv_value(row.get(c)) for c in CSV_COLUMNS})
    return buf.getvalue()


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def reports_to_json(reports, per_group: bool = False) -> str:
    records = [
        {c: _json_value(row.get(c)) for c in CSV_COLUMNS}
        for rep in reports
        for row in rep.rows(per_group)
    ]
    return json.dumps(records, indent=2) + "\n"
