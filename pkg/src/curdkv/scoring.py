"""Per-token importance scores for one group of a KV cache.

Squared norms are used throughout: exact leverage is ``||U[j, :]||^2`` from a
thin SVD and the sketched proxy is ``||(A G)[j]||^2``. Squaring is monotone,
so it never changes which tokens a top-k selection keeps.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import ShapeError, as_matrix, gaussian_sketch, softmax_rows, svd_thin

DEFAULT_SKETCH_DIM = 20
DEFAULT_OBS_WINDOW = 8


class Method(str, Enum):
    EXACT_LEVERAGE_KEY = "exact_leverage_key"
    EXACT_LEVERAGE_VALUE = "exact_leverage_value"
    EXACT_LEVERAGE_KV = "exact_leverage_kv"
    SKETCH_KEY = "sketch_key"
    SKETCH_VALUE = "sketch_value"
    SKETCH_KV = "sketch_kv"
    KEY_NORM = "key_norm"
    ATTENTION_SUM = "attention_sum"
    POSITION_RECENCY = "position_recency"

    def __str__(self):
        return self.value


@dataclass(frozen=True, eq=False)
class ScoreVector:
    scores: np.ndarray
    method: Method
    normalized: bool = False

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1:
            raise ShapeError(f"scores must be 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("scores must be finite and non-negative")
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "method", Method(self.method))

    def __len__(self):
        return self.scores.shape[0]

    @property
    def all_zero(self) -> bool:
        return not np.any(self.scores)

    def normalize(self) -> "ScoreVector":
        """Scale to unit sum; an all-zero vector is returned unchanged and stays unnormalized."""
        total = self.scores.sum()
        if total == 0:
            return self
        return ScoreVector(self.scores / total, self.method, True)


def _row_sq_norms(a: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, a)


def exact_row_leverage(a, method=Method.EXACT_LEVERAGE_VALUE) -> ScoreVector:
    """Squared row norms of the left singular vectors; they sum to rank(a)."""
    svd = svd_thin(a)
    return ScoreVector(_row_sq_norms(svd.u), method)


def exact_col_leverage(a, method=Method.EXACT_LEVERAGE_VALUE) -> ScoreVector:
    svd = svd_thin(a)
    return ScoreVector(_row_sq_norms(svd.vt.T), method)


def sketch_row_scores(a, r: int = DEFAULT_SKETCH_DIM, seed: int = 0, method=Method.SKETCH_VALUE) -> ScoreVector:
    """Squared row norms of ``a @ G`` with ``G ~ N(0, 1/r)``; unbiased for ``||a[j]||^2``."""
    a = as_matrix(a)
    if r < 1:
        raise ValueError(f"sketch dimension must be >= 1, got {r}")
    projected = a @ gaussian_sketch(a.shape[1], r, seed)
    return ScoreVector(_row_sq_norms(projected), method)


def combine_kv_scores(key_scores: ScoreVector, value_scores: ScoreVector, method=None) -> ScoreVector:
    """Element-wise product of key and value scores, normalized to unit sum."""
    if len(key_scores) != len(value_scores):
        raise ShapeError(f"cannot combine {len(key_scores)} key scores with {len(value_scores)} value scores")
    if method is None:
        method = Method.EXACT_LEVERAGE_KV if key_scores.method.value.startswith("exact") else Method.SKETCH_KV
    return ScoreVector(key_scores.scores * value_scores.scores, method).normalize()


def key_norm_scores(keys, retain_low_norm: bool = True) -> ScoreVector:
    """Knorm ranking statistic.

    With ``retain_low_norm`` (default) the score is ``1 / (1 + ||k_j||)``, so
    top-k keeps the smallest-norm keys and the largest-norm keys are evicted
    first. Otherwise the score is ``||k_j||`` itself.
    """
    keys = as_matrix(keys, "keys")
    norms = np.sqrt(_row_sq_norms(keys))
    scores = 1.0 / (1.0 + norms) if retain_low_norm else norms
    return ScoreVector(scores, Method.KEY_NORM)


def attention_sum_scores(q, keys) -> ScoreVector:
    """Mean softmax attention each key receives from the observation-window queries."""
    q = as_matrix(q, "observation queries")
    keys = as_matrix(keys, "keys")
    if q.shape[1] != keys.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} differs from key width {keys.shape[1]}")
    weights = softmax_rows(q @ keys.T)
    return ScoreVector(weights.mean(axis=0), Method.ATTENTION_SUM, True)


def recency_scores(n: int) -> ScoreVector:
    """Later tokens score higher; top-k keeps the most recent tokens."""
    return ScoreVector(np.arange(1, n + 1, dtype=np.float64), Method.POSITION_RECENCY)


def score_group(
    keys,
    values,
    method,
    sketch_dim: int = DEFAULT_SKETCH_DIM,
    seed: int = 0,
    obs_queries=None,
    obs_window: int = DEFAULT_OBS_WINDOW,
    knorm_retain_low: bool = True,
) -> ScoreVector:
    """Score one group's tokens with ``method``.

    The Gaussian sketch is shared between the key and value projections of
    the group, as in one loop iteration of the CurDKV procedure. For
    ``attention_sum`` without explicit observation queries, the last
    ``obs_window`` keys stand in for the observation window.
    """
    method = Method(method)
    keys = as_matrix(keys, "keys")
    values = as_matrix(values, "values")
    if keys.shape != values.shape:
        raise ShapeError(f"key shape {keys.shape} differs from value shape {values.shape}")

    if method is Method.EXACT_LEVERAGE_KEY:
        return exact_row_leverage(keys, method).normalize()
    if method is Method.EXACT_LEVERAGE_VALUE:
        return exact_row_leverage(values, method).normalize()
    if method is Method.EXACT_LEVERAGE_KV:
        return combine_kv_scores(exact_row_leverage(keys, method), exact_row_leverage(values, method), method)
    if method is Method.SKETCH_KEY:
        return sketch_row_scores(keys, sketch_dim, seed, method).normalize()
    if method is Method.SKETCH_VALUE:
        return sketch_row_scores(values, sketch_dim, seed, method).normalize()
    if method is Method.SKETCH_KV:
        return combine_kv_scores(
            sketch_row_scores(keys, sketch_dim, seed, method),
            sketch_row_scores(values, sketch_dim, seed, method),
            method,
        )
    if method is Method.KEY_NORM:
        return key_norm_scores(keys, knorm_retain_low).normalize()
    if method is Method.ATTENTION_SUM:
        if obs_queries is None:
            obs_queries = keys[-obs_window:]
        return attention_sum_scores(obs_queries, keys)
    return recency_scores(keys.shape[0]).normalize()
