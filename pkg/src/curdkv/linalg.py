"""Dense float64 kernel: validation, products, norms, thin SVD, softmax and Gaussian sketches.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. Every public
function validates its inputs through :func:`as_matrix` so NaN/Inf never
enter the pipeline silently.
"""

from dataclasses import dataclass

import numpy as np

RANK_RTOL = 1e-10


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class SvdConvergenceError(RuntimeError):
    """The SVD iteration did not converge."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        super().__init__(f"SVD did not converge for matrix of shape {self.shape[0]}x{self.shape[1]}")


def as_matrix(a, name="matrix", allow_empty=False) -> np.ndarray:
    """Return ``a`` as a C-contiguous 2-D float64 array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ShapeError(f"{name} must have at least one row and one column, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.singular_values.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def svd_thin(a) -> SvdResult:
    """Thin SVD truncated to numerical rank (``sigma_i > 1e-10 * sigma_max``)."""
    a = as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(a.shape) from exc
    if s.size == 0 or s[0] == 0.0:
        r = 0
    else:
        r = int(np.count_nonzero(s > RANK_RTOL * s[0]))
    return SvdResult(u=u[:, :r].copy(), singular_values=s[:r].copy(), vt=vt[:r, :].copy())


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with the row maximum subtracted first."""
    a = as_matrix(a, allow_empty=True)
    if a.shape[1] == 0:
        raise ShapeError("softmax over zero columns is undefined")
    z = a - a.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def frobenius_norm(a) -> float:
    a = as_matrix(a, allow_empty=True)
    return float(np.sqrt(np.sum(a * a)))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand", allow_empty=True)
    b = as_matrix(b, "right operand", allow_empty=True)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def derive_seed(base_seed: int, *keys: int) -> int:
    """Stable 63-bit seed derived from a base seed and integer keys (e.g. a group index)."""
    mask = 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence([int(base_seed) & mask, *(int(k) & mask for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def gaussian_sketch(d: int, r: int, seed: int) -> np.ndarray:
    """A ``d x r`` matrix with i.i.d. N(0, 1/r) entries, fully determined by ``seed``."""
    if d < 1 or r < 1:
        raise ValueError(f"sketch dimensions must be positive, got d={d}, r={r}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((d, r)) / np.sqrt(r)
