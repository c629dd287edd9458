"""Weight decomposition for model families sharing calibration statistics.

A layer weight W (m x n) is factored through whitened activations: with
S S^T = X X^T + ridge*I (Cholesky), the reduced SVD of W S = U A V^T gives
factors

    w_u = U_h A_h^(1/2)        (m x h)
    w_v = A_h^(1/2) V_h^T S^-1 (h x n)

keeping the top h singular triplets. The squared reconstruction error on the
calibration features then equals the discarded singular energy exactly
(ridge 0, full-row-rank X), which is what makes budgeted rank allocation by
singular values sound. Residual stacking repeats the decomposition on
W - (partial sum) with the SAME whitening context, so earlier components are
frozen and a stack truncates by plain partial sums.

S^-1 is always applied through triangular solves; no inverse is formed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BudgetTooSmallError,
    InvalidInputError,
    InvalidRankError,
    IoError,
)
from .numerics import (
    cholesky_lower,
    require_matrix,
    require_vector,
    solve_lower_triangular,
    svd_reduced,
)

_FAMD_MAGIC = b"FAMD"
_FAMD_VERSION = 1


@dataclass(frozen=True)
class WhiteningContext:
    """Cholesky factor of the (ridged) calibration covariance.

    s is n x n lower-triangular with s @ s.T = X @ X.T + ridge*I.
    """

    s: np.ndarray
    calib_count: int
    ridge: float

    @property
    def dim(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class DecomposedLayer:
    """Two-factor replacement for a dense layer: x -> w_u @ (w_v @ x)."""

    w_u: np.ndarray
    w_v: np.ndarray
    hidden_dim: int
    source_dims: tuple[int, int]

    def __post_init__(self):
        m, n = self.source_dims
        if self.w_u.shape != (m, self.hidden_dim):
            raise InvalidInputError(
                f"w_u shape {self.w_u.shape} does not match ({m}, {self.hidden_dim})"
            )
        if self.w_v.shape != (self.hidden_dim, n):
            raise InvalidInputError(
                f"w_v shape {self.w_v.shape} does not match ({self.hidden_dim}, {n})"
            )
        if self.hidden_dim > min(m, n):
            raise InvalidInputError("hidden_dim exceeds min(m, n)")

    @property
    def parameter_count(self) -> int:
        m, n = self.source_dims
        return self.hidden_dim * (m + n)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Low-rank product w_u @ (w_v @ x); x may be a vector or matrix."""
        return self.w_u @ (self.w_v @ x)

    def product(self) -> np.ndarray:
        """The dense m x n matrix w_u @ w_v this layer realizes."""
        return self.w_u @ self.w_v


@dataclass(frozen=True)
class HpcdStack:
    """Ordered low-rank components whose partial sums approximate one weight."""

    components: tuple[tuple[np.ndarray, np.ndarray], ...]
    ranks: tuple[int, ...]
    source_dims: tuple[int, int]


@dataclass(frozen=True)
class RankAllocation:
    """Budgeted per-layer ranks with their predicted truncation losses."""

    per_layer_rank: list[int]
    predicted_loss: list[float]
    budget: int


def parameter_ratio(m: int, n: int, h: int) -> float:
    """Fraction of the dense layer's parameters kept: h*(m+n)/(m*n)."""
    if m < 1 or n < 1 or h < 1:
        raise InvalidInputError("m, n, h must be positive")
    return h * (m + n) / (m * n)


def whiten(x, ridge: float | None = None) -> WhiteningContext:
    """Build a whitening context from calibration features (one per column).

    x is n x N with N >= 1. When ridge is omitted it defaults to
    1e-6 * trace(X X^T) / n, enough to make a rank-deficient covariance
    factorizable without noticeably perturbing a healthy one.
    """
    arr = require_matrix(x, "x")
    n, count = arr.shape
    if n < 1 or count < 1:
        raise InvalidInputError("x must have at least one row and one column")
    cov = arr @ arr.T
    if ridge is None:
        ridge = 1e-6 * float(np.trace(cov)) / n
    ridge = float(ridge)
    if not np.isfinite(ridge) or ridge < 0.0:
        raise InvalidInputError("ridge must be finite and non-negative")
    s = cholesky_lower(cov + ridge * np.eye(n))
    return WhiteningContext(s=s, calib_count=count, ridge=ridge)


def decompose_layer(w, ctx: WhiteningContext, h: int) -> DecomposedLayer:
    """Whitened-SVD factors of w keeping the top h singular components."""
    arr = require_matrix(w, "w")
    m, n = arr.shape
    if ctx.dim != n:
        raise InvalidInputError(
            f"context dimension {ctx.dim} does not match layer columns {n}"
        )
    if not isinstance(h, int) or isinstance(h, bool) or not 1 <= h <= min(m, n):
        raise InvalidRankError(f"h must be in 1..{min(m, n)}, got {h}")
    res = svd_reduced(arr @ ctx.s)
    sqrt_sigma = np.sqrt(res.sigma[:h])
    w_u = res.u[:, :h] * sqrt_sigma
    # w_v = diag(sqrt_sigma) V_h^T S^-1, via S^T y = (diag(sqrt_sigma) V_h^T)^T.
    scaled_vt = sqrt_sigma[:, None] * res.v[:, :h].T
    w_v = solve_lower_triangular(ctx.s, scaled_vt.T, transpose=True).T
    # Contiguous copies: BLAS picks layout-dependent code paths, and factor
    # layout must not depend on how the factors were produced.
    return DecomposedLayer(
        w_u=np.ascontiguousarray(w_u),
        w_v=np.ascontiguousarray(w_v),
        hidden_dim=h,
        source_dims=(m, n),
    )


def truncation_loss(sigma, h: int) -> float:
    """Sum of squared singular values beyond the first h."""
    vec = require_vector(sigma, "sigma")
    if np.any(vec < 0.0):
        raise InvalidInputError("sigma entries must be non-negative")
    if vec.size > 1 and np.any(np.diff(vec) > 1e-12 * max(1.0, float(vec[0]))):
        raise InvalidInputError("sigma must be non-increasing")
    if not isinstance(h, int) or isinstance(h, bool) or not 0 <= h <= vec.size:
        raise InvalidInputError(f"h must be in 0..{vec.size}, got {h}")
    return float(np.sum(vec[h:] ** 2))


def allocate_ranks(layer_sigmas, layer_dims, budget: int) -> RankAllocation:
    """Greedy budgeted rank allocation across layers.

    Every layer starts at rank 1; each step grants +1 rank to the layer with
    the largest marginal gain per parameter, sigma_{h+1}^2 / (m+n), among the
    layers that can still grow within the remaining budget. Ties go to the
    lowest layer index. Gains are non-increasing per layer, so on equal-cost
    instances this greedy matches exhaustive search.
    """
    if len(layer_sigmas) != len(layer_dims) or not layer_dims:
        raise InvalidInputError("layer_sigmas and layer_dims must be equal-length, non-empty")
    sigmas = [require_vector(s, f"sigma[{i}]") for i, s in enumerate(layer_sigmas)]
    dims = []
    for i, (m, n) in enumerate(layer_dims):
        if m < 1 or n < 1:
            raise InvalidInputError(f"layer_dims[{i}] must be positive")
        if sigmas[i].size > min(m, n):
            raise InvalidInputError(f"sigma[{i}] longer than min(m, n)")
        dims.append((int(m), int(n)))

    base_cost = sum(m + n for m, n in dims)
    if budget < base_cost:
        raise BudgetTooSmallError(
            f"budget {budget} cannot cover rank 1 for every layer (needs {base_cost})"
        )
    ranks = [1] * len(dims)
    remaining = budget - base_cost
    while True:
        best = -1
        best_gain = -1.0
        for i, (m, n) in enumerate(dims):
            step = m + n
            if ranks[i] >= sigmas[i].size or step > remaining:
                continue
            gain = float(sigmas[i][ranks[i]]) ** 2 / step
            if gain > best_gain:
                best = i
                best_gain = gain
        if best < 0:
            break
        ranks[best] += 1
        remaining -= dims[best][0] + dims[best][1]
    losses = [truncation_loss(sigmas[i], ranks[i]) for i in range(len(dims))]
    return RankAllocation(per_layer_rank=ranks, predicted_loss=losses, budget=budget)


def hpcd_build(
    w, ctx: WhiteningContext, rank_per_component: int, num_components: int
) -> HpcdStack:
    """Stack of low-rank components fitted on successive residuals.

    Component 1 factors w itself; component k >= 2 factors the residual
    w - sum of earlier components, always under the SAME whitening context,
    so earlier components are never recomputed. Because the residual of an
    exact whitened SVD is the tail of the original SVD, each component picks
    up the next rank_per_component singular triplets of w @ S.
    """
    arr = require_matrix(w, "w")
    if not isinstance(rank_per_component, int) or rank_per_component < 1:
        raise InvalidInputError("rank_per_component must be >= 1")
    if not isinstance(num_components, int) or num_components < 1:
        raise InvalidInputError("num_components must be >= 1")
    components = []
    residual = arr
    for _ in range(num_components):
        layer = decompose_layer(residual, ctx, rank_per_component)
        components.append((layer.w_u, layer.w_v))
        residual = residual - layer.product()
    return HpcdStack(
        components=tuple(components),
        ranks=tuple([rank_per_component] * num_components),
        source_dims=arr.shape,
    )


def hpcd_truncate(stack: HpcdStack, k: int) -> np.ndarray:
    """Dense matrix realized by the first k components."""
    if not isinstance(k, int) or isinstance(k, bool) or not 1 <= k <= len(stack.components):
        raise InvalidInputError(f"k must be in 1..{len(stack.components)}, got {k}")
    m, n = stack.source_dims
    total = np.zeros((m, n))
    for u, v in stack.components[:k]:
        total += u @ v
    return total


def save_layer(layer: DecomposedLayer, path) -> None:
    """Write a DecomposedLayer as a flat binary container.

    Layout: magic "FAMD", version byte, then m, n, h as unsigned 32-bit
    little-endian, then w_u and w_v as row-major 64-bit little-endian floats.
    """
    m, n = layer.source_dims
    header = struct.pack("<4sBIII", _FAMD_MAGIC, _FAMD_VERSION, m, n, layer.hidden_dim)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(layer.w_u, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.w_v, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_layer(path) -> DecomposedLayer:
    """Read a DecomposedLayer written by save_layer."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    head_size = struct.calcsize("<4sBIII")
    if len(blob) < head_size:
        raise InvalidInputError("container too short for header")
    magic, version, m, n, h = struct.unpack_from("<4sBIII", blob)
    if magic != _FAMD_MAGIC:
        raise InvalidInputError(f"bad magic {magic!r}")
    if version != _FAMD_VERSION:
        raise InvalidInputError(f"unsupported container version {version}")
    expected = head_size + 8 * (m * h + h * n)
    if len(blob) != expected:
        raise InvalidInputError(f"container size {len(blob)} != expected {expected}")
    w_u = np.frombuffer(blob, dtype="<f8", count=m * h, offset=head_size)
    w_v = np.frombuffer(blob, dtype="<f8", count=h * n, offset=head_size + 8 * m * h)
    return DecomposedLayer(
        w_u=w_u.reshape(m, h).astype(np.float64),
        w_v=w_v.reshape(h, n).astype(np.float64),
        hidden_dim=int(h),
        source_dims=(int(m), int(n)),
    )
