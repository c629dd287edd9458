"""Task-oriented feature compression.

Features are clustered with density peaks over k-nearest-neighbor densities
(DPC-KNN), merged by per-cluster averaging, quantized to integers, routed to
the per-dimension discretized-Laplacian entropy model that prices them
cheapest, and range-coded into a checksummed container.

Conventions that affect bitstreams, all fixed on purpose:
  - quantization is np.rint (halves to even);
  - every tie (cluster centers, assignment, routing) breaks toward the
    lowest index;
  - each dimension's symbol alphabet is [round(mu) - q_range,
    round(mu) + q_range] plus one escape symbol, and an escaped value is
    coded as the escape symbol followed by its 32-bit two's-complement value
    as raw bits;
  - frequency tables scale the model pmf to a total of 2^16 with every entry
    at least 1, repairing the rounding remainder on the largest entry.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidInputError,
    InvariantViolationError,
    IoError,
    MalformedBitstreamError,
)
from .numerics import Rng, require_matrix
from .rangecoder import RangeDecoder, RangeEncoder

B_MIN = 1e-3
_TOTAL = 1 << 16
_FEAT_MAGIC = b"FEAT"
_FEAT_VERSION = 1
_TOFC_MAGIC = b"TOFC"
_TOFC_VERSION = 1
_HEAD = struct.Struct("<4sBHHB")
_RAW_BITS = 32


@dataclass(frozen=True, eq=False)
class FeatureSet:
    features: np.ndarray

    def __post_init__(self):
        require_matrix(self.features, "features")
        if self.features.shape[0] < 1:
            raise InvalidInputError("feature set needs at least one row")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class ClusterResult:
    center_indices: list[int]
    assignment: np.ndarray
    merged: np.ndarray
    rho: np.ndarray
    delta: np.ndarray


@dataclass(frozen=True, eq=False)
class LaplacianModel:
    """Per-dimension Laplace(mu, b) entropy model with integer-bin pmf."""

    mu: np.ndarray
    b: np.ndarray
    id: int
    q_range: int = 255

    def __post_init__(self):
        if self.mu.ndim != 1 or self.b.ndim != 1 or self.mu.shape != self.b.shape:
            raise InvalidInputError("mu and b must be equal-length vectors")
        if not (np.isfinite(self.mu).all() and np.isfinite(self.b).all()):
            raise InvalidInputError("model parameters must be finite")
        if (self.b < B_MIN).any():
            raise InvalidInputError(f"scale parameters must be >= {B_MIN}")
        if self.id < 0 or self.q_range < 1:
            raise InvalidInputError("id must be >= 0 and q_range >= 1")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def _laplace_cdf(x, mu, b):
    z = (np.asarray(x, dtype=np.float64) - mu) / b
    below = 0.5 * np.exp(np.minimum(z, 0.0))
    above = 1.0 - 0.5 * np.exp(np.minimum(-z, 0.0))
    return np.where(z < 0.0, below, above)


def _symbol_bounds(model: LaplacianModel, dim: int) -> tuple[int, int]:
    center = int(np.rint(model.mu[dim]))
    return center - model.q_range, center + model.q_range


def _escape_mass(model: LaplacianModel, dim: int) -> float:
    lo, hi = _symbol_bounds(model, dim)
    mu = float(model.mu[dim])
    b = float(model.b[dim])
    left = float(_laplace_cdf(lo - 0.5, mu, b))
    right = 1.0 - float(_laplace_cdf(hi + 0.5, mu, b))
    return left + right


def pmf(model: LaplacianModel, dim: int, q: int) -> float:
    """Mass of the unit bin at integer q; out-of-range q share the escape mass."""
    if not 0 <= dim < model.dim:
        raise InvalidInputError("dimension out of range")
    lo, hi = _symbol_bounds(model, dim)
    if q < lo or q > hi:
        return _escape_mass(model, dim)
    mu = float(model.mu[dim])
    b = float(model.b[dim])
    return float(_laplace_cdf(q + 0.5, mu, b) - _laplace_cdf(q - 0.5, mu, b))


def fit_laplacian(calib: np.ndarray, model_id: int, q_range: int = 255) -> LaplacianModel:
    """Per-dimension maximum-likelihood fit: median location, MAD scale."""
    require_matrix(calib, "calib")
    if calib.shape[0] < 2:
        raise InvalidInputError("calibration needs at least two rows")
    mu = np.median(calib, axis=0)
    b = np.maximum(np.mean(np.abs(calib - mu), axis=0), B_MIN)
    return LaplacianModel(mu=mu, b=b, id=model_id, q_range=q_range)


def quantize(values: np.ndarray) -> np.ndarray:
    """Integer symbols by rounding halves to even."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise InvalidInputError("values must be finite")
    return np.rint(arr).astype(np.int64)


def _as_symbol_rows(symbols, dim: int) -> np.ndarray:
    arr = np.asarray(symbols)
    if arr.size == 0:
        return np.zeros((0, dim), dtype=np.int64)
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidInputError("symbols must be integers; quantize first")
    if arr.size % dim != 0:
        raise InvalidInputError(f"symbol count {arr.size} not a multiple of dim {dim}")
    return arr.reshape(-1, dim).astype(np.int64)


def estimate_rate(symbols, model: LaplacianModel) -> float:
    """Ideal code length in bits: -log2 pmf per symbol, +32 per escape."""
    rows = _as_symbol_rows(symbols, model.dim)
    if rows.size == 0:
        return 0.0
    bits = 0.0
    for j in range(model.dim):
        qs = rows[:, j]
        lo, hi = _symbol_bounds(model, j)
        mu = float(model.mu[j])
        b = float(model.b[j])
        in_range = (qs >= lo) & (qs <= hi)
        if in_range.any():
            x = qs[in_range].astype(np.float64)
            p = _laplace_cdf(x + 0.5, mu, b) - _laplace_cdf(x - 0.5, mu, b)
            with np.errstate(divide="ignore"):
                bits -= float(np.sum(np.log2(p)))
        escapes = int(np.count_nonzero(~in_range))
        if escapes:
            with np.errstate(divide="ignore"):
                esc_bits = float(-np.log2(_escape_mass(model, j)))
            bits += escapes * (esc_bits + float(_RAW_BITS))
    return bits


def route(merged_row: np.ndarray, models) -> int:
    """Id of the model that prices the quantized row cheapest; ties go low."""
    if not models:
        raise InvalidInputError("need at least one model")
    symbols = quantize(np.atleast_1d(np.asarray(merged_row, dtype=np.float64)))
    best = min(
        range(len(models)),
        key=lambda e: (estimate_rate(symbols, models[e]), models[e].id),
    )
    return models[best].id


def balance_metric(selection_counts) -> float:
    """Squared deviation of model-usage frequencies from uniform."""
    counts = np.asarray(selection_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 1 or (counts < 0).any():
        raise InvalidInputError("selection_counts must be non-negative, one per model")
    total = float(counts.sum())
    if total <= 0:
        raise InvalidInputError("total selection count must be >= 1")
    f = counts / total
    return float(np.sum((f - 1.0 / counts.size) ** 2))


def dpc_knn_cluster(fs: FeatureSet, k_neighbors: int, num_centers: int) -> ClusterResult:
    """Density-peak clustering with KNN densities, then per-cluster averaging.

    rho_i = exp(-mean squared distance to the k nearest neighbors), delta_i =
    distance to the closest strictly denser point (points without one,
    including the densest, get the maximum pairwise distance). Centers are
    the top num_centers by rho*delta, every point joins its nearest center,
    and a center whose cluster ends up empty keeps its own feature row.
    """
    feats = fs.features
    n = fs.count
    if not 1 <= num_centers <= n:
        raise InvalidInputError(f"num_centers must be in [1, {n}]")
    if n == 1:
        return ClusterResult(
            center_indices=[0],
            assignment=np.zeros(1, dtype=np.int64),
            merged=feats.copy(),
            rho=np.ones(1),
            delta=np.zeros(1),
        )
    if not 1 <= k_neighbors < n:
        raise InvalidInputError(f"k_neighbors must be in [1, {n - 1}]")
    d2 = np.sum((feats[:, None, :] - feats[None, :, :]) ** 2, axis=-1)
    # Column 0 after sorting is the point itself (distance zero).
    knn = np.sort(d2, axis=1)[:, 1 : k_neighbors + 1]
    rho = np.exp(-np.mean(knn, axis=1))
    dist = np.sqrt(d2)
    max_pair = float(dist.max())
    delta = np.empty(n)
    for i in range(n):
        denser = rho > rho[i]
        delta[i] = float(dist[i, denser].min()) if denser.any() else max_pair
    gamma = rho * delta
    order = np.argsort(-gamma, kind="stable")
    centers = [int(i) for i in order[:num_centers]]
    assignment = np.argmin(dist[:, centers], axis=1).astype(np.int64)
    merged = np.empty((num_centers, feats.shape[1]))
    for c in range(num_centers):
        member_rows = feats[assignment == c]
        merged[c] = member_rows.mean(axis=0) if member_rows.shape[0] else feats[centers[c]]
    return ClusterResult(
        center_indices=centers,
        assignment=assignment,
        merged=merged,
        rho=rho,
        delta=delta,
    )


@dataclass(frozen=True)
class Bitstream:
    """Range-coded symbols plus the header needed to decode them."""

    version: int
    dim: int
    num_models: int
    model_ids: tuple[int, ...]
    payload: bytes

    @property
    def num_clusters(self) -> int:
        return len(self.model_ids)

    def to_bytes(self) -> bytes:
        head = _HEAD.pack(
            _TOFC_MAGIC, self.version, self.num_clusters, self.dim, self.num_models
        ) + bytes(self.model_ids)
        crc = zlib.crc32(head + self.payload) & 0xFFFFFFFF
        return head + struct.pack("<I", crc) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEAD.size + 4:
            raise MalformedBitstreamError("container shorter than its header")
        magic, version, m, dim, num_models = _HEAD.unpack_from(data, 0)
        if magic != _TOFC_MAGIC:
            raise MalformedBitstreamError(f"bad magic {magic!r}")
        if version != _TOFC_VERSION:
            raise MalformedBitstreamError(f"unsupported version {version}")
        if len(data) < _HEAD.size + m + 4:
            raise MalformedBitstreamError("container truncated in model ids")
        ids_end = _HEAD.size + m
        model_ids = tuple(data[_HEAD.size : ids_end])
        (crc,) = struct.unpack_from("<I", data, ids_end)
        payload = data[ids_end + 4 :]
        if zlib.crc32(data[:ids_end] + payload) & 0xFFFFFFFF != crc:
            raise MalformedBitstreamError("checksum mismatch")
        return cls(
            version=version,
            dim=dim,
            num_models=num_models,
            model_ids=model_ids,
            payload=payload,
        )


def _validate_models(models, dim: int):
    if not models:
        raise InvalidInputError("need at least one model")
    if len(models) > 255:
        raise InvalidInputError("at most 255 models fit the container")
    for pos, model in enumerate(models):
        if model.id != pos:
            raise InvalidInputError("model ids must equal their list positions")
        if model.dim != dim:
            raise InvalidInputError(
                f"model {pos} has dim {model.dim}, symbols have dim {dim}"
            )


def _coding_tables(model: LaplacianModel):
    """Per-dimension (lo, freqs, cum) with freqs summing to exactly 2^16.

    The alphabet is the in-range symbols followed by one escape entry.
    """
    tables = []
    for j in range(model.dim):
        lo, hi = _symbol_bounds(model, j)
        mu = float(model.mu[j])
        b = float(model.b[j])
        qs = np.arange(lo, hi + 1, dtype=np.float64)
        probs = _laplace_cdf(qs + 0.5, mu, b) - _laplace_cdf(qs - 0.5, mu, b)
        p = np.append(probs, _escape_mass(model, j))
        freqs = np.maximum(1, np.rint(p * _TOTAL)).astype(np.int64)
        freqs[int(np.argmax(freqs))] += _TOTAL - int(freqs.sum())
        if freqs.min() < 1 or int(freqs.sum()) != _TOTAL:
            raise InvariantViolationError("frequency table repair failed")
        cum = np.concatenate(([0], np.cumsum(freqs)))
        tables.append((lo, freqs, cum))
    return tables


def encode(symbols: np.ndarray, models, routing) -> Bitstream:
    """Range-code quantized rows, each under its routed model, row-major."""
    arr = np.asarray(symbols)
    if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
        raise InvalidInputError("symbols must be a 2-D integer array")
    m, d = arr.shape
    if m > 65535 or d > 65535 or d < 1:
        raise InvalidInputError("symbol matrix does not fit the container limits")
    _validate_models(models, d)
    ids = [int(e) for e in routing]
    if len(ids) != m:
        raise InvalidInputError(f"routing must name a model per row ({m})")
    if any(not 0 <= e < len(models) for e in ids):
        raise InvalidInputError("routing references an unknown model id")
    tables = {model.id: _coding_tables(model) for model in models}
    enc = RangeEncoder()
    for r in range(m):
        tabs = tables[ids[r]]
        for j in range(d):
            q = int(arr[r, j])
            lo, freqs, cum = tabs[j]
            idx = q - lo
            if 0 <= idx < freqs.size - 1:
                enc.encode(int(cum[idx]), int(freqs[idx]), _TOTAL)
            else:
                esc = freqs.size - 1
                enc.encode(int(cum[esc]), int(freqs[esc]), _TOTAL)
                enc.encode_raw(q & 0xFFFFFFFF, _RAW_BITS)
    return Bitstream(
        version=_TOFC_VERSION,
        dim=d,
        num_models=len(models),
        model_ids=tuple(ids),
        payload=enc.finish(),
    )


def decode(bs: Bitstream, models) -> np.ndarray:
    """Exact quantized symbols back from a bitstream."""
    _validate_models(models, bs.dim)
    if len(models) != bs.num_models:
        raise InvalidInputError(
            f"bitstream was coded with {bs.num_models} models, got {len(models)}"
        )
    if any(not 0 <= e < len(models) for e in bs.model_ids):
        raise MalformedBitstreamError("routing references an unknown model id")
    tables = {model.id: _coding_tables(model) for model in models}
    dec = RangeDecoder(bs.payload)
    out = np.empty((bs.num_clusters, bs.dim), dtype=np.int64)
    for r in range(bs.num_clusters):
        tabs = tables[bs.model_ids[r]]
        for j in range(bs.dim):
            lo, freqs, cum = tabs[j]
            value = dec.decode_freq(_TOTAL)
            idx = int(np.searchsorted(cum, value, side="right")) - 1
            dec.decode_update(int(cum[idx]), int(freqs[idx]))
            if idx == freqs.size - 1:
                raw = dec.decode_raw(_RAW_BITS)
                out[r, j] = raw - (1 << 32) if raw >= (1 << 31) else raw
            else:
                out[r, j] = lo + idx
    return out


@dataclass(frozen=True)
class TofcConfig:
    num_centers: int
    k_neighbors: int
    models: tuple[LaplacianModel, ...]

    def __post_init__(self):
        if self.num_centers < 1:
            raise InvalidInputError("num_centers must be >= 1")
        if self.k_neighbors < 1:
            raise InvalidInputError("k_neighbors must be >= 1")
        if not self.models:
            raise InvalidInputError("need at least one entropy model")
        dim = self.models[0].dim
        _validate_models(self.models, dim)


def tofc_pipeline(fs: FeatureSet, cfg: TofcConfig):
    """Cluster, merge, quantize, route, encode; returns (Bitstream, stats)."""
    if cfg.models[0].dim != fs.dim:
        raise InvalidInputError("entropy models do not match the feature dimension")
    clusters = dpc_knn_cluster(fs, cfg.k_neighbors, cfg.num_centers)
    symbols = quantize(clusters.merged)
    routing = [route(clusters.merged[r], cfg.models) for r in range(symbols.shape[0])]
    bs = encode(symbols, cfg.models, routing)
    est_bits = sum(
        estimate_rate(symbols[r], cfg.models[routing[r]]) for r in range(symbols.shape[0])
    )
    counts = np.bincount(np.asarray(routing), minlength=len(cfg.models))
    stats = {
        "M": symbols.shape[0],
        "bytes": len(bs.payload),
        "est_bits": float(est_bits),
        "balance": balance_metric(counts),
    }
    return bs, stats


def make_blob_features(
    num_points: int, dim: int, num_groups: int, rng: Rng,
    center_scale: float = 8.0, spread: float = 0.5,
) -> FeatureSet:
    """Synthetic grouped features: group centers plus per-point noise."""
    if num_points < 1 or dim < 1 or num_groups < 1:
        raise InvalidInputError("num_points, dim, num_groups must all be >= 1")
    centers = rng.normal_matrix(num_groups, dim) * center_scale
    noise = rng.normal_matrix(num_points, dim) * spread
    groups = np.arange(num_points) % num_groups
    return FeatureSet(features=centers[groups] + noise)


def save_features(path, fs: FeatureSet):
    """Binary feature file: FEAT magic, version, counts, float32 rows."""
    head = struct.pack("<4sBII", _FEAT_MAGIC, _FEAT_VERSION, fs.count, fs.dim)
    body = fs.features.astype("<f4").tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(head + body)
    except OSError as exc:
        raise IoError(f"cannot write features: {exc}") from exc


def load_features(path) -> FeatureSet:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read features: {exc}") from exc
    head = struct.Struct("<4sBII")
    if len(data) < head.size:
        raise InvalidInputError("feature file shorter than its header")
    magic, version, n, d = head.unpack_from(data, 0)
    if magic != _FEAT_MAGIC:
        raise InvalidInputError(f"bad feature-file magic {magic!r}")
    if version != _FEAT_VERSION:
        raise InvalidInputError(f"unsupported feature-file version {version}")
    body = data[head.size :]
    if len(body) != n * d * 4:
        raise InvalidInputError("feature file body does not match its header counts")
    feats = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)
    return FeatureSet(features=feats)


def load_features_csv(path) -> FeatureSet:
    try:
        rows = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise IoError(f"cannot read features: {exc}") from exc
    except ValueError as exc:
        raise InvalidInputError(f"malformed feature csv: {exc}") from exc
    return FeatureSet(features=rows)
