"""A seeded toy language model with per-layer exit points and a shared head.

The model is deliberately small and attention-free: token embeddings are
averaged over a fixed context window, each block applies the residual update
x <- x + tanh(W_l x), and a shared head computes softmax(lm_head @ normalize(x))
where normalize subtracts the mean and divides by the RMS (with a 1e-12 floor
inside the square root so the empty-context zero vector stays well defined).

Exit points sit after every block. An activation captured at exit l can be
resumed through blocks l+1..L to reproduce the full forward pass exactly;
that alignment is the property the decoding protocols rely on. A branch
attached at exit l is a whitened low-rank stand-in for block l+1, applied in
the same residual form (x <- x + tanh(w_u @ (w_v @ x))) before the head, and
only affects the early-exit prediction, never the resumed trunk.

Everything is deterministic: weights come from one seeded Rng in a documented
order (embedding rows, then each block, then the head, all row-major, every
entry scaled by 1/sqrt(d)).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError, InvalidTokenError, IoError
from .familial import DecomposedLayer, WhiteningContext, decompose_layer
from .numerics import Rng, require_vector

_TOYL_MAGIC = b"TOYL"
_TOYL_VERSION = 1
_RMS_FLOOR = 1e-12


@dataclass(frozen=True)
class ToyLmConfig:
    vocab_size: int = 32
    embed_dim: int = 16
    num_layers: int = 8
    context_window: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidInputError("vocab_size must be >= 2")
        if self.embed_dim < 1:
            raise InvalidInputError("embed_dim must be >= 1")
        if self.num_layers < 1:
            raise InvalidInputError("num_layers must be >= 1")
        if self.context_window < 1:
            raise InvalidInputError("context_window must be >= 1")
        if not 0 <= self.seed < (1 << 64):
            raise InvalidInputError("seed must fit in 64 bits")


@dataclass(frozen=True)
class TokenDistribution:
    """Probability vector over the vocabulary."""

    probs: np.ndarray

    def __post_init__(self):
        vec = require_vector(self.probs, "probs")
        if np.any(vec < 0.0):
            raise InvalidInputError("probabilities must be non-negative")
        if abs(float(vec.sum()) - 1.0) > 1e-12:
            raise InvalidInputError("probabilities must sum to 1")
        object.__setattr__(self, "probs", vec)


@dataclass(frozen=True)
class ExitActivation:
    """Hidden state captured at an exit point, before any branch."""

    exit_index: int
    state: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "state", require_vector(self.state, "state"))


@dataclass(frozen=True)
class ToyLm:
    config: ToyLmConfig
    embedding: np.ndarray
    blocks: tuple[np.ndarray, ...]
    lm_head: np.ndarray
    branches: dict[int, DecomposedLayer] = field(default_factory=dict)


def build(config: ToyLmConfig) -> ToyLm:
    """Materialize the model weights for a config.

    Draw order (one seeded generator, row-major within each matrix):
    embedding (vocab x d), blocks 0..L-1 (each d x d), lm_head (vocab x d).
    Every entry is a standard normal scaled by 1/sqrt(d).
    """
    rng = Rng(config.seed)
    d = config.embed_dim
    scale = 1.0 / math.sqrt(d)
    embedding = rng.normal_matrix(config.vocab_size, d) * scale
    blocks = tuple(rng.normal_matrix(d, d) * scale for _ in range(config.num_layers))
    lm_head = rng.normal_matrix(config.vocab_size, d) * scale
    return ToyLm(config=config, embedding=embedding, blocks=blocks, lm_head=lm_head)


def _check_context(lm: ToyLm, context) -> list[int]:
    tokens = list(context)
    for t in tokens:
        if not isinstance(t, (int, np.integer)) or isinstance(t, bool):
            raise InvalidTokenError(f"token {t!r} is not an integer")
        if not 0 <= int(t) < lm.config.vocab_size:
            raise InvalidTokenError(f"token {t} outside vocabulary of {lm.config.vocab_size}")
    return [int(t) for t in tokens]


def _initial_state(lm: ToyLm, tokens: list[int]) -> np.ndarray:
    window = tokens[-lm.config.context_window :]
    if not window:
        return np.zeros(lm.config.embed_dim)
    return lm.embedding[window].mean(axis=0)


def _normalize(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean()
    rms = math.sqrt(float(np.mean(centered * centered)) + _RMS_FLOOR)
    return centered / rms


def _head(lm: ToyLm, x: np.ndarray) -> TokenDistribution:
    logits = lm.lm_head @ _normalize(x)
    logits = logits - logits.max()
    expd = np.exp(logits)
    return TokenDistribution(probs=expd / expd.sum())


def _apply_block(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x + np.tanh(w @ x)


def forward_full(lm: ToyLm, context) -> TokenDistribution:
    """Distribution over the next token after running every block."""
    tokens = _check_context(lm, context)
    x = _initial_state(lm, tokens)
    for w in lm.blocks:
        x = _apply_block(w, x)
    return _head(lm, x)


def forward_exit(lm: ToyLm, context, exit_index: int) -> tuple[TokenDistribution, ExitActivation]:
    """Early prediction at exit_index plus the resumable pre-branch activation."""
    if not isinstance(exit_index, int) or not 1 <= exit_index <= lm.config.num_layers:
        raise InvalidInputError(
            f"exit index must be in 1..{lm.config.num_layers}, got {exit_index}"
        )
    tokens = _check_context(lm, context)
    x = _initial_state(lm, tokens)
    for w in lm.blocks[:exit_index]:
        x = _apply_block(w, x)
    activation = ExitActivation(exit_index=exit_index, state=x.copy())
    branch = lm.branches.get(exit_index)
    if branch is not None:
        x = x + np.tanh(branch.apply(x))
    return _head(lm, x), activation


def resume_from(lm: ToyLm, act: ExitActivation) -> TokenDistribution:
    """Continue a captured activation through the remaining blocks and the head."""
    if not 1 <= act.exit_index <= lm.config.num_layers:
        raise InvalidInputError(
            f"exit index must be in 1..{lm.config.num_layers}, got {act.exit_index}"
        )
    state = require_vector(act.state, "activation state")
    if state.size != lm.config.embed_dim:
        raise InvalidInputError(
            f"activation has dim {state.size}, model expects {lm.config.embed_dim}"
        )
    x = state
    for w in lm.blocks[act.exit_index :]:
        x = _apply_block(w, x)
    return _head(lm, x)


def calibration_activations(
    lm: ToyLm, exit_index: int, num_contexts: int = 256, seed: int = 7_117
) -> np.ndarray:
    """Pre-branch activations at an exit over a seeded corpus of random contexts.

    Each context is context_window tokens drawn uniformly from the
    vocabulary. Returns a d x num_contexts matrix (one activation per
    column), ready for whitening.
    """
    if num_contexts < 1:
        raise InvalidInputError("num_contexts must be >= 1")
    rng = Rng(seed)
    cols = np.empty((lm.config.embed_dim, num_contexts))
    for i in range(num_contexts):
        context = [
            min(int(rng.uniform() * lm.config.vocab_size), lm.config.vocab_size - 1)
            for _ in range(lm.config.context_window)
        ]
        _, act = forward_exit(lm, context, exit_index)
        cols[:, i] = act.state
    return cols


def attach_branch(
    lm: ToyLm, exit_index: int, compression_ratio: float, ctx: WhiteningContext
) -> ToyLm:
    """New model with a decomposed stand-in for the next block at an exit.

    The branch factors W_{exit_index+1} at rank h = round(ratio * d / 2)
    (half-up), so its 2*d*h parameters come to ~ratio times one block.
    """
    if not isinstance(exit_index, int) or not 1 <= exit_index < lm.config.num_layers:
        raise InvalidInputError(
            "exit index must leave at least one later block to decompose"
        )
    if not 0.0 < compression_ratio <= 1.0:
        raise InvalidInputError("compression_ratio must be in (0, 1]")
    d = lm.config.embed_dim
    h = int(math.floor(compression_ratio * d / 2.0 + 0.5))
    if h < 1:
        raise InvalidInputError(f"ratio {compression_ratio} gives rank 0 at width {d}")
    branch = decompose_layer(lm.blocks[exit_index], ctx, h)
    branches = dict(lm.branches)
    branches[exit_index] = branch
    return replace(lm, branches=branches)


def sample(dist: TokenDistribution, rng: Rng) -> int:
    """Inverse-CDF draw over the fixed token order."""
    cum = np.cumsum(dist.probs)
    u = rng.uniform()
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, dist.probs.size - 1)


@dataclass(frozen=True)
class LmDecoder:
    """Adapter giving a ToyLm the one-method decoder interface protocols use.

    exit_index None means the full model; an integer exits early there
    (using whatever branch is attached).
    """

    lm: ToyLm
    exit_index: int | None = None

    def next_dist(self, context) -> TokenDistribution:
        if self.exit_index is None:
            return forward_full(self.lm, context)
        return forward_exit(self.lm, context, self.exit_index)[0]


def save_model(lm: ToyLm, path) -> None:
    """Write the model as a binary container.

    Layout: magic "TOYL", version byte; vocab_size, embed_dim, num_layers,
    context_window as unsigned 32-bit little-endian; seed as unsigned 64-bit
    little-endian; weights as row-major 64-bit little-endian floats in build
    order (embedding, blocks, lm_head); then a branch count (u32) followed by
    per-branch records (exit u32, h u32, w_u floats, w_v floats) in ascending
    exit order.
    """
    cfg = lm.config
    try:
        with open(path, "wb") as fh:
            fh.write(
                struct.pack(
                    "<4sBIIIIQ",
                    _TOYL_MAGIC,
                    _TOYL_VERSION,
                    cfg.vocab_size,
                    cfg.embed_dim,
                    cfg.num_layers,
                    cfg.context_window,
                    cfg.seed,
                )
            )
            fh.write(np.ascontiguousarray(lm.embedding, dtype="<f8").tobytes())
            for block in lm.blocks:
                fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(lm.lm_head, dtype="<f8").tobytes())
            fh.write(struct.pack("<I", len(lm.branches)))
            for exit_index in sorted(lm.branches):
                branch = lm.branches[exit_index]
                fh.write(struct.pack("<II", exit_index, branch.hidden_dim))
                fh.write(np.ascontiguousarray(branch.w_u, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(branch.w_v, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_model(path) -> ToyLm:
    """Read a model written by save_model."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    head_fmt = "<4sBIIIIQ"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size:
        raise InvalidInputError("container too short for header")
    magic, version, vocab, d, layers, window, seed = struct.unpack_from(head_fmt, blob)
    if magic != _TOYL_MAGIC:
        raise InvalidInputError(f"bad magic {magic!r}")
    if version != _TOYL_VERSION:
        raise InvalidInputError(f"unsupported container version {version}")
    config = ToyLmConfig(
        vocab_size=vocab, embed_dim=d, num_layers=layers, context_window=window, seed=seed
    )
    offset = head_size

    def take(rows, cols):
        nonlocal offset
        need = rows * cols
        if offset + 8 * need > len(blob):
            raise InvalidInputError("container truncated in weight data")
        arr = np.frombuffer(blob, dtype="<f8", count=need, offset=offset)
        offset += 8 * need
        return arr.reshape(rows, cols).astype(np.float64)

    embedding = take(vocab, d)
    blocks = tuple(take(d, d) for _ in range(layers))
    lm_head = take(vocab, d)
    if offset + 4 > len(blob):
        raise InvalidInputError("container truncated before branch count")
    (branch_count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    branches: dict[int, DecomposedLayer] = {}
    for _ in range(branch_count):
        if offset + 8 > len(blob):
            raise InvalidInputError("container truncated in branch header")
        exit_index, h = struct.unpack_from("<II", blob, offset)
        offset += 8
        w_u = take(d, h)
        w_v = take(h, d)
        branches[int(exit_index)] = DecomposedLayer(
            w_u=w_u, w_v=w_v, hidden_dim=int(h), source_dims=(d, d)
        )
    if offset != len(blob):
        raise InvalidInputError("trailing bytes after model data")
    return ToyLm(
        config=config,
        embedding=embedding,
        blocks=blocks,
        lm_head=lm_head,
        branches=branches,
    )
