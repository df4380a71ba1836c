"""Top-t sparsification followed by unbiased randomized-rounding quantization.

The number of bits charged for a compressed update is ``t * n_bits``. Indices of
the kept entries travel for free in that accounting; a real codec would pay
roughly ``t * log2(n_params)`` extra bits for them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class MalformedPayloadError(ValueError):
    pass


@dataclass(frozen=True)
class CompressionPolicy:
    """``delta`` is the kept fraction, ``n_bits`` the quantizer width.

    ``identity=True`` bypasses the operator entirely (exact dense update) while
    still charging ``payload_bits``; it is only allowed for the uncompressed
    setting ``delta=1, n_bits=n_bits_clear``.
    """

    delta: float = 1.0
    n_bits: int = 32
    n_bits_clear: int = 32
    identity: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must be in (0, 1], got {self.delta}")
        if self.n_bits_clear < 1:
            raise ValueError(f"n_bits_clear must be positive, got {self.n_bits_clear}")
        if not 1 <= self.n_bits <= self.n_bits_clear:
            raise ValueError(f"n_bits must be in [1, {self.n_bits_clear}], got {self.n_bits}")
        if self.n_bits > 63:
            raise ValueError("n_bits above 63 is not representable")
        if self.identity and (self.delta != 1.0 or self.n_bits != self.n_bits_clear):
            raise ValueError("identity compression requires delta=1 and n_bits=n_bits_clear")

    @classmethod
    def uncompressed(cls, n_bits_clear: int = 32) -> CompressionPolicy:
        return cls(1.0, n_bits_clear, n_bits_clear, identity=True)

    @property
    def n_levels(self) -> int:
        return (1 << self.n_bits) - 1

    def n_kept(self, n_params: int) -> int:
        return kept_count(self.delta, n_params)


def kept_count(delta: float, n_params: int) -> int:
    if n_params < 1:
        raise ValueError(f"n_params must be positive, got {n_params}")
    # round half to even, as Python's round does
    return min(n_params, max(1, int(round(delta * n_params))))


def payload_bits(policy: CompressionPolicy, n_params: int) -> int:
    return policy.n_kept(n_params) * policy.n_bits


def model_bits(policy: CompressionPolicy, n_params: int) -> int:
    """Size of the uncompressed model, ``n_params * n_bits_clear``."""
    return n_params * policy.n_bits_clear


@dataclass
class CompressedUpdate:
    indices: np.ndarray
    levels: np.ndarray
    signs: np.ndarray
    l2_norm: float
    n_params: int
    policy: CompressionPolicy
    exact: np.ndarray | None = field(default=None, repr=False)

    @property
    def t(self) -> int:
        return int(self.indices.size)

    @property
    def payload_bits(self) -> int:
        return self.t * self.policy.n_bits


def top_t_indices(w: np.ndarray, t: int) -> np.ndarray:
    """Sorted indices of the t largest |w_n|; ties go to the lowest index."""
    w = np.asarray(w)
    if not 1 <= t <= w.size:
        raise ValueError(f"t must be in [1, {w.size}], got {t}")
    order = np.argsort(-np.abs(w), kind="stable")
    return np.sort(order[:t])


def sparsify_top_t(w: np.ndarray, t: int) -> np.ndarray:
    idx = top_t_indices(w, t)
    out = np.zeros_like(np.asarray(w, dtype=np.float64))
    out[idx] = w[idx]
    return out


def _l2_norm(values: np.ndarray) -> float:
    # rescale by the largest magnitude so huge but finite vectors do not overflow
    peak = float(np.max(np.abs(values), initial=0.0))
    if peak == 0.0 or not np.isfinite(peak):
        return peak
    return peak * float(np.linalg.norm(values / peak))


def _round_levels(values: np.ndarray, norm: float, n_levels: int, u: np.ndarray) -> np.ndarray:
    """Randomized rounding of ``|values|/norm * n_levels``; ``u`` may carry leading draw axes."""
    if norm == 0.0:
        return np.zeros(u.shape, dtype=np.int64)
    scaled = np.clip(np.abs(values) / norm * n_levels, 0.0, n_levels)
    floor = np.floor(scaled)
    return floor.astype(np.int64) + (u < scaled - floor)


def _quantize_at(
    w: np.ndarray,
    indices: np.ndarray,
    policy: CompressionPolicy,
    rng: np.random.Generator,
) -> CompressedUpdate:
    values = np.asarray(w, dtype=np.float64)[indices]
    norm = _l2_norm(values)
    n_levels = policy.n_levels
    # one uniform per stored entry regardless of the input, keeps streams aligned
    u = rng.random(indices.size)
    levels = _round_levels(values, norm, n_levels, u)
    signs = np.where(values < 0, -1, 1).astype(np.int8) if norm else np.ones(indices.size, dtype=np.int8)
    return CompressedUpdate(
        indices=indices.astype(np.int64),
        levels=levels,
        signs=signs,
        l2_norm=norm,
        n_params=int(np.asarray(w).size),
        policy=policy,
    )


def quantize_probabilistic(
    w_sparse: np.ndarray, n_bits: int, rng: np.random.Generator, n_bits_clear: int = 32
) -> CompressedUpdate:
    """Quantize the nonzero entries of an already-sparsified vector.

    Each magnitude ratio ``r = |w_n| / ||w||`` lands on level ``floor(r*L)`` or the
    next one, with probabilities chosen so the reconstruction is unbiased.
    """
    w_sparse = np.asarray(w_sparse, dtype=np.float64)
    indices = np.flatnonzero(w_sparse)
    policy = CompressionPolicy(
        max(indices.size, 1) / w_sparse.size, n_bits, max(n_bits, n_bits_clear)
    )
    return _quantize_at(w_sparse, indices, policy, rng)


def compress(w: np.ndarray, policy: CompressionPolicy, rng: np.random.Generator) -> CompressedUpdate:
    w = np.asarray(w, dtype=np.float64)
    t = policy.n_kept(w.size)
    if policy.identity:
        indices = np.arange(w.size)
        return CompressedUpdate(
            indices=indices,
            levels=np.zeros(w.size, dtype=np.int64),
            signs=np.where(w < 0, -1, 1).astype(np.int8),
            l2_norm=_l2_norm(w),
            n_params=w.size,
            policy=policy,
            exact=w.copy(),
        )
    return _quantize_at(w, top_t_indices(w, t), policy, rng)


def monte_carlo_mean(
    w: np.ndarray, policy: CompressionPolicy, rng: np.random.Generator, n_draws: int
) -> np.ndarray:
    """Average of ``n_draws`` independent ``decompress(compress(w))`` results, batched.

    Consumes the stream exactly like ``n_draws`` successive ``compress`` calls.
    """
    w = np.asarray(w, dtype=np.float64)
    if policy.identity:
        return w.copy()
    indices = top_t_indices(w, policy.n_kept(w.size))
    values = w[indices]
    norm = _l2_norm(values)
    levels = _round_levels(values, norm, policy.n_levels, rng.random((n_draws, indices.size)))
    out = np.zeros(w.size)
    out[indices] = norm * np.where(values < 0, -1.0, 1.0) * (levels.mean(axis=0) / policy.n_levels)
    return out


def decompress(update: CompressedUpdate) -> np.ndarray:
    if update.exact is not None:
        return update.exact.copy()
    idx = np.asarray(update.indices)
    if idx.size and (idx.min() < 0 or idx.max() >= update.n_params):
        raise MalformedPayloadError(
            f"index out of range for a vector of {update.n_params} parameters"
        )
    if idx.size != update.levels.size or idx.size != update.signs.size:
        raise MalformedPayloadError("indices, levels and signs have different lengths")
    out = np.zeros(update.n_params)
    out[idx] = update.l2_norm * update.signs * (update.levels / update.policy.n_levels)
    return out


def zero_update(n_params: int, policy: CompressionPolicy) -> CompressedUpdate:
    t = policy.n_kept(n_params)
    return CompressedUpdate(
        indices=np.arange(t, dtype=np.int64),
        levels=np.zeros(t, dtype=np.int64),
        signs=np.ones(t, dtype=np.int8),
        l2_norm=0.0,
        n_params=n_params,
        policy=policy,
    )


# ---------------------------------------------------------------------------
# Wire format (debug/logging only, not used for energy accounting)
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IIBd")


def encode_payload(update: CompressedUpdate) -> bytes:
    """Little-endian: header (n_params u32, t u32, n_bits u8, l2_norm f64),
    indices u32[t], then per entry ``ceil((1 + n_bits) / 8)`` bytes holding
    ``sign_bit << n_bits | level`` (sign bit set for negative entries)."""
    if update.exact is not None:
        raise ValueError("identity updates carry exact floats and have no packed form")
    n_bits = update.policy.n_bits
    width = (n_bits + 8) // 8
    out = bytearray(_HEADER.pack(update.n_params, update.t, n_bits, update.l2_norm))
    out += np.asarray(update.indices, dtype="<u4").tobytes()
    for sign, level in zip(update.signs.tolist(), update.levels.tolist()):
        word = (int(sign < 0) << n_bits) | int(level)
        out += word.to_bytes(width, "little")
    return bytes(out)


def decode_payload(data: bytes, n_bits_clear: int = 32) -> CompressedUpdate:
    if len(data) < _HEADER.size:
        raise MalformedPayloadError("payload shorter than header")
    n_params, t, n_bits, norm = _HEADER.unpack_from(data)
    width = (n_bits + 8) // 8
    expected = _HEADER.size + 4 * t + width * t
    if len(data) != expected:
        raise MalformedPayloadError(f"payload is {len(data)} bytes, expected {expected}")
    if n_params < 1 or not 1 <= t <= n_params or n_bits < 1:
        raise MalformedPayloadError(f"bad header n_params={n_params} t={t} n_bits={n_bits}")
    offset = _HEADER.size
    indices = np.frombuffer(data, dtype="<u4", count=t, offset=offset).astype(np.int64)
    if indices.max() >= n_params:
        raise MalformedPayloadError("index out of range")
    offset += 4 * t
    mask = (1 << n_bits) - 1
    levels = np.empty(t, dtype=np.int64)
    signs = np.empty(t, dtype=np.int8)
    for n in range(t):
        word = int.from_bytes(data[offset + n * width : offset + (n + 1) * width], "little")
        levels[n] = word & mask
        signs[n] = -1 if word >> n_bits else 1
    policy = CompressionPolicy(t / n_params, n_bits, max(n_bits, n_bits_clear))
    return CompressedUpdate(indices, levels, signs, float(norm), int(n_params), policy)
