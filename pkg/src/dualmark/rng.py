"""Keyed counter-based randomness for watermark streams.

Every random quantity in the package is a pure function of
``(key, seed, index)``: a 64-bit key naming the stream, a 64-bit seed
derived from preceding token ids, and a counter index. There is no
hidden state, so generation and detection recompute identical values,
and any position can be evaluated independently of the others.

Constants and stream assignments are pinned in docs/RNG.md. Changing
any of them invalidates previously embedded watermarks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF

# splitmix64 increment and finalizer multipliers.
GOLDEN = 0x9E3779B97F4A7C15
_MIX_M1 = 0xBF58476D1CE4E5B9
_MIX_M2 = 0x94D049BB133111EB

# Initial state of the context fold (fractional bits of sqrt(2)).
SEED_INIT = 0x6A09E667F3BCC908

# Token id used to left-pad context windows shorter than h.
SENTINEL_ID = 0

# Role salts for derived keys. Each distinct consumer of randomness
# gets its own salt so streams never collide across roles.
SALT_EXP_STREAM = 0x8F1BD03A55F296E1
SALT_SAMPLER = 0xC2A719E46D0B83F5
SALT_ATTACK_SELECT = 0x31B9F7E28C44DA07
SALT_ATTACK_CHOICE = 0xA68D2C50E91F7B3C
SALT_ATTACK_AUX = 0x0F529BD671A834E9
SALT_PROMPT = 0x5D80C4A93F167E2B
SALT_SAMPLING_SEED = 0xE1B4A0D8527C963F
SALT_KEY_TP = 0x7A3E9B04D1C8F562
SALT_KEY_CS = 0x48D2F6A90B7E13C4
SALT_EMB_A = 0xD7E34F962B81C05A
SALT_EMB_B = 0x69C08E15F3D72A4B
SALT_NOISE_A = 0x24FA71B89E06D5C3
SALT_NOISE_B = 0xB81C65F03A9742ED

_U64_GOLDEN = np.uint64(GOLDEN)
_U64_M1 = np.uint64(_MIX_M1)
_U64_M2 = np.uint64(_MIX_M2)
_INV_2_53 = float(2.0**-53)


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int, mod 2^64."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX_M1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX_M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer elementwise on a uint64 array.

    Multiplications wrap mod 2^64 by design; the errstate guard keeps
    numpy quiet about it on 0-d inputs.
    """
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * _U64_M1
        z = z ^ (z >> np.uint64(27))
        z = z * _U64_M2
        return z ^ (z >> np.uint64(31))


def derive_key(base: int, salt: int) -> int:
    """Role-separated subkey: mix64(base XOR salt)."""
    return mix64((int(base) ^ salt) & MASK64)


@dataclass(frozen=True)
class WatermarkKey:
    """A 64-bit stream key with a role tag ("tp", "cs", "decoy", ...)."""

    value: int
    role: str = ""

    def __post_init__(self):
        if not isinstance(self.value, int) or not 0 <= self.value <= MASK64:
            raise ValueError(f"key value must be a 64-bit integer, got {self.value!r}")

    def __int__(self) -> int:
        return self.value


@dataclass(frozen=True)
class KeySet:
    """The two generation keys: token-probability and contrastive-search."""

    tp: WatermarkKey
    cs: WatermarkKey

    def __post_init__(self):
        if self.tp.value == self.cs.value:
            raise ValueError("tp and cs keys must be distinct")

    @classmethod
    def from_seeds(cls, tp_seed: int, cs_seed: int) -> "KeySet":
        return cls(
            tp=WatermarkKey(mix64(tp_seed), role="tp"),
            cs=WatermarkKey(mix64(cs_seed), role="cs"),
        )


def context_seed(tokens, h: int) -> int:
    """Seed for the position following ``tokens``.

    Folds the last ``h`` token ids through the finalizer, left-padding
    with SENTINEL_ID when fewer than ``h`` tokens precede the position.
    Oldest token first, so the fold is order-sensitive.
    """
    if h <= 0:
        raise ValueError(f"h must be >= 1, got {h}")
    n = len(tokens)
    s = SEED_INIT
    for j in range(h):
        i = n - h + j
        t = int(tokens[i]) if i >= 0 else SENTINEL_ID
        if t < 0:
            raise ValueError(f"token ids must be non-negative, got {t}")
        s = mix64((s + GOLDEN) ^ t)
    return s


def context_seeds(tokens, h: int) -> np.ndarray:
    """Per-position seeds for a whole sequence, vectorized.

    Position i gets the seed computed from tokens[i-h:i] with sentinel
    padding, i.e. exactly context_seed(tokens[:i], h) for every i.
    """
    if h <= 0:
        raise ValueError(f"h must be >= 1, got {h}")
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError("tokens must be one-dimensional")
    if arr.size and arr.min() < 0:
        raise ValueError("token ids must be non-negative")
    n = arr.size
    padded = np.concatenate([np.full(h, SENTINEL_ID, dtype=np.uint64), arr.astype(np.uint64)])
    s = np.full(n, SEED_INIT, dtype=np.uint64)
    for j in range(h):
        s = mix64_array((s + _U64_GOLDEN) ^ padded[j : j + n])
    return s


def context_seeds_batch(tokens, h: int) -> np.ndarray:
    """Per-position seeds for B equal-length sequences at once.

    ``tokens`` is a (B, T) int matrix; entry (b, t) of the result is
    exactly context_seed(tokens[b, :t], h).
    """
    if h <= 0:
        raise ValueError(f"h must be >= 1, got {h}")
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 2:
        raise ValueError("tokens must be a (B, T) matrix")
    if arr.size and arr.min() < 0:
        raise ValueError("token ids must be non-negative")
    b, n = arr.shape
    padded = np.concatenate(
        [np.full((b, h), SENTINEL_ID, dtype=np.uint64), arr.astype(np.uint64)], axis=1
    )
    s = np.full((b, n), SEED_INIT, dtype=np.uint64)
    for j in range(h):
        s = mix64_array((s + _U64_GOLDEN) ^ padded[:, j : j + n])
    return s


def fold_windows(windows) -> np.ndarray:
    """Seed per row of an already-padded (B, h) window matrix.

    Row b gets exactly context_seed(window_b, h): same fold, same
    constants, vectorized across rows.
    """
    w = np.asarray(windows, dtype=np.uint64)
    if w.ndim != 2:
        raise ValueError("windows must be a 2-D matrix")
    s = np.full(w.shape[0], SEED_INIT, dtype=np.uint64)
    for j in range(w.shape[1]):
        s = mix64_array((s + _U64_GOLDEN) ^ w[:, j])
    return s


def u01(key: int, seed: int, index: int) -> float:
    """Uniform draw in [0, 1): top 53 bits of mix64(key ^ seed ^ index)."""
    return (mix64((int(key) ^ seed ^ index) & MASK64) >> 11) * _INV_2_53


def u01_array(key: int, seeds, indices) -> np.ndarray:
    """Vectorized u01; ``seeds`` and ``indices`` broadcast against each other."""
    return u01_broadcast(np.uint64(int(key)), seeds, indices)


def u01_broadcast(keys, seeds, indices) -> np.ndarray:
    """Fully vectorized u01: keys, seeds, and indices all broadcast."""
    k = np.asarray(keys, dtype=np.uint64)
    s = np.asarray(seeds, dtype=np.uint64)
    i = np.asarray(indices, dtype=np.uint64)
    bits = mix64_array(k ^ s ^ i) >> np.uint64(11)
    return bits.astype(np.float64) * _INV_2_53


def is_green(key: int, seed: int, token: int, gamma: float) -> bool:
    """Green-list membership of one token at one position."""
    return u01(key, seed, token) < gamma


def green_mask(key: int, seed: int, size: int, gamma: float) -> np.ndarray:
    """Boolean green-list membership for token ids 0..size-1."""
    return r_vector(key, seed, size) < gamma


def r_vector(key: int, seed: int, size: int) -> np.ndarray:
    """Per-token uniforms r[n] = u01(key, seed, n) for n in 0..size-1."""
    if size <= 0:
        raise ValueError(f"size must be >= 1, got {size}")
    return u01_array(key, np.uint64(seed), np.arange(size, dtype=np.uint64))


def keyed_normals(key_a: int, key_b: int, seeds, indices) -> np.ndarray:
    """Standard normals from two independent u01 streams via Box-Muller.

    u1 is clamped away from zero so the log is finite. Deterministic in
    (key_a, key_b, seed, index).
    """
    u1 = u01_array(key_a, seeds, indices)
    u2 = u01_array(key_b, seeds, indices)
    np.maximum(u1, _INV_2_53, out=u1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def decoy_keys(detector_seed: int, m: int, exclude=()) -> list[int]:
    """m distinct decoy keys from a published detector seed.

    Walks the splitmix64 sequence starting at ``detector_seed`` and
    keeps finalized values not present in ``exclude`` (the true keys)
    and not already emitted.
    """
    if m <= 0:
        raise ValueError(f"decoy count must be >= 1, got {m}")
    banned = {int(k) for k in exclude}
    out: list[int] = []
    state = int(detector_seed) & MASK64
    while len(out) < m:
        state = (state + GOLDEN) & MASK64
        cand = mix64(state)
        if cand in banned:
            continue
        banned.add(cand)
        out.append(cand)
    return out
