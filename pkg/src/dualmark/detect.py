"""Detection statistics for both watermarks and their combination.

The token-probability watermark is tested with a one-sided z-test on
the green-token count. The contrastive watermark is tested with a
rank test: the self-similarity gap between the keyed contrastive set
and its complement, ranked against the same gap under M decoy keys.
The two p-values combine by Fisher's method (chi-squared, 4 dof, which
has the closed form used here). The exponential scheme has its own
score whose null is Gamma(T, 1).

All statistics recompute stream values from token ids alone; no
generation state is needed. Detectors are plain objects exposing
``p_value`` (full sequence) and ``p_trace`` (every prefix at once,
computed incrementally, which is what makes efficiency scans cheap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import rng
from .core import TokenSeq, UndefinedTestError, WatermarkConfig
from .lm import LanguageModel
from .rng import KeySet

# Published default seed for deriving decoy keys; anyone can reproduce
# the decoy set, only the true keys are secret.
DEFAULT_DETECTOR_SEED = 0x9C6703B1E52F48DA

_P_FLOOR = 2.0**-53
_R_CEIL = 1.0 - 2.0**-53
_SQRT2 = math.sqrt(2.0)


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return float(0.5 * special.erfc(-x / _SQRT2))


def _normal_sf(z) -> np.ndarray:
    return 0.5 * special.erfc(np.asarray(z, dtype=np.float64) / _SQRT2)


def chi2_cdf_4(x: float) -> float:
    """Chi-squared CDF with 4 degrees of freedom: 1 - e^(-x/2)(1 + x/2)."""
    if x < 0:
        raise ValueError(f"x must be >= 0, got {x}")
    half = 0.5 * x
    return 1.0 - math.exp(-half) * (1.0 + half)


def fisher_combine(p_a: float, p_b: float) -> float:
    """Fisher's combination of two independent p-values.

    Returns the chi-squared(4 dof) upper tail of -2(ln p_a + ln p_b),
    i.e. e^(-x/2)(1 + x/2). Inputs must lie in (0, 1]; callers clamp
    tiny values to 2^-53 first (see dual_detect).
    """
    for p in (p_a, p_b):
        if not 0.0 < p <= 1.0:
            raise ValueError(f"p-values must be in (0, 1], got {p}")
    half = -(math.log(p_a) + math.log(p_b))
    return math.exp(-half) * (1.0 + half)


def _fisher_array(p_a: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    a = np.maximum(p_a, _P_FLOOR)
    b = np.maximum(p_b, _P_FLOOR)
    half = -(np.log(a) + np.log(b))
    return np.exp(-half) * (1.0 + half)


def _ids(tokens) -> np.ndarray:
    ids = tokens.ids if isinstance(tokens, TokenSeq) else np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise UndefinedTestError("cannot test an empty sequence")
    return ids


def p_tp(tokens, key_tp: int, gamma: float, h: int) -> tuple[int, float, float]:
    """Green-count test. Returns (phi, z, p).

    phi counts green tokens with seeds recomputed per position exactly
    as in generation (sentinel padding at the start); z is the
    binomial-normal standardization; p its upper tail.
    """
    ids = _ids(tokens)
    seeds = rng.context_seeds(ids, h)
    green = rng.u01_array(int(key_tp), seeds, ids.astype(np.uint64)) < gamma
    t = ids.size
    phi = int(green.sum())
    z = (phi - gamma * t) / math.sqrt(t * gamma * (1.0 - gamma))
    return phi, z, float(_normal_sf(z))


def similarity_profile(model: LanguageModel, tokens, L: int) -> np.ndarray:
    """Per-position self-similarity s[t] = max cosine of token t against
    the preceding min(L, t) tokens; s[0] = -1 (empty window)."""
    ids = _ids(tokens)
    emb = model.hidden_batch(ids)
    n = ids.size
    s = np.full(n, -1.0)
    for lag in range(1, min(L, n - 1) + 1):
        d = np.sum(emb[lag:] * emb[:-lag], axis=1)
        np.maximum(s[lag:], d, out=s[lag:])
    return s


def _membership(keys: np.ndarray, seeds: np.ndarray, eta: float) -> np.ndarray:
    """(n_keys, T) contrastive-set membership; row k is u01(key_k, seed_t, 0) < eta."""
    bits = rng.mix64_array(keys[:, None] ^ seeds[None, :]) >> np.uint64(11)
    return bits.astype(np.float64) * 2.0**-53 < eta


def _phi_matrix(member: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity-gap score for every key (rows) and prefix length (cols).

    phi = mean(s over complement) - mean(s over contrastive set); zero,
    flagged degenerate, when a prefix puts every position in one set.
    """
    t = np.arange(1, s.size + 1, dtype=np.float64)
    cum_n = np.cumsum(member, axis=1, dtype=np.float64)
    cum_s = np.cumsum(member * s[None, :], axis=1)
    tot_s = np.cumsum(s)
    degenerate = (cum_n == 0.0) | (cum_n == t[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_in = cum_s / cum_n
        mean_out = (tot_s[None, :] - cum_s) / (t[None, :] - cum_n)
        phi = np.where(degenerate, 0.0, mean_out - mean_in)
    return phi, degenerate


def phi_cs(tokens, key: int, model: LanguageModel, eta: float, L: int, h: int) -> tuple[float, bool]:
    """Contrastive similarity gap under one key. Returns (phi, degenerate)."""
    ids = _ids(tokens)
    seeds = rng.context_seeds(ids, h)
    member = _membership(np.array([int(key)], dtype=np.uint64), seeds, eta)
    s = similarity_profile(model, ids, L)
    phi, degenerate = _phi_matrix(member, s)
    return float(phi[0, -1]), bool(degenerate[0, -1])


def p_cs(tokens, key_cs: int, decoys, model: LanguageModel,
         eta: float, L: int, h: int) -> tuple[float, float, bool]:
    """Rank p-value of the true key's gap among decoy keys.

    Returns (p, phi_true, degenerate). p = (1 + #{decoys with phi >=
    phi_true}) / (M + 1); the smallest attainable value is 1/(M+1).
    """
    decoys = [int(k) for k in decoys]
    if len(decoys) == 0:
        raise ValueError("at least one decoy key is required")
    ids = _ids(tokens)
    seeds = rng.context_seeds(ids, h)
    keys = np.array([int(key_cs)] + decoys, dtype=np.uint64)
    member = _membership(keys, seeds, eta)
    s = similarity_profile(model, ids, L)
    phi, degenerate = _phi_matrix(member, s)
    phi_true = float(phi[0, -1])
    count = int(np.sum(phi[1:, -1] >= phi_true))
    return (1.0 + count) / (len(decoys) + 1.0), phi_true, bool(degenerate[0, -1])


def exp_score(r_values) -> float:
    """-sum ln(1 - r_i), with r clamped below 1 so the log stays finite."""
    r = np.minimum(np.asarray(r_values, dtype=np.float64), _R_CEIL)
    if r.size == 0:
        raise UndefinedTestError("cannot score an empty sequence")
    if np.any(r < 0.0):
        raise ValueError("r values must be in [0, 1]")
    return float(-np.sum(np.log1p(-r)))


def exp_pvalue(score: float, t: int) -> float:
    """Upper tail of Gamma(t, 1) at the observed score."""
    if t < 1:
        raise UndefinedTestError(f"sequence length must be >= 1, got {t}")
    return float(special.gammaincc(t, score))


def exp_detect(tokens, key: int, h: int) -> tuple[float, float]:
    """Exponential-scheme test. ``key`` is the r-stream key (for text
    generated with the dual machinery, derive it from the contrastive
    key; see scheme_detector). Returns (score, p)."""
    ids = _ids(tokens)
    seeds = rng.context_seeds(ids, h)
    r = rng.u01_array(int(key), seeds, ids.astype(np.uint64))
    score = exp_score(r)
    return score, exp_pvalue(score, ids.size)


@dataclass(frozen=True)
class DetectionReport:
    """Full dual-watermark detection summary for one sequence."""

    T: int
    phi_tp: int
    z_tp: float
    p_tp: float
    phi_cs: float
    p_cs: float
    p_combined: float
    degenerate_cs: bool


REPORT_COLUMNS = ("T", "phi_tp", "z_tp", "p_tp", "phi_cs", "p_cs", "p_combined", "degenerate_cs")


def report_line(report: DetectionReport) -> str:
    """One report as a tab-separated line in REPORT_COLUMNS order."""
    return "\t".join([
        str(report.T), str(report.phi_tp), repr(report.z_tp), repr(report.p_tp),
        repr(report.phi_cs), repr(report.p_cs), repr(report.p_combined),
        str(int(report.degenerate_cs)),
    ])


def dual_detect(tokens, keys: KeySet, config: WatermarkConfig, model: LanguageModel,
                detector_seed: int = DEFAULT_DETECTOR_SEED) -> DetectionReport:
    """Run both component tests and combine them by Fisher's method.

    The token-probability p-value is clamped to [2^-53, 1] before the
    log; the rank p-value is bounded below by 1/(M+1) already.
    """
    ids = _ids(tokens)
    phi_t, z_t, p_t = p_tp(ids, keys.tp.value, config.gamma, config.h)
    decoys = rng.decoy_keys(detector_seed, config.M, exclude=(keys.cs.value, keys.tp.value))
    p_c, phi_c, degen = p_cs(ids, keys.cs.value, decoys, model, config.eta, config.L, config.h)
    combined = fisher_combine(max(p_t, _P_FLOOR), p_c)
    return DetectionReport(
        T=ids.size, phi_tp=phi_t, z_tp=z_t, p_tp=p_t,
        phi_cs=phi_c, p_cs=p_c, p_combined=combined, degenerate_cs=degen,
    )


class TokenProbDetector:
    """Green-count z-test, per prefix."""

    name = "tp"

    def __init__(self, key_tp: int, gamma: float, h: int):
        self.key = int(key_tp)
        self.gamma = gamma
        self.h = h

    def p_trace(self, tokens, max_len: int | None = None) -> np.ndarray:
        ids = _ids(tokens)
        n = ids.size if max_len is None else min(ids.size, max_len)
        seeds = rng.context_seeds(ids[:n], self.h)
        green = rng.u01_array(self.key, seeds, ids[:n].astype(np.uint64)) < self.gamma
        t = np.arange(1, n + 1, dtype=np.float64)
        z = (np.cumsum(green) - self.gamma * t) / np.sqrt(t * self.gamma * (1.0 - self.gamma))
        return _normal_sf(z)

    def p_value(self, tokens) -> float:
        return p_tp(tokens, self.key, self.gamma, self.h)[2]


class ContrastDetector:
    """Similarity-gap rank test against decoy keys, per prefix."""

    name = "cs"

    def __init__(self, key_cs: int, model: LanguageModel, eta: float, L: int, h: int,
                 M: int = 99, detector_seed: int = DEFAULT_DETECTOR_SEED, exclude=()):
        if M < 1:
            raise ValueError(f"M must be >= 1, got {M}")
        self.key = int(key_cs)
        self.model = model
        self.eta = eta
        self.L = L
        self.h = h
        self.decoys = rng.decoy_keys(detector_seed, M, exclude=(self.key, *exclude))

    def p_trace(self, tokens, max_len: int | None = None) -> np.ndarray:
        ids = _ids(tokens)
        n = ids.size if max_len is None else min(ids.size, max_len)
        ids = ids[:n]
        seeds = rng.context_seeds(ids, self.h)
        keys = np.array([self.key] + self.decoys, dtype=np.uint64)
        member = _membership(keys, seeds, self.eta)
        s = similarity_profile(self.model, ids, self.L)
        phi, _ = _phi_matrix(member, s)
        count = np.sum(phi[1:] >= phi[0][None, :], axis=0)
        return (1.0 + count) / (len(self.decoys) + 1.0)

    def p_value(self, tokens) -> float:
        return float(self.p_trace(tokens)[-1])


class ExpDetector:
    """Gamma-tail test of the exponential score, per prefix."""

    name = "exp"

    def __init__(self, key: int, h: int):
        self.key = int(key)
        self.h = h

    def p_trace(self, tokens, max_len: int | None = None) -> np.ndarray:
        ids = _ids(tokens)
        n = ids.size if max_len is None else min(ids.size, max_len)
        seeds = rng.context_seeds(ids[:n], self.h)
        r = np.minimum(rng.u01_array(self.key, seeds, ids[:n].astype(np.uint64)), _R_CEIL)
        scores = -np.cumsum(np.log1p(-r))
        return special.gammaincc(np.arange(1, n + 1, dtype=np.float64), scores)

    def p_value(self, tokens) -> float:
        return float(self.p_trace(tokens)[-1])


class FisherPairDetector:
    """Fisher combination of two component detectors, per prefix."""

    def __init__(self, first, second, name: str | None = None):
        self.first = first
        self.second = second
        self.name = name or f"{first.name}+{second.name}"

    def p_trace(self, tokens, max_len: int | None = None) -> np.ndarray:
        return _fisher_array(self.first.p_trace(tokens, max_len),
                             self.second.p_trace(tokens, max_len))

    def p_value(self, tokens) -> float:
        return float(self.p_trace(tokens)[-1])


def scheme_detector(scheme, keys: KeySet, config: WatermarkConfig, model: LanguageModel,
                    detector_seed: int = DEFAULT_DETECTOR_SEED):
    """The natural detector for text produced under a scheme.

    Single-watermark schemes get their single test; dual schemes get the
    Fisher combination of their two components. Unwatermarked text gets
    the full dual detector (the null hypothesis everything is calibrated
    against).
    """
    from .generate import Scheme  # local import to avoid a cycle

    scheme = Scheme(scheme)
    tp = TokenProbDetector(keys.tp.value, config.gamma, config.h)
    exp_key = rng.derive_key(keys.cs.value, rng.SALT_EXP_STREAM)
    if scheme is Scheme.KGW:
        return tp
    if scheme is Scheme.EXP:
        return ExpDetector(exp_key, config.h)
    cs = ContrastDetector(keys.cs.value, model, config.eta, config.L, config.h,
                          M=config.M, detector_seed=detector_seed, exclude=(keys.tp.value,))
    if scheme is Scheme.CS:
        return cs
    if scheme is Scheme.KGW_EXP:
        return FisherPairDetector(tp, ExpDetector(exp_key, config.h))
    if scheme is Scheme.EXP_CS:
        return FisherPairDetector(ExpDetector(exp_key, config.h), cs)
    return FisherPairDetector(tp, cs, name="dual")


@dataclass(frozen=True)
class EfficiencyResult:
    """Outcome of a prefix scan: the shortest prefix that crosses the
    threshold, or None if none does within max_inspect."""

    threshold: float
    max_inspect: int
    t_star: int | None
    p_trace: np.ndarray

    @property
    def label(self) -> str:
        return str(self.t_star) if self.t_star is not None else f">{self.max_inspect}"


def detection_efficiency(tokens, detector, threshold: float, max_inspect: int) -> EfficiencyResult:
    """Scan prefixes of length 1..max_inspect for the first p <= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if max_inspect < 1:
        raise ValueError(f"max_inspect must be >= 1, got {max_inspect}")
    trace = detector.p_trace(tokens, max_len=max_inspect)
    hits = np.flatnonzero(trace <= threshold)
    t_star = int(hits[0]) + 1 if hits.size else None
    return EfficiencyResult(threshold=threshold, max_inspect=max_inspect,
                            t_star=t_star, p_trace=trace)
