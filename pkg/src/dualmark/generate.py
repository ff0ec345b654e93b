"""Watermarked generation: scheme wiring, samplers, and trace capture.

Two independent watermarks can be active at once. The token-probability
watermark biases logits toward a keyed green list before sampling. The
sampling watermark replaces the sampling rule itself on a keyed subset
of positions: either a contrastive pick (argmax of model confidence
minus self-similarity over the top-k candidates) or an exponential-race
pick driven by a keyed r-vector. Which combination runs is named by
``Scheme``.

Watermark seeds hash only the tokens generated so far, never the
prompt, so a detector holding just the output recomputes every stream
value exactly (see docs/RNG.md).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .core import (
    InvalidDistributionError,
    TokenSeq,
    WatermarkConfig,
    check_probs,
    softmax,
)
from .lm import LanguageModel
from .rng import KeySet


class Scheme(str, enum.Enum):
    """Which watermark(s) shape each generated token."""

    NONE = "none"
    KGW = "kgw"
    EXP = "exp"
    CS = "cs"
    KGW_EXP = "kgw+exp"
    EXP_CS = "exp+cs"
    DUAL = "dual"


_BIASED = {Scheme.KGW, Scheme.KGW_EXP, Scheme.DUAL}
_CONTRASTIVE = {Scheme.CS, Scheme.EXP_CS, Scheme.DUAL}
_EXP_FALLBACK = {Scheme.EXP, Scheme.KGW_EXP, Scheme.EXP_CS}


@dataclass(frozen=True)
class StepRecord:
    """Stream values at one generation step.

    ``contrastive`` records membership of the position in the keyed
    contrastive set (r < eta), whether or not the active scheme used
    that branch. ``green`` is green-list membership of the chosen
    token; ``prob`` its probability under the distribution actually
    sampled from.
    """

    seed: int
    r: float
    contrastive: bool
    green: bool
    prob: float


@dataclass(frozen=True)
class GenerationTrace:
    scheme: Scheme
    tokens: TokenSeq
    steps: tuple
    prompt_len: int = 0

    def __post_init__(self):
        if len(self.tokens) != len(self.steps):
            raise ValueError("one step record per generated token required")

    def green_count(self) -> int:
        return sum(1 for s in self.steps if s.green)

    def contrast_count(self) -> int:
        return sum(1 for s in self.steps if s.contrastive)

    def save(self, path) -> None:
        lines = [f"scheme\t{self.scheme.value}\tprompt_len\t{self.prompt_len}"]
        lines.append("step\ttoken\tseed\tr\tcontrastive\tgreen\tprob")
        for i, (tok, s) in enumerate(zip(self.tokens, self.steps)):
            lines.append(
                f"{i}\t{tok}\t{s.seed:016x}\t{s.r!r}\t{int(s.contrastive)}\t{int(s.green)}\t{s.prob!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GenerationTrace":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = lines[0].split("\t")
        scheme = Scheme(head[1])
        prompt_len = int(head[3])
        tokens = []
        steps = []
        for ln in lines[2:]:
            _, tok, seed, r, cflag, gflag, prob = ln.split("\t")
            tokens.append(int(tok))
            steps.append(StepRecord(int(seed, 16), float(r), cflag == "1", gflag == "1", float(prob)))
        return cls(scheme=scheme, tokens=TokenSeq(np.array(tokens, dtype=np.int64)),
                   steps=tuple(steps), prompt_len=prompt_len)


def kgw_adjust(logits, seed: int, key_tp: int, gamma: float, delta: float) -> np.ndarray:
    """Green-biased next-token distribution: softmax(logits + delta on green ids)."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    arr = np.asarray(logits, dtype=np.float64)
    mask = rng.green_mask(int(key_tp), seed, arr.size, gamma)
    return softmax(arr + delta * mask)


def multinomial_sample(p, u: float) -> int:
    """Inverse-CDF draw in token-id order: smallest x with u < F(x)."""
    arr = check_probs(p)
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must be in [0, 1), got {u}")
    cdf = np.cumsum(arr)
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, arr.size - 1)


def exp_sample(p, r) -> int:
    """argmax_n r[n]^(1/p[n]) over tokens with p[n] > 0.

    Computed as argmax of log(r)/p; zero-probability tokens are
    excluded (their power race degenerates to 0). Ties resolve to the
    lowest token id.
    """
    arr = check_probs(p)
    rv = np.asarray(r, dtype=np.float64)
    if rv.shape != arr.shape:
        raise InvalidDistributionError("r vector must match p in shape")
    scores = np.full(arr.size, -np.inf)
    mask = arr > 0.0
    with np.errstate(divide="ignore"):
        scores[mask] = np.log(rv[mask]) / arr[mask]
    return int(np.argmax(scores))


def self_similarity(model: LanguageModel, window, candidate: int) -> float:
    """Max cosine similarity of the candidate against a token window.

    Empty window returns -1.0 (the cosine floor), so early positions
    never penalize candidates.
    """
    if len(window) == 0:
        return -1.0
    w = model.hidden_batch(window)
    c = model.hidden(int(candidate))
    return float(np.max(np.sum(w * c[None, :], axis=1)))


def contrastive_pick(p_hat, k: int, alpha: float, model: LanguageModel, window) -> int:
    """Contrastive token choice over the top-k of an adjusted distribution.

    score(v) = (1 - alpha) * p_hat[v] - alpha * s(v), with s the max
    cosine of v against the window. Top-k membership and score ties
    both resolve toward lower token ids.
    """
    arr = check_probs(p_hat)
    if not 1 <= k <= arr.size:
        raise ValueError(f"k must be in [1, {arr.size}], got {k}")
    cands = np.argsort(-arr, kind="stable")[:k]
    if len(window) == 0:
        sims = np.full(cands.size, -1.0)
    else:
        w = model.hidden_batch(window)
        c = model.hidden_batch(cands)
        sims = np.max(np.sum(c[:, None, :] * w[None, :, :], axis=2), axis=1)
    scores = (1.0 - alpha) * arr[cands] - alpha * sims
    best = scores.max()
    return int(cands[scores == best].min())


def generate(model: LanguageModel, prompt, scheme: Scheme, keys: KeySet,
             config: WatermarkConfig, length: int, sampling_seed: int = 0) -> GenerationTrace:
    """Generate ``length`` tokens under a watermarking scheme.

    The prompt conditions the model only. Per step: the seed hashes the
    last ``config.h`` generated tokens (sentinel-padded at the start),
    the split draw r = u01(key_cs, seed, 0) assigns the position to the
    contrastive set when r < eta, and the scheme decides which sampler
    consumes the step. Fixed (model, prompt, scheme, keys, config,
    sampling_seed) reproduce the trace bit-for-bit.
    """
    scheme = Scheme(scheme)
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    prompt_ids = [int(t) for t in prompt]
    limit = model.context_limit
    if limit is not None and len(prompt_ids) + length > limit:
        raise ValueError(f"prompt + length exceeds model context limit {limit}")
    if config.k > model.vocab_size:
        raise ValueError(f"k={config.k} exceeds vocabulary size {model.vocab_size}")

    key_tp = keys.tp.value
    key_cs = keys.cs.value
    exp_key = rng.derive_key(key_cs, rng.SALT_EXP_STREAM)
    sampler_key = rng.derive_key(sampling_seed, rng.SALT_SAMPLER)

    ctx = list(prompt_ids)
    gen: list[int] = []
    steps: list[StepRecord] = []
    for t in range(length):
        seed = rng.context_seed(gen, config.h)
        r = rng.u01(key_cs, seed, 0)
        in_contrast = r < config.eta
        logits = model.next_logits(ctx)
        if scheme in _BIASED:
            p = kgw_adjust(logits, seed, key_tp, config.gamma, config.delta)
        else:
            p = softmax(logits)

        if scheme in _CONTRASTIVE and in_contrast:
            window = gen[-config.L:]
            x = contrastive_pick(p, config.k, config.alpha, model, window)
        elif scheme in _EXP_FALLBACK:
            rvec = rng.r_vector(exp_key, seed, model.vocab_size)
            x = exp_sample(p, rvec)
        else:
            u = rng.u01(sampler_key, 0, t)
            x = multinomial_sample(p, u)

        steps.append(StepRecord(
            seed=seed, r=r, contrastive=in_contrast,
            green=rng.is_green(key_tp, seed, x, config.gamma), prob=float(p[x]),
        ))
        gen.append(x)
        ctx.append(x)

    return GenerationTrace(
        scheme=scheme,
        tokens=TokenSeq(np.array(gen, dtype=np.int64), origin="generated"),
        steps=tuple(steps),
        prompt_len=len(prompt_ids),
    )
