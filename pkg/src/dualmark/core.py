"""Vocabulary, token sequences, configuration, and shared numeric helpers."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng

UNK_ID = 0
UNK_TOKEN = "<unk>"

PROB_TOL = 1e-9

_ORIGINS = ("prompt", "generated", "attacked", "corpus")

# Words plus word-internal apostrophes stay whole; any other non-space
# character is its own token.
_TOKEN_RE = re.compile(r"[0-9A-Za-z]+(?:'[0-9A-Za-z]+)*|[^\s0-9A-Za-z]")


class InvalidLogitsError(ValueError):
    """Logit vector is not a finite 1-D float array."""


class InvalidDistributionError(ValueError):
    """Probability vector fails non-negativity or normalization."""


class UndefinedTestError(ValueError):
    """A detection statistic was requested on degenerate input (e.g. T = 0)."""


class AttackUnavailableError(RuntimeError):
    """An attack needs an external service that is absent or failing."""


class MissingMapError(ValueError):
    """An attack needs a substitution map that was not provided."""


@dataclass(frozen=True)
class TokenSeq:
    """An immutable sequence of token ids with a provenance tag.

    Args:
        ids: token ids, any integer sequence; stored as a read-only
            int64 array.
        origin: one of "prompt", "generated", "attacked", "corpus".
    """

    ids: np.ndarray
    origin: str = "generated"

    def __post_init__(self):
        arr = np.asarray(self.ids, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("token ids must be one-dimensional")
        if arr.size and arr.min() < 0:
            raise ValueError("token ids must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "ids", arr)
        if self.origin not in _ORIGINS:
            raise ValueError(f"origin must be one of {_ORIGINS}, got {self.origin!r}")

    def __len__(self) -> int:
        return int(self.ids.size)

    def __iter__(self):
        return iter(self.ids.tolist())

    def prefix(self, n: int) -> "TokenSeq":
        return TokenSeq(self.ids[:n], origin=self.origin)

    def tolist(self) -> list[int]:
        return self.ids.tolist()


class Vocabulary:
    """Dense token-id table; id 0 is always the UNK sentinel ``<unk>``."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if not tokens or tokens[0] != UNK_TOKEN:
            raise ValueError(f"entry 0 must be {UNK_TOKEN!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary entries must be unique")
        for t in tokens:
            if not t or any(c.isspace() for c in t):
                raise ValueError(f"invalid vocabulary entry {t!r}")
        self._tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def id_of(self, token: str) -> int:
        """Token id, or UNK_ID for out-of-vocabulary strings."""
        return self._index.get(token, UNK_ID)

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)

    def to_file(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")


def tokenize(text: str, vocab: Vocabulary, origin: str = "corpus") -> TokenSeq:
    """Word-level tokenization; punctuation marks are their own tokens.

    Out-of-vocabulary words map to UNK_ID (a real vocabulary entry, so
    downstream statistics treat them like any other token).
    """
    ids = [vocab.id_of(t) for t in _TOKEN_RE.findall(text)]
    return TokenSeq(np.array(ids, dtype=np.int64), origin=origin)


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> str:
    """Inverse of tokenize for in-vocabulary, single-spaced text."""
    return " ".join(vocab.token(i) for i in seq.ids)


def load_corpus(path) -> list[str]:
    """Plain-text corpus: one document per line, blank lines dropped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln for ln in lines if ln.strip()]


def check_logits(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidLogitsError("logits must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidLogitsError("logits must be finite")
    return arr


def check_probs(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidDistributionError("probabilities must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidDistributionError("probabilities must be finite and non-negative")
    if abs(float(arr.sum()) - 1.0) > PROB_TOL:
        raise InvalidDistributionError(f"probabilities sum to {arr.sum()!r}, not 1")
    return arr


def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax in float64."""
    arr = check_logits(logits)
    e = np.exp(arr - arr.max())
    return e / e.sum()


@dataclass(frozen=True)
class WatermarkConfig:
    """Generation and detection parameters for the dual watermark.

    Attributes:
        gamma: green-list fraction, in (0, 1).
        delta: green-token logit bias, >= 0.
        eta: fraction of positions assigned to the contrastive set.
        alpha: contrastive trade-off between model confidence and
            similarity penalty. The penalty term must dominate (alpha
            well above 0.5) for contrastive picks to diverge from the
            model's natural choices often enough to detect quickly.
        k: candidate-set size for contrastive picks.
        L: similarity window length.
        h: number of preceding tokens hashed into each seed.
        M: decoy-key count for the contrastive detector.
        p_threshold: detection p-value threshold; must be reachable,
            i.e. at least 1 / (M + 1).
        max_inspect: longest prefix the efficiency scan will inspect.
    """

    gamma: float = 0.5
    delta: float = 2.5
    eta: float = 0.5
    alpha: float = 0.8
    k: int = 20
    L: int = 50
    h: int = 1
    M: int = 99
    p_threshold: float = 0.02
    max_inspect: int = 1024

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.delta < 0.0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.h < 1:
            raise ValueError(f"h must be >= 1, got {self.h}")
        if self.M < 49:
            raise ValueError(f"M must be >= 49, got {self.M}")
        if not 0.0 < self.p_threshold < 1.0:
            raise ValueError(f"p_threshold must be in (0, 1), got {self.p_threshold}")
        if self.p_threshold < 1.0 / (self.M + 1):
            raise ValueError(
                f"p_threshold {self.p_threshold} is unreachable with M={self.M}; "
                f"the smallest attainable contrastive p-value is 1/(M+1)"
            )
        if self.max_inspect < 1:
            raise ValueError(f"max_inspect must be >= 1, got {self.max_inspect}")


# Contraction triples (left word, right word, contraction). Every string
# appears in the demo vocabulary so contraction attacks have targets.
CONTRACTION_TRIPLES = [
    ("do", "not", "don't"),
    ("does", "not", "doesn't"),
    ("did", "not", "didn't"),
    ("can", "not", "can't"),
    ("will", "not", "won't"),
    ("is", "not", "isn't"),
    ("are", "not", "aren't"),
    ("was", "not", "wasn't"),
    ("it", "is", "it's"),
    ("that", "is", "that's"),
    ("there", "is", "there's"),
    ("i", "am", "i'm"),
    ("you", "are", "you're"),
    ("we", "are", "we're"),
    ("they", "are", "they're"),
]

_PUNCT = [".", ",", "!", "?", ";", ":", "'", '"', "(", ")"]

_SYL_ONSET = "b c d f g h j k l m n p r s t v w z br ch cl dr fl gr pl pr sh sl sp st th tr".split()
_SYL_NUCLEUS = "a e i o u ai ea ee oa oo ou".split()
_SYL_CODA = ["", "", "", "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "x", "nd", "nt", "rm", "st"]


def build_demo_vocab(size: int = 1000, seed: int = 0) -> Vocabulary:
    """Deterministic synthetic vocabulary for the mock language model.

    Layout: UNK, punctuation, contraction words, then pseudo-words built
    from syllables. Every eighth pseudo-word also gets a capitalized
    twin, which gives the lowercasing attack something to normalize.
    """
    base: list[str] = [UNK_TOKEN]
    base.extend(_PUNCT)
    seen = set(base)
    for a, b, c in CONTRACTION_TRIPLES:
        for w in (a, b, c):
            if w not in seen:
                seen.add(w)
                base.append(w)
    if size < len(base) + 16:
        raise ValueError(f"size must be >= {len(base) + 16}, got {size}")

    key = rng.derive_key(seed, rng.SALT_ATTACK_AUX)
    counter = 0
    n_words = 0
    while len(base) < size:
        parts = []
        u = rng.u01(key, 0, counter)
        counter += 1
        n_syll = 2 if u < 0.6 else 3
        for _ in range(n_syll):
            o = _SYL_ONSET[int(rng.u01(key, 1, counter) * len(_SYL_ONSET))]
            v = _SYL_NUCLEUS[int(rng.u01(key, 2, counter) * len(_SYL_NUCLEUS))]
            c = _SYL_CODA[int(rng.u01(key, 3, counter) * len(_SYL_CODA))]
            parts.append(o + v + c)
            counter += 1
        word = "".join(parts)
        if word in seen:
            continue
        seen.add(word)
        base.append(word)
        n_words += 1
        if n_words % 8 == 0 and len(base) < size:
            cap = word.capitalize()
            if cap not in seen:
                seen.add(cap)
                base.append(cap)
    return Vocabulary(base)
