"""Language-model interface, the deterministic mock model, and spike entropy.

The mock model exists so every experiment in the package runs without
model weights: logits are a smooth function of a context embedding plus
keyed noise, fully determined by (model_seed, context). A real model can
be plugged in through ``SubprocessLM`` (line protocol, see
docs/FORMATS.md) or any other ``LanguageModel`` implementation.
"""

from __future__ import annotations

import subprocess

import numpy as np

from . import rng
from .core import InvalidLogitsError, check_probs


class LanguageModel:
    """Minimal surface the watermark machinery needs from a model."""

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def context_limit(self) -> int | None:
        return None

    def next_logits(self, context) -> np.ndarray:
        """Logits over the vocabulary for the next position. ``context``
        is a sequence of token ids; empty is allowed."""
        raise NotImplementedError

    def hidden(self, token: int) -> np.ndarray:
        """Unit-norm representation of a token, used for similarity."""
        raise NotImplementedError

    def hidden_batch(self, tokens) -> np.ndarray:
        """Representations for many tokens, shape (n, dim)."""
        arr = np.asarray(tokens, dtype=np.int64).ravel()
        return np.stack([self.hidden(int(t)) for t in arr]) if arr.size else np.zeros((0, self.dim))


class MockLM(LanguageModel):
    """Deterministic synthetic model over a dense vocabulary.

    logits = (sim + 0.5 * noise - rep) / temperature, where sim[n] is
    the dot product of token n's embedding with the mean embedding of
    the last ``h_model`` context tokens (sentinel-padded), noise is a
    keyed standard-normal draw per (context, token), and rep penalizes
    tokens that already appear among the last ``rep_window`` context
    ids. Identical seeds give bit-identical embeddings and logits.

    The attractor toward embeddings similar to the recent context is
    what gives the contrastive watermark its signal; the repetition
    penalty keeps that pull from collapsing whole sequences into short
    exact cycles (which would correlate per-position detector streams
    and miscalibrate null p-values). Temperature is calibrated so the
    green-list bias lands in a regime where detection takes tens of
    tokens rather than a handful.

    Args:
        vocab_size: number of token ids.
        dim: embedding width; >= 8 (near-isotropic from ~32 up).
        model_seed: master seed for embeddings and noise streams.
        temperature: sharpness; lower is peakier. The default sits
            where both watermarks become detectable within a few dozen
            tokens while unwatermarked text keeps calibrated p-values.
        h_model: context tokens entering the embedding mean.
        rep_penalty: similarity-units penalty on recently used ids.
        rep_window: how many trailing context ids are penalized
            (sentinel-padded at the start of a sequence).
    """

    NOISE_SCALE = 0.5

    def __init__(self, vocab_size: int = 1000, dim: int = 32, model_seed: int = 0,
                 temperature: float = 0.05, h_model: int = 3, context_limit: int = 4096,
                 rep_penalty: float = 0.75, rep_window: int = 6):
        if vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
        if dim < 8:
            raise ValueError(f"dim must be >= 8, got {dim}")
        if temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        if h_model < 1:
            raise ValueError(f"h_model must be >= 1, got {h_model}")
        if rep_penalty < 0:
            raise ValueError(f"rep_penalty must be >= 0, got {rep_penalty}")
        if rep_window < 0:
            raise ValueError(f"rep_window must be >= 0, got {rep_window}")
        self._V = vocab_size
        self._d = dim
        self.model_seed = int(model_seed)
        self.temperature = float(temperature)
        self.h_model = h_model
        self.rep_penalty = float(rep_penalty)
        self.rep_window = int(rep_window)
        self._context_limit = context_limit
        self._noise_a = rng.derive_key(self.model_seed, rng.SALT_NOISE_A)
        self._noise_b = rng.derive_key(self.model_seed, rng.SALT_NOISE_B)
        emb_a = rng.derive_key(self.model_seed, rng.SALT_EMB_A)
        emb_b = rng.derive_key(self.model_seed, rng.SALT_EMB_B)
        raw = rng.keyed_normals(
            emb_a, emb_b,
            np.arange(vocab_size, dtype=np.uint64)[:, None],
            np.arange(dim, dtype=np.uint64)[None, :],
        )
        norms = np.sqrt(np.sum(raw * raw, axis=1, keepdims=True))
        self._emb = raw / norms
        self._emb.setflags(write=False)
        self._ids = np.arange(vocab_size, dtype=np.uint64)

    @property
    def vocab_size(self) -> int:
        return self._V

    @property
    def dim(self) -> int:
        return self._d

    @property
    def context_limit(self) -> int | None:
        return self._context_limit

    @property
    def embeddings(self) -> np.ndarray:
        """The (vocab_size, dim) unit-norm embedding table (read-only)."""
        return self._emb

    def hidden(self, token: int) -> np.ndarray:
        return self._emb[int(token)]

    def hidden_batch(self, tokens) -> np.ndarray:
        return self._emb[np.asarray(tokens, dtype=np.int64)]

    @property
    def window_width(self) -> int:
        """Trailing context ids the batch path must carry per row."""
        return max(self.h_model, self.rep_window)

    def _tail(self, context, width: int) -> list[int]:
        n = len(context)
        return [rng.SENTINEL_ID] * max(0, width - n) + [int(t) for t in context[max(0, n - width):]]

    def _context_mean(self, context) -> np.ndarray:
        win = self._tail(context, self.h_model)
        return np.mean(self._emb[np.asarray(win, dtype=np.int64)], axis=0)

    def next_logits(self, context) -> np.ndarray:
        ctx = self._context_mean(context)
        sim = np.sum(self._emb * ctx[None, :], axis=1)
        seed = rng.context_seed(context, self.h_model)
        noise = rng.keyed_normals(self._noise_a, self._noise_b, np.uint64(seed), self._ids)
        base = sim + self.NOISE_SCALE * noise
        if self.rep_penalty > 0.0 and self.rep_window > 0:
            pen = np.zeros(self._V)
            pen[np.asarray(self._tail(context, self.rep_window), dtype=np.int64)] = self.rep_penalty
            base = base - pen
        return base / self.temperature

    def batch_next_logits(self, contexts: np.ndarray) -> np.ndarray:
        """Logits for B contexts at once, bit-identical to the scalar path.

        ``contexts`` is a (B, window_width) int array of the last
        window_width ids per row, already sentinel-padded. Reductions
        run over the same axes in the same order as next_logits, so
        results match the per-row path exactly.
        """
        if contexts.shape[1] != self.window_width:
            raise ValueError(f"expected (B, {self.window_width}) windows, got {contexts.shape}")
        mean_win = contexts[:, contexts.shape[1] - self.h_model:]
        ctx = np.mean(self._emb[mean_win], axis=1)
        sim = np.sum(ctx[:, None, :] * self._emb[None, :, :], axis=2)
        seeds = rng.fold_windows(mean_win)
        noise = rng.keyed_normals(self._noise_a, self._noise_b, seeds[:, None], self._ids[None, :])
        base = sim + self.NOISE_SCALE * noise
        if self.rep_penalty > 0.0 and self.rep_window > 0:
            pen = np.zeros_like(base)
            rows = np.arange(contexts.shape[0])
            for j in range(contexts.shape[1] - self.rep_window, contexts.shape[1]):
                pen[rows, contexts[:, j]] = self.rep_penalty
            base = base - pen
        return base / self.temperature


class UniformLM(MockLM):
    """Mock variant with flat logits; embeddings as in MockLM."""

    def __init__(self, vocab_size: int = 256, dim: int = 16, model_seed: int = 0):
        super().__init__(vocab_size=vocab_size, dim=dim, model_seed=model_seed,
                         temperature=1.0, rep_penalty=0.0, rep_window=0)

    def next_logits(self, context) -> np.ndarray:
        return np.zeros(self._V)

    def batch_next_logits(self, contexts: np.ndarray) -> np.ndarray:
        return np.zeros((contexts.shape[0], self._V))


def spike_entropy(p, z: float) -> float:
    """sum_n p[n] / (1 + z * p[n]); equals 1 at z = 0, decreases in z."""
    arr = check_probs(p)
    if z < 0:
        raise ValueError(f"z must be >= 0, got {z}")
    return float(np.sum(arr / (1.0 + z * arr)))


class SubprocessLM(LanguageModel):
    """Adapter for an external logit provider speaking the line protocol.

    The provider announces ``vocab <V> dim <d>`` on startup, then answers
    ``logits <id> <id> ...`` with one line of V floats and ``hidden <id>``
    with one line of d floats (normalized here if slightly off unit norm).
    See docs/FORMATS.md for the exact grammar.
    """

    def __init__(self, argv: list[str]):
        self._proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1,
        )
        header = self._readline().split()
        if len(header) != 4 or header[0] != "vocab" or header[2] != "dim":
            raise InvalidLogitsError(f"bad provider header: {header!r}")
        self._V = int(header[1])
        self._d = int(header[3])

    def _readline(self) -> str:
        line = self._proc.stdout.readline()
        if not line:
            raise InvalidLogitsError("provider closed its output stream")
        return line.strip()

    def _ask(self, request: str, expect: int) -> np.ndarray:
        self._proc.stdin.write(request + "\n")
        self._proc.stdin.flush()
        vals = np.array([float(x) for x in self._readline().split()], dtype=np.float64)
        if vals.size != expect:
            raise InvalidLogitsError(f"provider returned {vals.size} values, expected {expect}")
        if not np.all(np.isfinite(vals)):
            raise InvalidLogitsError("provider returned non-finite values")
        return vals

    @property
    def vocab_size(self) -> int:
        return self._V

    @property
    def dim(self) -> int:
        return self._d

    def next_logits(self, context) -> np.ndarray:
        return self._ask("logits " + " ".join(str(int(t)) for t in context), self._V)

    def hidden(self, token: int) -> np.ndarray:
        v = self._ask(f"hidden {int(token)}", self._d)
        norm = float(np.sqrt(np.sum(v * v)))
        if norm == 0.0:
            raise InvalidLogitsError("provider returned a zero hidden vector")
        return v / norm

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
