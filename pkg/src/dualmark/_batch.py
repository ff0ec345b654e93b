"""Vectorized many-sequence paths for the heavy experiments.

Single-core runs of the calibration and theorem suites need thousands
of generations and detections; these helpers process whole batches of
equal-length sequences with numpy. Every function here is a second
route to results the scalar code in generate.py / detect.py already
produces: reductions run in the same order over the same values, so
outputs are bit-identical to looping the scalar path (the test suite
asserts this). ``sample_tokens_batch`` covers the plain and
green-biased multinomial schemes; ``sample_dual_batch`` adds the
contrastive branch for the dual scheme.

Key arguments accept either a single int (one key for every row) or a
(B,) array (one key per row); experiments that estimate marginal
calibration draw fresh keys per text.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from . import rng
from .detect import _fisher_array, _normal_sf, _R_CEIL
from .lm import LanguageModel


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise max-subtracted softmax, matching core.softmax per row."""
    arr = np.asarray(logits, dtype=np.float64)
    e = np.exp(arr - arr.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _key_col(key, b: int) -> np.ndarray:
    """Keys as a (B, 1) uint64 column, broadcasting a scalar if needed."""
    k = np.asarray(key, dtype=np.uint64)
    if k.ndim == 0:
        return np.broadcast_to(k, (b,))[:, None]
    if k.shape != (b,):
        raise ValueError(f"per-row keys must have shape ({b},), got {k.shape}")
    return k[:, None]


def _pad_windows(prompts: np.ndarray, width: int) -> np.ndarray:
    """Last ``width`` ids of each prompt row, sentinel-padded on the left."""
    b, p = prompts.shape
    if p >= width:
        return prompts[:, p - width:].astype(np.int64, copy=True)
    out = np.full((b, width), rng.SENTINEL_ID, dtype=np.int64)
    if p:
        out[:, width - p:] = prompts
    return out


def sample_tokens_batch(model: LanguageModel, prompts, length: int, sampler_keys,
                        key_tp=None, gamma: float = 0.5,
                        delta: float = 0.0, h: int = 1) -> np.ndarray:
    """Multinomially sampled tokens for B prompts at once, shape (B, length).

    With ``key_tp`` set (int or (B,) array), logits get the green-list
    bias before the softmax (the token-probability watermark);
    otherwise sampling is plain. Row b reproduces exactly the token ids
    of the scalar ``generate`` call with the same prompt, scheme ("kgw"
    or "none"), and the sampler key u01 stream keyed by sampler_keys[b].
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim != 2:
        raise ValueError("prompts must be a (B, P) matrix")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    b = prompts.shape[0]
    v = model.vocab_size
    skeys = np.asarray(sampler_keys, dtype=np.uint64)
    if skeys.shape != (b,):
        raise ValueError("sampler_keys must have one entry per prompt row")
    ids = np.arange(v, dtype=np.uint64)
    kcol = None if key_tp is None else _key_col(key_tp, b)

    model_win = _pad_windows(prompts, model.window_width)
    wm_win = np.full((b, h), rng.SENTINEL_ID, dtype=np.int64)
    tokens = np.empty((b, length), dtype=np.int64)
    for t in range(length):
        logits = model.batch_next_logits(model_win)
        if kcol is not None:
            seeds = rng.fold_windows(wm_win)
            green = rng.u01_broadcast(kcol, seeds[:, None], ids[None, :]) < gamma
            p = softmax_rows(logits + delta * green)
        else:
            p = softmax_rows(logits)
        cdf = np.cumsum(p, axis=1)
        u = rng.u01_broadcast(skeys, np.uint64(0), np.uint64(t))
        x = np.minimum(np.sum(cdf <= u[:, None], axis=1), v - 1).astype(np.int64)
        tokens[:, t] = x
        model_win = np.concatenate([model_win[:, 1:], x[:, None]], axis=1)
        if kcol is not None:
            wm_win = np.concatenate([wm_win[:, 1:], x[:, None]], axis=1)
    return tokens


def sample_dual_batch(model: LanguageModel, prompts, length: int, keys_tp,
                      keys_cs, sampling_seeds, config,
                      entropy_z: float | None = None):
    """Dual-scheme tokens for B prompts at once, shape (B, length).

    Row b reproduces bit for bit the token ids of the scalar
    ``generate`` call with scheme "dual", the same prompt, keys
    ``(keys_tp[b], keys_cs[b])``, config, and ``sampling_seeds[b]``:
    green-biased softmax every step, contrastive pick over the top-k
    where the keyed split draw falls below eta, multinomial sampling
    elsewhere. Requires a model whose ``hidden_batch`` accepts index
    arrays (the built-in mocks do).

    With ``entropy_z`` set, returns ``(tokens, entropies)`` where
    entropies[b, t] is the spike entropy of the base (pre-bias)
    distribution at step t, matching ``lm.spike_entropy`` exactly.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim != 2:
        raise ValueError("prompts must be a (B, P) matrix")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    b = prompts.shape[0]
    v = model.vocab_size
    gamma, delta, eta, alpha = (config.gamma, config.delta, config.eta,
                                config.alpha)
    k, window_l, h = config.k, config.L, config.h
    if k > v:
        raise ValueError(f"k={k} exceeds vocabulary size {v}")
    ktp = np.asarray(keys_tp, dtype=np.uint64)
    kcs = np.asarray(keys_cs, dtype=np.uint64)
    sseeds = np.asarray(sampling_seeds, dtype=np.uint64)
    for name, arr in (("keys_tp", ktp), ("keys_cs", kcs),
                      ("sampling_seeds", sseeds)):
        if arr.shape != (b,):
            raise ValueError(f"{name} must have one entry per prompt row")
    sampler_keys = rng.mix64_array(sseeds ^ np.uint64(rng.SALT_SAMPLER))
    ids = np.arange(v, dtype=np.uint64)

    model_win = _pad_windows(prompts, model.window_width)
    wm_win = np.full((b, h), rng.SENTINEL_ID, dtype=np.int64)
    tokens = np.empty((b, length), dtype=np.int64)
    entropies = np.empty((b, length)) if entropy_z is not None else None
    for t in range(length):
        seeds = rng.fold_windows(wm_win)
        r = rng.u01_broadcast(kcs, seeds, np.uint64(0))
        contrast = r < eta
        logits = model.batch_next_logits(model_win)
        if entropy_z is not None:
            base_p = softmax_rows(logits)
            entropies[:, t] = np.sum(base_p / (1.0 + entropy_z * base_p),
                                     axis=1)
        green = rng.u01_broadcast(ktp[:, None], seeds[:, None],
                                  ids[None, :]) < gamma
        p = softmax_rows(logits + delta * green)
        x = np.empty(b, dtype=np.int64)
        plain = ~contrast
        if plain.any():
            pm = p[plain]
            cdf = np.cumsum(pm, axis=1)
            u = rng.u01_broadcast(sampler_keys[plain], np.uint64(0),
                                  np.uint64(t))
            x[plain] = np.minimum(np.sum(cdf <= u[:, None], axis=1), v - 1)
        if contrast.any():
            pc = p[contrast]
            cands = np.argsort(-pc, axis=1, kind="stable")[:, :k]
            if t == 0:
                sims = np.full((pc.shape[0], k), -1.0)
            else:
                w_ids = tokens[contrast, : t][:, max(0, t - window_l):]
                wv = model.hidden_batch(w_ids)
                cv = model.hidden_batch(cands)
                sims = np.full((pc.shape[0], k), -np.inf)
                for w in range(w_ids.shape[1]):
                    np.maximum(sims,
                               np.sum(cv * wv[:, w, :][:, None, :], axis=2),
                               out=sims)
            scores = (1.0 - alpha) * np.take_along_axis(pc, cands, axis=1) \
                - alpha * sims
            best = scores.max(axis=1, keepdims=True)
            x[contrast] = np.where(scores == best, cands, v).min(axis=1)
        tokens[:, t] = x
        model_win = np.concatenate([model_win[:, 1:], x[:, None]], axis=1)
        wm_win = np.concatenate([wm_win[:, 1:], x[:, None]], axis=1)
    if entropy_z is not None:
        return tokens, entropies
    return tokens


def batch_p_tp(tokens: np.ndarray, key_tp, gamma: float, h: int):
    """Green-count test per row of a (B, T) token matrix: (phi, z, p)."""
    arr = np.asarray(tokens, dtype=np.int64)
    seeds = rng.context_seeds_batch(arr, h)
    kcol = _key_col(key_tp, arr.shape[0])
    green = rng.u01_broadcast(kcol, seeds, arr.astype(np.uint64)) < gamma
    t = arr.shape[1]
    phi = green.sum(axis=1)
    z = (phi - gamma * t) / np.sqrt(t * gamma * (1.0 - gamma))
    return phi, z, _normal_sf(z)


def batch_p_exp(tokens: np.ndarray, key, h: int):
    """Exponential-score test per row: (score, p)."""
    arr = np.asarray(tokens, dtype=np.int64)
    seeds = rng.context_seeds_batch(arr, h)
    kcol = _key_col(key, arr.shape[0])
    r = np.minimum(rng.u01_broadcast(kcol, seeds, arr.astype(np.uint64)), _R_CEIL)
    score = -np.cumsum(np.log1p(-r), axis=1)[:, -1]
    return score, special.gammaincc(float(arr.shape[1]), score)


def batch_similarity_profile(model: LanguageModel, tokens: np.ndarray, L: int) -> np.ndarray:
    """similarity_profile for every row of a (B, T) matrix."""
    arr = np.asarray(tokens, dtype=np.int64)
    b, n = arr.shape
    emb = model.hidden_batch(arr.ravel()).reshape(b, n, -1)
    s = np.full((b, n), -1.0)
    for lag in range(1, min(L, n - 1) + 1):
        d = np.sum(emb[:, lag:, :] * emb[:, :-lag, :], axis=2)
        np.maximum(s[:, lag:], d, out=s[:, lag:])
    return s


def decoy_matrix(roots, m: int) -> np.ndarray:
    """Per-row decoy keys: row b holds mix64(roots[b] + j*GOLDEN), j=1..m.

    Matches rng.decoy_keys(roots[b], m, exclude) row by row whenever the
    walk never lands on an excluded or repeated value — collisions of
    64-bit hashes at these scales are never observed, and the tests
    compare sampled rows against the scalar walk.
    """
    r = np.asarray(roots, dtype=np.uint64)
    steps = (np.arange(1, m + 1, dtype=np.uint64) * np.uint64(rng.GOLDEN))
    return rng.mix64_array(r[:, None] + steps[None, :])


def batch_p_cs(tokens: np.ndarray, key_cs, decoys, model: LanguageModel,
               eta: float, L: int, h: int, chunk: int = 64):
    """Rank test per row: (p, phi_true, degenerate).

    ``decoys`` is an (M,) vector shared by every row or a (B, M) matrix
    of per-row decoy keys. Processes rows in chunks to bound the
    (chunk, M+1, T) membership grids; each chunk reproduces the scalar
    p_cs values exactly.
    """
    arr = np.asarray(tokens, dtype=np.int64)
    b, n = arr.shape
    dec = np.asarray(decoys, dtype=np.uint64)
    if dec.ndim == 1:
        dec = np.broadcast_to(dec, (b, dec.size))
    if dec.ndim != 2 or dec.shape[0] != b:
        raise ValueError("decoys must be an (M,) vector or a (B, M) matrix")
    keys = np.concatenate([_key_col(key_cs, b), dec], axis=1)
    k = keys.shape[1]
    p = np.empty(b)
    phi_true = np.empty(b)
    degenerate = np.empty(b, dtype=bool)
    for lo in range(0, b, chunk):
        rows = arr[lo:lo + chunk]
        seeds = rng.context_seeds_batch(rows, h)
        bits = rng.mix64_array(keys[lo:lo + chunk, :, None] ^ seeds[:, None, :]) >> np.uint64(11)
        member = (bits.astype(np.float64) * 2.0**-53 < eta).astype(np.float64)
        s = batch_similarity_profile(model, rows, L)
        n_in = np.cumsum(member, axis=2)[:, :, -1]
        s_in = np.cumsum(member * s[:, None, :], axis=2)[:, :, -1]
        tot = np.cumsum(s, axis=1)[:, -1]
        degen = (n_in == 0.0) | (n_in == float(n))
        with np.errstate(divide="ignore", invalid="ignore"):
            mean_in = s_in / n_in
            mean_out = (tot[:, None] - s_in) / (float(n) - n_in)
            phi = np.where(degen, 0.0, mean_out - mean_in)
        count = np.sum(phi[:, 1:] >= phi[:, 0:1], axis=1)
        p[lo:lo + chunk] = (1.0 + count) / k
        phi_true[lo:lo + chunk] = phi[:, 0]
        degenerate[lo:lo + chunk] = degen[:, 0]
    return p, phi_true, degenerate


def batch_fisher(p_a: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    """Fisher combination per row, matching the per-prefix detector."""
    return _fisher_array(np.asarray(p_a, dtype=np.float64), np.asarray(p_b, dtype=np.float64))
