"""Post-editing attacks: deterministic token-sequence transformations.

Every attack is a pure function of ``(tokens, spec, maps)``: the same
inputs always yield the same output sequence. Randomized attacks draw
from counter-based streams keyed by ``spec.attack_seed`` (see
``docs/RNG.md``), never from global state.

Intensity semantics: the intensity of a parametric attack is the
probability that each *eligible* token is edited — eligible meaning the
attack could act on it at all (has a synonym entry, is an alphabetic
word, has a right neighbor). Reported intensities therefore count
eligible tokens, not all tokens; this convention is asserted by the
statistical tests.

Character-level attacks (misspelling, typo) edit the word's string and
map the result back through the vocabulary; out-of-vocabulary results
become the UNK token, which is a real vocabulary entry and participates
in detection like any other id. Letter substitution keeps a word a
single token, so these attacks preserve sequence length.
"""

from __future__ import annotations

import dataclasses
import json
import os
import string
import urllib.error
import urllib.request
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import rng
from .core import (
    CONTRACTION_TRIPLES,
    AttackUnavailableError,
    MissingMapError,
    TokenSeq,
    UNK_ID,
    Vocabulary,
    detokenize,
    tokenize,
)

# Repetition & deletion row: per-token duplicate / delete probabilities.
REP_DUP_P = 0.05
REP_DEL_P = 0.05

_MASK64 = (1 << 64) - 1


class AttackKind(str, Enum):
    """The attack taxonomy; values double as config-file identifiers."""

    NONE = "none"
    CONTRACTION = "contraction"
    LOWERCASE = "lowercase"
    REPETITION_DELETION = "repetition-deletion"
    MISSPELLING = "misspelling"
    SWAP = "swap"
    SYNONYM = "synonym"
    TYPO = "typo"
    EXTERNAL_REWRITE = "external-rewrite"


# Kinds whose strength is a fraction of eligible tokens.
PARAMETRIC_KINDS = frozenset(
    {AttackKind.MISSPELLING, AttackKind.SWAP, AttackKind.SYNONYM, AttackKind.TYPO}
)


@dataclass(frozen=True)
class AttackSpec:
    """One attack configuration.

    Attributes:
        kind: which transformation to apply.
        intensity: fraction in [0, 1] of eligible tokens to edit;
            required for misspelling/swap/synonym/typo and forbidden
            otherwise.
        attack_seed: 64-bit seed; fixes every random choice the attack
            makes.
    """

    kind: AttackKind
    intensity: float | None = None
    attack_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.kind in PARAMETRIC_KINDS:
            if self.intensity is None:
                raise ValueError(f"{self.kind.value} requires an intensity")
            if not 0.0 <= float(self.intensity) <= 1.0:
                raise ValueError(f"intensity must be in [0, 1], got {self.intensity}")
            object.__setattr__(self, "intensity", float(self.intensity))
        elif self.intensity is not None:
            raise ValueError(f"{self.kind.value} takes no intensity")
        seed = int(self.attack_seed)
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"attack_seed must be a 64-bit integer, got {self.attack_seed}")
        object.__setattr__(self, "attack_seed", seed)

    @property
    def label(self) -> str:
        """Row label for tables/configs, e.g. ``synonym-25`` or ``lowercase``."""
        if self.kind in PARAMETRIC_KINDS:
            return f"{self.kind.value}-{round(self.intensity * 100):g}"
        return self.kind.value

    def with_seed(self, attack_seed: int) -> "AttackSpec":
        """The same attack under a different seed (per-text derivation)."""
        return dataclasses.replace(self, attack_seed=attack_seed)

    @classmethod
    def parse(cls, label: str, attack_seed: int = 0) -> "AttackSpec":
        """Inverse of ``label``: ``synonym-25`` -> Synonym at 0.25."""
        text = label.strip().lower()
        head, sep, tail = text.rpartition("-")
        if sep and head and tail.isdigit():
            try:
                kind = AttackKind(head)
            except ValueError:
                kind = AttackKind(text)  # e.g. "repetition-deletion"
            else:
                return cls(kind, intensity=int(tail) / 100.0, attack_seed=attack_seed)
        else:
            kind = AttackKind(text)
        return cls(kind, attack_seed=attack_seed)


@dataclass(frozen=True)
class AttackMaps:
    """Everything an attack may need beyond the token sequence.

    Attacks that need a resource raise ``MissingMapError`` when its
    field is None; purely positional attacks (none, swap,
    repetition-deletion) run with no maps at all.
    """

    vocab: Vocabulary | None = None
    synonyms: dict | None = None        # id -> tuple of replacement ids
    contractions: dict | None = None    # (left id, right id) -> id
    casefold: dict | None = None        # id -> lowercased id
    client: object | None = None        # RewriteClient-contract object

    @classmethod
    def for_model(cls, model, vocab: Vocabulary, client=None) -> "AttackMaps":
        """Default tables for a model + vocabulary pair: contractions and
        casefolds read off the vocabulary, synonyms paired by nearest
        embedding."""
        return cls(
            vocab=vocab,
            synonyms=embedding_synonym_map(model, vocab),
            contractions=default_contraction_map(vocab),
            casefold=default_casefold_map(vocab),
            client=client,
        )

    def require(self, field: str, kind: AttackKind):
        value = getattr(self, field)
        if value is None:
            raise MissingMapError(f"{kind.value} attack requires maps.{field}")
        return value


# ---------------------------------------------------------------------------
# Default map construction


def _is_word(token: str) -> bool:
    return token.isascii() and token.isalpha()


def default_contraction_map(vocab: Vocabulary) -> dict:
    """(left id, right id) -> contraction id for every triple whose three
    strings are all in the vocabulary."""
    table = {}
    for a, b, c in CONTRACTION_TRIPLES:
        if a in vocab and b in vocab and c in vocab:
            table[(vocab.id_of(a), vocab.id_of(b))] = vocab.id_of(c)
    return table


def default_casefold_map(vocab: Vocabulary) -> dict:
    """id -> id of the lowercased string, for tokens that change under
    lowercasing and whose lowercase form is in the vocabulary."""
    table = {}
    for idx, token in enumerate(vocab.tokens):
        low = token.lower()
        if low != token and low in vocab:
            table[idx] = vocab.id_of(low)
    return table


def embedding_synonym_map(model, vocab: Vocabulary) -> dict:
    """id -> (nearest-embedding word id,) over the model's embedding table.

    Only alphabetic word tokens participate, on both sides of the
    pairing. Nearest-embedding tokens are the hard case for a
    similarity-based watermark: the substitution moves the text as
    little as possible in the model's own geometry.
    """
    if len(vocab) != model.vocab_size:
        raise ValueError(
            f"vocabulary size {len(vocab)} != model vocabulary {model.vocab_size}"
        )
    eligible = np.array(
        [i for i, t in enumerate(vocab.tokens) if _is_word(t)], dtype=np.int64
    )
    if eligible.size < 2:
        return {}
    emb = model.hidden_batch(eligible)
    sims = emb @ emb.T
    np.fill_diagonal(sims, -np.inf)
    nearest = eligible[np.argmax(sims, axis=1)]
    return {int(i): (int(n),) for i, n in zip(eligible, nearest)}


# ---------------------------------------------------------------------------
# Map files: tab-separated strings, one rule per line


def _resolve(token: str, vocab: Vocabulary, path, line_no: int) -> int:
    if token not in vocab:
        raise ValueError(f"{path}:{line_no}: token {token!r} not in vocabulary")
    return vocab.id_of(token)


def _rule_lines(path):
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        yield line_no, line.split("\t")


def load_synonym_map(path, vocab: Vocabulary) -> dict:
    table = {}
    for line_no, parts in _rule_lines(path):
        if len(parts) < 2:
            raise ValueError(f"{path}:{line_no}: need a token and at least one synonym")
        ids = [_resolve(t, vocab, path, line_no) for t in parts]
        table[ids[0]] = tuple(ids[1:])
    return table


def save_synonym_map(path, table: dict, vocab: Vocabulary) -> None:
    lines = [
        "\t".join([vocab.token(src)] + [vocab.token(t) for t in targets])
        for src, targets in sorted(table.items())
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_contraction_map(path, vocab: Vocabulary) -> dict:
    table = {}
    for line_no, parts in _rule_lines(path):
        if len(parts) != 3:
            raise ValueError(f"{path}:{line_no}: need left, right, contraction")
        left, right, merged = (_resolve(t, vocab, path, line_no) for t in parts)
        table[(left, right)] = merged
    return table


def save_contraction_map(path, table: dict, vocab: Vocabulary) -> None:
    lines = [
        f"{vocab.token(a)}\t{vocab.token(b)}\t{vocab.token(c)}"
        for (a, b), c in sorted(table.items())
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_casefold_map(path, vocab: Vocabulary) -> dict:
    table = {}
    for line_no, parts in _rule_lines(path):
        if len(parts) != 2:
            raise ValueError(f"{path}:{line_no}: need exactly two tokens")
        src, dst = (_resolve(t, vocab, path, line_no) for t in parts)
        table[src] = dst
    return table


def save_casefold_map(path, table: dict, vocab: Vocabulary) -> None:
    lines = [f"{vocab.token(a)}\t{vocab.token(b)}" for a, b in sorted(table.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_default_maps(directory, model, vocab: Vocabulary) -> dict:
    """Generate the three editable map files; returns {name: path}."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "synonyms": directory / "synonyms.tsv",
        "contractions": directory / "contractions.tsv",
        "casefold": directory / "casefold.tsv",
    }
    save_synonym_map(paths["synonyms"], embedding_synonym_map(model, vocab), vocab)
    save_contraction_map(paths["contractions"], default_contraction_map(vocab), vocab)
    save_casefold_map(paths["casefold"], default_casefold_map(vocab), vocab)
    return paths


def load_maps(directory, vocab: Vocabulary, client=None) -> AttackMaps:
    """AttackMaps from a directory produced by ``write_default_maps``."""
    directory = Path(directory)
    return AttackMaps(
        vocab=vocab,
        synonyms=load_synonym_map(directory / "synonyms.tsv", vocab),
        contractions=load_contraction_map(directory / "contractions.tsv", vocab),
        casefold=load_casefold_map(directory / "casefold.tsv", vocab),
        client=client,
    )


# ---------------------------------------------------------------------------
# Keyboard adjacency for the typo attack

_KEY_ROWS = ("qwertyuiop", "asdfghjkl", "zxcvbnm")


def _keyboard_neighbors() -> dict:
    pos = {}
    for r, row in enumerate(_KEY_ROWS):
        for c, ch in enumerate(row):
            pos[ch] = (r, c)
    table = {}
    for ch, (r, c) in pos.items():
        near = [
            other
            for other, (r2, c2) in pos.items()
            if other != ch and abs(r2 - r) <= 1 and abs(c2 - c) <= 1
        ]
        table[ch] = "".join(sorted(near))
    return table


_NEIGHBORS = _keyboard_neighbors()


# ---------------------------------------------------------------------------
# The attacks


def _streams(spec: AttackSpec):
    sel = rng.derive_key(spec.attack_seed, rng.SALT_ATTACK_SELECT)
    cho = rng.derive_key(spec.attack_seed, rng.SALT_ATTACK_CHOICE)
    aux = rng.derive_key(spec.attack_seed, rng.SALT_ATTACK_AUX)
    return sel, cho, aux


def _attacked(ids) -> TokenSeq:
    return TokenSeq(np.asarray(ids, dtype=np.int64), origin="attacked")


def _contraction(seq: TokenSeq, maps: AttackMaps) -> TokenSeq:
    table = maps.require("contractions", AttackKind.CONTRACTION)
    ids = seq.tolist()
    out = []
    i = 0
    while i < len(ids):
        if i + 1 < len(ids) and (ids[i], ids[i + 1]) in table:
            out.append(table[(ids[i], ids[i + 1])])
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return _attacked(out)


def _lowercase(seq: TokenSeq, maps: AttackMaps) -> TokenSeq:
    table = maps.require("casefold", AttackKind.LOWERCASE)
    return _attacked([table.get(i, i) for i in seq.ids.tolist()])


def _repetition_deletion(seq: TokenSeq, spec: AttackSpec) -> TokenSeq:
    sel, cho, _ = _streams(spec)
    out = []
    for pos, tok in enumerate(seq.ids.tolist()):
        copies = 1
        if rng.u01(sel, 0, pos) < REP_DUP_P:
            copies += 1
        if rng.u01(cho, 0, pos) < REP_DEL_P:
            copies -= 1
        out.extend([tok] * copies)
    return _attacked(out)


def _swap(seq: TokenSeq, spec: AttackSpec) -> TokenSeq:
    sel, _, _ = _streams(spec)
    out = seq.ids.tolist()
    i = 0
    while i < len(out) - 1:
        if rng.u01(sel, 0, i) < spec.intensity:
            out[i], out[i + 1] = out[i + 1], out[i]
            i += 2
        else:
            i += 1
    return _attacked(out)


def _synonym(seq: TokenSeq, spec: AttackSpec, maps: AttackMaps) -> TokenSeq:
    table = maps.require("synonyms", AttackKind.SYNONYM)
    sel, cho, _ = _streams(spec)
    out = []
    for pos, tok in enumerate(seq.ids.tolist()):
        entries = table.get(tok)
        if entries and rng.u01(sel, 0, pos) < spec.intensity:
            out.append(entries[int(rng.u01(cho, 0, pos) * len(entries))])
        else:
            out.append(tok)
    return _attacked(out)


def _edit_word(word: str, char_pos: int, new_char: str) -> str:
    if word[char_pos].isupper():
        new_char = new_char.upper()
    return word[:char_pos] + new_char + word[char_pos + 1:]


def _char_edit(seq: TokenSeq, spec: AttackSpec, maps: AttackMaps) -> TokenSeq:
    """Shared core of misspelling and typo: one character substituted in a
    fraction of the alphabetic word tokens, result mapped back through
    the vocabulary (OOV -> UNK)."""
    vocab = maps.require("vocab", spec.kind)
    sel, cho, aux = _streams(spec)
    keyboard = spec.kind is AttackKind.TYPO
    out = []
    for pos, tok in enumerate(seq.ids.tolist()):
        word = vocab.token(tok)
        if not _is_word(word) or rng.u01(sel, 0, pos) >= spec.intensity:
            out.append(tok)
            continue
        char_pos = int(rng.u01(cho, 0, pos) * len(word))
        low = word[char_pos].lower()
        if keyboard:
            pool = _NEIGHBORS.get(low, "")
            if not pool:
                out.append(tok)
                continue
        else:
            pool = string.ascii_lowercase.replace(low, "")
        new_char = pool[int(rng.u01(aux, 0, pos) * len(pool))]
        out.append(vocab.id_of(_edit_word(word, char_pos, new_char)))
    return _attacked(out)


def _external(seq: TokenSeq, maps: AttackMaps) -> TokenSeq:
    vocab = maps.require("vocab", AttackKind.EXTERNAL_REWRITE)
    if maps.client is None:
        raise AttackUnavailableError("external-rewrite attack has no client configured")
    rewritten = maps.client.rewrite(detokenize(seq, vocab))
    return tokenize(rewritten, vocab, origin="attacked")


def apply_attack(tokens: TokenSeq, spec: AttackSpec, maps: AttackMaps | None = None) -> TokenSeq:
    """Transform a token sequence under one attack configuration.

    Deterministic: identical (tokens, spec, maps) give identical output.
    The result always carries origin "attacked", including for the
    identity attack ``none``.
    """
    if maps is None:
        maps = AttackMaps()
    kind = spec.kind
    if kind is AttackKind.NONE:
        return _attacked(tokens.ids)
    if kind is AttackKind.CONTRACTION:
        return _contraction(tokens, maps)
    if kind is AttackKind.LOWERCASE:
        return _lowercase(tokens, maps)
    if kind is AttackKind.REPETITION_DELETION:
        return _repetition_deletion(tokens, spec)
    if kind is AttackKind.SWAP:
        return _swap(tokens, spec)
    if kind is AttackKind.SYNONYM:
        return _synonym(tokens, spec, maps)
    if kind in (AttackKind.MISSPELLING, AttackKind.TYPO):
        return _char_edit(tokens, spec, maps)
    if kind is AttackKind.EXTERNAL_REWRITE:
        return _external(tokens, maps)
    raise ValueError(f"unhandled attack kind {kind!r}")  # pragma: no cover


def attack_grid(specs=None, attack_seed: int = 0) -> tuple:
    """Ordered attack suite for benchmark tables.

    With ``specs=None``, the default grid: the locally runnable attack
    rows (external rewrites excluded) — none, contraction, lowercase,
    repetition-deletion, misspelling 25/50%, swap 5/10%, synonym
    0/25/50/75/100%, typo 5/10% — 15 configurations.
    """
    if specs is None:
        specs = [
            AttackSpec(AttackKind.NONE, attack_seed=attack_seed),
            AttackSpec(AttackKind.CONTRACTION, attack_seed=attack_seed),
            AttackSpec(AttackKind.LOWERCASE, attack_seed=attack_seed),
            AttackSpec(AttackKind.REPETITION_DELETION, attack_seed=attack_seed),
            AttackSpec(AttackKind.MISSPELLING, 0.25, attack_seed),
            AttackSpec(AttackKind.MISSPELLING, 0.50, attack_seed),
            AttackSpec(AttackKind.SWAP, 0.05, attack_seed),
            AttackSpec(AttackKind.SWAP, 0.10, attack_seed),
            AttackSpec(AttackKind.SYNONYM, 0.0, attack_seed),
            AttackSpec(AttackKind.SYNONYM, 0.25, attack_seed),
            AttackSpec(AttackKind.SYNONYM, 0.50, attack_seed),
            AttackSpec(AttackKind.SYNONYM, 0.75, attack_seed),
            AttackSpec(AttackKind.SYNONYM, 1.0, attack_seed),
            AttackSpec(AttackKind.TYPO, 0.05, attack_seed),
            AttackSpec(AttackKind.TYPO, 0.10, attack_seed),
        ]
    suite = tuple(specs)
    for spec in suite:
        if not isinstance(spec, AttackSpec):
            raise TypeError(f"attack suite entries must be AttackSpec, got {spec!r}")
    labels = [s.label for s in suite]
    if len(set(labels)) != len(labels):
        raise ValueError(f"attack labels must be unique, got {labels}")
    return suite


# ---------------------------------------------------------------------------
# External rewrite clients

PARAPHRASE_INSTRUCTION = (
    "Paraphrase the user's text. Preserve its meaning and approximate "
    "length; change the wording as much as possible. Reply with the "
    "paraphrase only."
)


def _translate_instruction(lang: str, back: bool) -> str:
    if back:
        return (f"Translate the user's text from {lang} back to the original "
                f"language. Reply with the translation only.")
    return f"Translate the user's text into {lang}. Reply with the translation only."


class RewriteClient:
    """Chat-completion-style HTTP rewrite endpoint.

    Sends ``POST endpoint`` with a JSON body of ``model`` and
    ``messages`` (system instruction + user text) and a bearer token
    read from the environment variable named by ``auth_env`` at call
    time; expects the reply text at ``choices[0].message.content``.
    Field names and an example exchange are documented in
    ``docs/CLIENT.md``. Any transport, HTTP, or shape failure raises
    ``AttackUnavailableError``.

    Modes: ``paraphrase`` (one call) or ``roundtrip-translation`` (two
    calls: into ``lang``, then back).
    """

    MODES = ("paraphrase", "roundtrip-translation")

    def __init__(self, endpoint: str, mode: str = "paraphrase", lang: str | None = None,
                 auth_env: str = "REWRITE_API_TOKEN", model: str = "gpt-3.5-turbo",
                 timeout: float = 30.0):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}, got {mode!r}")
        if mode == "roundtrip-translation" and not lang:
            raise ValueError("roundtrip-translation requires a language")
        if timeout <= 0:
            raise ValueError(f"timeout must be positive, got {timeout}")
        self.endpoint = endpoint
        self.mode = mode
        self.lang = lang
        self.auth_env = auth_env
        self.model = model
        self.timeout = float(timeout)

    def complete(self, instruction: str, text: str) -> str:
        """One instruction + text exchange; returns the reply text.

        ``rewrite`` builds on this, and the benchmark rating helper
        calls it directly with its grading instruction.
        """
        token = os.environ.get(self.auth_env, "")
        if not token:
            raise AttackUnavailableError(
                f"rewrite endpoint needs a token in ${self.auth_env}"
            )
        body = json.dumps({
            "model": self.model,
            "messages": [
                {"role": "system", "content": instruction},
                {"role": "user", "content": text},
            ],
        }).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint,
            data=body,
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {token}",
            },
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.load(response)
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise AttackUnavailableError(f"rewrite endpoint failure: {exc}") from exc
        try:
            reply = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise AttackUnavailableError(f"malformed rewrite response: {exc}") from exc
        if not isinstance(reply, str):
            raise AttackUnavailableError("malformed rewrite response: content not text")
        return reply

    def rewrite(self, text: str) -> str:
        if self.mode == "paraphrase":
            return self.complete(PARAPHRASE_INSTRUCTION, text)
        out = self.complete(_translate_instruction(self.lang, back=False), text)
        return self.complete(_translate_instruction(self.lang, back=True), out)


class StubRewriteClient:
    """In-process stand-in honoring the RewriteClient contract.

    ``transform`` maps input text to the canned reply (identity by
    default); ``fail=True`` simulates an unavailable endpoint. Calls
    are recorded for assertions.
    """

    def __init__(self, transform=None, fail: bool = False):
        self.transform = transform if transform is not None else (lambda text: text)
        self.fail = fail
        self.calls: list[tuple[str, str]] = []

    def complete(self, instruction: str, text: str) -> str:
        if self.fail:
            raise AttackUnavailableError("stub rewrite client configured to fail")
        self.calls.append((instruction, text))
        return self.transform(text)

    def rewrite(self, text: str) -> str:
        return self.complete(PARAPHRASE_INSTRUCTION, text)
