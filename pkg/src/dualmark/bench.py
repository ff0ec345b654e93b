"""Benchmark harness: corpora, attack sweeps, and calibration experiments.

This module drives the full experiment loop at desk scale:

- :func:`run_bench` generates watermarked text with the built-in mock
  model, applies a grid of post-editing attacks, runs each scheme's
  natural detector over every prefix, and aggregates detection
  efficiency, p-values, diversity, and green fraction per cell.
- :func:`fpr_experiment` measures empirical false-positive rates of the
  detectors on unwatermarked text against their nominal thresholds.
- :func:`detector_ablation` compares the combined detector against its
  single-test components on the same texts.
- :func:`rate_texts` optionally grades text quality through an external
  chat-completion endpoint.

Every experiment derives all randomness from one master seed, giving
each text its own watermark keys, prompt, sampling stream, and decoy
set (see ``docs/RNG.md``, "Per-text derivations in experiments").
Reports are written as raw per-text record files plus derived summary
tables; aggregate numbers are always recomputed from the record files
so that fresh and resumed runs agree byte for byte (``docs/FORMATS.md``
describes every artifact).
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng
from ._batch import (batch_fisher, batch_p_cs, batch_p_exp, batch_p_tp,
                     decoy_matrix, sample_tokens_batch)
from .attack import AttackMaps, AttackSpec, apply_attack, attack_grid
from .core import (AttackUnavailableError, TokenSeq, WatermarkConfig,
                   build_demo_vocab, load_corpus, tokenize)
from .detect import (DEFAULT_DETECTOR_SEED, ContrastDetector,
                     FisherPairDetector, TokenProbDetector, p_tp,
                     scheme_detector)
from .generate import Scheme, generate
from .lm import MockLM
from .rng import (GOLDEN, SALT_KEY_CS, SALT_KEY_TP, SALT_PROMPT,
                  SALT_SAMPLER, SALT_SAMPLING_SEED, KeySet, WatermarkKey,
                  derive_key, mix64_array)

_U64 = np.uint64

#: Tokens in every derived prompt.
PROMPT_LEN = 8

#: Detector names accepted by :func:`fpr_experiment`.
DETECTOR_NAMES = ("tp", "exp", "cs", "combined")


# ---------------------------------------------------------------------------
# Per-text derivations
# ---------------------------------------------------------------------------

def text_bases(master_seed: int, n: int, start: int = 0) -> np.ndarray:
    """Per-text base values ``mix64(master + (start+i+1) * GOLDEN)``.

    Every other per-text quantity (keys, prompt, sampling stream, decoy
    root) is derived from these bases, so two experiments sharing a
    master seed and index range see identical texts.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64_array(_U64(master_seed & rng.MASK64) + idx * _U64(GOLDEN))


def derive_prompts(bases: np.ndarray, vocab_size: int,
                   length: int = PROMPT_LEN) -> np.ndarray:
    """Deterministic prompt token ids for each base, shape (n, length)."""
    bases = np.asarray(bases, dtype=np.uint64)
    pk = mix64_array(bases ^ _U64(SALT_PROMPT))
    u = rng.u01_broadcast(pk[:, None], _U64(0),
                          np.arange(length, dtype=np.uint64)[None, :])
    return (u * vocab_size).astype(np.int64)


def text_keys(base: int) -> KeySet:
    """The per-text watermark key pair derived from a base value."""
    return KeySet(tp=WatermarkKey(derive_key(base, SALT_KEY_TP), "tp"),
                  cs=WatermarkKey(derive_key(base, SALT_KEY_CS), "cs"))


def text_sampling_seed(base: int) -> int:
    """The per-text sampling seed passed to :func:`~dualmark.generate.generate`."""
    return derive_key(base, SALT_SAMPLING_SEED)


def text_detector_seed(base: int) -> int:
    """The per-text decoy-root seed passed to the detectors."""
    return derive_key(base, DEFAULT_DETECTOR_SEED)


# ---------------------------------------------------------------------------
# Diversity
# ---------------------------------------------------------------------------

def diversity(tokens) -> float:
    """Distinct-n-gram diversity: prod over n in {2,3,4} of unique/total.

    Accepts a :class:`~dualmark.core.TokenSeq` or any integer sequence
    of at least 4 tokens. Returns a value in [0, 1]; reports render it
    as a percentage.
    """
    ids = np.asarray(getattr(tokens, "ids", tokens), dtype=np.int64)
    n = int(ids.size)
    if n < 4:
        raise ValueError(f"diversity needs at least 4 tokens, got {n}")
    out = 1.0
    for width in (2, 3, 4):
        grams = np.lib.stride_tricks.sliding_window_view(ids, width)
        unique = np.unique(grams, axis=0).shape[0]
        out *= unique / (n - width + 1)
    return float(out)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _default_attacks() -> tuple:
    return attack_grid()


@dataclass(frozen=True)
class BenchConfig:
    """Full specification of a benchmark run.

    One master seed makes the entire run reproducible: text ``i`` of the
    cell block ``(scheme, length)`` draws its keys, prompt, and sampling
    stream from ``text_bases(master_seed, ...)`` at a global index that
    depends only on the position of the scheme/length pair in this
    config, so the same texts are reused across all attacks.

    Args:
        schemes: watermarking schemes to benchmark, one row block each.
        attacks: post-editing attack grid; defaults to
            :func:`~dualmark.attack.attack_grid`.
        corpus: "mock" derives prompts from the master seed; a file path
            reads one prompt per line (tokenized with the demo
            vocabulary, first ``PROMPT_LEN`` tokens, cycled if short).
        texts_per_cell: texts per (scheme, length) block; >= 2 so
            medians are meaningful.
        lengths: generated-text lengths, one cell block per entry.
        thresholds: detection p-value thresholds for t* scans.
        out_dir: artifact directory (records/, summary.csv, run_meta.json).
        workers: process count for generation/detection; 1 = in-process.
        master_seed: root of all per-text randomness.
        watermark: watermark parameters shared by generation and detection.
        vocab_size / dim / model_seed / temperature: mock-model geometry;
            ``temperature=None`` keeps the model default.
    """

    schemes: tuple = (Scheme.KGW, Scheme.EXP, Scheme.DUAL)
    attacks: tuple = field(default_factory=_default_attacks)
    corpus: str = "mock"
    texts_per_cell: int = 100
    lengths: tuple = (260,)
    thresholds: tuple = (0.02, 0.05)
    out_dir: str = "bench-out"
    workers: int = 1
    master_seed: int = 97531
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    vocab_size: int = 1000
    dim: int = 32
    model_seed: int = 7
    temperature: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "schemes",
                           tuple(Scheme(s) for s in self.schemes))
        attacks = tuple(self.attacks)
        for spec in attacks:
            if not isinstance(spec, AttackSpec):
                raise TypeError(f"attacks must be AttackSpec, got {type(spec).__name__}")
        labels = [s.label for s in attacks]
        if len(set(labels)) != len(labels):
            raise ValueError("attack labels must be unique")
        object.__setattr__(self, "attacks", attacks)
        object.__setattr__(self, "lengths", tuple(int(x) for x in self.lengths))
        object.__setattr__(self, "thresholds",
                           tuple(float(q) for q in self.thresholds))
        if not self.schemes:
            raise ValueError("schemes must not be empty")
        if not self.attacks:
            raise ValueError("attacks must not be empty")
        if not self.lengths or any(x < 4 for x in self.lengths):
            raise ValueError("lengths must be non-empty, each >= 4")
        if not self.thresholds or any(not 0.0 < q < 1.0 for q in self.thresholds):
            raise ValueError("thresholds must be non-empty, each in (0, 1)")
        if self.texts_per_cell < 2:
            raise ValueError("texts_per_cell must be >= 2 (medians need texts)")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.corpus != "mock" and not str(self.corpus):
            raise ValueError("corpus must be 'mock' or a file path")

    def make_model(self) -> MockLM:
        kwargs = {} if self.temperature is None else {"temperature": self.temperature}
        return MockLM(vocab_size=self.vocab_size, dim=self.dim,
                      model_seed=self.model_seed, **kwargs)

    def _model_args(self) -> tuple:
        return (self.vocab_size, self.dim, self.model_seed, self.temperature)

    def to_dict(self) -> dict:
        """JSON-friendly echo of every field (used in run metadata)."""
        return {
            "schemes": [s.value for s in self.schemes],
            "attacks": [{"label": a.label, "attack_seed": a.attack_seed}
                        for a in self.attacks],
            "corpus": str(self.corpus),
            "texts_per_cell": self.texts_per_cell,
            "lengths": list(self.lengths),
            "thresholds": list(self.thresholds),
            "out_dir": str(self.out_dir),
            "workers": self.workers,
            "master_seed": self.master_seed,
            "watermark": {f.name: getattr(self.watermark, f.name)
                          for f in fields(WatermarkConfig)},
            "model": {"vocab_size": self.vocab_size, "dim": self.dim,
                      "model_seed": self.model_seed,
                      "temperature": self.temperature},
        }


# ---------------------------------------------------------------------------
# Config files (INI; schema in docs/CONFIG.md)
# ---------------------------------------------------------------------------

def load_bench_config(path) -> BenchConfig:
    """Parse an INI benchmark config (schema in ``docs/CONFIG.md``)."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # watermark keys L and M are case-sensitive
    with open(path, "r", encoding="utf-8") as handle:
        parser.read_file(handle)
    if "bench" not in parser:
        raise ValueError(f"{path}: missing [bench] section")
    sec = parser["bench"]

    def split(raw: str) -> list:
        return [part.strip() for part in raw.split(",") if part.strip()]

    kwargs: dict = {}
    if "schemes" in sec:
        kwargs["schemes"] = tuple(Scheme(s) for s in split(sec["schemes"]))
    attack_seed = sec.getint("attack_seed", fallback=0)
    if "attacks" in sec:
        kwargs["attacks"] = tuple(AttackSpec.parse(label, attack_seed)
                                  for label in split(sec["attacks"]))
    else:
        kwargs["attacks"] = attack_grid(attack_seed=attack_seed)
    for name in ("corpus", "out_dir"):
        if name in sec:
            kwargs[name] = sec[name]
    for name in ("texts_per_cell", "workers", "master_seed"):
        if name in sec:
            kwargs[name] = sec.getint(name)
    if "lengths" in sec:
        kwargs["lengths"] = tuple(int(x) for x in split(sec["lengths"]))
    if "thresholds" in sec:
        kwargs["thresholds"] = tuple(float(x) for x in split(sec["thresholds"]))

    if "watermark" in parser:
        wsec = parser["watermark"]
        wkw: dict = {}
        for fld in fields(WatermarkConfig):
            if fld.name in wsec:
                cast = int if fld.type in (int, "int") else float
                wkw[fld.name] = cast(wsec[fld.name])
        kwargs["watermark"] = WatermarkConfig(**wkw)
    if "model" in parser:
        msec = parser["model"]
        for name in ("vocab_size", "dim", "model_seed"):
            if name in msec:
                kwargs[name] = msec.getint(name)
        if msec.get("temperature", "").strip():
            kwargs["temperature"] = msec.getfloat("temperature")
    return BenchConfig(**kwargs)


def render_bench_config(config: BenchConfig) -> str:
    """Render a config back to INI text; ``load_bench_config`` round-trips it.

    The file schema carries one shared attack seed, so rendering a
    config whose attacks mix seeds is rejected.
    """
    seeds = {a.attack_seed for a in config.attacks}
    if len(seeds) > 1:
        raise ValueError("config files carry a single attack_seed; "
                         "got mixed per-attack seeds")
    lines = ["[bench]"]
    lines.append("schemes = " + ", ".join(s.value for s in config.schemes))
    lines.append("attacks = " + ", ".join(a.label for a in config.attacks))
    lines.append(f"attack_seed = {next(iter(seeds))}")
    lines.append(f"corpus = {config.corpus}")
    lines.append(f"texts_per_cell = {config.texts_per_cell}")
    lines.append("lengths = " + ", ".join(str(x) for x in config.lengths))
    lines.append("thresholds = " + ", ".join(f"{q:g}" for q in config.thresholds))
    lines.append(f"out_dir = {config.out_dir}")
    lines.append(f"workers = {config.workers}")
    lines.append(f"master_seed = {config.master_seed}")
    lines.append("")
    lines.append("[watermark]")
    for fld in fields(WatermarkConfig):
        value = getattr(config.watermark, fld.name)
        lines.append(f"{fld.name} = {value:g}" if isinstance(value, float)
                     else f"{fld.name} = {value}")
    lines.append("")
    lines.append("[model]")
    lines.append(f"vocab_size = {config.vocab_size}")
    lines.append(f"dim = {config.dim}")
    lines.append(f"model_seed = {config.model_seed}")
    lines.append("temperature = " if config.temperature is None
                 else f"temperature = {config.temperature:g}")
    return "\n".join(lines) + "\n"


def save_bench_config(config: BenchConfig, path) -> None:
    _atomic_write_text(Path(path), render_bench_config(config))


# ---------------------------------------------------------------------------
# Worker plumbing
# ---------------------------------------------------------------------------

_WORKER_CACHE: dict = {}


def _model_bundle(model_args: tuple):
    """Model + demo vocabulary + attack maps, cached per process."""
    got = _WORKER_CACHE.get(model_args)
    if got is None:
        vocab_size, dim, model_seed, temperature = model_args
        kwargs = {} if temperature is None else {"temperature": temperature}
        model = MockLM(vocab_size=vocab_size, dim=dim, model_seed=model_seed,
                       **kwargs)
        vocab = build_demo_vocab(vocab_size)
        maps = AttackMaps.for_model(model, vocab)
        _WORKER_CACHE.clear()
        got = _WORKER_CACHE[model_args] = (model, vocab, maps)
    return got


def _pool_map(fn: Callable, tasks: list, workers: int) -> list:
    """Order-preserving map, in-process or over a process pool."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    chunk = max(1, len(tasks) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=chunk))


def _gen_task_run(task: tuple) -> np.ndarray:
    """Generate one text; returns its generated token ids."""
    model_args, wm_items, scheme_value, length, base, prompt_ids = task
    model, _, _ = _model_bundle(model_args)
    config = WatermarkConfig(**dict(wm_items))
    trace = generate(model, np.asarray(prompt_ids, dtype=np.int64),
                     Scheme(scheme_value), text_keys(base), config, length,
                     sampling_seed=text_sampling_seed(base))
    return np.asarray(trace.tokens.ids, dtype=np.int64)


def first_crossing(p_trace, threshold: float) -> int | None:
    """Shortest prefix length whose p-value is <= threshold, else None."""
    hits = np.flatnonzero(np.asarray(p_trace, dtype=float) <= threshold)
    return int(hits[0]) + 1 if hits.size else None


def _detect_task_run(task: tuple) -> tuple:
    """Attack one text and scan its prefixes; returns one record row."""
    (model_args, wm_items, scheme_value, base, ids, attack_label,
     attack_seed, thresholds) = task
    model, _, maps = _model_bundle(model_args)
    config = WatermarkConfig(**dict(wm_items))
    spec = AttackSpec.parse(attack_label, attack_seed)
    attacked = apply_attack(TokenSeq(ids, origin="generated"), spec, maps)
    keys = text_keys(base)
    detector = scheme_detector(Scheme(scheme_value), keys, config, model,
                               detector_seed=text_detector_seed(base))
    trace = detector.p_trace(attacked, max_len=config.max_inspect)
    t_stars = tuple(first_crossing(trace, q) for q in thresholds)
    p_final = float(trace[-1]) if trace.size else 1.0
    n_tokens = len(attacked)
    if n_tokens:
        count, _, _ = p_tp(attacked, keys.tp.value, config.gamma, config.h)
        green_frac = count / n_tokens
    else:
        green_frac = math.nan
    div = diversity(attacked) if n_tokens >= 4 else math.nan
    return (n_tokens, t_stars, p_final, green_frac, div)


# ---------------------------------------------------------------------------
# Record files
# ---------------------------------------------------------------------------

def _threshold_tag(q: float) -> str:
    return f"{q:g}"


def _record_header(thresholds: Sequence[float]) -> list:
    cols = ["text_index", "n_tokens"]
    cols += [f"t_star_q{_threshold_tag(q)}" for q in thresholds]
    cols += ["p_final", "green_frac", "diversity"]
    return cols


@dataclass(frozen=True)
class _Record:
    """One per-text detection record (one line of a records file)."""

    text_index: int
    n_tokens: int
    t_star: tuple          # per threshold: int or None (undetected)
    p_final: float
    green_frac: float
    diversity: float


def _record_to_line(record: _Record, max_inspect: int) -> str:
    cells = [str(record.text_index), str(record.n_tokens)]
    cells += [str(t) if t is not None else f">{max_inspect}"
              for t in record.t_star]
    cells += [repr(record.p_final), repr(record.green_frac),
              repr(record.diversity)]
    return "\t".join(cells)


def _parse_records(text: str, thresholds: Sequence[float],
                   n_expected: int) -> list | None:
    """Parse a records file; None when it doesn't match the cell spec."""
    lines = text.splitlines()
    if not lines or lines[0].split("\t") != _record_header(thresholds):
        return None
    if len(lines) != n_expected + 1:
        return None
    k = len(thresholds)
    records = []
    try:
        for line in lines[1:]:
            cells = line.split("\t")
            if len(cells) != 5 + k:
                return None
            t_star = tuple(None if c.startswith(">") else int(c)
                           for c in cells[2:2 + k])
            records.append(_Record(
                text_index=int(cells[0]), n_tokens=int(cells[1]),
                t_star=t_star, p_final=float(cells[2 + k]),
                green_frac=float(cells[3 + k]), diversity=float(cells[4 + k])))
    except ValueError:
        return None
    return records


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Aggregation and the report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellResult:
    """Aggregates for one (scheme, attack, length) cell.

    ``median_t`` holds one numeric median per threshold (``inf`` when at
    least half the texts never crossed); ``median_label`` renders each
    as the number or the ``">N"`` sentinel. ``runtime`` is wall time in
    seconds and is deliberately kept out of the persisted artifacts so
    reruns stay byte-identical.
    """

    scheme: Scheme
    attack: str
    length: int
    n_texts: int
    median_t: tuple
    median_label: tuple
    detected: tuple
    mean_p: float
    p_ci95: float
    green_frac: float
    diversity: float
    runtime: float


@dataclass(frozen=True)
class BenchReport:
    """Everything a benchmark run produced; files live under ``out_dir``."""

    config: BenchConfig
    cells: tuple
    out_dir: Path

    def summary_path(self) -> Path:
        return Path(self.out_dir) / "summary.csv"


def _aggregate_cell(scheme: Scheme, attack: str, length: int,
                    records: list, thresholds: Sequence[float],
                    max_inspect: int, runtime: float) -> CellResult:
    n = len(records)
    medians, labels, detected = [], [], []
    for j in range(len(thresholds)):
        values = np.array([r.t_star[j] if r.t_star[j] is not None
                           else max_inspect + 1 for r in records], dtype=float)
        censored = int(np.sum(values > max_inspect))
        detected.append(n - censored)
        if 2 * censored >= n:
            medians.append(math.inf)
            labels.append(f">{max_inspect}")
        else:
            med = float(np.median(values))
            medians.append(med)
            labels.append(f"{med:g}")
    p_values = np.array([r.p_final for r in records], dtype=float)
    mean_p = float(np.mean(p_values))
    ci95 = float(1.96 * np.std(p_values, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return CellResult(
        scheme=scheme, attack=attack, length=length, n_texts=n,
        median_t=tuple(medians), median_label=tuple(labels),
        detected=tuple(detected), mean_p=mean_p, p_ci95=ci95,
        green_frac=float(np.mean([r.green_frac for r in records])),
        diversity=float(np.mean([r.diversity for r in records])),
        runtime=runtime)


def _summary_text(cells: Sequence[CellResult],
                  thresholds: Sequence[float]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    header = ["scheme", "attack", "length", "n_texts"]
    for q in thresholds:
        tag = _threshold_tag(q)
        header += [f"median_t_q{tag}", f"detected_q{tag}"]
    header += ["mean_p", "p_ci95", "green_frac", "diversity_pct"]
    writer.writerow(header)
    for cell in cells:
        row = [cell.scheme.value, cell.attack, cell.length, cell.n_texts]
        for j in range(len(thresholds)):
            row += [cell.median_label[j], cell.detected[j]]
        row += [f"{cell.mean_p:.6g}", f"{cell.p_ci95:.6g}",
                f"{cell.green_frac:.6g}", f"{100.0 * cell.diversity:.6g}"]
        writer.writerow(row)
    return buffer.getvalue()


# ---------------------------------------------------------------------------
# The benchmark loop
# ---------------------------------------------------------------------------

def _cell_id(scheme: Scheme, length: int, attack: str) -> str:
    return f"{scheme.value}-L{length}-{attack}"


def _corpus_prompts(path, vocab_size: int, n: int) -> np.ndarray:
    """Prompts from a text file: one per line, cycled, PROMPT_LEN tokens."""
    vocab = build_demo_vocab(vocab_size)
    rows = []
    for line in load_corpus(path):
        ids = tokenize(line, vocab, origin="prompt").ids[:PROMPT_LEN]
        if ids.size:
            rows.append(np.pad(ids, (0, PROMPT_LEN - ids.size)))
    if not rows:
        raise ValueError(f"{path}: no usable prompt lines")
    return np.stack([rows[i % len(rows)] for i in range(n)])


def run_bench(config: BenchConfig, verbose: bool = True) -> BenchReport:
    """Run the benchmark grid and write its artifacts.

    Texts are generated once per (scheme, length) block and reused
    across all attacks. Finished cells (matching records file already
    present) are not recomputed, so an interrupted run resumes where it
    stopped. A failing cell is recorded in ``run_meta.json`` and the run
    continues. Returns the in-memory report; artifacts land in
    ``config.out_dir``.
    """
    out_dir = Path(config.out_dir)
    records_dir = out_dir / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    wm_items = tuple(sorted(
        (f.name, getattr(config.watermark, f.name))
        for f in fields(WatermarkConfig)))
    model_args = config._model_args()
    thresholds = config.thresholds
    max_inspect = config.watermark.max_inspect
    n_texts = config.texts_per_cell

    plan = [(si, scheme, li, length)
            for si, scheme in enumerate(config.schemes)
            for li, length in enumerate(config.lengths)]
    cell_ids = [_cell_id(scheme, length, a.label)
                for _, scheme, _, length in plan for a in config.attacks]
    meta_path = out_dir / "run_meta.json"
    meta = {"config": config.to_dict(), "cells": cell_ids, "complete": False,
            "failures": {}}
    _atomic_write_text(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def log(message: str) -> None:
        if verbose:
            print(message, flush=True)

    cells = []
    failures: dict = {}
    for si, scheme, li, length in plan:
        block_start = (si * len(config.lengths) + li) * n_texts
        bases = text_bases(config.master_seed, n_texts, start=block_start)
        if config.corpus == "mock":
            prompts = derive_prompts(bases, config.vocab_size)
        else:
            prompts = _corpus_prompts(config.corpus, config.vocab_size, n_texts)

        pending = [a for a in config.attacks
                   if _load_cell(records_dir, scheme, length, a.label,
                                 thresholds, n_texts) is None]
        texts: list | None = None
        if pending:
            t0 = time.time()
            gen_tasks = [(model_args, wm_items, scheme.value, length,
                          int(bases[i]), prompts[i]) for i in range(n_texts)]
            texts = _pool_map(_gen_task_run, gen_tasks, config.workers)
            log(f"[bench] {scheme.value} L{length}: generated {n_texts} texts "
                f"in {time.time() - t0:.1f}s")

        for spec in config.attacks:
            cell = _cell_id(scheme, length, spec.label)
            cached = _load_cell(records_dir, scheme, length, spec.label,
                                thresholds, n_texts)
            if cached is not None:
                cells.append(_aggregate_cell(scheme, spec.label, length,
                                             cached, thresholds, max_inspect,
                                             runtime=0.0))
                log(f"[bench] {cell}: resumed from records")
                continue
            t0 = time.time()
            try:
                det_tasks = [(model_args, wm_items, scheme.value,
                              int(bases[i]), texts[i], spec.label,
                              spec.attack_seed, thresholds)
                             for i in range(n_texts)]
                rows = _pool_map(_detect_task_run, det_tasks, config.workers)
            except Exception as exc:  # cell failures recorded, run continues
                failures[cell] = f"{type(exc).__name__}: {exc}"
                log(f"[bench] {cell}: FAILED ({failures[cell]})")
                continue
            records = [_Record(i, row[0], row[1], row[2], row[3], row[4])
                       for i, row in enumerate(rows)]
            lines = ["\t".join(_record_header(thresholds))]
            lines += [_record_to_line(r, max_inspect) for r in records]
            _atomic_write_text(records_dir / f"{cell}.tsv",
                               "\n".join(lines) + "\n")
            parsed = _load_cell(records_dir, scheme, length, spec.label,
                                thresholds, n_texts)
            if parsed is None:
                raise RuntimeError(f"records for {cell} failed to round-trip")
            result = _aggregate_cell(scheme, spec.label, length, parsed,
                                     thresholds, max_inspect,
                                     runtime=time.time() - t0)
            cells.append(result)
            log(f"[bench] {cell}: median t* "
                + " ".join(f"q{_threshold_tag(q)}={lab}"
                           for q, lab in zip(thresholds, result.median_label))
                + f" ({result.runtime:.1f}s)")

    _atomic_write_text(out_dir / "summary.csv",
                       _summary_text(cells, thresholds))
    meta["complete"] = not failures
    meta["failures"] = failures
    _atomic_write_text(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return BenchReport(config=config, cells=tuple(cells), out_dir=out_dir)


def _load_cell(records_dir: Path, scheme: Scheme, length: int, attack: str,
               thresholds: Sequence[float], n_expected: int) -> list | None:
    path = records_dir / f"{_cell_id(scheme, length, attack)}.tsv"
    if not path.exists():
        return None
    return _parse_records(path.read_text(encoding="utf-8"), thresholds,
                          n_expected)


# ---------------------------------------------------------------------------
# Detector ablation (combined vs single tests on the same texts)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    detector: str
    median_t: float          # inf when at least half never crossed
    detected: int
    n_texts: int

    @property
    def label(self) -> str:
        return f"{self.median_t:g}" if math.isfinite(self.median_t) else "never"


@dataclass(frozen=True)
class AblationReport:
    """Median detection efficiency of the combined detector and of each
    component, measured on the same texts."""

    scheme: Scheme
    n_texts: int
    length: int
    threshold: float
    rows: tuple

    def median(self, detector: str) -> float:
        for row in self.rows:
            if row.detector == detector:
                return row.median_t
        raise KeyError(detector)

    def table(self) -> str:
        lines = [f"detector ablation: {self.n_texts} {self.scheme.value} texts, "
                 f"length {self.length}, threshold {self.threshold:g}",
                 f"{'detector':<10} {'median t*':>10} {'detected':>9}"]
        for row in self.rows:
            lines.append(f"{row.detector:<10} {row.label:>10} "
                         f"{row.detected:>5}/{row.n_texts}")
        return "\n".join(lines)


def _ablate_one(model, config: WatermarkConfig, scheme: Scheme, length: int,
                base: int, prompt_ids, threshold: float) -> tuple:
    """Generate one text, scan it with all three detectors."""
    keys = text_keys(base)
    trace = generate(model, np.asarray(prompt_ids, dtype=np.int64), scheme,
                     keys, config, length,
                     sampling_seed=text_sampling_seed(base))
    tp = TokenProbDetector(keys.tp.value, config.gamma, config.h)
    cs = ContrastDetector(keys.cs.value, model, config.eta, config.L,
                          config.h, M=config.M,
                          detector_seed=text_detector_seed(base),
                          exclude=(keys.tp.value,))
    combined = FisherPairDetector(tp, cs, name="dual")
    out = []
    for detector in (combined, tp, cs):
        p_trace = detector.p_trace(trace.tokens, max_len=config.max_inspect)
        out.append(first_crossing(p_trace, threshold))
    return tuple(out)


def _ablation_task_run(task: tuple) -> tuple:
    model_args, wm_items, scheme_value, length, base, prompt_ids, threshold = task
    model, _, _ = _model_bundle(model_args)
    return _ablate_one(model, WatermarkConfig(**dict(wm_items)),
                       Scheme(scheme_value), length, base, prompt_ids,
                       threshold)


def detector_ablation(n_texts: int = 200, length: int = 256, *,
                      scheme: Scheme = Scheme.DUAL, master_seed: int = 777000,
                      threshold: float = 0.02,
                      config: WatermarkConfig | None = None,
                      model: MockLM | None = None,
                      workers: int = 1) -> AblationReport:
    """Run the combined, token-probability-only, and contrast-only
    detectors over the same watermarked texts and compare medians.

    The design target is that the combined detector's median t* is no
    larger than either component's on dual-watermarked text. A custom
    ``model`` instance runs in-process; the default mock model can also
    fan out across ``workers`` processes.
    """
    if n_texts < 2:
        raise ValueError("n_texts must be >= 2")
    scheme = Scheme(scheme)
    config = config if config is not None else WatermarkConfig()
    bases = text_bases(master_seed, n_texts)
    if model is None and workers > 1:
        model_args = (1000, 32, 7, None)
        prompts = derive_prompts(bases, model_args[0])
        wm_items = tuple(sorted((f.name, getattr(config, f.name))
                                for f in fields(WatermarkConfig)))
        tasks = [(model_args, wm_items, scheme.value, length, int(bases[i]),
                  prompts[i], threshold) for i in range(n_texts)]
        results = _pool_map(_ablation_task_run, tasks, workers)
    else:
        model = model if model is not None else MockLM(model_seed=7)
        prompts = derive_prompts(bases, model.vocab_size)
        results = [_ablate_one(model, config, scheme, length, int(bases[i]),
                               prompts[i], threshold)
                   for i in range(n_texts)]
    names = ("combined", "tp", "cs")
    rows = []
    for j, name in enumerate(names):
        values = np.array([r[j] if r[j] is not None else length + 1
                           for r in results], dtype=float)
        censored = int(np.sum(values > length))
        med = math.inf if 2 * censored >= n_texts else float(np.median(values))
        rows.append(AblationRow(detector=name, median_t=med,
                                detected=n_texts - censored, n_texts=n_texts))
    return AblationReport(scheme=scheme, n_texts=n_texts, length=length,
                          threshold=threshold, rows=tuple(rows))


# ---------------------------------------------------------------------------
# False-positive-rate experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FprRow:
    detector: str
    threshold: float
    hits: int
    n_texts: int
    rate: float
    ci95: float           # binomial 95% half-width around the empirical rate
    bound: float          # threshold + 3 sigma acceptance band
    passed: bool


@dataclass(frozen=True)
class FprReport:
    """Empirical vs nominal false-positive rates, one row per
    detector/threshold pair."""

    n_texts: int
    length: int
    scheme: Scheme
    master_seed: int
    rows: tuple

    @property
    def all_passed(self) -> bool:
        return all(row.passed for row in self.rows)

    def row(self, detector: str, threshold: float) -> FprRow:
        for entry in self.rows:
            if entry.detector == detector and math.isclose(entry.threshold,
                                                           threshold):
                return entry
        raise KeyError((detector, threshold))

    def table(self) -> str:
        lines = [f"false-positive rates: {self.n_texts} texts, "
                 f"length {self.length}, source scheme {self.scheme.value}",
                 f"{'detector':<10} {'threshold':>9} {'rate':>8} "
                 f"{'ci95':>8} {'bound':>8}  result"]
        for row in self.rows:
            lines.append(
                f"{row.detector:<10} {row.threshold:>9g} {row.rate:>8.4f} "
                f"{row.ci95:>8.4f} {row.bound:>8.4f}  "
                f"{'pass' if row.passed else 'FAIL'}")
        return "\n".join(lines)

    def save_csv(self, path) -> None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["detector", "threshold", "hits", "n_texts", "rate",
                         "ci95", "bound", "passed"])
        for row in self.rows:
            writer.writerow([row.detector, f"{row.threshold:g}", row.hits,
                             row.n_texts, f"{row.rate:.6g}", f"{row.ci95:.6g}",
                             f"{row.bound:.6g}", row.passed])
        _atomic_write_text(Path(path), buffer.getvalue())


def _corpus_token_matrix(path, vocab_size: int, length: int,
                         n_texts: int) -> np.ndarray:
    vocab = build_demo_vocab(vocab_size)
    rows = []
    for line in load_corpus(path):
        ids = tokenize(line, vocab).ids
        if ids.size >= length:
            rows.append(ids[:length])
        if len(rows) == n_texts:
            break
    if not rows:
        raise ValueError(f"{path}: no lines with >= {length} tokens")
    return np.stack(rows)


def fpr_experiment(n_texts: int = 10_000, length: int = 260,
                   detectors: Sequence[str] = DETECTOR_NAMES,
                   thresholds: Sequence[float] = (0.01, 0.02, 0.05, 0.10), *,
                   corpus: str = "mock", scheme: Scheme = Scheme.NONE,
                   master_seed: int = 424242,
                   config: WatermarkConfig | None = None,
                   model: MockLM | None = None, block: int = 2000,
                   verbose: bool = False) -> FprReport:
    """Empirical false-positive rates of the detectors on unwatermarked text.

    Generates ``n_texts`` texts of ``length`` tokens from the mock model
    (or reads them from a corpus file), detects each under its own
    derived keys, and compares the fraction of p-values at or below each
    threshold against the acceptance band ``q + 3*sqrt(q(1-q)/n)``.

    ``scheme`` defaults to unwatermarked text; passing a watermarking
    scheme instead inverts the experiment into a sanity check — the
    detectors then fire far above every nominal threshold and the pass
    flags go false.

    Args:
        detectors: subset of ``DETECTOR_NAMES`` to report.
        corpus: "mock" or a text file (one document per line; lines
            shorter than ``length`` tokens are skipped).
        block: detection batch size (memory/time trade-off only).
    """
    unknown = set(detectors) - set(DETECTOR_NAMES)
    if unknown:
        raise ValueError(f"unknown detectors: {sorted(unknown)}; "
                         f"pick from {DETECTOR_NAMES}")
    if not detectors:
        raise ValueError("detectors must not be empty")
    for q in thresholds:
        if not 0.0 < q < 1.0:
            raise ValueError(f"thresholds must be in (0, 1), got {q}")
    scheme = Scheme(scheme)
    config = config if config is not None else WatermarkConfig()
    model = model if model is not None else MockLM(model_seed=7)
    vocab_size = model.vocab_size

    def log(message: str) -> None:
        if verbose:
            print(message, flush=True)

    bases = text_bases(master_seed, n_texts)
    if corpus != "mock":
        tokens = _corpus_token_matrix(corpus, vocab_size, length, n_texts)
        n_texts = tokens.shape[0]
        bases = bases[:n_texts]
    elif scheme is Scheme.NONE:
        prompts = derive_prompts(bases, vocab_size)
        sampler_keys = mix64_array(
            mix64_array(bases ^ _U64(SALT_SAMPLING_SEED)) ^ _U64(SALT_SAMPLER))
        t0 = time.time()
        tokens = sample_tokens_batch(model, prompts, length, sampler_keys)
        log(f"[fpr] generated {n_texts}x{length} tokens "
            f"in {time.time() - t0:.0f}s")
    else:
        prompts = derive_prompts(bases, vocab_size)
        rows = []
        for i in range(n_texts):
            base = int(bases[i])
            trace = generate(model, prompts[i], scheme, text_keys(base),
                             config, length,
                             sampling_seed=text_sampling_seed(base))
            rows.append(np.asarray(trace.tokens.ids, dtype=np.int64))
        tokens = np.stack(rows)

    key_tp = mix64_array(bases ^ _U64(SALT_KEY_TP))
    key_cs = mix64_array(bases ^ _U64(SALT_KEY_CS))
    key_exp = mix64_array(key_cs ^ _U64(rng.SALT_EXP_STREAM))
    roots = mix64_array(bases ^ _U64(DEFAULT_DETECTOR_SEED))

    need_tp = {"tp", "combined"} & set(detectors)
    need_cs = {"cs", "combined"} & set(detectors)
    need_exp = "exp" in detectors
    p_by_name: dict = {}
    t0 = time.time()
    if need_tp:
        p_by_name["tp"] = batch_p_tp(tokens, key_tp, config.gamma, config.h)[2]
    if need_exp:
        p_by_name["exp"] = batch_p_exp(tokens, key_exp, config.h)[1]
    if need_cs:
        p_cs_values = np.empty(n_texts)
        for lo in range(0, n_texts, block):
            hi = min(lo + block, n_texts)
            p_cs_values[lo:hi] = batch_p_cs(
                tokens[lo:hi], key_cs[lo:hi],
                decoy_matrix(roots[lo:hi], config.M), model, config.eta,
                config.L, config.h)[0]
        p_by_name["cs"] = p_cs_values
    if "combined" in detectors:
        p_by_name["combined"] = batch_fisher(p_by_name["tp"], p_by_name["cs"])
    log(f"[fpr] detected in {time.time() - t0:.0f}s")

    rows = []
    for name in DETECTOR_NAMES:
        if name not in detectors:
            continue
        p_values = p_by_name[name]
        for q in thresholds:
            hits = int(np.sum(p_values <= q))
            rate = hits / n_texts
            ci95 = 1.96 * math.sqrt(max(rate * (1.0 - rate), 0.0) / n_texts)
            bound = q + 3.0 * math.sqrt(q * (1.0 - q) / n_texts)
            rows.append(FprRow(detector=name, threshold=float(q), hits=hits,
                               n_texts=n_texts, rate=rate, ci95=ci95,
                               bound=bound, passed=rate <= bound))
    return FprReport(n_texts=n_texts, length=length, scheme=scheme,
                     master_seed=master_seed, rows=tuple(rows))


# ---------------------------------------------------------------------------
# External quality rating
# ---------------------------------------------------------------------------

RATING_INSTRUCTION = (
    "You are given a prompt and a response, and you need to grade the "
    "response out of 100 based on: Accuracy (20 points) - correctness and "
    "relevance to the prompt; Detail (20 points) - comprehensiveness and "
    "depth; Grammar and Typing (30 points) - grammatical and typographical "
    "accuracy; Vocabulary (30 points) - appropriateness and richness. "
    "Deduct points for shortcomings in each category. Give a total grade "
    "at the first line of the response."
)

_GRADE_RE = re.compile(r"\d{1,3}")


def parse_grade(reply: str) -> int | None:
    """Extract the grade from a rating reply, or None when unparseable.

    The canonical reply opens with ``Grade out of 100: NN``; the scale
    mention is dropped so the first integer on the first line is the
    grade. Values outside 0..100 are rejected.
    """
    stripped = reply.strip()
    if not stripped:
        return None
    head = stripped.splitlines()[0]
    cleaned = re.sub(r"out\s+of\s+100", "", head, flags=re.IGNORECASE)
    match = _GRADE_RE.search(cleaned)
    if not match:
        return None
    value = int(match.group())
    return value if 0 <= value <= 100 else None


def rate_texts(texts: Sequence, client) -> list:
    """Grade texts out of 100 through a chat-completion endpoint.

    Each item is either a response string or a ``(prompt, response)``
    pair; the grading instruction and reply format are documented in
    ``docs/CLIENT.md``. Endpoint failures and unparseable replies are
    recorded as None (missing), never raised.
    """
    scores = []
    for item in texts:
        if isinstance(item, str):
            prompt, response = "", item
        else:
            prompt, response = item
        body = f"Prompt: {prompt}\nResponse: {response}"
        try:
            reply = client.complete(RATING_INSTRUCTION, body)
        except AttackUnavailableError:
            scores.append(None)
            continue
        scores.append(parse_grade(reply))
    return scores
