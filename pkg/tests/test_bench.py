"""Benchmark harness: derivations, configs, records, resume, FPR, ablation."""

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest

from dualmark import MockLM, Scheme, StubRewriteClient, WatermarkConfig
from dualmark import rng
from dualmark.attack import AttackKind, AttackSpec
from dualmark.bench import (
    PROMPT_LEN,
    RATING_INSTRUCTION,
    BenchConfig,
    derive_prompts,
    detector_ablation,
    diversity,
    first_crossing,
    fpr_experiment,
    load_bench_config,
    parse_grade,
    rate_texts,
    render_bench_config,
    run_bench,
    save_bench_config,
    text_bases,
    text_detector_seed,
    text_keys,
    text_sampling_seed,
)
from dualmark.core import build_demo_vocab
from dualmark.detect import DEFAULT_DETECTOR_SEED
from oracles import mix64_reference, u01_reference

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1


def _small_bench(out_dir: str, **overrides) -> BenchConfig:
    base = dict(
        schemes=(Scheme.DUAL, Scheme.NONE),
        attacks=(AttackSpec(AttackKind.NONE), AttackSpec(AttackKind.SYNONYM, 0.25)),
        texts_per_cell=6,
        lengths=(60,),
        thresholds=(0.02, 0.001),
        out_dir=out_dir,
        workers=1,
        master_seed=13579,
        watermark=dataclasses.replace(WatermarkConfig(), k=5, L=10, M=49),
        vocab_size=200,
        dim=8,
    )
    base.update(overrides)
    return BenchConfig(**base)


# ---------------------------------------------------------------------------
# Per-text derivations


def test_text_bases_match_the_keyed_walk():
    master = 424242
    bases = text_bases(master, 5)
    for i in range(5):
        assert int(bases[i]) == mix64_reference((master + (i + 1) * GOLDEN) & MASK64)
    # A start offset addresses the same global sequence.
    assert text_bases(master, 5, start=2).tolist() == text_bases(master, 7).tolist()[2:]
    assert text_bases(master, 0).size == 0
    with pytest.raises(ValueError):
        text_bases(master, -1)


def test_per_text_derivations_are_salted_hashes():
    base = int(text_bases(97531, 1)[0])
    keys = text_keys(base)
    assert keys.tp.value == mix64_reference(base ^ rng.SALT_KEY_TP)
    assert keys.cs.value == mix64_reference(base ^ rng.SALT_KEY_CS)
    assert keys.tp.role == "tp" and keys.cs.role == "cs"
    assert text_sampling_seed(base) == mix64_reference(base ^ rng.SALT_SAMPLING_SEED)
    assert text_detector_seed(base) == mix64_reference(base ^ DEFAULT_DETECTOR_SEED)


def test_derive_prompts_match_the_scalar_stream():
    bases = text_bases(7, 3)
    prompts = derive_prompts(bases, 1000)
    assert prompts.shape == (3, PROMPT_LEN)
    for i in range(3):
        pk = mix64_reference(int(bases[i]) ^ rng.SALT_PROMPT)
        expect = [int(u01_reference(pk, 0, j) * 1000) for j in range(PROMPT_LEN)]
        assert prompts[i].tolist() == expect
    assert prompts.max() < 1000 and prompts.min() >= 0


# ---------------------------------------------------------------------------
# Diversity and crossings


def test_diversity_frozen_cases():
    assert diversity(np.arange(10)) == 1.0
    # A constant sequence has exactly one distinct n-gram per width.
    assert diversity(np.full(10, 5)) == pytest.approx((1 / 9) * (1 / 8) * (1 / 7), rel=1e-15)
    with pytest.raises(ValueError):
        diversity(np.arange(3))


def test_first_crossing():
    assert first_crossing([0.5, 0.3, 0.01, 0.5], 0.02) == 3
    assert first_crossing([0.02, 0.5], 0.02) == 1  # threshold is inclusive
    assert first_crossing([0.5, 0.4], 0.02) is None


# ---------------------------------------------------------------------------
# BenchConfig and its file format


def test_bench_config_defaults_and_validation():
    cfg = BenchConfig()
    assert cfg.schemes == (Scheme.KGW, Scheme.EXP, Scheme.DUAL)
    assert len(cfg.attacks) == 15
    assert cfg.texts_per_cell == 100 and cfg.lengths == (260,)
    assert cfg.master_seed == 97531
    for kwargs in (
        {"schemes": ()},
        {"attacks": ()},
        {"attacks": ("synonym-25",)},
        {"attacks": (AttackSpec(AttackKind.NONE), AttackSpec(AttackKind.NONE))},
        {"texts_per_cell": 1},
        {"lengths": ()},
        {"lengths": (2,)},
        {"thresholds": (1.5,)},
        {"thresholds": ()},
        {"workers": 0},
    ):
        with pytest.raises((ValueError, TypeError)):
            BenchConfig(**kwargs)


def test_bench_config_to_dict_is_json_ready():
    cfg = _small_bench("x")
    blob = json.dumps(cfg.to_dict())
    back = json.loads(blob)
    assert back["schemes"] == ["dual", "none"]
    assert back["attacks"] == [{"label": "none", "attack_seed": 0},
                               {"label": "synonym-25", "attack_seed": 0}]
    assert back["watermark"]["k"] == 5
    assert back["model"]["vocab_size"] == 200


def test_bench_config_file_round_trip(tmp_path):
    cfg = _small_bench("trip-out", temperature=0.07,
                       attacks=(AttackSpec(AttackKind.NONE, attack_seed=3),
                                AttackSpec(AttackKind.SYNONYM, 0.5, attack_seed=3)))
    path = tmp_path / "bench.ini"
    save_bench_config(cfg, path)
    assert load_bench_config(path) == cfg
    # None temperature survives as an empty value.
    cfg2 = _small_bench("trip-out")
    save_bench_config(cfg2, path)
    loaded = load_bench_config(path)
    assert loaded == cfg2 and loaded.temperature is None


def test_bench_config_file_errors(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[other]\nx = 1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="bench"):
        load_bench_config(path)
    path.write_text("[bench]\nattacks = florp\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_bench_config(path)
    mixed = _small_bench("x", attacks=(AttackSpec(AttackKind.NONE, attack_seed=1),
                                       AttackSpec(AttackKind.LOWERCASE, attack_seed=2)))
    with pytest.raises(ValueError, match="attack_seed"):
        render_bench_config(mixed)


# ---------------------------------------------------------------------------
# run_bench


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench-smoke")
    cfg = _small_bench(str(root / "out"))
    report = run_bench(cfg, verbose=False)
    return cfg, report


def test_run_bench_writes_the_expected_tree(smoke_run):
    cfg, report = smoke_run
    out = Path(cfg.out_dir)
    assert (out / "summary.csv").exists()
    assert report.summary_path() == out / "summary.csv"
    names = sorted(p.name for p in (out / "records").iterdir())
    assert names == [
        "dual-L60-none.tsv", "dual-L60-synonym-25.tsv",
        "none-L60-none.tsv", "none-L60-synonym-25.tsv",
    ]
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["complete"] is True and meta["failures"] == {}
    assert meta["cells"] == ["dual-L60-none", "dual-L60-synonym-25",
                             "none-L60-none", "none-L60-synonym-25"]
    assert meta["config"]["master_seed"] == 13579


def test_run_bench_summary_shape(smoke_run):
    cfg, report = smoke_run
    lines = (Path(cfg.out_dir) / "summary.csv").read_text().splitlines()
    assert lines[0] == ("scheme,attack,length,n_texts,"
                       "median_t_q0.02,detected_q0.02,median_t_q0.001,detected_q0.001,"
                       "mean_p,p_ci95,green_frac,diversity_pct")
    assert len(lines) == 5
    cells = {(c.scheme, c.attack): c for c in report.cells}
    clean_dual = cells[(Scheme.DUAL, "none")]
    assert math.isfinite(clean_dual.median_t[0])
    assert clean_dual.detected[0] == 5  # frozen: 5 of 6 dual texts cross q=0.02 by T=60
    clean_none = cells[(Scheme.NONE, "none")]
    assert clean_none.median_t[1] == math.inf
    assert clean_none.median_label[1] == ">1024"  # the max_inspect sentinel
    assert clean_none.detected[1] == 0
    # The synonym attack can only slow dual detection down.
    attacked_dual = cells[(Scheme.DUAL, "synonym-25")]
    assert attacked_dual.median_t[0] >= clean_dual.median_t[0]


def test_run_bench_is_deterministic_across_directories(tmp_path, smoke_run):
    cfg, _ = smoke_run
    other = _small_bench(str(tmp_path / "fresh"))
    run_bench(other, verbose=False)
    a_root, b_root = Path(cfg.out_dir), Path(other.out_dir)
    a_files = sorted(p.relative_to(a_root) for p in a_root.rglob("*") if p.is_file())
    b_files = sorted(p.relative_to(b_root) for p in b_root.rglob("*") if p.is_file())
    assert a_files == b_files
    for rel in a_files:
        if rel.name == "run_meta.json":
            # Identical but for the out_dir echo.
            a_meta = json.loads((a_root / rel).read_text())
            b_meta = json.loads((b_root / rel).read_text())
            a_meta["config"].pop("out_dir")
            b_meta["config"].pop("out_dir")
            assert a_meta == b_meta
        else:
            assert (a_root / rel).read_bytes() == (b_root / rel).read_bytes(), rel


def test_run_bench_resumes_from_partial_records(tmp_path):
    cfg = _small_bench(str(tmp_path / "resume"))
    run_bench(cfg, verbose=False)
    out = Path(cfg.out_dir)
    before = {p.relative_to(out): p.read_bytes()
              for p in out.rglob("*") if p.is_file()}
    (out / "summary.csv").unlink()
    (out / "records" / "dual-L60-synonym-25.tsv").unlink()
    report = run_bench(cfg, verbose=False)
    after = {p.relative_to(out): p.read_bytes()
             for p in out.rglob("*") if p.is_file()}
    assert before == after
    assert len(report.cells) == 4


def test_run_bench_worker_pool_matches_single_process(tmp_path):
    serial = _small_bench(str(tmp_path / "serial"), texts_per_cell=4)
    pooled = _small_bench(str(tmp_path / "pooled"), texts_per_cell=4, workers=2)
    run_bench(serial, verbose=False)
    run_bench(pooled, verbose=False)
    for name in ("summary.csv", "records/dual-L60-none.tsv",
                 "records/none-L60-synonym-25.tsv"):
        assert (Path(serial.out_dir) / name).read_bytes() == \
               (Path(pooled.out_dir) / name).read_bytes(), name


def test_run_bench_reads_prompts_from_a_corpus_file(tmp_path):
    vocab = build_demo_vocab(200)
    words = [t for t in vocab.tokens if t.isascii() and t.isalpha()]
    corpus = tmp_path / "prompts.txt"
    corpus.write_text("\n".join(" ".join(words[i:i + 10]) for i in (0, 10, 20)) + "\n",
                      encoding="utf-8")
    cfg = _small_bench(str(tmp_path / "corpus-out"), corpus=str(corpus),
                       schemes=(Scheme.DUAL,), texts_per_cell=4,
                       attacks=(AttackSpec(AttackKind.NONE),))
    report = run_bench(cfg, verbose=False)
    assert report.cells[0].n_texts == 4


# ---------------------------------------------------------------------------
# False-positive-rate experiment


@pytest.fixture(scope="module")
def small_wm():
    return dataclasses.replace(WatermarkConfig(), k=5, L=10, M=49)


def test_fpr_unwatermarked_calibration_passes(small_model, small_wm):
    report = fpr_experiment(400, 64, detectors=("tp", "exp"), thresholds=(0.05, 0.10),
                            model=small_model, config=small_wm, master_seed=424242)
    assert report.all_passed
    assert report.scheme is Scheme.NONE
    row = report.row("tp", 0.05)
    assert (row.hits, row.n_texts) == (25, 400)  # frozen at this master seed
    assert row.rate == pytest.approx(0.0625)
    assert row.bound == pytest.approx(0.05 + 3 * math.sqrt(0.05 * 0.95 / 400), rel=1e-12)
    assert "pass" in report.table()
    with pytest.raises(KeyError):
        report.row("tp", 0.33)


def test_fpr_on_watermarked_text_inverts_into_a_sanity_check(small_model, small_wm):
    report = fpr_experiment(60, 80, detectors=("tp", "cs", "combined"),
                            thresholds=(0.02,), scheme=Scheme.DUAL,
                            model=small_model, config=small_wm, master_seed=424242)
    assert not report.all_passed
    assert all(not row.passed for row in report.rows)
    assert report.row("combined", 0.02).hits == 57  # frozen: 57/60 fire by T=80


def test_fpr_reads_documents_from_a_corpus_file(tmp_path, small_model, small_wm):
    vocab = build_demo_vocab(200)
    words = [t for t in vocab.tokens if t.isascii() and t.isalpha()]
    corpus = tmp_path / "docs.txt"
    long_line = " ".join(words[i % len(words)] for i in range(80))
    corpus.write_text("\n".join([long_line, "too short", long_line]) + "\n",
                      encoding="utf-8")
    report = fpr_experiment(10, 64, detectors=("tp",), thresholds=(0.05,),
                            corpus=str(corpus), model=small_model, config=small_wm)
    assert report.n_texts == 2  # only the long lines qualify
    with pytest.raises(ValueError, match="no lines"):
        fpr_experiment(10, 500, detectors=("tp",), corpus=str(corpus),
                       model=small_model, config=small_wm)


def test_fpr_save_csv_is_deterministic(tmp_path, small_model, small_wm):
    report = fpr_experiment(50, 32, detectors=("tp",), thresholds=(0.1,),
                            model=small_model, config=small_wm)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    report.save_csv(a)
    report.save_csv(b)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "detector,threshold,hits,n_texts,rate,ci95,bound,passed"
    assert len(lines) == 2


def test_fpr_validation(small_model, small_wm):
    with pytest.raises(ValueError, match="unknown detectors"):
        fpr_experiment(10, 16, detectors=("tp", "florp"), model=small_model)
    with pytest.raises(ValueError):
        fpr_experiment(10, 16, detectors=(), model=small_model)
    with pytest.raises(ValueError):
        fpr_experiment(10, 16, thresholds=(0.0,), model=small_model)


# ---------------------------------------------------------------------------
# Detector ablation


def test_detector_ablation_rows_and_ordering(small_model, small_wm):
    report = detector_ablation(24, 80, model=small_model, config=small_wm,
                               master_seed=777000)
    assert [row.detector for row in report.rows] == ["combined", "tp", "cs"]
    assert report.median("combined") <= report.median("tp")
    assert report.median("combined") <= report.median("cs")
    # Frozen medians at this master seed.
    assert report.median("combined") == 34.0
    assert report.median("tp") == 39.0
    assert report.median("cs") == 37.5
    assert report.rows[0].detected == 23
    assert "detector ablation" in report.table()
    with pytest.raises(KeyError):
        report.median("florp")
    with pytest.raises(ValueError):
        detector_ablation(1, 80, model=small_model, config=small_wm)


# ---------------------------------------------------------------------------
# External quality rating


def test_parse_grade_cases():
    assert parse_grade("Grade out of 100: 87") == 87
    assert parse_grade("87 out of 100") == 87
    assert parse_grade("Rating: 95\nDetail: strong opening") == 95
    assert parse_grade("100") == 100
    assert parse_grade("") is None
    assert parse_grade("no digits here") is None
    assert parse_grade("150") is None
    assert parse_grade("junk\n88") is None  # only the first line counts


def test_rate_texts_through_a_stub_client():
    stub = StubRewriteClient(transform=lambda text: "Grade out of 100: 91")
    scores = rate_texts([("What is up?", "Not much."), "a bare response"], stub)
    assert scores == [91, 91]
    assert stub.calls[0][0] == RATING_INSTRUCTION
    assert stub.calls[0][1] == "Prompt: What is up?\nResponse: Not much."
    assert stub.calls[1][1] == "Prompt: \nResponse: a bare response"
    failing = StubRewriteClient(fail=True)
    assert rate_texts(["anything"], failing) == [None]
    garbled = StubRewriteClient(transform=lambda text: "I cannot grade this.")
    assert rate_texts(["anything"], garbled) == [None]
