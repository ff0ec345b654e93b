"""Statistical kernels and detectors vs independent oracles and frozen values."""

import dataclasses
import math

import numpy as np
import pytest

from dualmark import (
    MockLM,
    Scheme,
    UndefinedTestError,
    WatermarkConfig,
    generate,
)
from dualmark import rng
from dualmark.detect import (
    DEFAULT_DETECTOR_SEED,
    REPORT_COLUMNS,
    ContrastDetector,
    DetectionReport,
    ExpDetector,
    FisherPairDetector,
    TokenProbDetector,
    _membership,
    _phi_matrix,
    _P_FLOOR,
    chi2_cdf_4,
    detection_efficiency,
    dual_detect,
    exp_detect,
    exp_pvalue,
    exp_score,
    fisher_combine,
    normal_cdf,
    p_cs,
    p_tp,
    phi_cs,
    report_line,
    scheme_detector,
    similarity_profile,
)
from oracles import (
    chi2_cdf_4_quadrature,
    context_seed_reference,
    gamma_upper_series,
    normal_cdf_series,
    u01_reference,
)


def _all_green_ids(key_tp: int, gamma: float, h: int, n: int, vocab: int = 200) -> np.ndarray:
    """Deterministic sequence whose every token is green under key_tp."""
    ids: list[int] = []
    for _ in range(n):
        seed = rng.context_seed(ids, h)
        for x in range(vocab):
            if rng.is_green(key_tp, seed, x, gamma):
                ids.append(x)
                break
        else:  # pragma: no cover - gamma=0.5 always admits a green token here
            raise AssertionError("no green token in vocabulary")
    return np.array(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# normal_cdf


def test_normal_cdf_matches_series_oracle():
    for x in np.linspace(-6.0, 6.0, 1001):
        assert abs(normal_cdf(float(x)) - normal_cdf_series(float(x))) < 1e-12


def test_normal_cdf_pinned_values():
    assert normal_cdf(0.0) == 0.5
    assert normal_cdf(2.0) == pytest.approx(0.977249868, abs=1e-9)
    assert normal_cdf(2.0) == 0.9772498680518208
    assert normal_cdf(-2.0) == pytest.approx(0.02275, abs=1e-5)


def test_normal_cdf_shape():
    grid = np.linspace(-8.0, 8.0, 200)
    vals = [normal_cdf(float(x)) for x in grid]
    assert all(a < b for a, b in zip(vals, vals[1:]))  # strictly increasing here
    for x in grid:
        assert normal_cdf(float(x)) + normal_cdf(float(-x)) == pytest.approx(1.0, abs=1e-15)
    assert normal_cdf(-40.0) == 0.0
    assert normal_cdf(40.0) == 1.0


# ---------------------------------------------------------------------------
# chi2_cdf_4


def test_chi2_cdf_4_matches_quadrature():
    for x in (0.01, 0.5, 1.0, 2.3, 4.7, 9.488, 15.0, 30.0, 60.0):
        assert abs(chi2_cdf_4(x) - chi2_cdf_4_quadrature(x)) < 1e-12


def test_chi2_cdf_4_pinned_values():
    assert chi2_cdf_4(0.0) == 0.0
    assert chi2_cdf_4(9.488) == pytest.approx(0.950, abs=5e-4)
    with pytest.raises(ValueError):
        chi2_cdf_4(-0.001)


# ---------------------------------------------------------------------------
# fisher_combine


def test_fisher_combine_pinned_values():
    assert fisher_combine(1.0, 1.0) == 1.0
    got = fisher_combine(0.05, 0.05)
    assert got == pytest.approx(0.01747, abs=1e-4)
    assert got == pytest.approx(0.0025 * (1.0 - 2.0 * math.log(0.05)), rel=1e-12)
    got = fisher_combine(0.1, 1.0)
    assert got == pytest.approx(0.33026, abs=1e-4)
    assert got == pytest.approx(0.1 * (1.0 - math.log(0.1)), rel=1e-12)


def test_fisher_combine_is_chi2_tail():
    for a in (0.001, 0.05, 0.3, 0.9, 1.0):
        for b in (0.002, 0.1, 0.7, 1.0):
            stat = -2.0 * (math.log(a) + math.log(b))
            assert fisher_combine(a, b) == pytest.approx(1.0 - chi2_cdf_4(stat), abs=1e-12)


def test_fisher_combine_strengthens_agreeing_evidence():
    for a in (0.001, 0.01, 0.05):
        for b in (0.001, 0.01, 0.05):
            assert fisher_combine(a, b) < 0.05


def test_fisher_combine_rejects_out_of_range():
    for a, b in ((0.0, 0.5), (0.5, 0.0), (-0.1, 0.5), (0.5, 1.0001), (1.5, 0.5)):
        with pytest.raises(ValueError):
            fisher_combine(a, b)


# ---------------------------------------------------------------------------
# exponential score / p-value


def test_exp_score_matches_fsum_oracle():
    gen = np.random.RandomState(3)
    for _ in range(10):
        r = gen.random_sample(50)
        expect = math.fsum(-math.log1p(-ri) for ri in r)
        assert exp_score(r) == pytest.approx(expect, rel=1e-12)


def test_exp_score_pinned_and_clamped():
    r_unit = 1.0 - math.exp(-1.0)
    assert exp_score([r_unit] * 17) == pytest.approx(17.0, rel=1e-12)
    # r = 1 clamps to 1 - 2^-53, giving exactly -log(2^-53).
    assert exp_score([1.0]) == pytest.approx(53.0 * math.log(2.0), rel=1e-14)
    with pytest.raises(ValueError):
        exp_score([0.5, -0.01])
    with pytest.raises(UndefinedTestError):
        exp_score([])


def test_exp_pvalue_matches_gamma_series():
    for t in (1, 2, 5, 17, 64, 256, 512):
        for mult in (0.1, 0.5, 1.0, 1.5, 3.0):
            s = mult * t
            assert abs(exp_pvalue(s, t) - gamma_upper_series(t, s)) < 1e-10, (t, s)


def test_exp_pvalue_pinned_values():
    assert exp_pvalue(3.0, 1) == pytest.approx(math.exp(-3.0), rel=1e-13)
    assert exp_pvalue(0.0, 5) == 1.0
    with pytest.raises(UndefinedTestError):
        exp_pvalue(1.0, 0)


def test_exp_detect_recomputes_the_generation_stream(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.EXP, keys, small_config, 60)
    exp_key = rng.derive_key(keys.cs.value, rng.SALT_EXP_STREAM)
    score, p = exp_detect(trace.tokens, exp_key, small_config.h)
    ids = trace.tokens.tolist()
    expect = math.fsum(
        -math.log1p(-min(u01_reference(exp_key, context_seed_reference(ids[:i], small_config.h), tok),
                         1.0 - 2.0**-53))
        for i, tok in enumerate(ids)
    )
    assert score == pytest.approx(expect, rel=1e-12)
    assert p == pytest.approx(gamma_upper_series(60, score), abs=1e-10)
    # Selection bias during generation pushes the score well above its null mean.
    assert score > 60.0
    assert p < 0.01


# ---------------------------------------------------------------------------
# token-probability test


def test_p_tp_counts_green_like_the_oracle(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.KGW, keys, small_config, 80)
    ids = trace.tokens.tolist()
    phi, z, p = p_tp(trace.tokens, keys.tp.value, small_config.gamma, small_config.h)
    expect_phi = sum(
        u01_reference(keys.tp.value, context_seed_reference(ids[:i], small_config.h), tok)
        < small_config.gamma
        for i, tok in enumerate(ids)
    )
    assert phi == expect_phi
    t, g = 80, small_config.gamma
    assert z == pytest.approx((phi - g * t) / math.sqrt(t * g * (1 - g)), rel=1e-15)
    assert p == pytest.approx(1.0 - normal_cdf_series(z), abs=1e-12)
    # The trace's own green flags agree with the detector's recount.
    assert phi == trace.green_count()


def test_p_tp_all_green_hits_the_binomial_ceiling(keys):
    for t in (5, 16, 100):
        ids = _all_green_ids(keys.tp.value, 0.5, 1, t)
        phi, z, p = p_tp(ids, keys.tp.value, 0.5, 1)
        assert phi == t
        assert z == pytest.approx(math.sqrt(t), rel=1e-15)
    with pytest.raises(UndefinedTestError):
        p_tp(np.array([], dtype=np.int64), keys.tp.value, 0.5, 1)


# ---------------------------------------------------------------------------
# similarity profile / phi matrix


def test_similarity_profile_matches_manual_windows(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.NONE, keys, small_config, 30)
    ids = trace.tokens.ids
    for L in (1, 3, 10, 64):
        prof = similarity_profile(small_model, ids, L)
        emb = small_model.hidden_batch(ids)
        for t in range(ids.size):
            if t == 0:
                assert prof[0] == -1.0
            else:
                lo = max(0, t - L)
                expect = max(float(np.sum(emb[t] * emb[w])) for w in range(lo, t))
                assert prof[t] == pytest.approx(expect, abs=1e-14)


def test_similarity_profile_single_token(small_model):
    assert similarity_profile(small_model, np.array([7], dtype=np.int64), 5).tolist() == [-1.0]


def test_phi_matrix_exact_arithmetic():
    member = np.array([[True, False, True, False]])
    s = np.array([0.25, 0.75, 0.25, 0.75])
    phi, degenerate = _phi_matrix(member, s)
    assert phi.shape == (1, 4)
    assert degenerate.tolist() == [[True, False, False, False]]
    assert phi[0].tolist() == [0.0, 0.5, 0.5, 0.5]


def test_phi_matrix_degenerate_rows():
    s = np.array([0.1, 0.2, 0.3])
    all_in, _ = _phi_matrix(np.array([[True, True, True]]), s)
    none_in, _ = _phi_matrix(np.array([[False, False, False]]), s)
    assert not all_in.any() and not none_in.any()
    _, deg = _phi_matrix(np.array([[True, True, True]]), s)
    assert deg.all()


def test_membership_matches_scalar_split_draws(keys):
    seeds = np.array([1, 99, 2**40, 0], dtype=np.uint64)
    test_keys = np.array([keys.cs.value, 12345], dtype=np.uint64)
    member = _membership(test_keys, seeds, 0.5)
    for i, k in enumerate(test_keys):
        for j, seed in enumerate(seeds):
            assert member[i, j] == (rng.u01(int(k), int(seed), 0) < 0.5)


def test_phi_cs_degenerate_extremes(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.CS, keys, small_config, 40)
    # eta = 1 puts every position in the contrastive set.
    assert phi_cs(trace.tokens, keys.cs.value, small_model, 1.0, 10, 1) == (0.0, True)
    # eta = 0 puts none.
    assert phi_cs(trace.tokens, keys.cs.value, small_model, 0.0, 10, 1) == (0.0, True)


def test_phi_cs_matches_fsum_oracle(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.CS, keys, small_config, 60)
    ids = trace.tokens.tolist()
    phi, degenerate = phi_cs(trace.tokens, keys.cs.value, small_model,
                             small_config.eta, small_config.L, small_config.h)
    assert not degenerate
    s = similarity_profile(small_model, trace.tokens.ids, small_config.L)
    inside, outside = [], []
    for i, tok in enumerate(ids):
        seed = context_seed_reference(ids[:i], small_config.h)
        r = u01_reference(keys.cs.value, seed, 0)
        (inside if r < small_config.eta else outside).append(float(s[i]))
    expect = math.fsum(outside) / len(outside) - math.fsum(inside) / len(inside)
    assert phi == pytest.approx(expect, rel=1e-12)
    # Contrastive picks suppress similarity inside the keyed set.
    assert phi > 0.05


# ---------------------------------------------------------------------------
# rank test


def test_p_cs_is_a_rank_over_decoys(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.CS, keys, small_config, 160)
    decoys = rng.decoy_keys(DEFAULT_DETECTOR_SEED, small_config.M,
                            exclude=(keys.cs.value, keys.tp.value))
    p, phi_true, degen = p_cs(trace.tokens, keys.cs.value, decoys, small_model,
                              small_config.eta, small_config.L, small_config.h)
    # Recompute the rank with per-key scalar calls.
    phi_0, _ = phi_cs(trace.tokens, keys.cs.value, small_model,
                      small_config.eta, small_config.L, small_config.h)
    assert phi_true == phi_0
    count = 0
    for d in decoys:
        phi_d, _ = phi_cs(trace.tokens, d, small_model,
                          small_config.eta, small_config.L, small_config.h)
        count += phi_d >= phi_true
    assert p == (1.0 + count) / (len(decoys) + 1.0)
    # Frozen: the true key ranks first among the 49 decoys on this text.
    assert p == 1.0 / 50.0
    assert not degen


def test_p_cs_range_and_validation(small_model, keys, small_config):
    ids = np.arange(12, dtype=np.int64) * 3
    decoys = rng.decoy_keys(DEFAULT_DETECTOR_SEED, 9, exclude=(keys.cs.value,))
    p, _, _ = p_cs(ids, keys.cs.value, decoys, small_model, 0.5, 10, 1)
    assert p in {j / 10.0 for j in range(1, 11)}
    with pytest.raises(ValueError):
        p_cs(ids, keys.cs.value, [], small_model, 0.5, 10, 1)


# ---------------------------------------------------------------------------
# dual detection


def test_dual_detect_composes_the_component_tests(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.DUAL, keys, small_config, 120)
    report = dual_detect(trace.tokens, keys, small_config, small_model)
    phi_t, z_t, p_t = p_tp(trace.tokens, keys.tp.value, small_config.gamma, small_config.h)
    decoys = rng.decoy_keys(DEFAULT_DETECTOR_SEED, small_config.M,
                            exclude=(keys.cs.value, keys.tp.value))
    p_c, phi_c, degen = p_cs(trace.tokens, keys.cs.value, decoys, small_model,
                             small_config.eta, small_config.L, small_config.h)
    assert report == DetectionReport(
        T=120, phi_tp=phi_t, z_tp=z_t, p_tp=p_t, phi_cs=phi_c, p_cs=p_c,
        p_combined=fisher_combine(max(p_t, _P_FLOOR), p_c), degenerate_cs=degen,
    )
    # Both components fire on dual-watermarked text.
    assert report.p_tp < 0.01
    assert report.p_cs <= 0.04
    assert report.p_combined < report.p_tp
    # The rank p-value lives on the grid j/(M+1).
    assert report.p_cs * (small_config.M + 1) == pytest.approx(
        round(report.p_cs * (small_config.M + 1)), abs=1e-9)


def test_dual_detect_clamps_vanishing_p_values(small_model, keys, small_config):
    ids = _all_green_ids(keys.tp.value, small_config.gamma, small_config.h, 3000)
    report = dual_detect(ids, keys, small_config, small_model)
    assert report.p_tp == 0.0  # underflows the normal tail
    assert 0.0 < report.p_combined < 1e-12  # floor keeps Fisher finite


def test_report_line_round_trips(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.DUAL, keys, small_config, 40)
    report = dual_detect(trace.tokens, keys, small_config, small_model)
    parts = report_line(report).split("\t")
    assert len(parts) == len(REPORT_COLUMNS) == 8
    assert int(parts[0]) == report.T
    assert int(parts[1]) == report.phi_tp
    assert float(parts[2]) == report.z_tp
    assert float(parts[3]) == report.p_tp
    assert float(parts[4]) == report.phi_cs
    assert float(parts[5]) == report.p_cs
    assert float(parts[6]) == report.p_combined
    assert bool(int(parts[7])) == report.degenerate_cs


# ---------------------------------------------------------------------------
# prefix detectors


def test_tp_trace_equals_per_prefix_scalars(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.KGW, keys, small_config, 60)
    det = TokenProbDetector(keys.tp.value, small_config.gamma, small_config.h)
    full = det.p_trace(trace.tokens)
    scalars = np.array([
        p_tp(trace.tokens.ids[:t], keys.tp.value, small_config.gamma, small_config.h)[2]
        for t in range(1, 61)
    ])
    assert np.array_equal(full, scalars)
    assert det.p_value(trace.tokens) == scalars[-1]
    assert det.p_trace(trace.tokens, max_len=10).shape == (10,)
    assert np.array_equal(det.p_trace(trace.tokens, max_len=10), full[:10])


def test_cs_trace_equals_per_prefix_scalars(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.CS, keys, small_config, 48)
    det = ContrastDetector(keys.cs.value, small_model, small_config.eta, small_config.L,
                           small_config.h, M=small_config.M, exclude=(keys.tp.value,))
    full = det.p_trace(trace.tokens)
    for t in (1, 2, 7, 23, 48):
        expect = p_cs(trace.tokens.ids[:t], keys.cs.value, det.decoys, small_model,
                      small_config.eta, small_config.L, small_config.h)[0]
        assert full[t - 1] == expect
    assert det.p_value(trace.tokens) == full[-1]
    with pytest.raises(ValueError):
        ContrastDetector(keys.cs.value, small_model, 0.5, 10, 1, M=0)


def test_exp_trace_equals_per_prefix_scalars(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.EXP, keys, small_config, 60)
    exp_key = rng.derive_key(keys.cs.value, rng.SALT_EXP_STREAM)
    det = ExpDetector(exp_key, small_config.h)
    full = det.p_trace(trace.tokens)
    for t in (1, 5, 20, 60):
        _, expect = exp_detect(trace.tokens.ids[:t], exp_key, small_config.h)
        assert full[t - 1] == pytest.approx(expect, abs=1e-12)


def test_fisher_pair_combines_component_traces(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.DUAL, keys, small_config, 40)
    tp = TokenProbDetector(keys.tp.value, small_config.gamma, small_config.h)
    cs = ContrastDetector(keys.cs.value, small_model, small_config.eta, small_config.L,
                          small_config.h, M=small_config.M, exclude=(keys.tp.value,))
    pair = FisherPairDetector(tp, cs)
    assert pair.name == "tp+cs"
    a = np.maximum(tp.p_trace(trace.tokens), _P_FLOOR)
    b = np.maximum(cs.p_trace(trace.tokens), _P_FLOOR)
    half = -(np.log(a) + np.log(b))
    assert np.array_equal(pair.p_trace(trace.tokens), np.exp(-half) * (1.0 + half))


def test_scheme_detector_shapes_and_names(small_model, keys, small_config):
    det = scheme_detector(Scheme.KGW, keys, small_config, small_model)
    assert isinstance(det, TokenProbDetector) and det.name == "tp"
    det = scheme_detector(Scheme.EXP, keys, small_config, small_model)
    assert isinstance(det, ExpDetector) and det.name == "exp"
    assert det.key == rng.derive_key(keys.cs.value, rng.SALT_EXP_STREAM)
    det = scheme_detector(Scheme.CS, keys, small_config, small_model)
    assert isinstance(det, ContrastDetector) and det.name == "cs"
    assert keys.tp.value not in det.decoys and keys.cs.value not in det.decoys
    assert scheme_detector(Scheme.KGW_EXP, keys, small_config, small_model).name == "tp+exp"
    assert scheme_detector(Scheme.EXP_CS, keys, small_config, small_model).name == "exp+cs"
    assert scheme_detector(Scheme.DUAL, keys, small_config, small_model).name == "dual"
    assert scheme_detector(Scheme.NONE, keys, small_config, small_model).name == "dual"
    assert scheme_detector("dual", keys, small_config, small_model).name == "dual"


def test_detector_recomputes_trace_streams(small_model, keys, small_config, prompt8):
    """Detection-side streams replay the generation-side records exactly."""
    for seed in range(5):
        trace = generate(small_model, prompt8, Scheme.DUAL, keys, small_config, 40,
                         sampling_seed=seed)
        ids = trace.tokens.ids
        seeds = rng.context_seeds(ids, small_config.h)
        green = rng.u01_array(keys.tp.value, seeds, ids.astype(np.uint64)) < small_config.gamma
        assert green.tolist() == [s.green for s in trace.steps]
        member = _membership(np.array([keys.cs.value], dtype=np.uint64), seeds,
                             small_config.eta)[0]
        assert member.tolist() == [s.contrastive for s in trace.steps]
        r = [rng.u01(keys.cs.value, int(sd), 0) for sd in seeds]
        assert r == [s.r for s in trace.steps]


# ---------------------------------------------------------------------------
# detection efficiency


def test_efficiency_all_green_crosses_at_five_tokens(keys):
    ids = _all_green_ids(keys.tp.value, 0.5, 1, 40)
    det = TokenProbDetector(keys.tp.value, 0.5, 1)
    eff = detection_efficiency(ids, det, 0.02, 1024)
    # T=4 gives z=2 (p~0.0228 > 0.02); T=5 gives z=sqrt(5) (p~0.0127).
    assert eff.t_star == 5
    assert eff.label == "5"
    assert eff.p_trace.size == 40


def test_efficiency_sentinel_when_nothing_crosses(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.NONE, keys, small_config, 64)
    det = TokenProbDetector(keys.tp.value, small_config.gamma, small_config.h)
    eff = detection_efficiency(trace.tokens, det, 1e-9, 32)
    assert eff.t_star is None
    assert eff.label == ">32"
    assert eff.p_trace.size == 32


def test_efficiency_is_first_crossing_of_its_own_trace(small_model, keys, small_config, prompt8):
    trace = generate(small_model, prompt8, Scheme.DUAL, keys, small_config, 80)
    det = scheme_detector(Scheme.DUAL, keys, small_config, small_model)
    for thr in (0.001, 0.02, 0.2):
        eff = detection_efficiency(trace.tokens, det, thr, 80)
        hits = np.flatnonzero(eff.p_trace <= thr)
        if hits.size:
            assert eff.t_star == int(hits[0]) + 1
        else:
            assert eff.t_star is None


def test_efficiency_validation(keys):
    det = TokenProbDetector(keys.tp.value, 0.5, 1)
    ids = np.arange(5, dtype=np.int64)
    for thr in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            detection_efficiency(ids, det, thr, 10)
    with pytest.raises(ValueError):
        detection_efficiency(ids, det, 0.02, 0)
