"""Dual watermarking for autoregressive token generation.

Two keyed watermarks share one generation loop: a token-probability
watermark that biases the sampling distribution toward a keyed "green"
vocabulary split, and a contrastive-sampling watermark that steers a
keyed subset of positions toward low self-similarity picks from the
top-k candidates. Detection combines a green-count z-test with a
decoy-calibrated similarity rank test via Fisher's method.

The package is organized by workflow:

* `dualmark.core` — token sequences, vocabulary, configuration;
* `dualmark.rng` — the keyed counter-based randomness everything
  shares (bit-exact contract in docs/RNG.md);
* `dualmark.lm` — the model interface, the deterministic mock model,
  and a subprocess adapter for external logit providers;
* `dualmark.generate` — sampling schemes and step-by-step traces;
* `dualmark.detect` — detection statistics, p-value traces, and
  detection-efficiency scans;
* `dualmark.attack` — post-editing attacks and their resource maps;
* `dualmark.bench` — benchmark harness, null calibration, ablation;
* `dualmark.theory` — Monte-Carlo verification of the scheme's
  green-count and perplexity bounds;
* `dualmark.cli` — the ``dualmark`` command.

The names most workflows need are re-exported here.
"""

from .attack import (AttackKind, AttackMaps, AttackSpec, RewriteClient,
                     StubRewriteClient, apply_attack, attack_grid, load_maps,
                     write_default_maps)
from .bench import (AblationReport, BenchConfig, BenchReport, FprReport,
                    detector_ablation, diversity, fpr_experiment,
                    load_bench_config, parse_grade, rate_texts, run_bench,
                    save_bench_config, text_bases, text_keys)
from .core import (AttackUnavailableError, InvalidDistributionError,
                   InvalidLogitsError, MissingMapError, TokenSeq,
                   UndefinedTestError, Vocabulary, WatermarkConfig,
                   build_demo_vocab, detokenize, load_corpus, softmax,
                   tokenize)
from .detect import (DetectionReport, EfficiencyResult, detection_efficiency,
                     dual_detect, exp_detect, fisher_combine, p_cs, p_tp,
                     scheme_detector)
from .generate import GenerationTrace, Scheme, StepRecord, generate
from .lm import LanguageModel, MockLM, SubprocessLM, UniformLM, spike_entropy
from .rng import KeySet, WatermarkKey, derive_key
from .theory import (BoundCheckResult, EntropyProfile, PerplexityCheckResult,
                     TheoryReport, verify_dual_bound, verify_grid,
                     verify_perplexity_bound, verify_topk_bound)

__version__ = "0.1.0"

__all__ = [
    "AblationReport",
    "AttackKind",
    "AttackMaps",
    "AttackSpec",
    "AttackUnavailableError",
    "BenchConfig",
    "BenchReport",
    "BoundCheckResult",
    "DetectionReport",
    "EfficiencyResult",
    "EntropyProfile",
    "FprReport",
    "GenerationTrace",
    "InvalidDistributionError",
    "InvalidLogitsError",
    "KeySet",
    "LanguageModel",
    "MissingMapError",
    "MockLM",
    "PerplexityCheckResult",
    "RewriteClient",
    "Scheme",
    "StepRecord",
    "StubRewriteClient",
    "SubprocessLM",
    "TheoryReport",
    "TokenSeq",
    "UndefinedTestError",
    "UniformLM",
    "Vocabulary",
    "WatermarkConfig",
    "WatermarkKey",
    "apply_attack",
    "attack_grid",
    "build_demo_vocab",
    "derive_key",
    "detection_efficiency",
    "detector_ablation",
    "detokenize",
    "diversity",
    "dual_detect",
    "exp_detect",
    "fisher_combine",
    "fpr_experiment",
    "generate",
    "load_bench_config",
    "load_corpus",
    "load_maps",
    "p_cs",
    "p_tp",
    "parse_grade",
    "rate_texts",
    "run_bench",
    "save_bench_config",
    "scheme_detector",
    "softmax",
    "spike_entropy",
    "text_bases",
    "text_keys",
    "tokenize",
    "verify_dual_bound",
    "verify_grid",
    "verify_perplexity_bound",
    "verify_topk_bound",
    "write_default_maps",
]
