"""Command-line front end: one subcommand per workflow.

``generate`` emits watermarked token ids (and optionally the full
step-by-step trace file), ``detect`` scores token sequences with the
detection statistics, ``attack`` applies a post-editing attack to token
sequences, ``bench`` runs a benchmark config file end to end, ``fpr``
measures null calibration, and ``verify-theory`` runs the Monte-Carlo
bound checks. Token streams are whitespace-separated decimal ids, one
sequence per line, read from a file or ``-`` for stdin; all file
formats are documented in docs/FORMATS.md and the config schema in
docs/CONFIG.md.

Keys are never taken on the command line: every per-text key chain is
derived from ``--seed`` and the text index, exactly as the benchmark
derives them, so a text generated here is detectable here (and by the
library) from the same seed. The external rewrite endpoint and its
credentials come exclusively from environment variables (see
docs/CLIENT.md).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .attack import AttackKind, AttackMaps, AttackSpec, RewriteClient, apply_attack, load_maps
from .bench import (fpr_experiment, load_bench_config, run_bench, text_bases,
                    text_detector_seed, text_keys, text_sampling_seed)
from .bench import derive_prompts
from .core import TokenSeq, WatermarkConfig, build_demo_vocab
from .detect import REPORT_COLUMNS, detection_efficiency, dual_detect, report_line, scheme_detector
from .generate import Scheme, generate
from .lm import MockLM
from .theory import verify_grid

__all__ = ["main"]

_W_DEFAULT = WatermarkConfig()

# Environment variables for the external rewrite endpoint; the bearer
# token itself is read by RewriteClient at call time (REWRITE_API_TOKEN
# by default). No credential or endpoint is ever accepted as a flag.
ENDPOINT_ENV = "REWRITE_API_ENDPOINT"
MODEL_ENV = "REWRITE_API_MODEL"


def _add_model_flags(sub: argparse.ArgumentParser, vocab_size: int = 1000,
                     dim: int = 32) -> None:
    g = sub.add_argument_group("mock model")
    g.add_argument("--vocab-size", type=int, default=vocab_size,
                   help=f"vocabulary size (default {vocab_size})")
    g.add_argument("--dim", type=int, default=dim,
                   help=f"embedding width (default {dim})")
    g.add_argument("--model-seed", type=int, default=7,
                   help="model seed (default 7)")
    g.add_argument("--temperature", type=float, default=None,
                   help="sampling temperature (default: model default)")


def _make_model(args: argparse.Namespace) -> MockLM:
    kwargs = dict(vocab_size=args.vocab_size, dim=args.dim,
                  model_seed=args.model_seed)
    if args.temperature is not None:
        kwargs["temperature"] = args.temperature
    return MockLM(**kwargs)


def _add_watermark_flags(sub: argparse.ArgumentParser) -> None:
    g = sub.add_argument_group("watermark parameters")
    g.add_argument("--gamma", type=float, default=_W_DEFAULT.gamma)
    g.add_argument("--delta", type=float, default=_W_DEFAULT.delta)
    g.add_argument("--eta", type=float, default=_W_DEFAULT.eta)
    g.add_argument("--alpha", type=float, default=_W_DEFAULT.alpha)
    g.add_argument("--k", type=int, default=_W_DEFAULT.k,
                   help="contrastive candidate pool size")
    g.add_argument("--L", type=int, default=_W_DEFAULT.L,
                   help="similarity window length")
    g.add_argument("--h", type=int, default=_W_DEFAULT.h,
                   help="seeding context width")
    g.add_argument("--M", type=int, default=_W_DEFAULT.M,
                   help="decoy key count for the rank test")


def _make_config(args: argparse.Namespace) -> WatermarkConfig:
    return WatermarkConfig(gamma=args.gamma, delta=args.delta, eta=args.eta,
                           alpha=args.alpha, k=args.k, L=args.L, h=args.h,
                           M=args.M)


def _read_token_lines(path: str) -> list[np.ndarray]:
    """One token sequence per non-empty line of ``path`` (or stdin)."""
    text = sys.stdin.read() if path == "-" else Path(path).read_text(encoding="utf-8")
    out = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(np.array([int(t) for t in line.split()], dtype=np.int64))
        except ValueError as exc:
            raise SystemExit(f"line {n}: token ids must be integers ({exc})")
    if not out:
        raise SystemExit("no token sequences in input")
    return out


def _parse_list(text: str, cast):
    return tuple(cast(part) for part in text.split(",") if part.strip())


def _cmd_generate(args: argparse.Namespace) -> int:
    model = _make_model(args)
    config = _make_config(args)
    base = int(text_bases(args.seed, 1, start=args.text_index)[0])
    keys = text_keys(base)
    if args.prompt is not None:
        prompt = [int(t) for t in args.prompt.replace(",", " ").split()]
    else:
        prompt = derive_prompts(np.array([base], dtype=np.uint64),
                                model.vocab_size)[0]
    trace = generate(model, prompt, Scheme(args.scheme), keys, config,
                     args.length, sampling_seed=text_sampling_seed(base))
    print(" ".join(str(int(t)) for t in trace.tokens.ids))
    if args.out:
        trace.save(args.out)
        print(f"trace written to {args.out}", file=sys.stderr)
    return 0


def _cmd_detect(args: argparse.Namespace) -> int:
    model = _make_model(args)
    config = _make_config(args)
    thresholds = _parse_list(args.thresholds, float)
    sequences = _read_token_lines(args.tokens)
    header = ["text_index", "T", "p_tp", "p_cs", "p_combined"]
    header += [f"t_star_q{q:g}" for q in thresholds]
    print("\t".join(header))
    record_lines = []
    for i, ids in enumerate(sequences):
        base = int(text_bases(args.seed, 1, start=args.text_index + i)[0])
        keys = text_keys(base)
        det_seed = text_detector_seed(base)
        report = dual_detect(ids, keys, config, model, detector_seed=det_seed)
        record_lines.append(report_line(report))
        detector = scheme_detector(Scheme(args.scheme), keys, config, model,
                                   detector_seed=det_seed)
        cells = [str(args.text_index + i), str(report.T), f"{report.p_tp:.6g}",
                 f"{report.p_cs:.6g}", f"{report.p_combined:.6g}"]
        for q in thresholds:
            eff = detection_efficiency(ids, detector, q, ids.size)
            cells.append(eff.label)
        print("\t".join(cells))
    if args.out:
        Path(args.out).write_text("\n".join(record_lines) + "\n", encoding="utf-8")
        print(f"records written to {args.out}", file=sys.stderr)
    if args.csv:
        import csv

        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for line in record_lines:
                writer.writerow(line.split("\t"))
        print(f"summary written to {args.csv}", file=sys.stderr)
    return 0


def _cmd_attack(args: argparse.Namespace) -> int:
    spec = AttackSpec.parse(args.attack, attack_seed=args.seed)
    model = _make_model(args)
    vocab = build_demo_vocab(args.vocab_size)
    client = None
    if spec.kind is AttackKind.EXTERNAL_REWRITE:
        endpoint = os.environ.get(ENDPOINT_ENV, "")
        if not endpoint:
            raise SystemExit(
                f"external-rewrite needs an endpoint in ${ENDPOINT_ENV} "
                f"(bearer token via $REWRITE_API_TOKEN; see docs/CLIENT.md)")
        client = RewriteClient(
            endpoint, mode=args.rewrite_mode, lang=args.rewrite_lang,
            model=os.environ.get(MODEL_ENV, "gpt-3.5-turbo"))
    if args.maps:
        maps = load_maps(args.maps, vocab, client=client)
    else:
        maps = AttackMaps.for_model(model, vocab, client=client)
    lines = []
    for ids in _read_token_lines(args.tokens):
        attacked = apply_attack(TokenSeq(ids), spec, maps)
        lines.append(" ".join(str(int(t)) for t in attacked.ids))
    body = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(body, encoding="utf-8")
        print(f"attacked tokens written to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(body)
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    config = load_bench_config(args.config)
    overrides = {}
    if args.out:
        overrides["out_dir"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        config = dataclasses.replace(config, **overrides)
    report = run_bench(config, verbose=not args.quiet)
    print(f"summary: {report.summary_path()}")
    return 0


def _cmd_fpr(args: argparse.Namespace) -> int:
    model = _make_model(args)
    report = fpr_experiment(
        n_texts=args.n, length=args.length,
        detectors=_parse_list(args.detectors, str),
        thresholds=_parse_list(args.thresholds, float),
        corpus=args.corpus, scheme=Scheme(args.scheme),
        master_seed=args.seed, model=model, verbose=not args.quiet)
    print(report.table())
    if args.out:
        report.save_csv(args.out)
        print(f"rates written to {args.out}", file=sys.stderr)
    return 0 if report.all_passed else 1


def _cmd_verify_theory(args: argparse.Namespace) -> int:
    model = _make_model(args)
    report = verify_grid(
        model, gammas=_parse_list(args.gammas, float),
        deltas=_parse_list(args.deltas, float), ks=_parse_list(args.ks, int),
        length=args.length, trials=args.trials, master_seed=args.seed,
        verbose=not args.quiet)
    print(report.table())
    if args.out:
        report.save_csv(args.out)
        print(f"results written to {args.out}", file=sys.stderr)
    return 0 if report.all_passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualmark",
        description="Dual watermarking for token generation: generate, "
                    "detect, attack, benchmark, calibrate, verify bounds.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="generate watermarked token ids")
    p.add_argument("--scheme", default="dual",
                   choices=[s.value for s in Scheme])
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--seed", type=int, default=97531,
                   help="master seed for the per-text key chain")
    p.add_argument("--text-index", type=int, default=0,
                   help="which text of the seed's family to produce")
    p.add_argument("--prompt", default=None,
                   help="prompt ids (default: derived from the seed)")
    p.add_argument("--out", default=None, help="write the full trace here")
    _add_model_flags(p)
    _add_watermark_flags(p)
    p.set_defaults(func=_cmd_generate)

    p = subs.add_parser("detect", help="score token sequences")
    p.add_argument("--tokens", required=True,
                   help="token file, one sequence per line, or - for stdin")
    p.add_argument("--scheme", default="dual",
                   choices=[s.value for s in Scheme],
                   help="detector used for the efficiency scan")
    p.add_argument("--seed", type=int, default=97531)
    p.add_argument("--text-index", type=int, default=0,
                   help="key-chain index of the first input line")
    p.add_argument("--thresholds", default="0.02,0.05")
    p.add_argument("--out", default=None, help="line-delimited report records")
    p.add_argument("--csv", default=None, help="CSV report summary")
    _add_model_flags(p)
    _add_watermark_flags(p)
    p.set_defaults(func=_cmd_detect)

    p = subs.add_parser("attack", help="post-edit token sequences")
    p.add_argument("--attack", required=True,
                   help="attack label, e.g. synonym-25 or lowercase")
    p.add_argument("--tokens", required=True,
                   help="token file, one sequence per line, or - for stdin")
    p.add_argument("--seed", type=int, default=0, help="attack seed")
    p.add_argument("--out", default=None, help="output token file (default stdout)")
    p.add_argument("--maps", default=None,
                   help="directory of map files (default: built-in tables)")
    p.add_argument("--rewrite-mode", default="paraphrase",
                   choices=RewriteClient.MODES)
    p.add_argument("--rewrite-lang", default=None)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_attack)

    p = subs.add_parser("bench", help="run a benchmark config end to end")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_bench)

    p = subs.add_parser("fpr", help="measure null calibration")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--length", type=int, default=260)
    p.add_argument("--seed", type=int, default=424242)
    p.add_argument("--thresholds", default="0.01,0.02,0.05,0.1")
    p.add_argument("--detectors", default="tp,exp,cs,combined")
    p.add_argument("--scheme", default="none",
                   choices=[s.value for s in Scheme],
                   help="generation scheme (none = the null hypothesis)")
    p.add_argument("--corpus", default="mock",
                   help='"mock" or a corpus file of real token lines')
    p.add_argument("--out", default=None, help="CSV of the measured rates")
    p.add_argument("--quiet", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_fpr)

    p = subs.add_parser("verify-theory", help="Monte-Carlo bound checks")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--seed", type=int, default=30000)
    p.add_argument("--gammas", default="0.25,0.5")
    p.add_argument("--deltas", default="0,2.5,3.5")
    p.add_argument("--ks", default="1,10,20")
    p.add_argument("--out", default=None, help="CSV of all checks")
    p.add_argument("--quiet", action="store_true")
    _add_model_flags(p, vocab_size=256, dim=16)
    p.set_defaults(func=_cmd_verify_theory)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
