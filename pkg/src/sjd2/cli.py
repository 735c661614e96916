"""Command-line entry point.

Subcommands: gen-corpus, train, decode, compare, sweep, analyze-trajectory.
Every successful command prints one JSON line of results to stdout; failures
print one JSON line to stderr and exit with a documented code. Global seeds
fully determine all outputs except wall-clock fields. JDD2_THREADS caps the
worker count for compare/sweep sessions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import bench_metrics, corpus as corpus_mod
from .checkpoint import fresh_model, load_checkpoint, save_checkpoint
from .config import (config_hash, load_corpus_spec, load_run_config,
                     normalize_corpus_spec, with_defaults)
from .decoding import DecodeConfig, decode_session, write_trace, read_trace
from .errors import (CapacityError, ConfigMismatchError, ConfigurationError,
                     ContractViolation, FormatError, SJD2Error,
                     TrainingDivergedError, TruncationError)
from .model import ModelConfig, bos_token
from .schedules import build_schedule
from .training import train_model, write_loss_csv

EXIT_CODES = """\
exit codes:
  0  success
  1  internal error
  2  invalid arguments or configuration
  3  missing or malformed input file
  4  config-hash mismatch between artifacts
  5  decode hit the forward-pass cap (truncated)
"""


def _emit(obj):
    print(json.dumps(obj, separators=(",", ":")))


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message},
                     separators=(",", ":")), file=sys.stderr)
    return code


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("JDD2_THREADS", "1")))
    except ValueError:
        return 1


def _run_parallel(jobs):
    """Run zero-arg callables, preserving order; JDD2_THREADS > 1 enables a pool."""
    n = _threads()
    if n <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=min(n, len(jobs))) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    if args.spec:
        spec = load_corpus_spec(args.spec)
        if spec["kind"] != args.kind:
            raise ConfigurationError(
                f"--kind {args.kind} disagrees with spec kind {spec['kind']}")
    else:
        spec = normalize_corpus_spec({"kind": args.kind})
    chash = config_hash({"corpus": spec, "seed": args.seed})
    if args.kind == "markov":
        source = corpus_mod.random_chain(spec["order"], spec["vocab"], args.seed,
                                         spec["concentration"])
        seqs = corpus_mod.gen_markov(source, spec["num_sequences"], spec["seq_len"])
        vocab = spec["vocab"]
    else:
        gspec = corpus_mod.GridCorpusSpec(
            height=spec["height"], width=spec["width"], vocab=spec["vocab"],
            patterns=tuple(spec["patterns"]), seed=args.seed)
        seqs = corpus_mod.gen_grid(gspec, spec["num_images"])
        vocab = spec["vocab"]
    corpus_mod.write_corpus(args.out, seqs, args.kind, args.seed, vocab, chash)
    _emit({"command": "gen-corpus", "kind": args.kind, "out": args.out,
           "sequences": int(len(seqs)), "seq_len": int(seqs.shape[1]),
           "vocab": vocab, "config_hash": chash})
    return 0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    chash = config_hash(cfg)
    header, sequences = corpus_mod.read_corpus(args.corpus)
    corpus_hash = header.get("config_hash", "")
    corpus_vocab = header.get("vocab", int(max(s.max() for s in sequences)) + 1)
    mcfg = ModelConfig(**cfg["model"])
    if corpus_vocab + 2 > mcfg.vocab_size:
        raise ConfigurationError(
            f"model vocab {mcfg.vocab_size} too small for corpus vocab "
            f"{corpus_vocab} plus 2 specials")
    sch = cfg["schedule"]
    coeffs, grid = build_schedule(sch["num_steps"], sch["t_min"], sch["t_max"],
                                  sch["warp"], sch["rho"])
    if args.init:
        model, init_header = load_checkpoint(args.init)
        if init_header["model"] != cfg["model"]:
            raise ConfigMismatchError(
                "init checkpoint model config disagrees with --config")
    else:
        model = fresh_model(mcfg)
    tr = cfg["training"]
    history = []
    seed = cfg["seed"]
    common = dict(batch_size=tr["batch_size"], coeffs=coeffs, grid=grid,
                  lr=tr["lr"], weight_decay=tr["weight_decay"],
                  crop_len=tr["crop_len"], window_min=tr["window_min"],
                  window_max=tr["window_max"], level_mode=tr["level_mode"])
    if args.noise_augment and tr["pretrain_steps"]:
        history += train_model(model, sequences, tr["pretrain_steps"],
                               noise_augment=False, seed=seed, **common)
    history += train_model(model, sequences, tr["steps"],
                           noise_augment=args.noise_augment,
                           seed=seed + 1 if args.noise_augment else seed,
                           **common)
    save_checkpoint(model, args.out, config_hash=chash, corpus_hash=corpus_hash)
    if args.loss_csv:
        write_loss_csv(history, args.loss_csv)
    final = history[-1][1] if history else float("nan")
    _emit({"command": "train", "out": args.out, "steps": len(history),
           "final_loss": final, "config_hash": chash,
           "corpus_hash": corpus_hash})
    return 0


# ---------------------------------------------------------------------------
# decoding and comparisons
# ---------------------------------------------------------------------------

def _decode_config(args, seed: int) -> DecodeConfig:
    acceptance = {"strict": "strict_speculative",
                  "paper": "paper_threshold"}[args.acceptance]
    return DecodeConfig(
        mode=args.mode, window=args.window, steps=args.steps,
        temperature=args.temperature, top_k=args.top_k,
        acceptance_mode=acceptance,
        require_clean_for_accept=args.require_clean,
        immediate_accept=args.immediate_accept,
        normalization_enabled=not args.no_normalize,
        max_forwards=args.max_forwards, seed=seed)


def _load_prompt_corpus(args, ckpt_header) -> list | None:
    if not args.corpus:
        return None
    header, seqs = corpus_mod.read_corpus(args.corpus)
    ck = ckpt_header.get("corpus_hash", "")
    ch = header.get("config_hash", "")
    if ck and ch and ck != ch and not args.allow_corpus_mismatch:
        raise ConfigMismatchError(
            f"corpus hash {ch} does not match checkpoint corpus hash {ck}; "
            f"pass --allow-corpus-mismatch for held-out evaluation")
    return seqs


def _make_prompt(model, prompt_len: int, seqs, rng, args) -> list:
    """Prompt = BOS plus corpus tokens (or self-sampled tokens without a corpus)."""
    bos = bos_token(model.config)
    if prompt_len < 1:
        raise ConfigurationError("prompt length must be >= 1")
    if prompt_len == 1:
        return [bos]
    if seqs is not None:
        seq = seqs[int(rng.integers(len(seqs)))]
        if len(seq) < prompt_len - 1:
            raise ConfigurationError(
                f"corpus sequences of {len(seq)} tokens cannot fill prompt "
                f"length {prompt_len}")
        return [bos] + [int(t) for t in seq[:prompt_len - 1]]
    warm = DecodeConfig(mode="ar", temperature=args.temperature,
                        top_k=args.top_k, seed=0)
    res = decode_session(model, [bos], prompt_len - 1, warm, rng=rng)
    return [bos] + res.tokens


def _session_job(model, prompt, args, run_seed):
    cfgd = _decode_config(args, run_seed)
    rng = np.random.default_rng([args.seed, run_seed, 0xDEC])
    return decode_session(model, prompt, args.n, cfgd, rng=rng)


def cmd_decode(args) -> int:
    model, header = load_checkpoint(args.ckpt)
    seqs = _load_prompt_corpus(args, header)
    rng_prompt = np.random.default_rng([args.seed, 0x9807])
    prompt = _make_prompt(model, args.prompt_len, seqs, rng_prompt, args)
    cfgd = _decode_config(args, args.seed)
    run_doc = {"checkpoint_hash": header.get("config_hash", ""),
               "decode": vars(cfgd).copy(), "n": args.n,
               "prompt_len": args.prompt_len, "seed": args.seed}
    run_hash = config_hash(run_doc)
    rng = np.random.default_rng([args.seed, args.seed, 0xDEC])
    result = decode_session(model, prompt, args.n, cfgd, rng=rng)
    report = bench_metrics.make_report(result, run_hash, args.seed)
    if args.report:
        bench_metrics.write_report(report, args.format, args.report)
    if args.trace:
        write_trace(result.trace, args.trace, config_hash=run_hash)
    if args.tokens_out:
        with open(args.tokens_out, "w") as f:
            json.dump({"config_hash": run_hash, "tokens": result.tokens}, f)
            f.write("\n")
    _emit({"command": "decode", "mode": args.mode, "n": len(result.tokens),
           "forwards": result.forwards, "s": report.s,
           "wall_time_ms": result.wall_forward_ms, "config_hash": run_hash,
           "seed": args.seed})
    return 0


def cmd_compare(args) -> int:
    model, header = load_checkpoint(args.ckpt)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seqs = _load_prompt_corpus(args, header)
    prompts = []
    for s in range(args.seeds):
        rng_prompt = np.random.default_rng([args.seed, s, 0x9807])
        prompts.append(_make_prompt(model, args.prompt_len, seqs, rng_prompt, args))

    per_mode = {}
    for mode in modes:
        margs = argparse.Namespace(**vars(args))
        margs.mode = mode
        jobs = [lambda s=s, margs=margs: _session_job(model, prompts[s], margs, s)
                for s in range(args.seeds)]
        results = _run_parallel(jobs)
        runs = []
        for s, res in enumerate(results):
            runs.append({"seed": s, "tokens": res.tokens,
                         "forwards": res.forwards,
                         "s": bench_metrics.step_compression(len(res.tokens),
                                                             res.forwards),
                         "wall_time_ms": res.wall_forward_ms})
        per_mode[mode] = {
            "runs": runs,
            "mean_s": float(np.mean([r["s"] for r in runs])),
            "mean_forwards": float(np.mean([r["forwards"] for r in runs])),
        }
    doc = {"checkpoint_hash": header.get("config_hash", ""), "modes": modes,
           "n": args.n, "prompt_len": args.prompt_len, "seeds": args.seeds,
           "seed": args.seed}
    run_hash = config_hash(doc)
    out = {"report_version": 1, "config_hash": run_hash, "modes": per_mode}
    if args.report:
        with open(args.report, "w") as f:
            json.dump(out, f, indent=2)
            f.write("\n")
    _emit({"command": "compare", "config_hash": run_hash,
           "mean_s": {m: per_mode[m]["mean_s"] for m in modes}})
    return 0


def cmd_sweep(args) -> int:
    model, header = load_checkpoint(args.ckpt)
    seqs = _load_prompt_corpus(args, header)
    windows = [int(x) for x in args.window_grid.split(",")]
    steps_grid = [int(x) for x in args.steps_grid.split(",")]
    prompts = []
    for s in range(args.seeds):
        rng_prompt = np.random.default_rng([args.seed, s, 0x9807])
        prompts.append(_make_prompt(model, args.prompt_len, seqs, rng_prompt, args))
    rows = []
    for L in windows:
        for T in steps_grid:
            margs = argparse.Namespace(**vars(args))
            margs.window = L
            margs.steps = T
            jobs = [lambda s=s, margs=margs: _session_job(model, prompts[s], margs, s)
                    for s in range(args.seeds)]
            results = _run_parallel(jobs)
            rows.append({
                "L": L, "T": T,
                "S": float(np.mean([len(r.tokens) / r.forwards for r in results])),
                "forwards": float(np.mean([r.forwards for r in results])),
                "wall_time_ms": float(np.mean([r.wall_forward_ms for r in results])),
            })
    bench_metrics.write_sweep_csv(rows, args.csv)
    _emit({"command": "sweep", "rows": len(rows), "csv": args.csv})
    return 0


def cmd_analyze_trajectory(args) -> int:
    header, records = read_trace(args.trace)
    if ".." in args.slots:
        lo, hi = args.slots.split("..")
        slots = list(range(int(lo), int(hi) + 1))
    else:
        slots = [int(x) for x in args.slots.split(",")]
    changes, cumulative = bench_metrics.token_change_trajectory(records, slots)
    bench_metrics.write_trajectory_csv(cumulative, args.csv)
    _emit({"command": "analyze-trajectory", "csv": args.csv,
           "changes": {str(k): v for k, v in changes.items()},
           "config_hash": header.get("config_hash", "")})
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_decode_flags(p, with_mode=True):
    if with_mode:
        p.add_argument("--mode", choices=["ar", "jacobi", "sjd", "sjd2"],
                       default="sjd2")
    p.add_argument("--prompt-len", type=int, default=8)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--window", type=int, default=96)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=2000)
    p.add_argument("--acceptance", choices=["strict", "paper"], default="strict")
    p.add_argument("--require-clean", action="store_true")
    p.add_argument("--immediate-accept", action="store_true")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--max-forwards", type=int, default=None)
    p.add_argument("--corpus", default=None,
                   help="corpus JSONL to draw prompts from")
    p.add_argument("--allow-corpus-mismatch", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sjd2",
        description="Speculative Jacobi-denoising decoding benchmark harness",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--kind", choices=["markov", "grid"], required=True)
    p.add_argument("--spec", default=None, help="corpus spec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("train", help="train or fine-tune the toy model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--noise-augment", action="store_true")
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="run one decode session")
    p.add_argument("--ckpt", required=True)
    _add_decode_flags(p)
    p.add_argument("--report", default=None)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--trace", default=None)
    p.add_argument("--tokens-out", default=None)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("compare", help="paired runs of several modes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--modes", required=True, help="comma-separated mode list")
    p.add_argument("--seeds", type=int, default=5)
    _add_decode_flags(p, with_mode=False)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=cmd_compare, mode="sjd2")

    p = sub.add_parser("sweep", help="window x steps grid sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--window-grid", required=True)
    p.add_argument("--steps-grid", required=True)
    p.add_argument("--seeds", type=int, default=3)
    _add_decode_flags(p)
    p.add_argument("--csv", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("analyze-trajectory", help="token-change analysis of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--slots", default="0..4",
                   help="comma list or lo..hi range of window offsets")
    p.add_argument("--csv", required=True)
    p.set_defaults(fn=cmd_analyze_trajectory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, ContractViolation, CapacityError,
            TrainingDivergedError) as e:
        return _fail(2, type(e).__name__, str(e))
    except FileNotFoundError as e:
        return _fail(3, "FileNotFoundError", str(e))
    except FormatError as e:
        return _fail(3, "FormatError", str(e))
    except ConfigMismatchError as e:
        return _fail(4, "ConfigMismatchError", str(e))
    except TruncationError as e:
        return _fail(5, "TruncationError", str(e))
    except SJD2Error as e:
        return _fail(1, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
