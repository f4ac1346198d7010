"""Command-line entry point.

Subcommands: train, translate, score, diversity, bench, selftest,
avg-checkpoints, distill. Every run directory carries config.txt (whose
digest is embedded in each checkpoint), the vocabularies, metrics.jsonl,
and step-stamped checkpoints plus a best-k manifest.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .backend import backend_name
from .bench import DEFAULT_BATCH_SIZES, ar_decode_fn, flow_decode_fn, latency_benchmark
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    ParallelCorpus,
    TokenBatch,
    Vocabulary,
    build_vocab,
    load_parallel_files,
    make_batch,
    split_corpus,
    synth_corpus,
)
from .decoding import ARTransformer, DecodeConfig, argmax_decode, decode
from .flow import FlowSingularityError
from .metrics import corpus_bleu, loo_bleu, pairwise_bleu
from .model import LatentFlowModel
from .rng import RandomSource
from .selftest import run_selftest
from .training import TrainingDiverged, average_checkpoints, train, train_ar


class UsageError(ValueError):
    pass


# -- run-directory plumbing -----------------------------------------------------


def load_corpus(cfg: RunConfig) -> ParallelCorpus:
    task = cfg["data.task"]
    if task == "none":
        if not cfg["data.src"] or not cfg["data.tgt"]:
            raise UsageError("data.task=none needs data.src and data.tgt corpus paths")
        return load_parallel_files(cfg["data.src"], cfg["data.tgt"], cfg["data.max_src_len"], cfg["data.max_tgt_len"])
    return synth_corpus(
        task,
        cfg["data.vocab_size"],
        (cfg["data.len_lo"], cfg["data.len_hi"]),
        cfg["data.n_pairs"],
        cfg["train.seed"],
    )


def build_vocabs(cfg: RunConfig, corpus: ParallelCorpus) -> tuple[Vocabulary, Vocabulary]:
    if cfg["data.shared_vocab"]:
        v = build_vocab(corpus, cfg["data.min_count"], shared=True)
        return v, v
    return build_vocab(corpus, cfg["data.min_count"], shared=False)


def save_run_dir(out: Path, cfg: RunConfig, sv: Vocabulary, tv: Vocabulary, kind: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    sv.save(out / "vocab.src.txt")
    tv.save(out / "vocab.tgt.txt")
    (out / "kind.txt").write_text(kind + "\n", encoding="utf-8")


def resolve_run(path_str: str) -> tuple[Path, Path]:
    """Accept a run dir or a checkpoint file; return (run_dir, checkpoint)."""
    p = Path(path_str)
    if p.is_dir():
        manifest = p / "best.json"
        if manifest.exists():
            m = json.loads(manifest.read_text(encoding="utf-8"))
            return p, Path(m["final"])
        ckpts = sorted((p / "checkpoints").glob("*.nckpt"))
        if not ckpts:
            raise UsageError(f"{p}: no checkpoints found")
        return p, ckpts[-1]
    run_dir = p.parent.parent if p.parent.name == "checkpoints" else p.parent
    return run_dir, p


def load_run(path_str: str, expected_kind: str):
    run_dir, ckpt = resolve_run(path_str)
    cfg = RunConfig.load(run_dir / "config.txt")
    kind_file = run_dir / "kind.txt"
    kind = kind_file.read_text(encoding="utf-8").strip() if kind_file.exists() else "flow"
    if kind != expected_kind:
        raise UsageError(f"{run_dir} holds a {kind!r} model, expected {expected_kind!r}")
    sv = Vocabulary.load(run_dir / "vocab.src.txt")
    tv = Vocabulary.load(run_dir / "vocab.tgt.txt")
    rng = RandomSource(cfg["train.seed"])
    if expected_kind == "flow":
        model = LatentFlowModel(len(sv), len(tv), cfg.model_config(), rng.spawn("model"))
    else:
        model = ARTransformer(len(sv), len(tv), cfg.ar_config(), rng.spawn("ar-model"))
    arrays, _ = load_checkpoint(ckpt, expected_digest=cfg.digest())
    model.load_state_arrays(arrays)
    model.eval()
    return model, cfg, sv, tv, run_dir


def dev_bleu_fn(sv: Vocabulary, tv: Vocabulary, num_scales: int, cap: int = 128, batch: int = 64):
    def fn(model, dev: ParallelCorpus) -> float:
        pairs = dev.pairs[:cap]
        hyps, refs = [], []
        for lo in range(0, len(pairs), batch):
            chunk = pairs[lo : lo + batch]
            src, _, _ = make_batch(chunk, sv, tv, num_scales, sort=False)
            if isinstance(model, ARTransformer):
                out = model.beam_decode(src, beam=1)
            else:
                out = argmax_decode(model, src)
            for (s, t), h in zip(chunk, out):
                hyps.append(tv.decode(h.tokens))
                refs.append(t)
        return corpus_bleu(hyps, refs).bleu

    return fn


def read_sentences(path) -> list[list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.split() for line in lines]


def source_batches(sentences: list[list[str]], sv: Vocabulary, tv: Vocabulary, num_scales: int, batch: int):
    """Batches that preserve input order (no length bucketing)."""
    for lo in range(0, len(sentences), batch):
        chunk = sentences[lo : lo + batch]
        ids = [sv.encode(s) + [1] for s in chunk]
        t_max = max(len(s) for s in ids)
        mat = np.zeros((len(ids), t_max), dtype=np.int64)
        for i, s in enumerate(ids):
            mat[i, : len(s)] = s
        lengths = np.array([len(s) for s in ids], dtype=np.int64)
        yield TokenBatch(mat, lengths=lengths, raw_lengths=lengths)


# -- subcommands -----------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag, key in [
        ("task", "data.task"),
        ("steps", "train.steps"),
        ("seed", "train.seed"),
        ("kl_zero_steps", "train.kl_zero_steps"),
        ("kl_ramp_steps", "train.kl_ramp_steps"),
        ("src", "data.src"),
        ("tgt", "data.tgt"),
        ("min_count", "data.min_count"),
        ("shared_vocab", "data.shared_vocab"),
        ("max_src_len", "data.max_src_len"),
        ("max_tgt_len", "data.max_tgt_len"),
        ("batch", "train.batch_sentences"),
    ]:
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={val}")
    cfg = RunConfig.build(args.preset, args.config, overrides)
    out = Path(args.out or f"runs/{args.model}-{cfg.digest()[:8]}-s{cfg['train.seed']}")

    corpus = load_corpus(cfg)
    train_corpus, dev = split_corpus(corpus, min(cfg["data.n_dev"], max(1, len(corpus) // 10)), cfg["train.seed"])
    sv, tv = build_vocabs(cfg, corpus)
    save_run_dir(out, cfg, sv, tv, args.model)
    rng = RandomSource(cfg["train.seed"])
    caps = (cfg["data.max_src_len"], cfg["data.max_tgt_len"])

    if args.model == "flow":
        model = LatentFlowModel(len(sv), len(tv), cfg.model_config(), rng.spawn("model"))
        n_scales = cfg["flow.n_scales"]
        result = train(
            model,
            train_corpus,
            sv,
            tv,
            cfg.train_config(),
            out,
            digest=cfg.digest(),
            dev_corpus=dev,
            eval_fn=dev_bleu_fn(sv, tv, n_scales),
            max_src_len=caps[0],
            max_tgt_len=caps[1],
        )
    else:
        model = ARTransformer(len(sv), len(tv), cfg.ar_config(), rng.spawn("ar-model"))
        tc = cfg.train_config()
        tc.steps = cfg["ar.steps"] if args.steps is None else int(args.steps)
        result = train_ar(
            model,
            train_corpus,
            sv,
            tv,
            tc,
            out,
            digest=cfg.digest(),
            dev_corpus=dev,
            eval_fn=dev_bleu_fn(sv, tv, 1),
            max_src_len=caps[0],
            max_tgt_len=caps[1],
        )
    print(f"trained {args.model} model for {result.steps_done} steps -> {result.final_checkpoint}")
    if result.dev_bleu is not None:
        print(f"last dev BLEU: {result.dev_bleu:.2f}")
    return 0


def cmd_translate(args) -> int:
    model, cfg, sv, tv, _ = load_run(args.checkpoint, "flow")
    merged = dict(cfg.values)
    for flag, key in [
        ("method", "decode.method"),
        ("l", "decode.l"),
        ("r", "decode.r"),
        ("temperature", "decode.temperature"),
        ("K", "decode.k_iwd"),
        ("beam", "decode.beam"),
    ]:
        val = getattr(args, flag)
        if val is not None:
            merged[key] = val
    dcfg = DecodeConfig(
        method=merged["decode.method"],
        l=merged["decode.l"],
        r=merged["decode.r"],
        temperature=merged["decode.temperature"],
        k_iwd=merged["decode.k_iwd"],
        beam=merged["decode.beam"],
        seed=args.seed,
    )
    rescorer = None
    if dcfg.method == "npd":
        if not args.ar_checkpoint:
            raise UsageError("npd decoding needs --ar-checkpoint")
        rescorer, _, ar_sv, ar_tv, _ = load_run(args.ar_checkpoint, "ar")
        if ar_sv.itos != sv.itos or ar_tv.itos != tv.itos:
            raise UsageError("rescorer vocabulary differs from the flow model's")

    sentences = read_sentences(args.input)
    rng = RandomSource(args.seed)
    out_lines = []
    score_lines = []
    for batch in source_batches(sentences, sv, tv, cfg["flow.n_scales"], args.batch):
        hyps = decode(model, batch, dcfg, rescorer, rng)
        for h in hyps:
            out_lines.append(" ".join(tv.decode(h.tokens)))
            score_lines.append(
                json.dumps(
                    {"score": h.score, "raw_length": h.raw_length, "latency_seconds": h.latency_seconds}
                )
            )
    Path(args.output).write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    if args.scores:
        Path(args.scores).write_text("\n".join(score_lines) + "\n", encoding="utf-8")
    print(f"wrote {len(out_lines)} hypotheses to {args.output}")
    return 0


def cmd_score(args) -> int:
    hyps = read_sentences(args.hyp)
    ref_files = [read_sentences(r) for r in args.ref]
    for rf in ref_files:
        if len(rf) != len(hyps):
            raise UsageError("hypothesis and reference files differ in line count")
    refs = [[rf[i] for rf in ref_files] for i in range(len(hyps))]
    report = corpus_bleu(hyps, refs)
    print(report)
    if report.smoothed_orders:
        print(f"note: smoothing applied at n-gram order(s) {list(report.smoothed_orders)}")
    if args.records:
        rec = {
            "bleu": report.bleu,
            "precisions": list(report.precisions),
            "brevity_penalty": report.brevity_penalty,
            "hyp_tokens": report.hyp_tokens,
            "ref_tokens": report.ref_tokens,
            "smoothed_orders": list(report.smoothed_orders),
        }
        with open(args.records, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")
    return 0


def cmd_diversity(args) -> int:
    lines = read_sentences(args.hyps)
    m = args.hyps_per_sentence
    if m < 2:
        raise UsageError("--hyps-per-sentence must be >= 2")
    if len(lines) % m != 0:
        raise UsageError(f"{len(lines)} hypothesis lines not divisible by m={m}")
    hyp_sets = [lines[i : i + m] for i in range(0, len(lines), m)]
    pw = pairwise_bleu(hyp_sets)
    print(f"pairwise BLEU over {len(hyp_sets)} sentences x {m} hypotheses: {pw:.2f}")
    rec = {"pairwise_bleu": pw, "sentences": len(hyp_sets), "hyps_per_sentence": m}
    if args.refs:
        ref_lines = read_sentences(args.refs)
        k = args.refs_per_sentence
        if len(ref_lines) % k != 0 or len(ref_lines) // k != len(hyp_sets):
            raise UsageError("reference file shape does not match hypothesis sets")
        ref_sets = [ref_lines[i : i + k] for i in range(0, len(ref_lines), k)]
        rec["loo_bleu"] = loo_bleu(hyp_sets, ref_sets)
        print(f"leave-one-out BLEU: {rec['loo_bleu']:.2f}")
    if args.records:
        with open(args.records, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")
    return 0


def cmd_bench(args) -> int:
    from narflow.data import LATENCY_BUCKETS, parse_buckets

    flow_model, cfg, sv, tv, _ = load_run(args.flow_run, "flow")
    sizes = tuple(int(x) for x in args.batch_sizes.split(",")) if args.batch_sizes else DEFAULT_BATCH_SIZES
    buckets = parse_buckets(args.buckets) if args.buckets else LATENCY_BUCKETS
    if args.src and args.tgt:
        corpus = load_parallel_files(args.src, args.tgt, cfg["data.max_src_len"], cfg["data.max_tgt_len"])
    else:
        corpus = synth_corpus(args.task, cfg["data.vocab_size"], (args.len_lo, args.len_hi), args.n, args.seed)
    reports = []
    rep = latency_benchmark(
        "flow-argmax",
        flow_decode_fn(flow_model),
        corpus,
        sv,
        tv,
        cfg["flow.n_scales"],
        batch_sizes=sizes,
        reps=args.reps,
        max_sentences_per_setting=args.max_sentences,
        buckets=buckets,
    )
    reports.append(rep)
    if args.ar_run:
        ar_model, _, ar_sv, ar_tv, _ = load_run(args.ar_run, "ar")
        reports.append(
            latency_benchmark(
                f"ar-beam{args.beam}",
                ar_decode_fn(ar_model, args.beam),
                corpus,
                ar_sv,
                ar_tv,
                1,
                batch_sizes=sizes,
                reps=args.reps,
                max_sentences_per_setting=args.max_sentences,
                buckets=buckets,
            )
        )
    for rep in reports:
        print(rep.table())
        if args.records:
            path = Path(args.records).with_suffix(f".{rep.model_tag}.jsonl")
            rep.dump_records(path)
            print(f"raw records -> {path}")
    return 0


def cmd_selftest(args) -> int:
    level = "full" if args.verify_flow else args.level
    results = run_selftest(level, corrupt_layer=args.corrupt_layer)
    if args.verify_flow:
        keep = ("layer-invertibility", "stack-invertibility", "jacobian-logdet")
        results = [r for r in results if r.name in keep]
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 2


def cmd_avg_checkpoints(args) -> int:
    average_checkpoints(args.inputs, args.out)
    print(f"averaged {len(args.inputs)} checkpoints -> {args.out}")
    return 0


def cmd_distill(args) -> int:
    """Self-distillation: train the AR teacher, re-translate the training
    set with beam search, then train the flow model on the teacher output."""
    overrides = list(args.set or [])
    if args.task:
        overrides.append(f"data.task={args.task}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = RunConfig.build(args.preset, args.config, overrides)
    out = Path(args.out)
    corpus = load_corpus(cfg)
    train_corpus, dev = split_corpus(corpus, min(cfg["data.n_dev"], max(1, len(corpus) // 10)), cfg["train.seed"])
    sv, tv = build_vocabs(cfg, corpus)
    rng = RandomSource(cfg["train.seed"])

    ar_dir = out / "ar"
    save_run_dir(ar_dir, cfg, sv, tv, "ar")
    teacher = ARTransformer(len(sv), len(tv), cfg.ar_config(), rng.spawn("ar-model"))
    tc = cfg.train_config()
    tc.steps = cfg["ar.steps"]
    train_ar(teacher, train_corpus, sv, tv, tc, ar_dir, digest=cfg.digest(), dev_corpus=dev,
             eval_fn=dev_bleu_fn(sv, tv, 1))

    teacher.eval()
    distilled = []
    pairs = train_corpus.pairs
    for lo in range(0, len(pairs), args.batch):
        chunk = pairs[lo : lo + args.batch]
        src, _, _ = make_batch(chunk, sv, tv, 1, sort=False)
        hyps = teacher.beam_decode(src, beam=args.beam)
        for (s, t), h in zip(chunk, hyps):
            tgt_tokens = tv.decode(h.tokens)
            if tgt_tokens:
                distilled.append((s, tgt_tokens))
    print(f"teacher re-translated {len(distilled)} training pairs")

    flow_dir = out / "flow"
    save_run_dir(flow_dir, cfg, sv, tv, "flow")
    model = LatentFlowModel(len(sv), len(tv), cfg.model_config(), rng.spawn("model"))
    result = train(
        model,
        ParallelCorpus(distilled, "distilled"),
        sv,
        tv,
        cfg.train_config(),
        flow_dir,
        digest=cfg.digest(),
        dev_corpus=dev,
        eval_fn=dev_bleu_fn(sv, tv, cfg["flow.n_scales"]),
    )
    print(f"distilled flow model -> {result.final_checkpoint}")
    return 0


# -- parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="narflow", description="Flow-prior non-autoregressive sequence generation")
    p.add_argument("--version", action="version", version=f"narflow 0.1.0 ({backend_name()} kernels)")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train the flow model or the AR baseline")
    tr.add_argument("--model", choices=["flow", "ar"], default="flow")
    tr.add_argument("--preset", default="desk")
    tr.add_argument("--config", default=None, help="config file (key = value lines)")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE")
    tr.add_argument("--out", default=None)
    tr.add_argument("--task", default=None, help="synthetic task or 'none' for files")
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--batch", type=int, default=None)
    tr.add_argument("--kl-zero-steps", dest="kl_zero_steps", type=int, default=None)
    tr.add_argument("--kl-ramp-steps", dest="kl_ramp_steps", type=int, default=None)
    tr.add_argument("--src", default=None)
    tr.add_argument("--tgt", default=None)
    tr.add_argument("--min-count", dest="min_count", type=int, default=None)
    tr.add_argument("--shared-vocab", dest="shared_vocab", action="store_const", const=True, default=None)
    tr.add_argument("--max-src-len", dest="max_src_len", type=int, default=None)
    tr.add_argument("--max-tgt-len", dest="max_tgt_len", type=int, default=None)
    tr.set_defaults(fn=cmd_train)

    tl = sub.add_parser("translate", help="decode a source file")
    tl.add_argument("--checkpoint", required=True, help="run dir or checkpoint file")
    tl.add_argument("--ar-checkpoint", dest="ar_checkpoint", default=None)
    tl.add_argument("--input", required=True)
    tl.add_argument("--output", required=True)
    tl.add_argument("--scores", default=None, help="side file with scores and latencies")
    tl.add_argument("--method", choices=["argmax", "npd", "iwd"], default=None)
    tl.add_argument("--l", type=int, default=None)
    tl.add_argument("--r", type=int, default=None)
    tl.add_argument("--temperature", type=float, default=None)
    tl.add_argument("--K", type=int, default=None)
    tl.add_argument("--beam", type=int, default=None)
    tl.add_argument("--batch", type=int, default=64)
    tl.add_argument("--seed", type=int, default=0)
    tl.set_defaults(fn=cmd_translate)

    sc = sub.add_parser("score", help="corpus BLEU of a hypothesis file")
    sc.add_argument("--hyp", required=True)
    sc.add_argument("--ref", required=True, action="append")
    sc.add_argument("--records", default=None, help="append a line-delimited record here")
    sc.set_defaults(fn=cmd_score)

    dv = sub.add_parser("diversity", help="pairwise / leave-one-out BLEU")
    dv.add_argument("--hyps", required=True, help="m consecutive lines per sentence")
    dv.add_argument("--hyps-per-sentence", dest="hyps_per_sentence", type=int, required=True)
    dv.add_argument("--refs", default=None)
    dv.add_argument("--refs-per-sentence", dest="refs_per_sentence", type=int, default=2)
    dv.add_argument("--records", default=None, help="append a line-delimited record here")
    dv.set_defaults(fn=cmd_diversity)

    bn = sub.add_parser("bench", help="latency by batch size and target length")
    bn.add_argument("--flow-run", dest="flow_run", required=True)
    bn.add_argument("--ar-run", dest="ar_run", default=None)
    bn.add_argument("--beam", type=int, default=5)
    bn.add_argument("--batch-sizes", dest="batch_sizes", default=None)
    bn.add_argument("--buckets", default=None, help="e.g. 1-10,11-20,21-30,31-40,41+")
    bn.add_argument("--src", default=None)
    bn.add_argument("--tgt", default=None)
    bn.add_argument("--task", default="copy")
    bn.add_argument("--len-lo", dest="len_lo", type=int, default=1)
    bn.add_argument("--len-hi", dest="len_hi", type=int, default=50)
    bn.add_argument("--n", type=int, default=500)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--reps", type=int, default=5)
    bn.add_argument("--max-sentences", dest="max_sentences", type=int, default=256)
    bn.add_argument("--records", default=None, help="write raw timing records here")
    bn.set_defaults(fn=cmd_bench)

    st = sub.add_parser("selftest", help="run the built-in verification oracles")
    st.add_argument("--level", choices=["fast", "full"], default="fast")
    st.add_argument("--verify-flow", dest="verify_flow", action="store_true",
                    help="only the flow invertibility and Jacobian oracles")
    st.add_argument("--corrupt-layer", dest="corrupt_layer", default=None, help=argparse.SUPPRESS)
    st.set_defaults(fn=cmd_selftest)

    av = sub.add_parser("avg-checkpoints", help="average parameter checkpoints")
    av.add_argument("--out", required=True)
    av.add_argument("inputs", nargs="+")
    av.set_defaults(fn=cmd_avg_checkpoints)

    ds = sub.add_parser("distill", help="AR teacher -> re-translate -> train flow on its output")
    ds.add_argument("--out", required=True)
    ds.add_argument("--preset", default="desk")
    ds.add_argument("--config", default=None)
    ds.add_argument("--set", action="append", metavar="KEY=VALUE")
    ds.add_argument("--task", default=None)
    ds.add_argument("--seed", type=int, default=None)
    ds.add_argument("--beam", type=int, default=4)
    ds.add_argument("--batch", type=int, default=64)
    ds.set_defaults(fn=cmd_distill)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FloatingPointError, FlowSingularityError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
