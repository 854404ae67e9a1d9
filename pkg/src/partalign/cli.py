"""Command line entry point: ``partalign <subcommand> ...``.

Every subcommand that writes files also writes ``run.json`` next to them
with the resolved options, input digests and output paths.  A JSON file
given with ``--config`` supplies option defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import corpus_builder as C
from . import model as M

log = logging.getLogger("partalign")

MANIFEST_NAME = "run.json"


class UsageError(Exception):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command: str, args: argparse.Namespace, inputs, artifacts, started: float) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    manifest = {
        "subcommand": command,
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(p): file_digest(p) for p in inputs if p and Path(p).is_file()},
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _pair_files(spec: str) -> tuple[str, str]:
    parts = spec.split(",")
    if len(parts) != 2 or not all(parts):
        raise UsageError(f"expected SRC,TGT file pair, got {spec!r}")
    return parts[0], parts[1]


def _read_parallel(spec: str):
    s, t = _pair_files(spec)
    src, tgt = C.read_corpus(s), C.read_corpus(t)
    if len(src) != len(tgt):
        raise UsageError(f"{s} has {len(src)} lines but {t} has {len(tgt)}")
    return list(zip(src, tgt)), [s, t]


def _specials_from(path):
    if not path:
        return {}
    _, specials = C.filter_phrase_pairs(C.load_phrase_table(path))
    return C.special_map(specials)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_toy(args) -> int:
    from .synthetic import gen_toy_task

    t0 = time.perf_counter()
    task = gen_toy_task(args.vocab_size, args.sentences, seed=args.seed, out_dir=args.out,
                        n_dev=args.dev_size, n_test=args.test_size, n_parallel=args.parallel_size)
    write_manifest(args.out, "gen-toy", args, [], task.files, t0)
    print(json.dumps(task.files, indent=1))
    return 0


def cmd_build_corpus(args) -> int:
    t0 = time.perf_counter()
    cfg = C.ExtractionConfig(n_cap=args.n_cap, min_aligned=args.min_aligned, min_phrase_len=args.min_len,
                             min_prob=args.min_prob)
    retained, specials = C.filter_phrase_pairs(C.load_phrase_table(args.phrase_table), cfg)
    src, tgt = C.read_corpus(args.src), C.read_corpus(args.tgt)
    pairs = C.extract_partially_aligned(src, tgt, retained, cfg, shard_count=args.shards, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    C.write_pairs(out, pairs)
    src_ratio, tgt_ratio = C.aligned_ratio(pairs)
    stats = {"pairs": len(pairs), "retained_phrases": len(retained), "special_pairs": len(specials),
             "aligned_ratio_src": src_ratio, "aligned_ratio_tgt": tgt_ratio}
    write_manifest(out.parent, "build-corpus", args, [args.phrase_table, args.src, args.tgt],
                   {"pairs": out}, t0)
    print(json.dumps(stats))
    return 0


def _training_config(args):
    from .training import TrainingConfig

    return TrainingConfig(lam=args.lam, agreement=args.agreement, batch=args.batch, lr=args.lr,
                          epochs=args.epochs, dropout=args.dropout, seed=args.seed, clip=args.clip,
                          hidden=args.hidden, layers=args.layers, max_vocab=args.max_vocab,
                          v1_size=args.v1_size, end_gate=args.end_gate)


def _finish_training(args, command, tm, inputs, t0) -> int:
    from .report import plot_training_curves

    out = Path(args.out)
    meta = {"command": command, "best_epoch": tm.result.best_epoch, "seed": args.seed}
    M.save_checkpoint(out, tm.params, tm.vocab, meta)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for entry in tm.result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    artifacts = {"checkpoint": out, "log": log_path}
    if tm.result.log and not args.no_plot:
        artifacts["curves"] = plot_training_curves(tm.result.log, out / "training_curves.png", title=command)
    write_manifest(out, command, args, inputs, artifacts, t0)
    last = tm.result.log[-1] if tm.result.log else {}
    print(json.dumps({"best_epoch": tm.result.best_epoch, "last": last}))
    return 0


def cmd_train(args) -> int:
    from . import pipeline as P

    t0 = time.perf_counter()
    cfg = _training_config(args)
    specials = _specials_from(args.phrase_table)
    dev, inputs = _read_parallel(args.dev) if args.dev else ([], [])
    if args.phrase_table:
        inputs.append(args.phrase_table)
    if bool(args.data) == bool(args.parallel):
        raise UsageError("give exactly one of --data (partially aligned pairs) or --parallel SRC,TGT")
    if args.data:
        pairs = C.read_pairs(args.data)
        tm = P.train_partially_aligned(pairs, dev, specials, cfg)
        inputs.append(args.data)
    else:
        parallel, files = _read_parallel(args.parallel)
        tm = P.train_parallel(parallel, dev, specials, cfg)
        inputs += files
    return _finish_training(args, "train", tm, inputs, t0)


def cmd_fine_tune(args) -> int:
    from . import pipeline as P
    from .training import TrainResult

    t0 = time.perf_counter()
    params, vocab, _ = M.load_checkpoint(args.ckpt)
    cfg = _training_config(args)
    parallel, inputs = _read_parallel(args.parallel)
    dev, dev_files = _read_parallel(args.dev) if args.dev else ([], [])
    base = P.TrainedModel(params, vocab, TrainResult(params, params))
    tm = P.continue_on_parallel(base, parallel, dev, cfg, allow_oov=args.allow_oov)
    inputs += dev_files + [str(Path(args.ckpt) / M.MANIFEST), str(Path(args.ckpt) / M.PAYLOAD)]
    return _finish_training(args, "fine-tune", tm, inputs, t0)


def cmd_translate(args) -> int:
    from .decoding import translate_corpus

    t0 = time.perf_counter()
    params, vocab, _ = M.load_checkpoint(args.ckpt)
    if args.v1_size is not None:
        vocab = M.Vocabulary.from_dict({**vocab.to_dict(), "v1_size": args.v1_size})
    if args.phrase_table:
        vocab = M.Vocabulary.from_dict({**vocab.to_dict(), "specials": _specials_from(args.phrase_table)})
    sources = C.read_corpus(args.input)
    hyps = translate_corpus(sources, params, vocab, args.beam, use_limited_vocab=args.limited_vocab)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    C.write_corpus(out, hyps)
    inputs = [args.input, str(Path(args.ckpt) / M.MANIFEST), str(Path(args.ckpt) / M.PAYLOAD), args.phrase_table]
    write_manifest(out.parent, "translate", args, inputs, {"translations": out}, t0)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import bleu, length_bucket_report

    t0 = time.perf_counter()
    hyps = C.read_corpus(args.hyp)
    ref_files = [r for r in args.refs.split(",") if r]
    ref_sets = [C.read_corpus(r) for r in ref_files]
    for f, r in zip(ref_files, ref_sets):
        if len(r) != len(hyps):
            raise UsageError(f"{f} has {len(r)} lines but {args.hyp} has {len(hyps)}")
    refs = [list(rs) for rs in zip(*ref_sets)]
    report = bleu(hyps, refs, smooth=args.smooth)
    result = {"bleu": report.to_dict()}
    artifacts = {}
    inputs = [args.hyp, *ref_files]
    if args.buckets is not None:
        if args.src:
            sources = C.read_corpus(args.src)
            inputs.append(args.src)
        else:
            # without a source file, bucket on the first reference
            sources = ref_sets[0]
        buckets = length_bucket_report(hyps, refs, sources, args.buckets, smooth=args.smooth)
        result["buckets"] = {k: v.to_dict() for k, v in buckets.items()}
        if args.out_dir:
            from .report import plot_length_buckets

            artifacts["buckets_png"] = plot_length_buckets(buckets, Path(args.out_dir) / "length_buckets.png")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bleu.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        artifacts["report"] = out / "bleu.json"
        write_manifest(out, "evaluate", args, inputs, artifacts, t0)
    print(json.dumps(result, sort_keys=True))
    print(report.line())
    return 0


def cmd_grad_check(args) -> int:
    from .training import check_objective_gradients

    t0 = time.perf_counter()
    report = check_objective_gradients(args.agreement, dims=args.dims, layers=args.layers,
                                       vocab_size=args.vocab, length=args.length, seed=args.seed, eps=args.eps)
    ok = report.passed(args.tol)
    print(json.dumps({"max_rel_error": report.max_rel_error, "worst_tensor": report.worst,
                      "per_tensor": report.per_param, "max_elementwise": report.max_elem_error,
                      "checked": report.checked, "passed": ok,
                      "seconds": round(time.perf_counter() - t0, 2)}, sort_keys=True))
    print(f"max rel error {report.max_rel_error:.3e} ({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return 0 if ok else 1


def cmd_experiment(args) -> int:
    from .experiments import ExperimentConfig, run_experiment

    t0 = time.perf_counter()
    cfg = ExperimentConfig(vocab_size=args.vocab_size, n_pairs=args.pairs, beam=args.beam, v1_size=args.v1_size,
                           parallel_sizes=tuple(args.parallel_sizes), finetune=not args.no_finetune)
    cfg.train = replace(cfg.train, epochs=args.epochs, lr=args.lr, batch=args.batch)
    summary = run_experiment(args.seeds, cfg, args.out)
    write_manifest(args.out, "experiment", args, [], summary["files"], t0)
    print(json.dumps({"mean_bleu": summary["mean_bleu"], "trend": summary["trend"],
                      "finetune": summary.get("finetune")}, indent=1, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p, lr=0.1, batch=16):
    g = p.add_argument_group("training")
    g.add_argument("--agreement", choices=("mse", "mul"), default="mse")
    g.add_argument("--lambda", dest="lam", type=float, default=0.3, help="weight of the agreement term")
    g.add_argument("--lr", type=float, default=lr)
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch", type=int, default=batch)
    g.add_argument("--dropout", type=float, default=0.2)
    g.add_argument("--clip", type=float, default=5.0, help="global gradient-norm clip")
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--max-vocab", type=int, default=None)
    g.add_argument("--v1-size", type=int, default=2000, help="frequent-word part of the limited vocabulary")
    g.add_argument("--end-gate", choices=("open", "closed"), default="open",
                   help="context gate of the end-of-sentence step on partially aligned pairs")
    g.add_argument("--no-plot", action="store_true", help="skip the training-curve figure")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-toy", help="generate a synthetic task")
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--sentences", type=int, default=2000, help="sentences per monolingual corpus")
    p.add_argument("--dev-size", type=int, default=100)
    p.add_argument("--test-size", type=int, default=200)
    p.add_argument("--parallel-size", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("build-corpus", help="mine partially aligned pairs")
    p.add_argument("--phrase-table", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out", required=True, help="output JSONL file")
    p.add_argument("--n-cap", type=int, default=7)
    p.add_argument("--min-aligned", type=int, default=2)
    p.add_argument("--min-prob", type=float, default=0.5)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="unused; recorded in run.json")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--data", help="partially aligned pairs (JSONL)")
    p.add_argument("--parallel", help="SRC,TGT parallel files instead of --data")
    p.add_argument("--dev", help="SRC,TGT dev files")
    p.add_argument("--phrase-table", help="phrase table supplying special pairs for the vocabulary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fine-tune", help="continue training on parallel data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--parallel", required=True, help="SRC,TGT files")
    p.add_argument("--dev", help="SRC,TGT dev files")
    p.add_argument("--allow-oov", action="store_true", help="map unknown words to <unk> instead of failing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_training_flags(p)
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("translate", help="beam-search translation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--limited-vocab", action="store_true")
    p.add_argument("--v1-size", type=int, default=None, help="override the checkpoint's V1 size")
    p.add_argument("--phrase-table", help="take special pairs from this table")
    p.add_argument("--seed", type=int, default=0, help="unused; recorded in run.json")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU")
    p.add_argument("--hyp", required=True)
    p.add_argument("--refs", required=True, help="comma-separated reference files")
    p.add_argument("--smooth", action="store_true")
    p.add_argument("--buckets", type=_int_list, nargs="?", const=[20, 40, 60, 80], default=None)
    p.add_argument("--src", help="source file for length buckets")
    p.add_argument("--out-dir", help="write bleu.json, run.json and the bucket figure here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="finite-difference check of the training objective")
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--vocab", type=int, default=20)
    p.add_argument("--length", type=int, default=6)
    p.add_argument("--agreement", choices=("mse", "mul"), default="mse")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("experiment", help="multi-seed comparison on synthetic tasks, with figures")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--v1-size", type=int, default=10)
    p.add_argument("--parallel-sizes", type=_int_list, default=[200, 500, 1000])
    p.add_argument("--no-finetune", action="store_true")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Load ``--config`` defaults into the chosen subcommand's parser."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {known.config}: {exc}")
    if not isinstance(values, dict):
        parser.error("config file must hold a JSON object")
    command = next((a for a in rest if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = subparsers.choices.get(command)
    if sp is None:
        return
    dests = {a.dest for a in sp._actions}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    values = {("lam" if k == "lambda" else k): v for k, v in values.items()}
    unknown = sorted(set(values) - dests)
    if unknown:
        parser.error(f"unknown keys in config: {', '.join(unknown)}")
    sp.set_defaults(**values)
    # a required option supplied by the config is no longer required on the command line
    for a in sp._actions:
        if a.dest in values:
            a.required = False


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"partalign {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"partalign {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
