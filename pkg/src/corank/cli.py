"""``corank`` command line: index, search, train, rerank, eval, flops, cv.

Every subcommand that writes files also writes a manifest (config hash,
seed, versions) next to its outputs. Errors exit with status 1 and a
message naming the offending input; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ModelConfig, TrainConfig, VARIANTS, ORDER_MODES, config_hash, load_config
from .encoder import EncoderConfig
from .evalkit import evaluate_run, paired_t_test, parse_qrels, parse_run, run_to_rankings, write_run
from .firststage import bm25_search, build_index, load_index, save_index
from .flops import TSV_HEADER, model_report, report_from_totals
from .interaction import Tokenizer, read_corpus, read_queries
from .model import CoBERT, base_encoder_config
from .trainer import (Dataset, cv_partitions, cv_split, folds_from_partitions, prepare_examples,
                      read_partitions, rerank_examples, train, write_partitions)

log = logging.getLogger("corank")

TERA = 1e12


class CliError(Exception):
    pass


# ------------------------------------------------------------------ helpers
def _versions() -> dict:
    return {"corank": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(target: Path, command: str, args: argparse.Namespace,
                   mcfg: ModelConfig | None = None, tcfg: TrainConfig | None = None) -> Path:
    """``manifest.json`` inside a directory output, ``<file>.manifest.json`` beside a file."""
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else target.with_name(
        target.name + ".manifest.json")
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k != "func"}
    data = {
        "command": command,
        "arguments": argv,
        "config_hash": config_hash(mcfg, tcfg) if mcfg and tcfg else None,
        "seed": tcfg.seed if tcfg else getattr(args, "seed", None),
        "versions": _versions(),
    }
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _need_file(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return Path(path)


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    if getattr(args, "config", None):
        mcfg, tcfg = load_config(_need_file(args.config, "config file"))
    else:
        mcfg, tcfg = ModelConfig(), TrainConfig()
    over = {}
    for key in ("epochs", "k", "n", "m", "o"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "order", None):
        over["order_mode"] = args.order
    if getattr(args, "variant", None):
        over["variant"] = args.variant
    if getattr(args, "no_residual", False):
        over["residual"] = False
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
        mcfg = dataclasses.replace(mcfg, seed=args.seed)
    try:
        tcfg = dataclasses.replace(tcfg, **over)
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}") from None
    return mcfg, tcfg


def _read_qids(path) -> list[str]:
    lines = Path(_need_file(path, "query id list")).read_text(encoding="utf-8").split()
    return lines


def _load_dataset(args, tokenizer: Tokenizer | None, vocab_size: int) -> Dataset:
    corpus = read_corpus(_need_file(args.corpus, "corpus"))
    queries = read_queries(_need_file(args.queries, "queries"))
    qrels = parse_qrels(_need_file(args.qrels, "qrels")) if getattr(args, "qrels", None) else {}
    initial = run_to_rankings(parse_run(_need_file(args.run, "initial run")))
    missing = sorted({d for docs in initial.values() for d in docs} - set(corpus))
    if missing:
        raise CliError(f"{args.run}: document {missing[0]!r} is not in corpus {args.corpus}")
    unknown = sorted(set(initial) - set(queries))
    if unknown:
        raise CliError(f"{args.run}: query {unknown[0]!r} is not in {args.queries}")
    if tokenizer is None:
        tokenizer = Tokenizer.from_corpus(list(corpus.values()) + list(queries.values()),
                                          vocab_size)
    return Dataset(corpus, queries, qrels, initial, tokenizer)


def _tokenizer_vocab(tok: Tokenizer) -> list[str]:
    return sorted(tok.word_to_id, key=tok.word_to_id.get)


# --------------------------------------------------------------- subcommands
def cmd_index(args) -> None:
    corpus = read_corpus(_need_file(args.corpus, "corpus"))
    out = Path(args.out)
    save_index(build_index(corpus), out)
    write_manifest(out, "index", args)
    print(f"indexed {len(corpus)} documents into {out}")


def cmd_search(args) -> None:
    index = load_index(_need_file(args.index, "index"))
    queries = read_queries(_need_file(args.queries, "queries"))
    if args.k < 1:
        raise CliError("--k must be >= 1")
    lists = {q: bm25_search(index, text, args.k) for q, text in queries.items()}
    write_run(lists, args.tag, args.out)
    write_manifest(Path(args.out), "search", args)


def cmd_train(args) -> None:
    mcfg, tcfg = _configs(args)
    ds = _load_dataset(args, None, mcfg.vocab_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = _tokenizer_vocab(ds.tokenizer)
    if args.fold == "none":
        plan = [(None, sorted(ds.candidates), None)]
    else:
        qids = sorted(ds.candidates)
        try:
            folds = (folds_from_partitions(read_partitions(args.partitions, args.folds))
                     if args.partitions else cv_split(qids, args.folds))
        except ValueError as exc:
            raise CliError(str(exc)) from None
        chosen = range(len(folds)) if args.fold == "all" else [int(args.fold)]
        plan = []
        for f in chosen:
            if not 0 <= f < len(folds):
                raise CliError(f"--fold {f} out of range for {len(folds)} folds")
            plan.append((f, folds[f].train, folds[f].valid))
    for fold, train_ids, valid_ids in plan:
        res = train(ds, mcfg, tcfg, train_ids, valid_ids)
        target = out if fold is None else out / f"fold{fold}"
        target.mkdir(parents=True, exist_ok=True)
        meta = {"train_config": dataclasses.asdict(tcfg), "vocab": vocab,
                "selected_epoch": res.selected_epoch, "fold": fold}
        res.model.save(target / "model.bin", meta)
        history = [dataclasses.asdict(r) for r in res.history]
        (target / "history.json").write_text(json.dumps(
            {"first_pass": [dataclasses.asdict(r) for r in res.first_pass_history],
             "epochs": history, "selected_epoch": res.selected_epoch}, indent=2) + "\n")
        write_manifest(target, "train", args, mcfg, tcfg)
        log.info("fold %s: selected epoch %d", fold, res.selected_epoch)
    write_manifest(out, "train", args, mcfg, tcfg)


def cmd_rerank(args) -> None:
    model_path = _need_file(args.model, "model snapshot")
    try:
        model, meta = CoBERT.load(model_path)
    except (ValueError, KeyError) as exc:
        raise CliError(f"{model_path}: not a corank model ({exc})") from None
    base = TrainConfig(**meta["train_config"]) if "train_config" in meta else TrainConfig()
    if args.config:
        _, base = load_config(_need_file(args.config, "config file"))
    over = {"variant": args.variant or base.variant,
            "residual": base.residual and not args.no_residual}
    for key in ("k", "n", "m", "o"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    try:
        tcfg = dataclasses.replace(base, **over)
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}") from None
    tok = Tokenizer(meta.get("vocab", []), model.cfg.vocab_size)
    ds = _load_dataset(args, tok, model.cfg.vocab_size)
    qids = _read_qids(args.qids) if args.qids else None
    examples = prepare_examples(ds, model, tcfg.k, qids)
    lists = rerank_examples(model, examples, tcfg)
    write_run(lists, args.tag or f"corank-{tcfg.variant}", args.out)
    write_manifest(Path(args.out), "rerank", args, model.cfg, tcfg)


def cmd_eval(args) -> None:
    qrels = parse_qrels(_need_file(args.qrels, "qrels"))
    run = run_to_rankings(parse_run(_need_file(args.run, "run")))
    res = evaluate_run(run, qrels, args.cut)
    for name, r in res.items():
        print(f"{name}\tall\t{r.mean:.6f}")
    if args.per_query:
        for name, r in res.items():
            for q, v in r.per_query.items():
                print(f"{name}\t{q}\t{v:.6f}")
    if args.baseline:
        base = run_to_rankings(parse_run(_need_file(args.baseline, "baseline run")))
        bres = evaluate_run(base, qrels, args.cut)
        for name in res:
            qs = sorted(qrels)
            t, p = paired_t_test([res[name].per_query[q] for q in qs],
                                 [bres[name].per_query[q] for q in qs])
            print(f"{name}\tt-test\tt={t:.4f}\tp={p:.4g}")


def cmd_flops(args) -> None:
    lines = [TSV_HEADER]
    if args.first_tflops is not None:
        need = [args.first_passages, args.second_passages, args.second_tflops]
        if any(v is None for v in need):
            raise CliError("--first-tflops needs --first-passages, --second-passages and "
                           "--second-tflops")
        rep = report_from_totals(args.queries, args.first_passages, args.first_tflops * TERA,
                                 args.second_passages, args.second_tflops * TERA)
        lines.append(rep.tsv_row(args.name))
    else:
        mcfg, tcfg = _configs(args)
        seq = args.seq_len or mcfg.max_seq_len
        base = base_encoder_config(mcfg)
        calib = EncoderConfig(layers=mcfg.calib_layers, hidden=mcfg.hidden, heads=mcfg.heads,
                              max_positions=2)
        group = EncoderConfig(layers=mcfg.group_layers, hidden=mcfg.hidden, heads=mcfg.heads,
                              use_positional=False, max_positions=mcfg.max_group)
        for variant in VARIANTS:
            rep = model_report(base, calib, group, args.queries, tcfg.k, args.passages_per_doc,
                               seq, tcfg.n, tcfg.m, tcfg.o, variant)
            if variant == "full":
                first = report_from_totals(rep.queries, rep.first_passages, rep.first_flops, 0, 0)
                lines.append(first.tsv_row("first-pass"))
            lines.append(rep.tsv_row(variant))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(Path(args.out), "flops", args)
    else:
        sys.stdout.write(text)


def cmd_cv(args) -> None:
    queries = read_queries(_need_file(args.queries, "queries"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = cv_partitions(queries, args.folds)
    write_partitions(parts, out / "partitions.tsv")
    for fold in folds_from_partitions(parts):
        d = out / f"fold{fold.index}"
        d.mkdir(exist_ok=True)
        for name in ("train", "valid", "test"):
            (d / f"{name}.qids").write_text("".join(f"{q}\n" for q in getattr(fold, name)))
    write_manifest(out, "cv", args)
    print(f"wrote {args.folds} folds to {out}")


# ------------------------------------------------------------------- parser
def _add_data_args(p, qrels: bool):
    p.add_argument("--corpus", required=True, type=Path, help="JSONL corpus (doc_id, text)")
    p.add_argument("--queries", required=True, type=Path, help="TSV queries: qid<TAB>text")
    p.add_argument("--run", required=True, type=Path,
                   help="initial ranking (TREC run) providing each query's candidates")
    if qrels:
        p.add_argument("--qrels", required=True, type=Path, help="TREC qrels: qid 0 docid grade")


def _add_depth_args(p):
    p.add_argument("--k", type=int, help="re-ranking depth (overrides config)")
    p.add_argument("--n", type=int, help="group size (overrides config)")
    p.add_argument("--m", type=int, help="number of PRF documents (overrides config)")
    p.add_argument("--o", type=int, help="group overlap (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corank", description="Co-BERT style re-ranking: BM25, training, re-ranking, evaluation and FLOPs.")
    ap.add_argument("--version", action="version", version=f"corank {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("index", help="build a BM25 inverted index")
    p.add_argument("--corpus", required=True, type=Path, help="JSONL corpus (doc_id, text)")
    p.add_argument("--out", required=True, type=Path, help="index directory to create")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="BM25 initial ranking as a TREC run")
    p.add_argument("--index", required=True, type=Path, help="index directory")
    p.add_argument("--queries", required=True, type=Path, help="TSV queries: qid<TAB>text")
    p.add_argument("--k", type=int, default=1000, help="documents per query (default 1000)")
    p.add_argument("--tag", default="bm25", help="run tag (default bm25)")
    p.add_argument("--out", required=True, type=Path, help="output run file")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train the first-pass ranker and the re-ranker per fold")
    _add_data_args(p, qrels=True)
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--variant", choices=VARIANTS, help="model variant (overrides config)")
    p.add_argument("--order", choices=ORDER_MODES, help="batch feeding order (overrides config)")
    p.add_argument("--no-residual", action="store_true",
                   help="use the calibrated vector alone, without averaging with the original")
    p.add_argument("--epochs", type=int, help="training epochs (overrides config)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--folds", type=int, default=5, help="number of CV folds (default 5)")
    p.add_argument("--fold", default="all",
                   help="fold index to train, 'all' (default), or 'none' to train on every query")
    p.add_argument("--partitions", type=Path,
                   help="qid<TAB>partition file instead of the round-robin split")
    _add_depth_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="re-rank an initial run with a trained model")
    _add_data_args(p, qrels=False)
    p.add_argument("--model", required=True, type=Path, help="model snapshot (model.bin)")
    p.add_argument("--config", type=Path, help="key=value config file (train keys are used)")
    p.add_argument("--variant", choices=VARIANTS, help="scoring variant (default: as trained)")
    p.add_argument("--no-residual", action="store_true",
                   help="use the calibrated vector alone, without averaging with the original")
    p.add_argument("--qids", type=Path, help="file with the query ids to re-rank")
    p.add_argument("--tag", help="run tag (default corank-<variant>)")
    p.add_argument("--out", required=True, type=Path, help="output run file")
    _add_depth_args(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="P@k, nDCG@k, MAP@1000 and a paired t-test")
    p.add_argument("--run", required=True, type=Path, help="TREC run to evaluate")
    p.add_argument("--qrels", required=True, type=Path, help="TREC qrels")
    p.add_argument("--cut", type=int, default=20, help="cutoff for P and nDCG (default 20)")
    p.add_argument("--baseline", type=Path, help="second run for a paired two-tailed t-test")
    p.add_argument("--per-query", action="store_true", help="also print per-query values")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="inference FLOPs report (TSV)")
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--queries", type=int, required=True, help="number of queries")
    p.add_argument("--passages-per-doc", type=float, default=1.0,
                   help="average passages per document (default 1.0)")
    p.add_argument("--seq-len", type=int, help="passage sequence length (default max_seq_len)")
    p.add_argument("--first-passages", type=int, help="first-pass passage count (totals mode)")
    p.add_argument("--first-tflops", type=float, help="first-pass TFLOPs (enables totals mode)")
    p.add_argument("--second-passages", type=int, help="second-pass passage count (totals mode)")
    p.add_argument("--second-tflops", type=float, help="second-pass TFLOPs (totals mode)")
    p.add_argument("--name", default="model", help="row label in totals mode")
    p.add_argument("--out", type=Path, help="write TSV here instead of stdout")
    _add_depth_args(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("cv", help="write round-robin cross-validation folds")
    p.add_argument("--queries", required=True, type=Path, help="TSV queries: qid<TAB>text")
    p.add_argument("--folds", type=int, default=5, help="number of folds (default 5)")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.set_defaults(func=cmd_cv)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"corank {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
