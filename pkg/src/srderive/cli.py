"""Command line entry point: ``srderive <command> ...``.

Exit status is 0 on success, 1 on a domain or I/O error (reported as one JSON
object on stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any

from . import __version__
from . import corpus as corpus_mod
from .errors import SrDeriveError
from .generation import DEFAULT_SENTINEL, GenerationTemplate, derive_srs, read_srset, write_srset
from .metrics import SampleSizeSpec, min_sample_size
from .pipeline import RunConfig, end_to_end, evaluate_srset, make_gateway, make_provider, make_scorer
from .retriever import TrainConfig, build_index, load_index, retrieve_top_k, save_index, train_weights
from .scope import filter_out_of_scope, load_keyword_config
from .synthesis import (
    SynthesisTemplate,
    decision_record,
    rank_filter,
    read_pairs,
    split_train_val,
    synthesize_corpus,
    write_jsonl,
)
from .weighting import TokenWeightTable, compute_tf_idf, init_weight_table


def _emit(obj: Any) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False))


def _load_corpus(path: str | None) -> corpus_mod.VrCorpus:
    if path is None:
        return corpus_mod.in_scope_corpus()
    return corpus_mod.VrCorpus.from_dict(json.loads(Path(path).read_text("utf-8")))


def _provider(args):
    return make_provider({"kind": "hash", "dim": args.dim, "seed": args.hash_seed})


def _gateway(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "scripted":
        return make_gateway({"kind": "scripted", "script": arg})
    if kind == "http":
        return make_gateway({"kind": "http", "chat_url": arg or None})
    return make_gateway({"kind": kind})


def _table(path: str | None) -> TokenWeightTable:
    if path is None:
        return TokenWeightTable.uniform()
    return TokenWeightTable.from_dict(json.loads(Path(path).read_text("utf-8")))


# ---------------------------------------------------------------- commands


def cmd_ingest_asvs(args) -> None:
    full = corpus_mod.load_asvs(args.asvs)
    if args.exclusions:
        prefixes = corpus_mod.load_exclusion_config(json.loads(Path(args.exclusions).read_text("utf-8")))
    else:
        prefixes = [] if args.no_exclusions else corpus_mod.default_exclusions()
    c = corpus_mod.apply_exclusions(full, prefixes)
    Path(args.output).write_text(json.dumps(c.to_dict(), indent=1, ensure_ascii=False), "utf-8")
    _emit({"valid": len(full), "in_scope": len(c), "deprecated": len(c.deprecated_ids()),
           "corpus_hash": c.content_hash()})


def cmd_ingest_frs(args) -> None:
    fs = corpus_mod.ingest_frs(args.file, args.project)
    corpus_mod.write_frs(fs, args.output)
    _emit({"project": fs.project, "frs": len(fs), "rejected": [list(r) for r in fs.rejections]})


def cmd_synth_pairs(args) -> None:
    run = synthesize_corpus(_load_corpus(args.corpus), args.count, _gateway(args.gateway),
                            template=SynthesisTemplate.load(args.template), model_id=args.model,
                            seed=args.seed)
    write_jsonl((asdict(p) for p in run.pairs), args.output)
    _emit({"pairs": len(run.pairs), "failures": [list(f) for f in run.failures]})


def cmd_filter_pairs(args) -> None:
    zs = build_index(_load_corpus(args.corpus), _provider(args), TokenWeightTable.uniform())
    decisions = rank_filter(read_pairs(args.pairs), zs, args.fraction)
    write_jsonl((decision_record(d) for d in decisions), args.output)
    _emit({"pairs": len(decisions), "accepted": sum(d.accepted for d in decisions),
           "threshold_rank": decisions[0].threshold_rank if decisions else None})


def cmd_split(args) -> None:
    tr, va = split_train_val(read_pairs(args.pairs, accepted_only=True), tuple(args.ratio), args.seed)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl((asdict(p) for p in tr), out / "train.jsonl")
    write_jsonl((asdict(p) for p in va), out / "val.jsonl")
    _emit({"train": len(tr), "val": len(va)})


def cmd_build_index(args) -> None:
    c = _load_corpus(args.corpus)
    if args.weights:
        table = _table(args.weights)
    elif args.init == "uniform":
        table = TokenWeightTable.uniform()
    else:
        table = init_weight_table(compute_tf_idf(c), args.init)
    idx = build_index(c, _provider(args), table)
    save_index(idx, args.output)
    _emit(idx.manifest.to_dict())


def cmd_train(args) -> None:
    c = _load_corpus(args.corpus)
    init = _table(args.weights) if args.weights else init_weight_table(compute_tf_idf(c), args.init)
    idx = build_index(c, _provider(args), init)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed, random_negatives=args.random_negatives)
    table, report = train_weights(idx, read_pairs(args.train), cfg,
                                  read_pairs(args.val) if args.val else None)
    Path(args.output).write_text(table.to_json(), "utf-8")
    _emit(report.to_dict())


def cmd_retrieve(args) -> None:
    c = _load_corpus(args.corpus)
    idx = load_index(args.index, _provider(args), corpus=c)
    queries = ([corpus_mod.FrRecord("query", "q1", args.query)] if args.query
               else list(corpus_mod.ingest_frs(args.frs).records))
    rows = [{"fr_id": fr.id, "results": [asdict(r) for r in retrieve_top_k(idx, fr, args.k)]}
            for fr in queries]
    if args.output:
        write_jsonl(rows, args.output)
    else:
        _emit(rows)


def cmd_generate(args) -> None:
    c = _load_corpus(args.corpus)
    idx = load_index(args.index, _provider(args), corpus=c)
    gateway = _gateway(args.gateway)
    template = GenerationTemplate.load(args.template)
    per_project = {}
    for path in args.frs:
        frs = corpus_mod.ingest_frs(path)
        srset = derive_srs(frs, idx, c, args.k, gateway, template=template, sentinel=args.sentinel,
                           model_id=args.model, seed=args.seed)
        write_srset(srset, Path(args.output) / frs.project)
        per_project[frs.project] = srset.counts()
    totals = {key: sum(v[key] for v in per_project.values())
              for key in ("attempted", "generated", "gated", "failed")}
    _emit(dict(totals, projects=per_project))


def cmd_scope_filter(args) -> None:
    srset = read_srset(args.srs)
    live = srset.generated
    decisions = filter_out_of_scope([r.text for r in live], args.project or srset.project,
                                    load_keyword_config(args.keywords))
    rows = [{"fr_id": r.fr_id, "vr_id": r.vr_id, "in_scope": d.in_scope,
             "matched_keyword": d.matched_keyword, "matched_project": d.matched_foreign_project}
            for r, d in zip(live, decisions)]
    write_jsonl(rows, args.output)
    _emit({"total": len(rows), "removed": sum(not r["in_scope"] for r in rows)})


def cmd_evaluate(args) -> None:
    srset = read_srset(args.srs)
    if args.scope:
        flags = [json.loads(x)["in_scope"] for x in Path(args.scope).read_text("utf-8").splitlines()
                 if x.strip()]
    else:
        flags = [True] * len(srset.generated)
    texts = [r.text for r in srset.generated]
    scorer = make_scorer({"kind": args.scorer}, texts)
    result = evaluate_srset(srset, flags, scorer, args.seed)
    if not args.values:
        result = {k: v for k, v in result.items() if not k.endswith("_values")}
    _emit(dict(result, scorer_id=scorer.scorer_id))


def cmd_sample_size(args) -> None:
    n = min_sample_size(SampleSizeSpec(args.population, args.confidence, args.margin,
                                       args.proportion))
    _emit({"n": n})


def cmd_run(args) -> int:
    bundle = end_to_end(RunConfig.from_file(args.config))
    _emit({"bundle": str(bundle.path), "status": bundle.data["status"], "reused": bundle.reused,
           "failures": bundle.data["failures"]})
    return 0 if bundle.ok else 1


def cmd_report(args) -> None:
    data = json.loads(Path(args.bundle).read_text("utf-8"))
    _emit({"run_hash": data["run_hash"], "status": data["status"],
           "stages": {k: v["summary"] for k, v in data["stages"].items()},
           "failures": data["failures"]})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srderive", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    emb = argparse.ArgumentParser(add_help=False)
    emb.add_argument("--dim", type=int, default=64)
    emb.add_argument("--hash-seed", type=int, default=20240501)
    emb.add_argument("--corpus", help="corpus JSON from ingest-asvs (default: bundled, filtered)")
    llm = argparse.ArgumentParser(add_help=False)
    llm.add_argument("--gateway", default="offline",
                     help="offline | scripted:<file> | http[:<base url>]")
    llm.add_argument("--model", default="gpt-4")
    llm.add_argument("--seed", type=int, default=0)
    llm.add_argument("--template")

    p = sub.add_parser("ingest-asvs", help="parse the ASVS release and apply exclusions")
    p.add_argument("--asvs")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--exclusions")
    g.add_argument("--no-exclusions", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_ingest_asvs)

    p = sub.add_parser("ingest-frs", help="validate a JSONL file of FRs")
    p.add_argument("file")
    p.add_argument("--project")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_ingest_frs)

    p = sub.add_parser("synth-pairs", parents=[emb, llm], help="synthesize FR-VR pairs")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_synth_pairs)

    p = sub.add_parser("filter-pairs", parents=[emb], help="zero-shot rank filter")
    p.add_argument("pairs")
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_filter_pairs)

    p = sub.add_parser("split", help="train/validation split of accepted pairs")
    p.add_argument("pairs")
    p.add_argument("--ratio", type=float, nargs=2, default=[0.9, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("build-index", parents=[emb], help="embed the corpus and save an index")
    p.add_argument("--weights", help="token weight table JSON")
    p.add_argument("--init", choices=["mean", "max", "idf-only", "uniform"], default="mean")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_build_index)

    p = sub.add_parser("train", parents=[emb], help="fine-tune token weights")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--weights")
    p.add_argument("--init", choices=["mean", "max", "idf-only"], default="mean")
    p.add_argument("--lr", type=float, default=6e-7)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--random-negatives", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("retrieve", parents=[emb], help="top-k VRs for FRs")
    p.add_argument("--index", required=True)
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--frs", "--fr-file", dest="frs")
    q.add_argument("--query")
    p.add_argument("-k", "--k", type=int, default=5)
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("generate", parents=[emb, llm], help="retrieve and generate SRs")
    p.add_argument("--index", required=True)
    p.add_argument("--frs", "--fr-file", dest="frs", nargs="+", required=True,
                   help="one JSONL file per project; the file stem names the project")
    p.add_argument("-k", "--k", type=int, default=5)
    p.add_argument("--sentinel", default=DEFAULT_SENTINEL)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("scope-filter", help="drop SRs that name another project")
    p.add_argument("srs", help="SR directory from generate")
    p.add_argument("--project")
    p.add_argument("--keywords")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_scope_filter)

    p = sub.add_parser("evaluate", help="SI, Self-BLEU and vocabulary size of an SR set")
    p.add_argument("srs")
    p.add_argument("--scope", help="scope-filter output")
    p.add_argument("--scorer", choices=["offline-unigram", "http"], default="offline-unigram")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--values", action="store_true", help="include per-item values")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sample-size", help="minimum sample for a proportion estimate")
    p.add_argument("--population", type=int)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--proportion", type=float, default=0.5)
    p.set_defaults(fn=cmd_sample_size)

    p = sub.add_parser("run", help="end-to-end run from a config file")
    p.add_argument("config")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="summarize a report bundle")
    p.add_argument("bundle")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.fn(args)
    except (SrDeriveError, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
