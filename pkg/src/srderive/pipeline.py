"""Run configuration, content-addressed stage store and the end-to-end run.

Layout of an output directory::

    stages/<name>-<key16>/      one completed stage, never modified again
        stage.json              key, inputs, run hash, sha256 of every file
        ...                     stage artifacts
    bundles/<run16>.json        report bundle of one run

A stage key is the sha256 of its parent keys plus the configuration that
affects it, so re-running with the same inputs reuses finished stages and a
changed setting only recomputes what depends on it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from . import corpus as corpus_mod
from .corpus import FrSet, VrCorpus
from .errors import ConfigError, SrDeriveError
from .gateway import ChatClient, GatewayConfig, HttpChatClient, LmScorer, RemoteLmScorer, \
    ScriptedChatClient, UnigramScorer
from .generation import (
    DEFAULT_SENTINEL,
    GenerationTemplate,
    SrSet,
    consolidate_duplicates,
    derive_srs,
    read_srset,
    write_srset,
)
from .metrics import (
    SampleSizeSpec,
    SrItem,
    icc_2k,
    min_sample_size,
    sample_without_replacement,
    self_bleu,
    self_information,
    vocabulary_size,
    welch_t,
)
from .offline import fit_unigram_scorer, offline_client
from .retriever import (
    TrainConfig,
    VrIndex,
    build_index,
    load_index,
    retrieve_top_k,
    save_index,
    train_weights,
)
from .scope import filter_out_of_scope, load_keyword_config, proper_noun_review_flags
from .synthesis import (
    SynthesisTemplate,
    decision_record,
    rank_filter,
    read_pairs,
    split_train_val,
    synthesize_corpus,
    write_jsonl,
)
from .text import HashEmbeddingProvider, RemoteEmbeddingProvider, tokenize
from .weighting import TokenWeightTable, compute_tf_idf, init_weight_table

logger = logging.getLogger(__name__)

_ENV_REF = re.compile(r"^\$\{([A-Z0-9_]+)\}$")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes | str) -> str:
    return hashlib.sha256(data.encode("utf-8") if isinstance(data, str) else data).hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _asset_sha(path: str | None, default: str) -> str:
    if path:
        return file_sha256(path)
    return sha256_hex(resources.files("srderive.data").joinpath(default).read_bytes())


# ---------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    output_dir: str
    fr_files: dict[str, str] = field(default_factory=dict)
    asvs_file: str | None = None
    exclusions: list[str] | str | None = None
    synthesis_template: str | None = None
    generation_template: str | None = None
    keywords: str | None = None
    k: int = 5
    filter_fraction: float = 0.3
    synth_count: int = 10
    split_ratio: tuple[float, float] = (0.9, 0.1)
    weight_aggregation: str = "mean"
    train: dict[str, Any] = field(default_factory=dict)
    trained_table: str | None = None
    embedding: dict[str, Any] = field(default_factory=lambda: {"kind": "hash", "dim": 64,
                                                               "seed": 20240501})
    gateway: dict[str, Any] = field(default_factory=lambda: {"kind": "offline"})
    scorer: dict[str, Any] = field(default_factory=lambda: {"kind": "offline-unigram"})
    sentinel: str = DEFAULT_SENTINEL
    seed: int | None = 0
    deterministic: bool = True
    compare_baseline: bool = True
    consolidation_threshold: float = 0.8
    ratings_file: str | None = None
    study_confidence: float = 0.95
    study_margin: float = 0.05

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str | Path | None = None) -> RunConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "output_dir" not in data:
            raise ConfigError("config needs output_dir")
        cfg = cls(**dict(data))
        cfg.split_ratio = tuple(cfg.split_ratio)  # type: ignore[assignment]
        if base_dir is not None:
            cfg._resolve_paths(Path(base_dir))
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        p = Path(path)
        try:
            data = json.loads(p.read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        return cls.from_dict(data, p.parent)

    def _resolve_paths(self, base: Path) -> None:
        def fix(v: str | None) -> str | None:
            return None if v is None else str(v if Path(v).is_absolute() else base / v)
        self.output_dir = fix(self.output_dir)  # type: ignore[assignment]
        self.fr_files = {k: fix(v) for k, v in self.fr_files.items()}  # type: ignore[misc]
        for name in ("asvs_file", "synthesis_template", "generation_template", "keywords",
                     "trained_table", "ratings_file"):
            setattr(self, name, fix(getattr(self, name)))
        if isinstance(self.exclusions, str):
            self.exclusions = fix(self.exclusions)
        if self.gateway.get("script"):
            self.gateway = dict(self.gateway, script=fix(self.gateway["script"]))

    def validate(self) -> None:
        for name in ("asvs_file", "synthesis_template", "generation_template", "keywords",
                     "trained_table", "ratings_file"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name}: file not found: {p}")
        if isinstance(self.exclusions, str) and not Path(self.exclusions).is_file():
            raise ConfigError(f"exclusions: file not found: {self.exclusions}")
        if not self.fr_files:
            raise ConfigError("fr_files must name at least one project dataset")
        for project, p in self.fr_files.items():
            if not Path(p).is_file():
                raise ConfigError(f"fr_files[{project}]: file not found: {p}")
        if self.deterministic and self.seed is None:
            raise ConfigError("a seed is mandatory in deterministic mode")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 < self.filter_fraction <= 1:
            raise ConfigError("filter_fraction must lie in (0, 1]")
        TrainConfig(**self.train)

    def train_config(self) -> TrainConfig:
        params = dict(self.train)
        params.setdefault("seed", self.seed or 0)
        return TrainConfig(**params)

    def hashed_view(self) -> dict[str, Any]:
        """Everything that determines results: paths are replaced by content hashes."""
        view = asdict(self)
        view.pop("output_dir")
        view["fr_files"] = {p: file_sha256(f) for p, f in sorted(self.fr_files.items())}
        for name in ("asvs_file", "synthesis_template", "generation_template", "keywords",
                     "trained_table", "ratings_file"):
            if view[name]:
                view[name] = file_sha256(view[name])
        if isinstance(self.exclusions, str):
            view["exclusions"] = file_sha256(self.exclusions)
        gw = dict(view["gateway"])
        gw.pop("api_key", None)
        if gw.get("script"):
            gw["script"] = file_sha256(gw["script"])
        view["gateway"] = gw
        return view

    def run_hash(self) -> str:
        return sha256_hex(canonical_json(self.hashed_view()))


def _interpolate_secret(value: str | None) -> str | None:
    """Only credentials may reference the environment, as ``${NAME}``."""
    if value is None:
        return None
    m = _ENV_REF.match(value)
    if not m:
        return value
    if m.group(1) not in os.environ:
        raise ConfigError(f"environment variable {m.group(1)} is not set")
    return os.environ[m.group(1)]


def make_provider(spec: Mapping[str, Any]):
    kind = spec.get("kind", "hash")
    if kind == "hash":
        return HashEmbeddingProvider(int(spec.get("dim", 64)), int(spec.get("seed", 20240501)))
    if kind == "remote":
        return RemoteEmbeddingProvider(spec["url"], spec["model"], int(spec["dim"]),
                                       api_key=_interpolate_secret(spec.get("api_key")))
    raise ConfigError(f"unknown embedding kind {kind!r}")


def make_gateway(spec: Mapping[str, Any]) -> ChatClient:
    kind = spec.get("kind", "offline")
    if kind == "offline":
        return offline_client()
    if kind == "scripted":
        if not spec.get("script"):
            raise ConfigError("scripted gateway needs a script file")
        return ScriptedChatClient.from_file(spec["script"])
    if kind == "http":
        env = GatewayConfig.from_env()
        url = spec.get("chat_url") or env.chat_url
        if not url:
            raise ConfigError("http gateway needs chat_url or SRDERIVE_CHAT_URL")
        return HttpChatClient(url, api_key=_interpolate_secret(spec.get("api_key")) or env.api_key,
                              max_in_flight=int(spec.get("max_in_flight", 4)),
                              rate_per_sec=spec.get("rate_per_sec"))
    raise ConfigError(f"unknown gateway kind {kind!r}")


def make_scorer(spec: Mapping[str, Any], fit_texts: list[str]) -> LmScorer:
    kind = spec.get("kind", "offline-unigram")
    if kind == "offline-unigram":
        return fit_unigram_scorer(fit_texts)
    if kind == "uniform":
        return UnigramScorer(vocab_size=int(spec.get("vocab_size", 50257)))
    if kind == "http":
        env = GatewayConfig.from_env()
        url = spec.get("url") or env.scorer_url
        if not url:
            raise ConfigError("http scorer needs url or SRDERIVE_SCORER_URL")
        return RemoteLmScorer(url, spec.get("model", env.scorer_model),
                              api_key=_interpolate_secret(spec.get("api_key")) or env.api_key)
    raise ConfigError(f"unknown scorer kind {kind!r}")


def model_id(cfg: RunConfig) -> str:
    return str(cfg.gateway.get("chat_model", "gpt-4"))


# ---------------------------------------------------------------- stage store


class StageStore:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        (self.root / "stages").mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(name: str, inputs: Mapping[str, Any]) -> str:
        return sha256_hex(canonical_json({"stage": name, "inputs": inputs}))

    def path(self, name: str, key: str) -> Path:
        return self.root / "stages" / f"{name}-{key[:16]}"

    def load(self, name: str, key: str) -> dict[str, Any] | None:
        meta = self.path(name, key) / "stage.json"
        if not meta.is_file():
            return None
        data = json.loads(meta.read_text("utf-8"))
        if data.get("key") != key:
            raise ConfigError(f"stage directory {meta.parent} holds a different key")
        return data

    def run(self, name: str, inputs: Mapping[str, Any], run_hash: str,
            fn: Callable[[Path], dict[str, Any]]) -> tuple[Path, dict[str, Any], bool]:
        """Return (directory, stage metadata, reused)."""
        key = self.key(name, inputs)
        final = self.path(name, key)
        done = self.load(name, key)
        if done is not None:
            logger.info("stage %s: reusing %s", name, final.name)
            return final, done, True
        tmp = final.with_name(final.name + ".partial")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        summary = fn(tmp)
        files = {str(p.relative_to(tmp)): file_sha256(p)
                 for p in sorted(tmp.rglob("*")) if p.is_file()}
        meta = {"stage": name, "key": key, "inputs": dict(inputs), "run_hash": run_hash,
                "files": files, "summary": summary}
        (tmp / "stage.json").write_text(json.dumps(meta, indent=1, sort_keys=True), "utf-8")
        os.replace(tmp, final)
        logger.info("stage %s: wrote %s", name, final.name)
        return final, meta, False


# ---------------------------------------------------------------- stages


@dataclass
class ReportBundle:
    path: Path
    data: dict[str, Any]
    reused: list[str]
    ok: bool


def _dump(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False), "utf-8")


def load_corpus_from_config(cfg: RunConfig) -> VrCorpus:
    full = corpus_mod.load_asvs(cfg.asvs_file)
    if cfg.exclusions is None:
        prefixes = corpus_mod.default_exclusions()
    elif isinstance(cfg.exclusions, str):
        prefixes = corpus_mod.load_exclusion_config(json.loads(Path(cfg.exclusions).read_text("utf-8")))
    else:
        prefixes = list(cfg.exclusions)
    return corpus_mod.apply_exclusions(full, prefixes)


def _zero_shot(corpus: VrCorpus, provider) -> VrIndex:
    return build_index(corpus, provider, TokenWeightTable.uniform())


def _per_fr_items(srset: SrSet, decisions: list[bool]) -> dict[str, list[SrItem]]:
    per_fr: dict[str, list[SrItem]] = {}
    live = [r for r in srset.records if not r.gated]
    for r, ok in zip(live, decisions):
        per_fr.setdefault(r.fr_id, []).append(SrItem((r.fr_id, r.vr_id), r.text, ok))
    return per_fr


def evaluate_srset(srset: SrSet, decisions: list[bool], scorer: LmScorer,
                   seed: int) -> dict[str, Any]:
    live = [r for r in srset.records if not r.gated]
    si = [self_information(r.text, scorer, ok) for r, ok in zip(live, decisions)]
    per_fr = _per_fr_items(srset, decisions)
    sb = self_bleu(per_fr, seed) if len(per_fr) >= 2 else None
    return {
        "n_total": len(live),
        "n_in_scope": sum(decisions),
        "self_information_mean": (sum(si) / len(si)) if si else None,
        "self_bleu_mean": sb.mean if sb else None,
        "vocabulary_size": vocabulary_size([r.text for r in live], decisions),
        "self_information_values": si,
        "self_bleu_values": sb.values if sb else [],
    }


def end_to_end(cfg: RunConfig) -> ReportBundle:
    """Phase I (synthesize, filter, split, train) unless a trained table is
    supplied, then Phase II (index, retrieve + generate, scope, evaluate)."""
    cfg.validate()
    run_hash = cfg.run_hash()
    view = cfg.hashed_view()
    store = StageStore(cfg.output_dir)
    stages: dict[str, dict[str, Any]] = {}
    reused: list[str] = []
    failures: list[dict[str, Any]] = []

    def record(name: str, path: Path, meta: dict[str, Any], was_reused: bool) -> None:
        stages[name] = {"key": meta["key"], "dir": str(path.relative_to(store.root)),
                        "files": meta["files"], "summary": meta["summary"]}
        if was_reused:
            reused.append(name)

    provider = make_provider(cfg.embedding)
    gateway = None

    def gw() -> ChatClient:
        nonlocal gateway
        if gateway is None:
            gateway = make_gateway(cfg.gateway)
        return gateway

    current = "corpus"
    try:
        # corpus -------------------------------------------------------
        corpus = load_corpus_from_config(cfg)

        def do_corpus(d: Path) -> dict[str, Any]:
            _dump(d / "corpus.json", dict(corpus.to_dict(), run_hash=run_hash))
            return {"n_in_scope": len(corpus), "corpus_hash": corpus.content_hash(),
                    "n_deprecated": len(corpus.deprecated_ids()),
                    "n_excluded": len(corpus.exclusion_log) - len(corpus.deprecated_ids()),
                    "chapter_counts": {str(k): v for k, v in corpus.chapter_counts().items()}}

        corpus_inputs = {"asvs": view["asvs_file"] or _asset_sha(None, "asvs-4.0.3.json"),
                         "exclusions": view["exclusions"], "corpus_hash": corpus.content_hash()}
        p, meta, r = store.run("corpus", corpus_inputs, run_hash, do_corpus)
        record("corpus", p, meta, r)
        corpus_key = meta["key"]

        # phase I -------------------------------------------------------
        if cfg.trained_table:
            current = "train"
            table = TokenWeightTable.from_dict(json.loads(Path(cfg.trained_table).read_text("utf-8")))

            def do_import(d: Path) -> dict[str, Any]:
                (d / "weights.json").write_text(table.to_json(), "utf-8")
                return {"source": "supplied", "table_version": table.version}

            p, meta, r = store.run("train", {"supplied_table": view["trained_table"]}, run_hash,
                                   do_import)
            record("train", p, meta, r)
            train_key = meta["key"]
        else:
            current = "synth"
            template = SynthesisTemplate.load(cfg.synthesis_template)
            synth_inputs = {"corpus": corpus_key, "count": cfg.synth_count,
                            "template": _asset_sha(cfg.synthesis_template, "prompts/synthesis.json"),
                            "gateway": view["gateway"], "seed": cfg.seed}

            def do_synth(d: Path) -> dict[str, Any]:
                run = synthesize_corpus(corpus, cfg.synth_count, gw(), template=template,
                                        model_id=model_id(cfg), seed=cfg.seed,
                                        deterministic=cfg.deterministic)
                write_jsonl((asdict(p) for p in run.pairs), d / "candidates.jsonl")
                _dump(d / "failures.json", {"run_hash": run_hash, "failures": run.failures})
                return {"n_candidates": len(run.pairs), "n_failed_vrs": len(run.failures),
                        "n_requested": len(corpus) * cfg.synth_count}

            p, meta, r = store.run("synth", synth_inputs, run_hash, do_synth)
            record("synth", p, meta, r)
            synth_dir, synth_key = p, meta["key"]

            current = "filter"

            def do_filter(d: Path) -> dict[str, Any]:
                pairs = read_pairs(synth_dir / "candidates.jsonl")
                zs = _zero_shot(corpus, provider)
                save_index(zs, d / "zero_shot_index")
                decisions = rank_filter(pairs, zs, cfg.filter_fraction)
                write_jsonl((decision_record(x) for x in decisions), d / "decisions.jsonl")
                acc = sum(x.accepted for x in decisions)
                return {"n_pairs": len(decisions), "n_accepted": acc,
                        "threshold_rank": decisions[0].threshold_rank if decisions else None}

            p, meta, r = store.run("filter", {"synth": synth_key, "embedding": cfg.embedding,
                                              "fraction": cfg.filter_fraction}, run_hash, do_filter)
            record("filter", p, meta, r)
            filter_dir, filter_key = p, meta["key"]

            current = "split"

            def do_split(d: Path) -> dict[str, Any]:
                accepted = read_pairs(filter_dir / "decisions.jsonl", accepted_only=True)
                tr, va = split_train_val(accepted, cfg.split_ratio, cfg.seed or 0)
                write_jsonl((asdict(x) for x in tr), d / "train.jsonl")
                write_jsonl((asdict(x) for x in va), d / "val.jsonl")
                return {"n_train": len(tr), "n_val": len(va)}

            p, meta, r = store.run("split", {"filter": filter_key, "ratio": list(cfg.split_ratio),
                                             "seed": cfg.seed}, run_hash, do_split)
            record("split", p, meta, r)
            split_dir, split_key = p, meta["key"]

            current = "train"
            tcfg = cfg.train_config()

            def do_train(d: Path) -> dict[str, Any]:
                init = init_weight_table(compute_tf_idf(corpus), cfg.weight_aggregation)  # type: ignore[arg-type]
                idx = build_index(corpus, provider, init)
                table, report = train_weights(idx, read_pairs(split_dir / "train.jsonl"), tcfg,
                                              read_pairs(split_dir / "val.jsonl"))
                (d / "weights.json").write_text(table.to_json(), "utf-8")
                (d / "initial_weights.json").write_text(init.to_json(), "utf-8")
                _dump(d / "report.json", dict(report.to_dict(), run_hash=run_hash))
                return {"table_version": table.version, "epoch_losses": report.epoch_losses,
                        "val_top_k": report.val_top_k, "steps": report.steps}

            p, meta, r = store.run("train", {"split": split_key, "train": asdict(tcfg),
                                             "aggregation": cfg.weight_aggregation,
                                             "embedding": cfg.embedding}, run_hash, do_train)
            record("train", p, meta, r)
            train_key = meta["key"]
            table = TokenWeightTable.from_dict(json.loads((p / "weights.json").read_text("utf-8")))

        # phase II ------------------------------------------------------
        current = "index"

        def do_index(d: Path) -> dict[str, Any]:
            save_index(build_index(corpus, provider, table), d / "index")
            return {"n_vrs": len(corpus), "table_version": table.version}

        p, meta, r = store.run("index", {"train": train_key, "embedding": cfg.embedding,
                                         "corpus": corpus_key}, run_hash, do_index)
        record("index", p, meta, r)
        index = load_index(p / "index", provider, corpus=corpus)
        index_key = meta["key"]

        current = "frs"
        frsets: dict[str, FrSet] = {}
        for project, path in sorted(cfg.fr_files.items()):
            frsets[project] = corpus_mod.ingest_frs(path, project)

        def do_frs(d: Path) -> dict[str, Any]:
            out = {}
            for project, fs in frsets.items():
                corpus_mod.write_frs(fs, d / f"{project}.jsonl")
                out[project] = {"n_frs": len(fs), "rejected": [list(x) for x in fs.rejections]}
            return out

        p, meta, r = store.run("frs", {"fr_files": view["fr_files"]}, run_hash, do_frs)
        record("frs", p, meta, r)
        frs_key = meta["key"]

        gen_template = GenerationTemplate.load(cfg.generation_template)
        gen_common = {"frs": frs_key, "k": cfg.k, "gateway": view["gateway"], "seed": cfg.seed,
                      "sentinel": cfg.sentinel,
                      "template": _asset_sha(cfg.generation_template, "prompts/generation.json")}
        approaches = {"trained": (index, index_key)}
        if cfg.compare_baseline:
            approaches["zero-shot"] = (_zero_shot(corpus, provider),
                                       sha256_hex(canonical_json({"zero-shot": corpus_key,
                                                                  "embedding": cfg.embedding})))
        gen_dirs: dict[str, Path] = {}
        gen_keys: dict[str, str] = {}
        for approach, (idx, idx_key) in approaches.items():
            current = f"generate:{approach}"

            def do_generate(d: Path, idx: VrIndex = idx) -> dict[str, Any]:
                out = {}
                for project, fs in frsets.items():
                    with (d / f"retrieval-{project}.jsonl").open("w", encoding="utf-8") as fh:
                        for fr in fs.records:
                            res = retrieve_top_k(idx, fr, cfg.k)
                            fh.write(canonical_json({"fr_id": fr.id, "results": [
                                {"vr_id": x.vr_id, "score": x.score, "rank": x.rank} for x in res]})
                                + "\n")
                    srset = derive_srs(fs, idx, corpus, cfg.k, gw(), template=gen_template,
                                       sentinel=cfg.sentinel, model_id=model_id(cfg), seed=cfg.seed,
                                       deterministic=cfg.deterministic)
                    write_srset(srset, d / project, {"run_hash": run_hash, "approach": approach})
                    out[project] = srset.counts()
                return out

            p, meta, r = store.run(f"generate-{approach}", dict(gen_common, index=idx_key),
                                   run_hash, do_generate)
            record(f"generate-{approach}", p, meta, r)
            gen_dirs[approach], gen_keys[approach] = p, meta["key"]

        current = "scope"
        keyword_sets = load_keyword_config(cfg.keywords)
        known_vocab = {t for rec in corpus.records for t in tokenize(rec.composed_text).tokens}
        for fs in frsets.values():
            for fr in fs.records:
                known_vocab.update(tokenize(fr.text).tokens)

        def do_scope(d: Path) -> dict[str, Any]:
            out: dict[str, Any] = {}
            for approach, gdir in gen_dirs.items():
                for project in frsets:
                    srset = read_srset(gdir / project)
                    live = [x for x in srset.records if not x.gated]
                    texts = [x.text for x in live]
                    decisions = filter_out_of_scope(texts, project, keyword_sets) if live else []
                    flags = proper_noun_review_flags(texts, known_vocab)
                    rows = [{"fr_id": x.fr_id, "vr_id": x.vr_id, "in_scope": dec.in_scope,
                             "matched_keyword": dec.matched_keyword,
                             "matched_project": dec.matched_foreign_project, "review_flags": fl}
                            for x, dec, fl in zip(live, decisions, flags)]
                    write_jsonl(rows, d / f"{approach}-{project}.jsonl")
                    out[f"{approach}/{project}"] = {
                        "n_total": len(rows), "n_removed": sum(not x["in_scope"] for x in rows),
                        "n_flagged_for_review": sum(bool(x["review_flags"]) for x in rows)}
            return out

        p, meta, r = store.run("scope", {"generate": gen_keys,
                                         "keywords": _asset_sha(cfg.keywords, "keywords.json")},
                               run_hash, do_scope)
        record("scope", p, meta, r)
        scope_dir, scope_key = p, meta["key"]

        current = "evaluate"
        scorer_texts = [rec.composed_text for rec in corpus.records] + \
            [fr.text for fs in frsets.values() for fr in fs.records]

        def do_evaluate(d: Path) -> dict[str, Any]:
            scorer = make_scorer(cfg.scorer, scorer_texts)
            report: dict[str, Any] = {"run_hash": run_hash, "scorer_id": scorer.scorer_id,
                                      "projects": {}, "statistics": {}}
            for project, fs in frsets.items():
                per: dict[str, Any] = {}
                for approach, gdir in gen_dirs.items():
                    srset = read_srset(gdir / project)
                    rows = [json.loads(x) for x in
                            (scope_dir / f"{approach}-{project}.jsonl").read_text("utf-8").splitlines()]
                    per[approach] = evaluate_srset(srset, [x["in_scope"] for x in rows], scorer,
                                                   cfg.seed or 0)
                    per[approach]["counts"] = srset.counts()
                    per[approach]["duplicate_groups"] = [
                        g.to_dict() for g in consolidate_duplicates(srset.records, cfg.consolidation_threshold)
                    ] if srset.records else []
                report["projects"][project] = per
                if "zero-shot" in per:
                    stats = {}
                    for metric in ("self_information_values", "self_bleu_values"):
                        a, b = per["trained"][metric], per["zero-shot"][metric]
                        try:
                            w = welch_t(a, b)
                            stats[metric.replace("_values", "")] = asdict(w)
                        except SrDeriveError as exc:
                            stats[metric.replace("_values", "")] = {"error": str(exc)}
                    report["statistics"][project] = {"welch_trained_vs_zero_shot": stats}
            if cfg.ratings_file:
                ratings = json.loads(Path(cfg.ratings_file).read_text("utf-8"))
                report["statistics"]["icc"] = {name: asdict(icc_2k(m))
                                               for name, m in sorted(ratings.items())}
            attempted = sum(per["trained"]["counts"]["attempted"]
                            for per in report["projects"].values())
            n_study = min_sample_size(SampleSizeSpec(max(attempted, 1), cfg.study_confidence,
                                                     cfg.study_margin))
            pairs = [(p_, row["fr_id"], row["vr_id"]) for p_ in sorted(frsets)
                     for row in (json.loads(x) for x in (gen_dirs["trained"] / p_ / "srs.jsonl")
                                 .read_text("utf-8").splitlines())]
            report["study_sample"] = {
                "population": attempted, "n": min(n_study, len(pairs)),
                "pairs": [list(x) for x in sample_without_replacement(
                    pairs, min(n_study, len(pairs)), cfg.seed or 0)]}
            _dump(d / "evaluation.json", report)
            return {project: {a: {k: v for k, v in m.items() if not k.endswith("_values")
                                  and k != "duplicate_groups"}
                              for a, m in per.items()}
                    for project, per in report["projects"].items()}

        p, meta, r = store.run("evaluate", {"scope": scope_key, "scorer": cfg.scorer,
                                            "seed": cfg.seed,
                                            "consolidation": cfg.consolidation_threshold,
                                            "ratings": view["ratings_file"],
                                            "study": [cfg.study_confidence, cfg.study_margin]},
                               run_hash, do_evaluate)
        record("evaluate", p, meta, r)
        ok = True
    except SrDeriveError as exc:
        logger.error("stage %s failed: %s", current, exc)
        failures.append({"stage": current, "error": type(exc).__name__, "message": str(exc)})
        ok = False

    bundle = {"run_hash": run_hash, "config": view, "status": "ok" if ok else "failed",
              "stages": stages, "failures": failures}
    out = store.root / "bundles" / f"{run_hash[:16]}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(bundle, indent=1, sort_keys=True, ensure_ascii=False)
    if not out.exists() or out.read_text("utf-8") != text:
        tmp = out.with_suffix(".tmp")
        tmp.write_text(text, "utf-8")
        os.replace(tmp, out)
    return ReportBundle(out, bundle, reused, ok)
