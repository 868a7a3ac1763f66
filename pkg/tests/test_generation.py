import pytest
from conftest import tiny_corpus

from srderive.corpus import FrRecord, FrSet, in_scope_corpus
from srderive.errors import GenerationError, InvalidInputError, TemplateError
from srderive.gateway import CallableChatClient, ChatResponse, ScriptedChatClient
from srderive.generation import (
    DEFAULT_SENTINEL,
    GenerationTemplate,
    SrRecord,
    build_generation_prompt,
    consolidate_duplicates,
    derive_srs,
    generate_sr,
    generation_request,
    interpret_response,
    read_srset,
    write_srset,
)
from srderive.offline import offline_client
from srderive.retriever import build_index
from srderive.synthesis import load_asset
from srderive.text import HashEmbeddingProvider
from srderive.weighting import TokenWeightTable

FR = FrRecord("ePurse", "ePurse-01", "The card holder shall be able to load value onto the card at a terminal.")


@pytest.fixture(scope="module")
def corpus():
    return in_scope_corpus()


@pytest.fixture(scope="module")
def index(corpus):
    return build_index(corpus, HashEmbeddingProvider(), TokenWeightTable.uniform())


def test_prompt_embeds_texts_and_sentinel(corpus):
    vr = corpus.get("3.3.1")
    p = build_generation_prompt(FR, vr, GenerationTemplate.load(), "SKIP_ME")
    assert FR.text in p.text and vr.composed_text in p.text
    assert "answer with the line SKIP_ME" in p.text
    assert p.text.count("SKIP_ME") >= 2  # instruction and the irrelevant exemplar


def test_multiline_sentinel_rejected(corpus):
    with pytest.raises(InvalidInputError):
        build_generation_prompt(FR, corpus.get("3.3.1"), GenerationTemplate.load(), "A\nB")


def test_template_needs_one_of_each_exemplar():
    data = load_asset("generation.json")
    data["examples"] = [dict(e, kind="relevant") for e in data["examples"]]
    with pytest.raises(TemplateError):
        GenerationTemplate.from_dict(data)
    data = load_asset("generation.json")
    data["examples"] = data["examples"][:1]
    with pytest.raises(TemplateError):
        GenerationTemplate.from_dict(data)


def test_sentinel_response_is_gated():
    r = interpret_response(FR, "3.3.1", ChatResponse("  NOT_APPLICABLE\n"), DEFAULT_SENTINEL)
    assert r.gated and r.text == ""
    r = interpret_response(FR, "3.3.1", ChatResponse("NOT_APPLICABLE because x"), DEFAULT_SENTINEL)
    assert not r.gated and r.text == "NOT_APPLICABLE because x"
    with pytest.raises(GenerationError):
        interpret_response(FR, "3.3.1", ChatResponse("   "), DEFAULT_SENTINEL)


def test_record_invariants():
    with pytest.raises(InvalidInputError):
        SrRecord("p", "f", "v", True, "text", "raw")
    with pytest.raises(InvalidInputError):
        SrRecord("p", "f", "v", False, " ", "raw")


def test_generate_sr_offline(corpus):
    r = generate_sr(FR, corpus.get("3.3.1"), offline_client())
    assert r.vr_id == "3.3.1" and r.fr_id == "ePurse-01"


def test_single_pair_sentinel(corpus, index):
    frs = FrSet("ePurse", (FR,))
    out = derive_srs(frs, index, corpus, 1, CallableChatClient(lambda r: DEFAULT_SENTINEL))
    assert len(out.records) == 1 and out.records[0].gated
    assert out.counts() == {"attempted": 1, "generated": 0, "gated": 1, "failed": 0}


def test_k_must_be_positive(corpus, index):
    with pytest.raises(InvalidInputError):
        derive_srs(FrSet("ePurse", (FR,)), index, corpus, 0, offline_client())


def test_corpus_mismatch(index):
    with pytest.raises(InvalidInputError):
        derive_srs(FrSet("ePurse", (FR,)), index, tiny_corpus(["a b"]), 1, offline_client())


def _frs(n):
    words = ["balance", "session", "password", "upload", "report", "terminal", "log", "key"]
    return FrSet("ePurse", tuple(
        FrRecord("ePurse", f"ePurse-{i:02d}",
                 f"The clerk shall be able to review the {words[i % 8]} and {words[(i * 3) % 8]} data.")
        for i in range(n)))


def test_counts_add_up_with_failures(corpus, index):
    calls = {"n": 0}

    def flaky(req):
        calls["n"] += 1
        if "session" in req.messages[-1].content.split("FR:")[-1]:
            return ""
        return "Ok, the system shall protect it." if calls["n"] % 2 else DEFAULT_SENTINEL

    out = derive_srs(_frs(8), index, corpus, 3, CallableChatClient(flaky))
    c = out.counts()
    assert c["attempted"] == 24 == c["generated"] + c["gated"] + c["failed"]
    assert c["failed"] > 0 and all(f["error"] == "GenerationError" for f in out.failures)
    ranks = [(r.fr_id, r.rank) for r in out.records]
    assert ranks == sorted(ranks)


def test_scripted_run_is_byte_identical(tmp_path, corpus, index):
    frs = _frs(4)
    script = ScriptedChatClient()
    tpl = GenerationTemplate.load()
    from srderive.retriever import retrieve_top_k
    for fr in frs.records:
        for res in retrieve_top_k(index, fr, 2):
            req = generation_request(fr, corpus.get(res.vr_id), tpl, DEFAULT_SENTINEL, "gpt-4", 0)
            script.add(req, f"SR for {fr.id} under {res.vr_id}.")
    a = write_srset(derive_srs(frs, index, corpus, 2, script), tmp_path / "a")
    b = write_srset(derive_srs(frs, index, corpus, 2, script), tmp_path / "b")
    for name in ("srs.jsonl", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    back = read_srset(a)
    assert [r.text for r in back.records][0].startswith("SR for ePurse-00")
    assert back.counts()["generated"] == 8


def test_scripted_miss_becomes_failure(corpus, index):
    out = derive_srs(FrSet("ePurse", (FR,)), index, corpus, 2, ScriptedChatClient())
    assert len(out.failures) == 2 and not out.records


# ------------------------------------------------------------------ consolidation


def _sr(fr, vr, text):
    return SrRecord("P", fr, vr, False, text, text)


def test_identical_texts_group():
    g = consolidate_duplicates([_sr("f1", "1.1.1", "lock the account"), _sr("f2", "1.1.1", "Lock the account.")])
    assert len(g) == 1 and g[0].members == (("f1", "1.1.1"), ("f2", "1.1.1"))


def test_disjoint_texts_do_not_group():
    assert consolidate_duplicates([_sr("f1", "v", "alpha beta"), _sr("f2", "v", "gamma delta")]) == []


def test_threshold_boundary():
    a = " ".join(f"w{i}" for i in range(9))
    b = " ".join(f"w{i}" for i in range(1, 10))  # 8 shared of 10 distinct
    recs = [_sr("f1", "v", a), _sr("f2", "v", b)]
    assert len(consolidate_duplicates(recs, 0.8)) == 1
    assert consolidate_duplicates(recs, 0.9) == []


def test_order_independent_and_skips_gated():
    recs = [_sr("f10", "v", "x y z"), _sr("f2", "v", "x y z"), _sr("f3", "v", "x y z q"),
            SrRecord("P", "f1", "v", True, "", "NOT_APPLICABLE")]
    g1 = consolidate_duplicates(recs, 0.7)
    g2 = consolidate_duplicates(list(reversed(recs)), 0.7)
    assert g1 == g2 and g1[0].representative == ("f2", "v")
    with pytest.raises(InvalidInputError):
        consolidate_duplicates(recs, 0)
    with pytest.raises(InvalidInputError):
        consolidate_duplicates([])
