import json
from importlib import resources

import pytest

from srderive import corpus as cm
from srderive.corpus import (
    FrSet,
    VrCorpus,
    apply_exclusions,
    compose_vr_text,
    default_exclusions,
    ingest_asvs,
    ingest_frs,
    load_asvs,
    make_vr,
    parse_frs,
    write_frs,
)
from srderive.errors import ParseError, ValidationError

CHAPTER_COUNTS = [39, 57, 20, 9, 30, 16, 12, 16, 8, 10, 8, 15, 13, 24]


@pytest.fixture(scope="module")
def full():
    return load_asvs()


def test_bundled_counts(full):
    assert len(full) == 277
    assert len(full.deprecated_ids()) == 9
    assert list(full.chapter_counts().values()) == CHAPTER_COUNTS
    assert list(full.chapter_counts()) == list(range(1, 15))


def test_default_exclusions_leave_241(full):
    kept = apply_exclusions(full, default_exclusions())
    assert len(kept) == 241
    assert sum(1 for _, why in kept.exclusion_log if why == "process-oriented") == 36


def test_exclusion_prefix_matches_whole_components(full):
    kept = apply_exclusions(full, ["1.1", "14.1"])
    assert "2.1.1" in kept.ids
    assert "1.10.1" in kept.ids  # "1.1" must not swallow section 1.10
    assert not any(i.startswith("1.1.") for i in kept.ids)
    assert apply_exclusions(full, []).records == full.records


def test_nested_chapter_subset():
    doc = json.loads(resources.files("srderive.data").joinpath("asvs-4.0.3.json").read_text())
    doc["Requirements"] = [c for c in doc["Requirements"] if c["Shortcode"] == "V2"]
    assert len(ingest_asvs(doc)) == 57
    doc["Requirements"] = []
    assert len(ingest_asvs(doc)) == 0


def test_flat_form(tmp_path):
    rows = [{"req_id": "V2.1.1", "chapter_id": "V2", "chapter_name": "Authentication",
             "section_name": "Password Security",
             "req_description": "Verify that user set passwords are at least 12 characters in length."},
            {"req_id": "V2.1.2", "chapter_id": "V2", "chapter_name": "Authentication",
             "section_name": "Password Security", "req_description": "[DELETED, DUPLICATE OF 2.1.1]"}]
    c = ingest_asvs(rows)
    assert c.ids == ["2.1.1"] and c.deprecated_ids() == ["2.1.2"]


def test_parse_errors_carry_json_path():
    with pytest.raises(ParseError) as e:
        ingest_asvs({"requirements": [{"req_id": "V2.1.1"}]})
    assert e.value.path == "$.requirements[0]"
    with pytest.raises(ParseError):
        ingest_asvs({"nothing": 1})


def test_compose_examples():
    r = make_vr("2.1.1", 2, "Authentication", "Password Security",
                "Verify that user set passwords are at least 12 characters in length "
                "(after multiple spaces are combined).")
    assert r.composed_text == ("Authentication - Password Security - Verify that user set passwords "
                               "are at least 12 characters in length (after multiple spaces are combined).")
    x = make_vr("1.1.1", 1, "x", "x", "x")
    assert compose_vr_text(x, "-") == "x-x-x"
    assert make_vr("1.1.2", 1, "A", "", "D").composed_text == "A - D"


def test_corpus_roundtrip(full):
    again = VrCorpus.from_dict(json.loads(json.dumps(full.to_dict())))
    assert again == full
    assert again.content_hash() == full.content_hash()


def test_deprecated_records_refused():
    dead = make_vr("1.1.1", 1, "A", "B", "[DELETED]")
    with pytest.raises(ValidationError):
        VrCorpus((dead,))


def test_fr_ingest_and_roundtrip(tmp_path):
    f = tmp_path / "demo.jsonl"
    f.write_text('{"id": "a", "text": "The user shall log in."}\n\n{"text": "Second one."}\n'
                 '{"text": "   "}\n')
    fs = ingest_frs(f)
    assert fs.project == "demo"
    assert [r.id for r in fs.records] == ["a", "demo-3"]
    assert fs.rejections == ((4, "blank text"),)
    out = tmp_path / "out.jsonl"
    write_frs(fs, out)
    assert ingest_frs(out, "demo").records == fs.records


def test_fr_token_band():
    long = " ".join(["word"] * 513)
    fs = parse_frs([json.dumps({"text": "ok"}), json.dumps({"text": long})], "p")
    assert len(fs) == 1 and fs.rejections[0][0] == 2


def test_fr_set_invariants():
    with pytest.raises(ValidationError):
        FrSet("p", ())
    r = cm.FrRecord("p", "x", "text")
    with pytest.raises(ValidationError):
        FrSet("p", (r, r))
    assert len(parse_frs(['{"text": "one record"}'], "p")) == 1
