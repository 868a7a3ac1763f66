import json

import pytest
from hypothesis import given, strategies as st

from srderive.errors import ConfigError, ParseError
from srderive.scope import (
    ProjectKeywordSet,
    decide,
    filter_out_of_scope,
    load_keyword_config,
    proper_noun_review_flags,
)

PSAM = "Offline authentication must be conducted between the PSAM and card."


@pytest.fixture(scope="module")
def kw():
    return load_keyword_config()


def test_foreign_keyword_removes(kw):
    d = filter_out_of_scope([PSAM], "GPS", kw)[0]
    assert not d.in_scope
    assert (d.matched_keyword, d.matched_foreign_project) == ("psam", "ePurse")


def test_own_keyword_keeps(kw):
    assert filter_out_of_scope([PSAM], "ePurse", kw)[0].in_scope
    assert decide(PSAM, "epurse", kw).in_scope


def test_no_keyword_in_scope(kw):
    texts = ["The system shall lock the account after five failures."]
    assert all(d.in_scope for p in kw for d in filter_out_of_scope(texts, p, kw))


def test_whole_token_only(kw):
    assert decide("Encrypt the opcpnx field.", "GPS", kw).in_scope
    assert not decide("Encrypt the CPN field.", "GPS", kw).in_scope
    assert not decide("Send it to the CPN.", "ePurse", kw).in_scope


def test_unknown_target(kw):
    with pytest.raises(ConfigError):
        filter_out_of_scope([PSAM], "Nope", kw)


def test_single_project_rejected():
    with pytest.raises(ConfigError):
        filter_out_of_scope([PSAM], "A", load_keyword_config({"A": ["x"]}))


def test_keyword_validation():
    with pytest.raises(ConfigError):
        ProjectKeywordSet("A", ("two words",))
    with pytest.raises(ConfigError):
        ProjectKeywordSet("A", ("x", "X"))
    with pytest.raises(ConfigError):
        ProjectKeywordSet("A", ())
    assert ProjectKeywordSet("A", ("PSAM",)).keywords == ("psam",)


def test_config_file(tmp_path):
    p = tmp_path / "kw.json"
    p.write_text(json.dumps({"A": ["alpha"], "B": ["beta"]}))
    assert set(load_keyword_config(p)) == {"A", "B"}
    p.write_text("[1, 2]")
    with pytest.raises(ParseError):
        load_keyword_config(p)


_words = st.sampled_from(["card", "psam", "gps", "cpn", "session", "log", "the", "key"])


@given(st.lists(_words, min_size=1, max_size=8), st.sampled_from(["card", "psam", "cpn", "gps"]))
def test_adding_foreign_keyword_never_restores_scope(words, extra):
    kw = load_keyword_config()
    text = " ".join(words)
    for target in kw:
        before = decide(text, target, kw).in_scope
        after = decide(text + " " + extra, target, kw).in_scope
        assert not (after and not before)


def test_proper_noun_flags():
    flags = proper_noun_review_flags(
        ["The Objectiver tool shall log access.", "Sessions expire. Tokens rotate daily.",
         "all lowercase text here", "Use the Card reader."],
        known_vocabulary={"card"})
    assert flags == [["Objectiver"], [], [], []]
