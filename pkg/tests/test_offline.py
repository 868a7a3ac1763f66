from srderive.gateway import ChatRequest, Message
from srderive.offline import content_words, fit_unigram_scorer, generate, respond, synthesize


def test_synthesize_count_and_determinism():
    vr = "V3 Session Management - Verify the session token is rotated on login."
    out = synthesize(vr, 7)
    assert len(out.splitlines()) == 7 and out == synthesize(vr, 7)
    assert out.startswith("1. ")


def test_generate_gates_without_overlap():
    assert generate("The clerk shall print receipts.", "X - Verify TLS is used.", "NA") == "NA"
    sr = generate("The clerk shall rotate the session.", "X - Verify the session expires.", "NA")
    assert sr != "NA" and "session expires" in sr


def test_respond_routes_by_prompt():
    req = ChatRequest("m", (Message("user", "Write exactly 3 FRs.\nTarget VR: A - Verify the password length."),))
    assert len(respond(req).splitlines()) == 3


def test_content_words_drop_stopwords():
    assert content_words("Verify that the session token is random") == ["session", "token", "random"]


def test_unigram_scorer_case_folding():
    s = fit_unigram_scorer(["Alpha beta", "alpha"])
    assert s._prob("ALPHA") == s._prob("alpha") > s._prob("zzz")
