import json

import numpy as np
import pytest
from conftest import tiny_corpus
from hypothesis import given, settings, strategies as st
from oracles import fd_gradient, naive_score, random_corpus, unit_rows

from srderive.corpus import VrCorpus, in_scope_corpus
from srderive.errors import EmptyDocumentError, IndexLoadError, InvalidInputError, QueryError
from srderive.retriever import (
    TrainConfig,
    build_index,
    load_index,
    loss_and_grad,
    make_examples,
    rank_of,
    retrieve_top_k,
    save_index,
    score,
    score_from_cosines,
    train_weights,
)
from srderive.text import HashEmbeddingProvider
from srderive.weighting import TokenWeightTable, compute_tf_idf, init_weight_table


@pytest.fixture(scope="module")
def provider():
    return HashEmbeddingProvider()


@pytest.fixture(scope="module")
def asvs_index(provider):
    c = in_scope_corpus()
    return c, build_index(c, provider, init_weight_table(compute_tf_idf(c)))


# ------------------------------------------------------------------ scoring


def test_score_identical_unit_rows():
    rows = np.eye(4)
    assert score(rows, rows, [1.0] * 4) == 4.0


def test_score_hand_example():
    cos = np.array([[0.5, 0.9, 0.1], [0.2, 0.3, 0.8]])
    # weighted rows: [0.5, 1.8, 0.05] and [0.2, 0.6, 0.4]
    assert score_from_cosines(cos, np.array([1.0, 2.0, 0.5])) == pytest.approx(2.4, abs=1e-15)


def test_score_orthogonal_is_zero():
    e = np.eye(6)
    assert score(e[:3], e[3:], [5.0, 0.1, 2.0]) == 0.0


def test_empty_document_rejected():
    with pytest.raises(EmptyDocumentError):
        score(np.eye(2), np.zeros((0, 2)), [])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(2, 16), st.integers(0, 2**32 - 1))
def test_score_matches_triple_loop(m, n, d, seed):
    rng = np.random.default_rng(seed)
    fr, vr = unit_rows(rng, m, d), unit_rows(rng, n, d)
    w = rng.uniform(0.05, 5.0, n)
    expect = naive_score(fr, vr, w)
    assert score(fr, vr, w) == pytest.approx(expect, rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_appending_fr_token_never_decreases_nonnegative_score(seed):
    rng = np.random.default_rng(seed)
    cos = rng.uniform(0, 1, (5, 4))
    w = rng.uniform(0.1, 3, 4)
    assert score_from_cosines(cos, w) >= score_from_cosines(cos[:4], w)


def test_index_scores_match_direct_score(asvs_index, provider):
    c, idx = asvs_index
    q = idx.embed_query("The user shall reset the password with a session token.")
    all_scores = idx.score_all(q)
    for pos in (0, 17, 240):
        vid = idx.vr_ids[pos]
        direct = score(q, idx.vr_embeddings(vid), idx.vr_weights(vid))
        assert all_scores[pos] == pytest.approx(direct, rel=1e-12)


# ------------------------------------------------------------------ retrieval


def test_top_k_over_asvs(asvs_index):
    _, idx = asvs_index
    res = retrieve_top_k(idx, "The cardholder shall change the account password.", 5)
    assert [r.rank for r in res] == [1, 2, 3, 4, 5]
    assert all(a.score >= b.score for a, b in zip(res, res[1:]))


def test_full_ranking_consistent_with_scores(asvs_index):
    _, idx = asvs_index
    res = retrieve_top_k(idx, "Session cookies shall expire.", len(idx))
    assert sorted(r.vr_id for r in res) == sorted(idx.vr_ids)
    for a, b in zip(res, res[1:]):
        assert a.score > b.score or (a.score == b.score)


def test_ties_go_to_lower_natural_id(provider):
    texts = [f"unrelated filler words number {w}" for w in "abcdefghi"] + ["verify session timeout"] * 2
    c = tiny_corpus(texts)  # ids 3.1.1 .. 3.1.11; the duplicates are 3.1.10 and 3.1.11
    idx = build_index(c, provider, TokenWeightTable.uniform())
    top = retrieve_top_k(idx, "session timeout", 2)
    assert top[0].score == top[1].score
    assert [r.vr_id for r in top] == ["3.1.10", "3.1.11"]


def test_k_bounds(asvs_index):
    _, idx = asvs_index
    with pytest.raises(InvalidInputError):
        retrieve_top_k(idx, "x", 0)
    with pytest.raises(InvalidInputError):
        retrieve_top_k(idx, "x", len(idx) + 1)
    with pytest.raises(QueryError):
        retrieve_top_k(idx, "?!", 3)


def test_build_rejects_empty_corpus(provider):
    with pytest.raises(InvalidInputError):
        build_index(VrCorpus(()), provider, TokenWeightTable.uniform())


def test_asvs_index_size(asvs_index):
    assert len(asvs_index[1]) == 241


# ------------------------------------------------------------------ persistence


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_rebuild_is_byte_identical(tmp_path, provider):
    c = in_scope_corpus()
    t = init_weight_table(compute_tf_idf(c))
    save_index(build_index(c, provider, t), tmp_path / "a")
    save_index(build_index(c, HashEmbeddingProvider(), t), tmp_path / "b")
    fa, fb = _files(tmp_path / "a"), _files(tmp_path / "b")
    fa.pop("manifest.json"), fb.pop("manifest.json")  # carries the build time
    assert fa == fb


def test_roundtrip_is_bit_exact(tmp_path, asvs_index, provider):
    c, idx = asvs_index
    save_index(idx, tmp_path / "i")
    back = load_index(tmp_path / "i", provider, corpus=c)
    assert np.array_equal(back.embeddings, idx.embeddings)
    q = idx.embed_query("The merchant shall upload settlement files.")
    assert np.array_equal(back.score_all(q), idx.score_all(q))
    assert retrieve_top_k(back, "upload files", 5) == retrieve_top_k(idx, "upload files", 5)
    assert back.weight_table == idx.weight_table


def test_corrupted_offsets(tmp_path, asvs_index, provider):
    _, idx = asvs_index
    save_index(idx, tmp_path / "i")
    (tmp_path / "i" / "offsets.json").write_text("{not json")
    with pytest.raises(IndexLoadError) as e:
        load_index(tmp_path / "i", provider)
    assert e.value.file == "offsets.json"


def test_truncated_matrix(tmp_path, asvs_index, provider):
    _, idx = asvs_index
    save_index(idx, tmp_path / "i")
    blob = tmp_path / "i" / "embeddings.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(IndexLoadError) as e:
        load_index(tmp_path / "i", provider)
    assert e.value.file == "embeddings.bin"


def test_other_corpus_refused(tmp_path, asvs_index, provider):
    _, idx = asvs_index
    save_index(idx, tmp_path / "i")
    other = tiny_corpus(["verify one thing here", "verify another thing there"])
    with pytest.raises(IndexLoadError):
        load_index(tmp_path / "i", provider, corpus=other)


def test_provider_mismatch_refused(tmp_path, asvs_index):
    _, idx = asvs_index
    save_index(idx, tmp_path / "i")
    with pytest.raises(IndexLoadError):
        load_index(tmp_path / "i", HashEmbeddingProvider(seed=1))


def test_format_version_refused(tmp_path, asvs_index, provider):
    _, idx = asvs_index
    save_index(idx, tmp_path / "i")
    m = tmp_path / "i" / "manifest.json"
    data = json.loads(m.read_text())
    data["format_version"] = 99
    m.write_text(json.dumps(data))
    with pytest.raises(IndexLoadError):
        load_index(tmp_path / "i", provider)


# ------------------------------------------------------------------ training


def _small_setup(seed, n_docs=12):
    rng = np.random.default_rng(seed)
    c = random_corpus(rng, n_docs)
    idx = build_index(c, HashEmbeddingProvider(dim=16, seed=seed), init_weight_table(compute_tf_idf(c)))
    return rng, c, idx


def test_gradient_matches_finite_differences():
    for seed in range(5):
        rng, c, idx = _small_setup(seed)
        gold = rng.choice(len(c), 4, replace=False)
        batch = make_examples(idx, [(c.records[g].description, c.records[g].id) for g in gold])
        analytic = loss_and_grad(batch, idx, idx.weight_table)[1]
        numeric = fd_gradient(batch, idx, idx.weight_table)
        for t in analytic:
            assert analytic[t] == pytest.approx(numeric[t], rel=1e-4, abs=1e-9), t


def test_gradient_with_extra_negatives_and_temperature():
    rng, c, idx = _small_setup(11)
    batch = make_examples(idx, [(c.records[i].description, c.records[i].id) for i in (0, 1, 2)])
    kw = dict(temperature=0.7, extra_negatives=[c.records[5].id, c.records[6].id])
    analytic = loss_and_grad(batch, idx, idx.weight_table, **kw)[1]
    numeric = fd_gradient(batch, idx, idx.weight_table, **kw)
    for t in analytic:
        assert analytic[t] == pytest.approx(numeric[t], rel=1e-4, abs=1e-9)


def test_absent_token_has_no_gradient_entry():
    _, c, idx = _small_setup(3)
    batch = make_examples(idx, [("session token zebra", c.records[0].id),
                                ("cookie login", c.records[1].id)])
    grad = loss_and_grad(batch, idx, idx.weight_table)[1]
    assert "zebra" not in grad
    assert set(grad) == set(idx.tokens[c.records[0].id]) | set(idx.tokens[c.records[1].id])


def test_loss_vanishes_at_perfect_separation(provider):
    c = tiny_corpus(["alpha beta gamma delta", "omega psi chi phi"])
    idx = build_index(c, provider, TokenWeightTable.uniform())
    batch = make_examples(idx, [("alpha beta gamma delta", "3.1.1"), ("omega psi chi phi", "3.1.2")])
    loss, _ = loss_and_grad(batch, idx, idx.weight_table, temperature=0.01)
    assert loss < 1e-30
    assert loss_and_grad(batch, idx, idx.weight_table)[0] > loss


def test_zero_learning_rate_keeps_weights():
    _, c, idx = _small_setup(4, 20)
    pairs = [(r.description, r.id) for r in c.records]
    table, report = train_weights(idx, pairs, TrainConfig(learning_rate=0.0, batch_size=4))
    assert dict(table.weights) == dict(idx.weight_table.weights)
    assert report.steps == 5 and table.version == idx.weight_table.version + 5


def test_training_is_seeded():
    _, c, idx = _small_setup(5, 20)
    pairs = [(r.description, r.id) for r in c.records]
    cfg = TrainConfig(learning_rate=0.05, batch_size=4, epochs=2, seed=9)
    a, ra = train_weights(idx, pairs, cfg, pairs[:5])
    b, rb = train_weights(idx, pairs, cfg, pairs[:5])
    assert a == b and ra.epoch_losses == rb.epoch_losses
    assert ra.epochs_run == 2 and len(ra.val_top_k) == 2


def test_early_stop_records_reason():
    _, c, idx = _small_setup(6, 20)
    pairs = [(r.description, r.id) for r in c.records]
    cfg = TrainConfig(learning_rate=0.0, batch_size=4, epochs=5, patience=1)
    _, report = train_weights(idx, pairs, cfg, pairs[:4])
    assert report.epochs_run == 2 and report.stopped_early


def test_weights_stay_in_bounds():
    _, c, idx = _small_setup(7, 20)
    pairs = [(r.description, r.id) for r in c.records]
    table, _ = train_weights(idx, pairs, TrainConfig(learning_rate=1e4, batch_size=4))
    lo, hi = table.bounds
    assert all(lo <= w <= hi for w in table.weights.values())


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=1)
    with pytest.raises(InvalidInputError):
        TrainConfig(learning_rate=-1.0)
    assert TrainConfig().learning_rate == 6e-7 and TrainConfig().backbone_learning_rate == 3e-5


def test_rank_of(asvs_index):
    _, idx = asvs_index
    res = retrieve_top_k(idx, "password reset", 3)
    assert rank_of(idx, "password reset", res[2].vr_id) == 3


def test_unknown_training_vr():
    _, _, idx = _small_setup(8)
    with pytest.raises(InvalidInputError):
        make_examples(idx, [("text", "9.9.9")])
