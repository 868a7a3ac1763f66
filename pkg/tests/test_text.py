import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from srderive.errors import InvalidInputError, MalformedResponseError
from srderive.text import HashEmbeddingProvider, RemoteEmbeddingProvider, embed, tokenize


def test_tokenize_splits_on_non_alphanumerics():
    assert tokenize("Verify TLS 1.2!").tokens == ("verify", "tls", "1", "2")
    assert tokenize("abc").tokens == ("abc",)
    assert tokenize("---").tokens == ()


def test_underscore_is_a_separator():
    assert tokenize("session_id").tokens == ("session", "id")


@given(st.text(max_size=80))
def test_tokenize_idempotent_on_joined_output(text):
    toks = tokenize(text).tokens
    assert tokenize(" ".join(toks)).tokens == toks
    assert all(toks)


def test_truncated():
    seq = tokenize("a b c d")
    assert seq.truncated(2).tokens == ("a", "b")
    assert seq.truncated(None) is seq


def _oracle_vector(token, dim=64, seed=20240501):
    # restatement of the documented generator, kept independent of the module
    key = hashlib.blake2b(token.encode(), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    v = np.random.default_rng(np.random.PCG64(int.from_bytes(key, "little"))).standard_normal(dim)
    return v / np.sqrt((v * v).sum())


def test_hash_vectors_match_documented_generator():
    p = HashEmbeddingProvider()
    for tok in ("login", "session", "ü", "42"):
        np.testing.assert_allclose(p.vector(tok), _oracle_vector(tok), rtol=0, atol=1e-15)


def test_embed_rows_unit_norm_and_deterministic():
    p = HashEmbeddingProvider()
    a = embed(p, tokenize("login"))
    b = embed(HashEmbeddingProvider(), tokenize("login"))
    assert np.array_equal(a.matrix, b.matrix)
    m = embed(p, tokenize("a a session")).matrix
    assert np.array_equal(m[0], m[1])
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-6)


def test_distinct_tokens_not_parallel():
    p = HashEmbeddingProvider()
    assert float(p.vector("login") @ p.vector("logout")) < 1.0
    assert float(p.vector("login") @ p.vector("login")) == pytest.approx(1.0, abs=1e-12)


def test_random_pairs_near_orthogonal():
    p = HashEmbeddingProvider()
    rng = np.random.default_rng(0)
    cos = []
    for _ in range(10_000):
        a, b = (f"t{x}" for x in rng.integers(0, 10**9, size=2))
        cos.append(abs(float(p.vector(a) @ p.vector(b))))
    mean = float(np.mean(cos))
    # expected E|cos| for random unit vectors in d=64 is about sqrt(2/(pi*64)) = 0.0997
    assert mean < 0.25
    assert mean == pytest.approx(np.sqrt(2 / (np.pi * 64)), rel=0.05)


def test_cosine_symmetry():
    p = HashEmbeddingProvider(dim=16, seed=3)
    assert float(p.vector("u") @ p.vector("v")) == float(p.vector("v") @ p.vector("u"))


def test_embed_empty_sequence_rejected():
    with pytest.raises(InvalidInputError):
        embed(HashEmbeddingProvider(), tokenize("..."))


def test_small_dim_rejected():
    with pytest.raises(InvalidInputError):
        HashEmbeddingProvider(dim=4)


def test_remote_provider_renormalizes(stub_server):
    def handler(path, body):
        return 200, {"embeddings": [[3.0, 4.0] + [0.0] * 6 for _ in body["tokens"]]}, {}

    srv = stub_server(handler)
    p = RemoteEmbeddingProvider(srv.url + "/embed", "m", 8, api_key="k")
    m = embed(p, tokenize("two tokens")).matrix
    assert m.shape == (2, 8)
    np.testing.assert_allclose(m[0, :2], [0.6, 0.8])
    path, body, headers = srv.requests[0]
    assert body == {"model": "m", "tokens": ["two", "tokens"]}
    assert headers["Authorization"] == "Bearer k"


def test_remote_provider_shape_mismatch(stub_server):
    srv = stub_server(lambda path, body: (200, {"embeddings": [[1.0, 0.0]]}, {}))
    p = RemoteEmbeddingProvider(srv.url, "m", 8)
    with pytest.raises(MalformedResponseError):
        p.embed_tokens(("a", "b"))
