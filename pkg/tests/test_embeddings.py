from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spatialnli.embeddings import (
    EmbeddingTable, ZeroVector, edit_distance, embed_phrase, load_embeddings, semantic_distance,
)

short = st.text(alphabet="abcXY", max_size=7)


def levenshtein_recursive(a: str, b: str) -> int:
    a, b = a.lower(), b.lower()

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


@given(short, short)
def test_edit_distance_matches_recursive_definition(a, b):
    assert edit_distance(a, b) == levenshtein_recursive(a, b)


@given(short, short, short)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a.lower() == b.lower())
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_edit_distance_examples():
    assert edit_distance("rivers", "river") == 1
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance("Texas", "texas") == 0


vec = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@given(vec, vec)
def test_semantic_distance_is_one_minus_cosine(u, v):
    E = EmbeddingTable({"u": np.array(u), "v": np.array(v)})
    u, v = np.array(u), np.array(v)
    expected = 1 - u.dot(v) / (np.linalg.norm(u) * np.linalg.norm(v))
    d = semantic_distance("u", "v", E)
    assert 0.0 <= d <= 2.0
    assert d == pytest.approx(min(2.0, max(0.0, expected)), abs=1e-9)
    assert semantic_distance("u", "u", E) == pytest.approx(0.0, abs=1e-9)


def test_phrase_vector_is_token_mean():
    E = EmbeddingTable({"a": np.array([1.0, 0.0]), "b": np.array([0.0, 3.0])})
    assert np.allclose(embed_phrase("a b", E), [0.5, 1.5])
    assert np.allclose(embed_phrase(["A", "b"], E), [0.5, 1.5])


def test_zero_vector_raises():
    E = EmbeddingTable({"z": np.zeros(2), "a": np.ones(2)})
    with pytest.raises(ZeroVector):
        semantic_distance("z", "a", E)


def test_unknown_words_are_deterministic_and_small():
    E1, E2 = EmbeddingTable({}, dim=8), EmbeddingTable({}, dim=8)
    v = E1.lookup("Zyzzyva")
    assert np.array_equal(v, E2.lookup("zyzzyva"))
    assert np.all(np.abs(v) <= 0.05)
    assert not np.array_equal(v, E1.lookup("other"))


def test_loader_header_vocab_limit_and_spaces(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("3 2\nCity 1 0\nat&t inc. 0 1\ncity 9 9\ntown 1 1\n")
    E = load_embeddings(p)
    assert E.dim == 2 and len(E) == 3
    assert np.array_equal(E.lookup("city"), [1.0, 0.0])
    assert np.array_equal(E.lookup("AT&T inc."), [0.0, 1.0])
    assert len(load_embeddings(p, vocab=["town"])) == 1
    assert len(load_embeddings(p, limit=1)) == 1


def test_sample_vectors_place_spot(sample_vectors):
    assert semantic_distance("place", "spot", sample_vectors) < 0.368
    assert semantic_distance("city", "state", sample_vectors) > 0.368
