import pytest
from hypothesis import given, strategies as st

from spatialnli.data import Example, load_corpus, save_corpus, split_corpus, tokenize
from spatialnli.logic_form import ParseError


def test_tokenize_detaches_punctuation_but_keeps_abbreviations():
    assert tokenize("What is the population of San Antonio?") == \
        ["What", "is", "the", "population", "of", "San", "Antonio", "?"]
    assert tokenize("How tall is Mt. Whitney ?") == ["How", "tall", "is", "Mt.", "Whitney", "?"]
    assert tokenize("Where is St. Louis?") == ["Where", "is", "St.", "Louis", "?"]
    assert tokenize("rivers, lakes.") == ["rivers", ",", "lakes", "."]


@given(st.lists(st.sampled_from(["what", "is", "Texas", "?", ",", "rivers"]), max_size=8))
def test_tokenize_is_identity_on_spaced_text(toks):
    assert tokenize(" ".join(toks)) == toks


def test_split_is_seeded_and_partitions(sample_examples):
    tr1, te1 = split_corpus(sample_examples, 0.25, seed=3)
    tr2, te2 = split_corpus(sample_examples, 0.25, seed=3)
    assert (tr1, te1) == (tr2, te2)
    assert len(te1) == round(len(sample_examples) * 0.25)
    assert sorted(map(id, tr1 + te1)) == sorted(map(id, sample_examples))
    assert split_corpus(sample_examples, 0.25, seed=4)[1] != te1


def test_corpus_round_trip_and_validation(tmp_path):
    exs = [Example("What is the capital of Texas ?", "answer(A,(capital(A),loc(A,B),const(B,stateid(Texas))))")]
    save_corpus(exs, tmp_path / "q.tsv")
    assert load_corpus(tmp_path / "q.tsv") == exs
    (tmp_path / "bad.tsv").write_text("q ?\tanswer(A,\n")
    with pytest.raises(ParseError):
        load_corpus(tmp_path / "bad.tsv")
    (tmp_path / "cols.tsv").write_text("just a question\n")
    with pytest.raises(ValueError):
        load_corpus(tmp_path / "cols.tsv")
