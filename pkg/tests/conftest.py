import pytest

from spatialnli.data import load_corpus, sample_dir
from spatialnli.embeddings import load_embeddings
from spatialnli.geo_store import load_database
from spatialnli.mapper import MapperConfig, load_lexicon


@pytest.fixture(scope="session")
def sample_db():
    return load_database(sample_dir() / "schema.txt")


@pytest.fixture(scope="session")
def sample_vectors():
    return load_embeddings(sample_dir() / "vectors.txt")


@pytest.fixture(scope="session")
def sample_examples():
    return load_corpus(sample_dir() / "questions.tsv")


@pytest.fixture(scope="session")
def sample_mapper_config():
    return MapperConfig(lexicon=load_lexicon(sample_dir() / "lexicon.tsv"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
