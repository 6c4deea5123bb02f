"""Corpus files, tokenization and train/test splits."""

from __future__ import annotations

import os
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .logic_form import parse

__all__ = [
    "Example",
    "tokenize",
    "detokenize",
    "load_corpus",
    "save_corpus",
    "split_corpus",
    "load_split_indices",
    "sample_dir",
    "data_root",
]

_ABBREVIATIONS = frozenset({"st.", "mt.", "ft.", "u.s.", "d.c.", "washington,d.c."})
_TRAILING = re.compile(r"^(.*?)([?!.,;:]+)$")


@dataclass(frozen=True)
class Example:
    question: str
    logic_form: str

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.question)


def tokenize(text: str) -> list[str]:
    """Whitespace split with trailing punctuation detached; "St." stays whole."""
    out: list[str] = []
    for raw in text.split():
        if raw.lower() in _ABBREVIATIONS:
            out.append(raw)
            continue
        m = _TRAILING.match(raw)
        if m and m.group(1):
            word, punct = m.groups()
            if word.lower() + punct[0] in _ABBREVIATIONS:
                word, punct = word + punct[0], punct[1:]
            out.append(word)
            out.extend(punct)
        else:
            out.append(raw)
    return out


def detokenize(tokens) -> str:
    return " ".join(tokens)


def load_corpus(path, validate: bool = True) -> list[Example]:
    """``question<TAB>logic form`` per line. Blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'question<TAB>logic form'")
        q, lf = parts[0].strip(), parts[1].strip()
        if validate:
            parse(lf)
        out.append(Example(q, lf))
    return out


def save_corpus(examples, path):
    with open(Path(path), "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.question}\t{ex.logic_form}\n")


def split_corpus(examples, test_fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle split; used where no standard split file exists."""
    idx = list(range(len(examples)))
    random.Random(seed).shuffle(idx)
    n_test = int(round(len(examples) * test_fraction))
    test = sorted(idx[:n_test])
    train = sorted(idx[n_test:])
    return [examples[i] for i in train], [examples[i] for i in test]


def load_split_indices(path) -> list[int]:
    """One zero-based example index per line."""
    return [int(x) for x in Path(path).read_text().split()]


def sample_dir() -> Path:
    """Bundled sample geography (small, hand-assembled; not the full Geobase)."""
    return Path(str(resources.files("spatialnli") / "resources" / "geo_sample"))


def data_root() -> Path | None:
    root = os.environ.get("SPATIALNLI_DATA")
    return Path(root) if root else None
