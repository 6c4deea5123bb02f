"""Match question n-grams against database keywords and values.

Spans are scanned from the longest n-gram down to single tokens. A span is
tried against the synonym lexicon first, then exact match, then (keywords
only) embedding distance, then edit distance. Overlaps are settled afterwards
by :func:`resolve_overlaps`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .embeddings import EmbeddingTable, ZeroVector, edit_distance, semantic_distance
from .geo_store import GeoDatabase

__all__ = [
    "MatchPair",
    "AmbiguousValue",
    "MapperConfig",
    "DEFAULT_STOP_WORDS",
    "load_lexicon",
    "load_stop_words",
    "keyword_candidates",
    "spatial_mapper",
    "resolve_overlaps",
    "recheck",
]

DEFAULT_STOP_WORDS = frozenset("""
a an the of in on at to for from by with as and or
what which who whom whose where when why how
is are was were be been being am
do does did done doing have has had having
there here it its this that these those
me my i you your we our they their them he she his her
can could would should will shall may might must
name give tell list show
all any some each every
than then so too very just also please
? . , ! ' " 's
""".split())

_PUNCT = frozenset("?.,!;:'\"")

METHOD_RANK = {"lexicon": 0, "exact": 1, "edit": 2, "semantic": 3}
KIND_RANK = {"keyword": 0, "value": 1}

# Predicate names that never surface as question words.
_NON_KEYWORD_PREDICATES = frozenset({"answer", "const", "not", "sum"})


@dataclass(frozen=True)
class MatchPair:
    start: int
    end: int
    text: str
    entity: str
    kind: str           # keyword | value
    method: str         # lexicon | exact | edit | semantic
    distance: float = 0.0
    types: tuple = ()   # tables containing the value (values only)

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    def overlaps(self, other: "MatchPair") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class AmbiguousValue:
    start: int
    end: int
    text: str
    types: tuple
    resolved_type: str | None = None

    def __post_init__(self):
        if not self.types:
            raise ValueError("an ambiguous value needs at least one type")
        if self.resolved_type is not None and self.resolved_type not in self.types:
            raise ValueError(f"{self.resolved_type!r} is not one of {self.types}")

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def ambiguous(self) -> bool:
        return len(self.types) > 1

    def resolved(self, table: str) -> "AmbiguousValue":
        return replace(self, resolved_type=table)


@dataclass
class MapperConfig:
    max_ngram: int = 4
    tau_sem: float = 0.368
    tau_ed: int = 2
    # Edit matching on very short strings links "run" to "sun" style noise.
    min_edit_length: int = 4
    stop_words: frozenset = DEFAULT_STOP_WORDS
    lexicon: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_ngram < 1:
            raise ValueError("max_ngram must be >= 1")
        if not 0.0 < self.tau_sem < 2.0:
            raise ValueError("tau_sem must lie in (0, 2)")
        if self.tau_ed < 1:
            raise ValueError("tau_ed must be >= 1")
        self.stop_words = frozenset(w.lower() for w in self.stop_words)
        self.lexicon = {" ".join(k.lower().split()): v for k, v in self.lexicon.items()}


def load_lexicon(path) -> dict[str, str]:
    """Tab-separated ``phrase<TAB>entity`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(Path(path), encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or not row[0].strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'phrase<TAB>entity'")
            out[" ".join(row[0].lower().split())] = row[1].strip()
    return out


def load_stop_words(path) -> frozenset:
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            words.update(w.lower() for w in line.split())
    return frozenset(words)


def keyword_candidates(db: GeoDatabase, cfg: MapperConfig | None = None) -> set[str]:
    """Table and column names plus the query-language predicates a question can name."""
    kws = set(db.keyword_set)
    for name in db.predicate_vocabulary:
        if name in _NON_KEYWORD_PREDICATES or name in db.ctor_to_table or "_" in name:
            continue
        kws.add(name)
    if cfg is not None:
        kws |= {v for v in cfg.lexicon.values() if v not in db.entity_index}
    return kws


class _Index:
    """Candidate strings bucketed by token count, built once per (db, cfg)."""

    def __init__(self, db: GeoDatabase, cfg: MapperConfig):
        self.keywords = keyword_candidates(db, cfg)
        self.kw_by_len: dict[int, list[str]] = {}
        for k in sorted(self.keywords):
            self.kw_by_len.setdefault(len(k.split()), []).append(k)
        self.val_by_len: dict[int, list[str]] = {}
        for v in sorted(db.entity_index):
            self.val_by_len.setdefault(len(v.split()), []).append(v)


_INDEX_CACHE: dict[tuple[int, int], _Index] = {}


def _index_for(db, cfg) -> _Index:
    key = (id(db), id(cfg))
    idx = _INDEX_CACHE.get(key)
    if idx is None:
        if len(_INDEX_CACHE) > 32:
            _INDEX_CACHE.clear()
        idx = _INDEX_CACHE[key] = _Index(db, cfg)
    return idx


def _value_pair(db, start, end, text, key, method, dist) -> MatchPair:
    return MatchPair(start, end, text, db.display(key), "value", method, dist,
                     tuple(db.types_of(key)))


def _match_span(db, E, cfg, idx, start, end, text) -> list[MatchPair]:
    key = text.lower()
    ntok = end - start
    out: list[MatchPair] = []

    target = cfg.lexicon.get(key)
    if target is not None:
        if target in db.entity_index and target not in idx.keywords:
            out.append(_value_pair(db, start, end, text, target, "lexicon", 0.0))
        else:
            out.append(MatchPair(start, end, text, target, "keyword", "lexicon"))
        return out

    if key in idx.keywords:
        out.append(MatchPair(start, end, text, key, "keyword", "exact"))
    if key in db.entity_index:
        out.append(_value_pair(db, start, end, text, key, "exact", 0.0))
    if out:
        return out

    if E is not None:
        best = None
        for kw in idx.kw_by_len.get(ntok, ()):
            try:
                d = semantic_distance(key, kw, E)
            except ZeroVector:
                continue
            if d < cfg.tau_sem and (best is None or d < best[0]):
                best = (d, kw)
        if best is not None:
            out.append(MatchPair(start, end, text, best[1], "keyword", "semantic", best[0]))

    if len(key) >= cfg.min_edit_length:
        for kind, pool in (("keyword", idx.kw_by_len), ("value", idx.val_by_len)):
            best = None
            for cand in pool.get(ntok, ()):
                if abs(len(cand) - len(key)) >= cfg.tau_ed or len(cand) < cfg.min_edit_length:
                    continue
                d = edit_distance(key, cand)
                if d < cfg.tau_ed and (best is None or d < best[0]):
                    best = (d, cand)
            if best is not None:
                if kind == "keyword":
                    out.append(MatchPair(start, end, text, best[1], "keyword", "edit", float(best[0])))
                else:
                    out.append(_value_pair(db, start, end, text, best[1], "edit", float(best[0])))
    return out


def _skippable(tokens: Sequence[str], cfg: MapperConfig) -> bool:
    lowered = [t.lower() for t in tokens]
    if all(t in cfg.stop_words for t in lowered):
        return True
    return any(t in _PUNCT for t in lowered)


def _sort_key(p: MatchPair):
    return (-(p.end - p.start), p.start, METHOD_RANK[p.method], p.distance,
            KIND_RANK[p.kind], p.entity)


def resolve_overlaps(P: Iterable[MatchPair]) -> list[MatchPair]:
    """Keep a non-overlapping subset: longest span first, then leftmost, then
    lexicon > exact > edit > semantic, then smaller distance. Output is in
    left-to-right order."""
    kept: list[MatchPair] = []
    for p in sorted(P, key=_sort_key):
        if not any(p.overlaps(k) for k in kept):
            kept.append(p)
    return sorted(kept, key=lambda p: p.start)


def spatial_mapper(db: GeoDatabase, q: Sequence[str], E: EmbeddingTable | None,
                   cfg: MapperConfig | None = None, resolve: bool = True):
    """Return ``(P, V)``.

    ``P`` lists every match (overlap-resolved when ``resolve``); ``V`` holds one
    entry per matched value with all tables that contain it. ``E`` may be None,
    which disables semantic matching.
    """
    cfg = cfg or MapperConfig()
    idx = _index_for(db, cfg)
    tokens = list(q)
    P: list[MatchPair] = []
    for k in range(min(cfg.max_ngram, len(tokens)), 0, -1):
        for start in range(0, len(tokens) - k + 1):
            span = tokens[start:start + k]
            if _skippable(span, cfg):
                continue
            P.extend(_match_span(db, E, cfg, idx, start, start + k, " ".join(span)))
    if resolve:
        P = resolve_overlaps(P)
    V = [AmbiguousValue(p.start, p.end, p.text, p.types)
         for p in P if p.kind == "value" and p.types]
    return P, V


def recheck(p: MatchPair, db: GeoDatabase, E: EmbeddingTable | None, cfg: MapperConfig) -> bool:
    """Independently confirm that ``p`` satisfies the predicate its method claims."""
    key, ent = p.text.lower(), p.entity.lower()
    if p.method == "lexicon":
        return cfg.lexicon.get(key, "").lower() == ent
    if p.method == "exact":
        return key == ent
    if p.method == "edit":
        return edit_distance(key, ent) < cfg.tau_ed
    if p.method == "semantic":
        return E is not None and semantic_distance(key, ent, E) < cfg.tau_sem
    return False
