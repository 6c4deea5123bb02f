"""Symbol injection into questions and symbol recovery in translated forms."""

from __future__ import annotations

import random
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .logic_form import (Constant, Conjunction, Predicate, Term, UnknownSymbol, canonical_symbol,
                         is_symbol, parse, render, substitute)

__all__ = [
    "EOK",
    "EOV",
    "OverlappingSpans",
    "SymbolTable",
    "InjectedQuestion",
    "spatial_injection",
    "plain_question",
    "recover",
    "symbolize",
    "strip_injection",
    "ModelResolver",
    "GoldResolver",
    "RandomResolver",
    "FixedResolver",
    "first_type",
]

EOK = "<eok>"
EOV = "<eov>"


class OverlappingSpans(ValueError):
    pass


class SymbolTable:
    """Ordered ``symbol -> phrase`` map with dense, independent k and v counters."""

    def __init__(self, items: Mapping[str, str] | None = None):
        self._map: "OrderedDict[str, str]" = OrderedDict()
        self._next = {"k": 0, "v": 0}
        for sym, phrase in (items or {}).items():
            sym = canonical_symbol(sym)
            cls, idx = sym[1], int(sym[2:-1])
            if sym in self._map:
                raise ValueError(f"duplicate symbol {sym}")
            self._map[sym] = phrase
            self._next[cls] = max(self._next[cls], idx + 1)

    def add(self, cls: str, phrase: str) -> str:
        sym = f"<{cls}{self._next[cls]}>"
        self._next[cls] += 1
        self._map[sym] = phrase
        return sym

    def add_keyword(self, phrase: str) -> str:
        return self.add("k", phrase)

    def add_value(self, phrase: str) -> str:
        return self.add("v", phrase)

    def __getitem__(self, sym: str) -> str:
        try:
            return self._map[canonical_symbol(sym)]
        except KeyError:
            raise UnknownSymbol(sym) from None

    def __contains__(self, sym):
        return is_symbol(sym) and canonical_symbol(sym) in self._map

    def __iter__(self):
        return iter(self._map)

    def __len__(self):
        return len(self._map)

    def items(self):
        return self._map.items()

    def as_dict(self) -> dict[str, str]:
        return dict(self._map)

    def __eq__(self, other):
        if isinstance(other, SymbolTable):
            return list(self._map.items()) == list(other._map.items())
        if isinstance(other, Mapping):
            return dict(self._map) == {canonical_symbol(k): v for k, v in other.items()}
        return NotImplemented

    def __repr__(self):
        return f"SymbolTable({dict(self._map)!r})"


@dataclass
class InjectedQuestion:
    """Tokens of the injected question with a parallel role per token.

    Roles: ``text`` (untouched question word), ``phrase`` (enclosed question
    word), ``open``/``close`` (delimiters) and ``feed`` (inserted constructor).
    ``feeds`` pairs each value symbol with the keyword symbol fed before it.
    ``surface`` keeps the original spelling of every question word so that
    stripping undoes case folding.
    """
    tokens: list
    roles: list
    feeds: dict = field(default_factory=dict)
    surface: list | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.roles):
            raise ValueError("tokens and roles differ in length")
        if self.surface is None:
            self.surface = list(self.tokens)
        elif len(self.surface) != len(self.tokens):
            raise ValueError("surface and tokens differ in length")

    def __str__(self):
        return " ".join(self.tokens)

    def __len__(self):
        return len(self.tokens)


def strip_injection(q: InjectedQuestion) -> list[str]:
    """Drop delimiters and fed constructors, leaving the question words."""
    return [t for t, r in zip(q.surface, q.roles) if r in ("text", "phrase")]


# -- type resolvers -------------------------------------------------------
# A resolver is ``f(question_tokens, (start, end), types) -> table``.

def first_type(q, span, types) -> str:
    return sorted(types)[0]


class ModelResolver:
    def __init__(self, model):
        self.model = model

    def __call__(self, q, span, types):
        from .comprehension import resolve_type
        return resolve_type(self.model, q, span, types)


class GoldResolver:
    """Returns the table named in the gold form; falls back to ``fallback``."""

    def __init__(self, gold: Mapping[tuple, str], fallback: Callable = first_type):
        self.gold = dict(gold)
        self.fallback = fallback

    def __call__(self, q, span, types):
        t = self.gold.get(tuple(span))
        return t if t in types else self.fallback(q, span, types)


class RandomResolver:
    """Seeded uniform guess among the candidate tables."""

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def __call__(self, q, span, types):
        return self.rng.choice(sorted(types))


class FixedResolver:
    """Always prefers ``table`` when it is a candidate."""

    def __init__(self, table: str, fallback: Callable = first_type):
        self.table = table
        self.fallback = fallback

    def __call__(self, q, span, types):
        return self.table if self.table in types else self.fallback(q, span, types)


# -- injection ------------------------------------------------------------

def _check_spans(P):
    ordered = sorted(P, key=lambda p: (p.start, p.end))
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise OverlappingSpans(f"{a.text!r} [{a.start},{a.end}) overlaps {b.text!r} [{b.start},{b.end})")
    return ordered


def spatial_injection(q: Sequence[str], V, P, resolver: Callable | None = None, db=None,
                      type_feeding: bool = True, lowercase: bool = True):
    """Enclose matched keywords and values in symbols; return ``(q', s2p)``.

    Keywords become ``<k i> phrase <eok>`` and values ``<v i> phrase <eov>``.
    With ``type_feeding`` each value is preceded by ``<k j> ctor <eok>``, the
    constructor of its resolved table. Tables come from a resolved entry in
    ``V`` when present, else from ``resolver`` (only consulted for values with
    several tables). Unenclosed words are lowercased when ``lowercase``.
    """
    resolver = resolver or first_type
    ordered = _check_spans(P)
    resolved = {(v.start, v.end): v.resolved_type for v in V if getattr(v, "resolved_type", None)}
    s2p = SymbolTable()
    tokens: list[str] = []
    roles: list[str] = []
    surface: list[str] = []
    feeds: dict[str, str] = {}
    pos = 0

    def emit(tok, role, original=None):
        tokens.append(tok)
        roles.append(role)
        surface.append(tok if original is None else original)

    for p in ordered:
        for t in q[pos:p.start]:
            emit(t.lower() if lowercase else t, "text", t)
        phrase = list(q[p.start:p.end])
        if p.kind == "keyword":
            emit(s2p.add_keyword(p.entity), "open")
            for t in phrase:
                emit(t, "phrase")
            emit(EOK, "close")
        else:
            feed_sym = None
            if type_feeding and p.types:
                table = resolved.get((p.start, p.end))
                if table is None:
                    table = p.types[0] if len(p.types) == 1 else resolver(list(q), (p.start, p.end), list(p.types))
                ctor = db.ctor_for(table) if db is not None else f"{table}id"
                feed_sym = s2p.add_keyword(ctor)
                emit(feed_sym, "open")
                emit(ctor, "feed")
                emit(EOK, "close")
            vsym = s2p.add_value(p.entity)
            if feed_sym:
                feeds[vsym] = feed_sym
            emit(vsym, "open")
            for t in phrase:
                emit(t, "phrase")
            emit(EOV, "close")
        pos = p.end
    for t in q[pos:]:
        emit(t.lower() if lowercase else t, "text", t)
    return InjectedQuestion(tokens, roles, feeds, surface), s2p


def plain_question(q: Sequence[str], lowercase: bool = True) -> InjectedQuestion:
    """The no-injection view of a question."""
    toks = [t.lower() if lowercase else t for t in q]
    return InjectedQuestion(toks, ["text"] * len(toks), surface=list(q))


# -- recovery -------------------------------------------------------------

def recover(l_sym: str | Term, s2p) -> str:
    """Replace every symbol in the translated form by its phrase."""
    term = parse(l_sym) if isinstance(l_sym, str) else l_sym
    table = s2p.as_dict() if isinstance(s2p, SymbolTable) else dict(s2p)
    return render(substitute(term, table))


def symbolize(lf: str | Term, s2p: SymbolTable, feeds: Mapping[str, str] | None = None) -> str:
    """Rewrite a gold form into the symbolic target the translator should emit.

    Constants equal (case-insensitively) to a value phrase become that value's
    symbol; a constructor wrapping such a constant becomes the fed keyword
    symbol when it names the same constructor; predicate names equal to a
    keyword phrase become the keyword's symbol (first symbol wins).
    """
    term = parse(lf) if isinstance(lf, str) else lf
    feeds = dict(feeds or {})
    value_of: dict[str, str] = {}
    keyword_of: dict[str, str] = {}
    fed = set(feeds.values())
    for sym, phrase in s2p.items():
        if sym.startswith("<v"):
            value_of.setdefault(phrase.lower(), sym)
        elif sym not in fed:
            keyword_of.setdefault(phrase, sym)

    def go(t: Term) -> Term:
        if isinstance(t, Predicate):
            if len(t.args) == 1 and isinstance(t.args[0], Constant):
                vsym = value_of.get(t.args[0].text.lower())
                if vsym is not None:
                    ksym = feeds.get(vsym)
                    name = ksym if ksym is not None and s2p[ksym] == t.name else keyword_of.get(t.name, t.name)
                    return Predicate(name, (Constant(vsym),))
            return Predicate(keyword_of.get(t.name, t.name), tuple(go(a) for a in t.args))
        if isinstance(t, Conjunction):
            return Conjunction(tuple(go(x) for x in t.terms))
        if isinstance(t, Constant):
            vsym = value_of.get(t.text.lower())
            return Constant(vsym) if vsym is not None else t
        return t

    return render(go(term))
