"""Prolog-style logic forms: parsing, canonical rendering and symbol substitution.

The surface grammar is the one used by the Geoquery/Restaurant corpora::

    term        := predicate | conjunction | variable | constant | symbol
    predicate   := NAME "(" term ("," term)* ")"
    conjunction := "(" term ("," term)* ")"
    variable    := single uppercase letter
    constant    := any run of characters other than "(", ")" and ","

NAME is a lowercase identifier or an injected symbol such as ``<k0>``.
Constants may contain spaces (``cityid(San Antonio)``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

__all__ = [
    "Predicate",
    "Variable",
    "Constant",
    "Conjunction",
    "Term",
    "ParseError",
    "UnknownSymbol",
    "parse",
    "render",
    "normalize",
    "forms_equal",
    "substitute",
    "symbols_in",
    "variables_in",
    "is_symbol",
    "canonical_symbol",
    "tokenize_form",
    "detokenize_form",
    "depth",
    "arity_signature",
    "walk",
]

SYMBOL_RE = re.compile(r"^(?:<|⟨)\s*([kv])\s*(\d+)\s*(?:>|⟩)$")
_SYMBOL_SCAN = re.compile(r"(?:<|⟨)\s*([kv])\s*(\d+)\s*(?:>|⟩)")
_NAME_RE = re.compile(r"^[a-z_][a-z0-9_]*$")
_VAR_RE = re.compile(r"^[A-Z]$")


class ParseError(ValueError):
    """Malformed logic-form text. ``offset`` is a byte offset into the UTF-8 input."""

    def __init__(self, message: str, offset: int, expected: str = ""):
        self.offset = offset
        self.expected = expected
        detail = f" (expected {expected})" if expected else ""
        super().__init__(f"{message} at byte {offset}{detail}")


class UnknownSymbol(KeyError):
    def __init__(self, symbol: str):
        self.symbol = symbol
        super().__init__(symbol)

    def __str__(self):
        return f"no mapping for symbol {self.symbol}"


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Constant:
    text: str


@dataclass(frozen=True)
class Predicate:
    name: str
    args: tuple


@dataclass(frozen=True)
class Conjunction:
    terms: tuple


Term = Union[Predicate, Variable, Constant, Conjunction]


def is_symbol(text: str) -> bool:
    return bool(SYMBOL_RE.match(text.strip()))


def canonical_symbol(text: str) -> str:
    """``⟨k 0⟩`` / ``<k0>`` -> ``<k0>``."""
    m = SYMBOL_RE.match(text.strip())
    if not m:
        raise ValueError(f"not a symbol: {text!r}")
    return f"<{m.group(1)}{int(m.group(2))}>"


def _collapse(text: str) -> str:
    return " ".join(text.split())


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def offset(self, pos: int | None = None) -> int:
        pos = self.pos if pos is None else pos
        return len(self.text[:pos].encode("utf-8"))

    def error(self, message: str, expected: str = "", pos: int | None = None):
        raise ParseError(message, self.offset(pos), expected)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            found = self.peek() or "end of input"
            self.error(f"unexpected {found!r}", repr(ch))
        self.pos += 1

    def parse_args(self) -> tuple:
        args = [self.parse_term()]
        while self.peek() == ",":
            self.pos += 1
            args.append(self.parse_term())
        self.expect(")")
        return tuple(args)

    def read_atom(self) -> tuple[str, int]:
        """Read a run of non-delimiter characters (may contain spaces)."""
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in "(),":
            self.pos += 1
        return self.text[start:self.pos], start

    def parse_term(self) -> Term:
        ch = self.peek()
        if ch == "":
            self.error("unexpected end of input", "term")
        if ch == "(":
            self.pos += 1
            if self.peek() == ")":
                self.error("empty conjunction", "term")
            return Conjunction(self.parse_args())
        if ch in "),":
            self.error(f"unexpected {ch!r}", "term")
        raw, start = self.read_atom()
        atom = _collapse(raw)
        if self.peek() == "(":
            if is_symbol(atom):
                name = canonical_symbol(atom)
            elif _NAME_RE.match(atom):
                name = atom
            else:
                self.error(f"malformed predicate name {atom!r}", "lowercase identifier or symbol", start)
            self.pos += 1
            if self.peek() == ")":
                self.error("empty argument list", "term")
            return Predicate(name, self.parse_args())
        if not atom:
            self.error("empty term", "term", start)
        if _VAR_RE.match(atom):
            return Variable(atom)
        if atom.startswith(("<", "⟨")) or atom.endswith((">", "⟩")):
            if not is_symbol(atom):
                self.error(f"malformed symbol {atom!r}", "<k i> or <v i>", start)
            return Constant(canonical_symbol(atom))
        return Constant(atom)


def parse(text: str) -> Term:
    """Parse logic-form text into an AST.

    Raises ParseError for unbalanced parentheses, empty argument lists,
    malformed symbols and trailing garbage.
    """
    if not text or not text.strip():
        raise ParseError("empty logic form", 0, "term")
    p = _Parser(text)
    term = p.parse_term()
    if p.peek() != "":
        p.error(f"trailing input {p.text[p.pos:]!r}", "end of input")
    _check_structure(term)
    return term


def _check_structure(term: Term):
    # Conjunction members must be goals, never bare variables/constants.
    if isinstance(term, Conjunction):
        for t in term.terms:
            if isinstance(t, (Variable, Constant)):
                raise ParseError(f"bare {type(t).__name__.lower()} inside conjunction", 0, "goal")
            _check_structure(t)
    elif isinstance(term, Predicate):
        for a in term.args:
            _check_structure(a)


def render(term: Term) -> str:
    """Canonical text: no whitespace around delimiters, constants verbatim."""
    if isinstance(term, Variable):
        return term.name
    if isinstance(term, Constant):
        return term.text
    if isinstance(term, Predicate):
        return f"{term.name}({','.join(render(a) for a in term.args)})"
    if isinstance(term, Conjunction):
        return f"({','.join(render(t) for t in term.terms)})"
    raise TypeError(f"not a term: {term!r}")


def normalize(text: str) -> str:
    """Whitespace normalisation used for round-trip comparisons."""
    text = _SYMBOL_SCAN.sub(lambda m: f"<{m.group(1)}{int(m.group(2))}>", text)
    text = re.sub(r"\s*([(),])\s*", r"\1", text.strip())
    return re.sub(r"\s+", " ", text)


def _fold(term: Term) -> Term:
    if isinstance(term, Constant):
        return Constant(term.text.lower())
    if isinstance(term, Predicate):
        return Predicate(term.name, tuple(_fold(a) for a in term.args))
    if isinstance(term, Conjunction):
        return Conjunction(tuple(_fold(t) for t in term.terms))
    return term


def forms_equal(a: str | Term, b: str | Term) -> bool:
    """Structural equality, case-insensitive on constants."""
    ta = parse(a) if isinstance(a, str) else a
    tb = parse(b) if isinstance(b, str) else b
    return _fold(ta) == _fold(tb)


def walk(term: Term) -> Iterator[Term]:
    yield term
    if isinstance(term, Predicate):
        for a in term.args:
            yield from walk(a)
    elif isinstance(term, Conjunction):
        for t in term.terms:
            yield from walk(t)


def symbols_in(term: Term) -> list[str]:
    out = []
    for node in walk(term):
        if isinstance(node, Predicate) and is_symbol(node.name):
            out.append(node.name)
        elif isinstance(node, Constant) and is_symbol(node.text):
            out.append(node.text)
    return out


def variables_in(term: Term) -> list[str]:
    seen = []
    for node in walk(term):
        if isinstance(node, Variable) and node.name not in seen:
            seen.append(node.name)
    return seen


def depth(term: Term) -> int:
    if isinstance(term, Predicate):
        return 1 + max(depth(a) for a in term.args)
    if isinstance(term, Conjunction):
        return 1 + max(depth(t) for t in term.terms)
    return 0


def arity_signature(term: Term):
    """Shape of the tree with names erased; used to check substitution keeps structure."""
    if isinstance(term, Predicate):
        return ("p", tuple(arity_signature(a) for a in term.args))
    if isinstance(term, Conjunction):
        return ("c", tuple(arity_signature(t) for t in term.terms))
    if isinstance(term, Variable):
        return "v"
    return "k"


def substitute(term: Term, s2p: Mapping[str, str]) -> Term:
    """Replace every symbol (predicate name or constant) with its phrase."""
    table = {canonical_symbol(k): v for k, v in s2p.items()}

    def lookup(sym: str) -> str:
        try:
            return table[sym]
        except KeyError:
            raise UnknownSymbol(sym) from None

    def go(t: Term) -> Term:
        if isinstance(t, Predicate):
            name = lookup(t.name) if is_symbol(t.name) else t.name
            return Predicate(name, tuple(go(a) for a in t.args))
        if isinstance(t, Conjunction):
            return Conjunction(tuple(go(x) for x in t.terms))
        if isinstance(t, Constant) and is_symbol(t.text):
            return Constant(lookup(t.text))
        return t

    return go(term)


# -- token view used by the translator ------------------------------------

_WORD_SPLIT = re.compile(r"\s+")


def tokenize_form(term_or_text: Term | str, lowercase: bool = True) -> list[str]:
    """Flatten a form into decoder tokens.

    Multi-word constants become one token per word; variables and symbols
    keep their spelling, everything else is case-folded when ``lowercase``.
    """
    term = parse(term_or_text) if isinstance(term_or_text, str) else term_or_text
    out: list[str] = []

    def word(w: str) -> str:
        return w.lower() if lowercase else w

    def go(t: Term):
        if isinstance(t, Variable):
            out.append(t.name)
        elif isinstance(t, Constant):
            if is_symbol(t.text):
                out.append(t.text)
            else:
                out.extend(word(w) for w in _WORD_SPLIT.split(t.text.strip()))
        elif isinstance(t, Predicate):
            out.append(t.name if is_symbol(t.name) else word(t.name))
            out.append("(")
            for i, a in enumerate(t.args):
                if i:
                    out.append(",")
                go(a)
            out.append(")")
        else:
            out.append("(")
            for i, x in enumerate(t.terms):
                if i:
                    out.append(",")
                go(x)
            out.append(")")

    go(term)
    return out


def detokenize_form(tokens: list[str]) -> str:
    """Inverse of tokenize_form up to case: adjacent word tokens join with a space."""
    parts: list[str] = []
    prev_word = False
    for tok in tokens:
        is_word = tok not in ("(", ")", ",")
        if is_word and prev_word:
            parts.append(" ")
        parts.append(tok)
        prev_word = is_word
    return "".join(parts)
