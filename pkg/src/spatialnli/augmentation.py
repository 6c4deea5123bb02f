"""Training-pair augmentation: edge prepositional-phrase shuffling, entity
replacement, nested replacement and conjunction of same-type questions."""

from __future__ import annotations

import string
from typing import Iterable, Sequence

from .data import Example, tokenize
from .geo_store import GeoDatabase, evaluate
from .logic_form import (Conjunction, Constant, Predicate, Term, Variable, parse, render,
                         variables_in, walk)

__all__ = [
    "PREPOSITIONS",
    "VERBS",
    "pp_shuffle",
    "entity_replace",
    "nested_replace",
    "conjunction_combine",
    "answer_table",
    "augment",
]

# "of" is left out on purpose: "capital of Texas" is a noun phrase, not a movable PP.
PREPOSITIONS = frozenset("""
in through across from to into on at near within over under along
around between beside inside outside toward towards via
""".split())

VERBS = frozenset("""
is are was were be been am
do does did
has have had
run runs ran flow flows flowed pass passes cross crosses traverse traverses
border borders bordering lie lies live lives located situated contain contains
name give list tell
""".split())

_AUX = frozenset({"is", "are", "was", "were"})
_WH = frozenset({"what", "which", "who", "where", "how", "name", "give", "list"})
_TERMINAL = frozenset({"?", ".", "!"})
SUPERLATIVES = frozenset({"largest", "smallest", "highest", "lowest", "longest", "shortest",
                          "most", "fewest", "largest_one", "smallest_one"})


def _split_terminal(tokens: list[str]) -> tuple[list[str], str]:
    if tokens and tokens[-1] in _TERMINAL:
        return tokens[:-1], tokens[-1]
    return tokens, ""


def _join(tokens: Sequence[str], terminal: str) -> str:
    return " ".join(list(tokens) + ([terminal] if terminal else []))


def _lower_if_function_word(tok: str) -> str:
    low = tok.lower()
    return low if low in _WH or low in PREPOSITIONS or low in VERBS or low in {"the", "a", "an"} else tok


def _capitalize(tok: str) -> str:
    return tok[:1].upper() + tok[1:]


def pp_shuffle(q: str) -> str | None:
    """Move an edge prepositional phrase to the other end of the question.

    A trailing PP is the longest suffix that starts with a preposition and
    holds no verb; a leading PP is the longest verb-free prefix starting with
    one. When a leading PP is moved behind a copula-inverted clause
    ("is Mount Mckinley"), the copula moves back after its subject.
    """
    body, terminal = _split_terminal(tokenize(q))
    if len(body) < 2:
        return None
    low = [t.lower() for t in body]

    for i in range(1, len(body)):
        if low[i] in PREPOSITIONS and not any(t in VERBS for t in low[i + 1:]):
            pp, prefix = body[i:], body[:i]
            out = [_capitalize(pp[0].lower())] + pp[1:] + [_lower_if_function_word(prefix[0])] + prefix[1:]
            return _join(out, terminal)

    if low[0] in PREPOSITIONS:
        j = 1
        while j < len(body) and low[j] not in VERBS:
            j += 1
        if j >= len(body):
            return None
        pp, suffix = body[:j], body[j:]
        if suffix[0].lower() in _AUX and len(suffix) > 1:
            suffix = suffix[1:] + [suffix[0].lower()]
        out = [_capitalize(suffix[0])] + suffix[1:] + [pp[0].lower()] + pp[1:]
        return _join(out, terminal)
    return None


# -- logic-form helpers ---------------------------------------------------

def _answer_parts(term: Term) -> tuple[Variable, list[Term]]:
    if not (isinstance(term, Predicate) and term.name == "answer" and len(term.args) >= 2
            and isinstance(term.args[0], Variable)):
        raise ValueError("expected answer(Var, goal...)")
    goals = list(term.args[1:])
    if len(goals) == 1 and isinstance(goals[0], Conjunction):
        goals = list(goals[0].terms)
    return term.args[0], goals


def answer_table(lf: str | Term, db: GeoDatabase) -> str | None:
    """Table of the answer variable, read from a unary type predicate on it."""
    term = parse(lf) if isinstance(lf, str) else lf
    try:
        var, _ = _answer_parts(term)
    except ValueError:
        return None
    for node in walk(term):
        if (isinstance(node, Predicate) and node.name in db.tables and len(node.args) == 1
                and node.args[0] == var):
            return node.name
    return None


def _rename(term: Term, mapping: dict[str, str]) -> Term:
    if isinstance(term, Variable):
        return Variable(mapping.get(term.name, term.name))
    if isinstance(term, Predicate):
        return Predicate(term.name, tuple(_rename(a, mapping) for a in term.args))
    if isinstance(term, Conjunction):
        return Conjunction(tuple(_rename(t, mapping) for t in term.terms))
    return term


def _fresh(used: Iterable[str]):
    used = set(used)
    for ch in string.ascii_uppercase:
        if ch not in used:
            used.add(ch)
            yield ch
    raise ValueError("ran out of variable names")


def _has_superlative(term: Term) -> bool:
    return any(isinstance(n, Predicate) and n.name in SUPERLATIVES for n in walk(term))


def _value_mentions(ex: Example, db: GeoDatabase):
    """(ctor, constant text, table) for constants wrapped in a name constructor
    that also occur in the question."""
    q = " " + " ".join(tokenize(ex.question)).lower() + " "
    seen = []
    for node in walk(parse(ex.logic_form)):
        if (isinstance(node, Predicate) and node.name in db.ctor_to_table and len(node.args) == 1
                and isinstance(node.args[0], Constant)):
            text = node.args[0].text
            if f" {text.lower()} " in q and (node.name, text) not in [(c, t) for c, t, _ in seen]:
                seen.append((node.name, text, db.ctor_to_table[node.name]))
    return seen


def _replace_phrase(tokens: list[str], phrase: str, replacement: list[str]) -> list[str] | None:
    target = phrase.lower().split()
    n = len(target)
    for i in range(len(tokens) - n + 1):
        if [t.lower() for t in tokens[i:i + n]] == target:
            return tokens[:i] + replacement + tokens[i + n:]
    return None


def _replace_const(term: Term, ctor: str, old: str, new: str) -> Term:
    if isinstance(term, Predicate):
        if (term.name == ctor and len(term.args) == 1 and isinstance(term.args[0], Constant)
                and term.args[0].text.lower() == old.lower()):
            return Predicate(ctor, (Constant(new),))
        return Predicate(term.name, tuple(_replace_const(a, ctor, old, new) for a in term.args))
    if isinstance(term, Conjunction):
        return Conjunction(tuple(_replace_const(t, ctor, old, new) for t in term.terms))
    return term


def entity_replace(pair: Example, db: GeoDatabase, limit: int | None = None) -> list[Example]:
    """Swap each mentioned entity for every other entity of the same table."""
    out: list[Example] = []
    tokens = tokenize(pair.question)
    term = parse(pair.logic_form)
    for ctor, text, table in _value_mentions(pair, db):
        made = 0
        for e in db.entities(table):
            name = db.name_of(e)
            if name.lower() == text.lower():
                continue
            new_tokens = _replace_phrase(tokens, text, name.split())
            if new_tokens is None:
                continue
            out.append(Example(" ".join(new_tokens), render(_replace_const(term, ctor, text, name))))
            made += 1
            if limit is not None and made >= limit:
                break
    return out


def _wh_remainder(tokens: list[str], table: str) -> list[str]:
    """Drop the leading wh-word and, if present, the noun naming ``table``."""
    rest = tokens[1:] if tokens and tokens[0].lower() in _WH else list(tokens)
    if rest and rest[0].lower().rstrip("s") == table.rstrip("s"):
        rest = rest[1:]
    return rest


def _find_const(term: Term, ctor: str, text: str):
    """Return (path to the const goal, its variable). Paths index into args/terms."""
    def go(t, path):
        if isinstance(t, Predicate):
            if (t.name == "const" and len(t.args) == 2 and isinstance(t.args[0], Variable)
                    and isinstance(t.args[1], Predicate) and t.args[1].name == ctor
                    and isinstance(t.args[1].args[0], Constant)
                    and t.args[1].args[0].text.lower() == text.lower()):
                return path, t.args[0]
            for i, a in enumerate(t.args):
                r = go(a, path + [i])
                if r:
                    return r
        elif isinstance(t, Conjunction):
            for i, x in enumerate(t.terms):
                r = go(x, path + [i])
                if r:
                    return r
        return None
    return go(term, [])


def _splice(term: Term, path: list[int], goals: list[Term]) -> Term:
    """Replace the goal at ``path`` by ``goals``, placed first in its conjunction."""
    if len(path) == 1:
        i = path[0]
        if isinstance(term, Conjunction):
            rest = [t for j, t in enumerate(term.terms) if j != i]
            return Conjunction(tuple(goals + rest))
        if isinstance(term, Predicate) and term.name == "answer":
            rest = [a for j, a in enumerate(term.args[1:], 1) if j != i]
            return Predicate("answer", (term.args[0], Conjunction(tuple(goals + rest))))
        return Predicate(term.name, tuple(
            a if j != i else (goals[0] if len(goals) == 1 else Conjunction(tuple(goals)))
            for j, a in enumerate(term.args)))
    i, tail = path[0], path[1:]
    if isinstance(term, Conjunction):
        return Conjunction(tuple(_splice(t, tail, goals) if j == i else t for j, t in enumerate(term.terms)))
    return Predicate(term.name, tuple(_splice(a, tail, goals) if j == i else a for j, a in enumerate(term.args)))


def nested_replace(outer: Example, inner: Example, db: GeoDatabase) -> Example | None:
    """Replace an entity in ``outer`` by the single entity ``inner`` describes.

    The question gets "<table> that <inner minus its wh-prefix>"; in the form,
    the entity's const goal is replaced by inner's goals, placed first in the
    enclosing conjunction, with inner's answer variable renamed to the const
    variable and its other variables made fresh.
    """
    table = answer_table(inner.logic_form, db)
    if table is None:
        return None
    try:
        den = evaluate(inner.logic_form, db)
    except Exception:
        return None
    if len(den) != 1:
        return None
    mention = next(((c, t) for c, t, tb in _value_mentions(outer, db) if tb == table), None)
    if mention is None:
        return None
    ctor, text = mention
    outer_term = parse(outer.logic_form)
    found = _find_const(outer_term, ctor, text)
    if found is None:
        return None
    path, var = found
    inner_var, inner_goals = _answer_parts(parse(inner.logic_form))
    fresh = _fresh(variables_in(outer_term))
    mapping = {inner_var.name: var.name}
    for v in variables_in(Conjunction(tuple(inner_goals))):
        if v not in mapping:
            mapping[v] = next(fresh)
    goals = [_rename(g, mapping) for g in inner_goals]
    lf = render(_splice(outer_term, path, goals))

    inner_body, _ = _split_terminal(tokenize(inner.question))
    clause = [table.replace("_", " "), "that"] + _wh_remainder(inner_body, table)
    q = _replace_phrase(tokenize(outer.question), text, clause)
    if q is None:
        return None
    return Example(" ".join(q), lf)


def conjunction_combine(a: Example, b: Example, db: GeoDatabase) -> Example | None:
    """Join two questions about the same answer table with "and".

    The second question loses its wh-prefix; the forms are conjoined under
    one answer variable with a superlative body placed first so the result
    denotes the intersection. Two superlatives cannot be conjoined that way
    and give None.
    """
    ta, tb = answer_table(a.logic_form, db), answer_table(b.logic_form, db)
    if ta is None or ta != tb:
        return None
    term_a, term_b = parse(a.logic_form), parse(b.logic_form)
    sup_a, sup_b = _has_superlative(term_a), _has_superlative(term_b)
    if sup_a and sup_b:
        return None
    var_a, goals_a = _answer_parts(term_a)
    var_b, goals_b = _answer_parts(term_b)
    fresh = _fresh(variables_in(term_a))
    mapping = {var_b.name: var_a.name}
    for v in variables_in(term_b):
        if v not in mapping:
            mapping[v] = next(fresh)
    goals_b = [_rename(g, mapping) for g in goals_b]
    goals = goals_b + goals_a if sup_b else goals_a + goals_b
    lf = render(Predicate("answer", (var_a, Conjunction(tuple(goals)))))

    qa, term_q = _split_terminal(tokenize(a.question))
    qb, _ = _split_terminal(tokenize(b.question))
    q = qa + ["and"] + _wh_remainder(qb, ta)
    return Example(_join(q, term_q), lf)


def augment(examples: Sequence[Example], db: GeoDatabase, kinds: Iterable[str] = ("pp", "entity", "nested", "conj"),
            max_per_source: int | None = None) -> list[Example]:
    """Apply the chosen augmentations to a training split. Originals are not repeated."""
    kinds = set(kinds)
    unknown = kinds - {"pp", "entity", "nested", "conj"}
    if unknown:
        raise ValueError(f"unknown augmentation kinds: {sorted(unknown)}")
    seen = {(e.question.lower(), e.logic_form) for e in examples}
    out: list[Example] = []

    def keep(ex):
        key = (ex.question.lower(), ex.logic_form)
        if key not in seen:
            seen.add(key)
            out.append(ex)
            return True
        return False

    for ex in examples:
        made = 0
        if "pp" in kinds:
            s = pp_shuffle(ex.question)
            if s:
                made += keep(Example(s, ex.logic_form))
        if "entity" in kinds:
            for new in entity_replace(ex, db):
                if max_per_source is not None and made >= max_per_source:
                    break
                made += keep(new)
    pairs = [(x, y) for x in examples for y in examples if x is not y]
    counts: dict[int, int] = {}
    for x, y in pairs:
        if max_per_source is not None and counts.get(id(x), 0) >= max_per_source:
            continue
        for kind, fn in (("nested", nested_replace), ("conj", conjunction_combine)):
            if kind in kinds:
                new = fn(x, y, db)
                if new is not None and keep(new):
                    counts[id(x)] = counts.get(id(x), 0) + 1
    return out
