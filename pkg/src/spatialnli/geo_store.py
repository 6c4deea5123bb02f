"""Spatial fact store and a backtracking evaluator for logic forms.

Storage layout (all UTF-8)::

    schema.txt      one line per table: ``table,col1,col2,...``
    <table>.csv     header row = column names, first column = entity name

A column may carry an annotation in the schema:

* ``col:table``   values are references to entities of ``table``
* ``col:table*``  as above, multi-valued (cells separated by ``;``)
* ``col:num``     force numeric

Unannotated columns are numeric when every non-empty cell parses as a float.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .logic_form import Conjunction, Constant, Predicate, Term, Variable, parse

__all__ = [
    "Entity",
    "Column",
    "Table",
    "GeoDatabase",
    "FormatError",
    "DuplicateTable",
    "UnknownPredicate",
    "UnboundVariable",
    "TypeMismatch",
    "load_database",
    "evaluate",
    "denotation_match",
]

MULTI_SEP = ";"
# Columns whose references do not express containment.
NON_LOC_REFS = frozenset({"capital", "next_to", "border"})
SIZE_COLUMNS = ("size", "area", "population", "len", "length", "elevation")
ELEVATION_COLUMNS = ("elevation", "height")
LENGTH_COLUMNS = ("len", "length")
MAJOR_THRESHOLDS = {"population": 150000.0, "len": 750.0, "length": 750.0}
AGGREGATES = frozenset({"count", "sum", "largest", "smallest", "highest", "lowest",
                        "longest", "shortest", "most", "fewest", "not",
                        "largest_one", "smallest_one"})


class FormatError(ValueError):
    def __init__(self, row, reason: str):
        self.row = row
        self.reason = reason
        super().__init__(f"row {row}: {reason}")


class DuplicateTable(ValueError):
    pass


class UnknownPredicate(ValueError):
    pass


class UnboundVariable(ValueError):
    pass


class TypeMismatch(ValueError):
    def __init__(self, predicate: str, arg):
        self.predicate = predicate
        self.arg = arg
        super().__init__(f"{predicate}: bad argument {arg!r}")


@dataclass(frozen=True, order=True)
class Entity:
    table: str
    key: str  # case-folded name

    def __repr__(self):
        return f"{self.table}id({self.key})"


@dataclass(frozen=True)
class Column:
    name: str
    numeric: bool = False
    ref: str | None = None
    multi: bool = False


@dataclass
class Table:
    name: str
    columns: list[Column]
    rows: dict[str, dict] = field(default_factory=dict)  # key -> {col: value}
    display: dict[str, str] = field(default_factory=dict)  # key -> surface name

    def column(self, name: str) -> Column | None:
        for c in self.columns:
            if c.name == name:
                return c
        return None


class GeoDatabase:
    """Immutable after construction. Value lookup is case-insensitive."""

    def __init__(self, tables: dict[str, Table], ctor_overrides: dict[str, str] | None = None):
        self.tables = tables
        self.ctor_to_table: dict[str, str] = {f"{t}id": t for t in tables}
        self.table_to_ctor: dict[str, str] = {t: f"{t}id" for t in tables}
        for ctor, table in (ctor_overrides or {}).items():
            self.ctor_to_table[ctor] = table
            self.table_to_ctor[table] = ctor
        self.entity_index: dict[str, list[str]] = {}
        self.value_display: dict[str, str] = {}
        self.keyword_set: set[str] = set()
        self._build_indexes()

    # -- indexes ----------------------------------------------------------
    def _build_indexes(self):
        index: dict[str, list[str]] = defaultdict(list)
        for t in self.tables.values():
            self.keyword_set.add(t.name)
            for c in t.columns[1:]:
                self.keyword_set.add(c.name)
            for key, row in t.rows.items():
                if t.name not in index[key]:
                    index[key].append(t.name)
                self.value_display.setdefault(key, t.display[key])
                for c in t.columns[1:]:
                    if c.numeric or c.ref:
                        continue
                    for v in _cell_values(row.get(c.name), c):
                        k = v.lower()
                        if c.name not in index[k]:
                            index[k].append(c.name)
                        self.value_display.setdefault(k, v)
        self.entity_index = {k: sorted(v) for k, v in index.items() if v}

    def types_of(self, value: str) -> list[str]:
        return list(self.entity_index.get(value.lower().strip(), []))

    def display(self, value: str) -> str:
        return self.value_display.get(value.lower().strip(), value)

    def ctor_for(self, table: str) -> str:
        return self.table_to_ctor.get(table, f"{table}id")

    def entities(self, table: str) -> list[Entity]:
        return [Entity(table, k) for k in self.tables[table].rows]

    def row(self, e: Entity) -> dict | None:
        t = self.tables.get(e.table)
        return t.rows.get(e.key) if t else None

    def name_of(self, e: Entity) -> str:
        t = self.tables.get(e.table)
        if t and e.key in t.display:
            return t.display[e.key]
        return self.display(e.key)

    def attribute(self, e: Entity, candidates: Iterable[str]):
        row = self.row(e)
        if row is None:
            return None
        table = self.tables[e.table]
        for name in candidates:
            col = table.column(name)
            if col is not None and col.numeric and row.get(name) is not None:
                return row[name]
        return None

    def references(self, e: Entity, loc_only: bool = False) -> Iterator[Entity]:
        row = self.row(e)
        if row is None:
            return
        for col in self.tables[e.table].columns[1:]:
            if col.ref and not (loc_only and col.name in NON_LOC_REFS):
                for v in _cell_values(row.get(col.name), col):
                    yield Entity(col.ref, v.lower())

    @property
    def predicate_vocabulary(self) -> set[str]:
        vocab = set(self.keyword_set) | set(self.ctor_to_table)
        vocab |= {"answer", "const", "loc", "major", "capital", "size", "density",
                  "elevation", "len"} | AGGREGATES
        return vocab


def _cell_values(cell, col: Column) -> list:
    if cell is None or cell == "":
        return []
    if col.multi:
        return list(cell)
    return [cell]


def _parse_schema_line(line: str, lineno: int) -> tuple[str, list[Column]]:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < 2 or not all(parts):
        raise FormatError(lineno, "schema line needs a table name and at least one column")
    table, cols = parts[0], []
    for spec in parts[1:]:
        name, _, ann = spec.partition(":")
        multi = ann.endswith("*")
        ann = ann.rstrip("*")
        if ann == "num":
            cols.append(Column(name, numeric=True))
        elif ann:
            cols.append(Column(name, ref=ann, multi=multi))
        else:
            cols.append(Column(name, multi=multi))
    return table, cols


def _to_float(text: str):
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_database(schema_file, facts_files=None, ctor_overrides: dict[str, str] | None = None) -> GeoDatabase:
    """Load the schema and one CSV per table.

    ``facts_files`` is a list of CSV paths (table name = file stem) or a
    directory; by default the CSVs sitting next to the schema file are used.
    Declared tables without a CSV are empty.
    """
    schema_file = Path(schema_file)
    declared: dict[str, list[Column]] = {}
    with open(schema_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, cols = _parse_schema_line(line, lineno)
            if name in declared:
                raise DuplicateTable(name)
            declared[name] = cols

    if facts_files is None:
        facts_files = schema_file.parent
    if isinstance(facts_files, (str, Path)) and Path(facts_files).is_dir():
        facts_files = sorted(Path(facts_files).glob("*.csv"))
    by_table = {Path(f).stem: Path(f) for f in facts_files}

    tables: dict[str, Table] = {}
    for name, cols in declared.items():
        raw_rows: list[list[str]] = []
        path = by_table.get(name)
        if path is not None:
            with open(path, encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header is not None:
                    header = [h.strip() for h in header]
                    if header != [c.name for c in cols]:
                        raise FormatError(f"{path.name}:1", f"header {header} does not match schema {[c.name for c in cols]}")
                    for i, r in enumerate(reader, 2):
                        if not r or all(not x.strip() for x in r):
                            continue
                        if len(r) != len(cols):
                            raise FormatError(f"{path.name}:{i}", f"expected {len(cols)} fields, got {len(r)}")
                        raw_rows.append([x.strip() for x in r])
        # infer numeric columns
        resolved = []
        for j, c in enumerate(cols):
            if j > 0 and not c.ref and not c.numeric and not c.multi:
                vals = [r[j] for r in raw_rows if r[j] != ""]
                if vals and all(_to_float(v) is not None for v in vals):
                    c = Column(c.name, numeric=True)
            resolved.append(c)
        table = Table(name, resolved)
        for i, r in enumerate(raw_rows):
            if not r[0]:
                raise FormatError(f"{name}.csv:{i + 2}", "empty entity name")
            key = r[0].lower()
            if key in table.rows:
                raise FormatError(f"{name}.csv:{i + 2}", f"duplicate entity {r[0]!r}")
            row = {}
            for c, cell in zip(resolved[1:], r[1:]):
                if cell == "":
                    row[c.name] = None
                elif c.numeric:
                    v = _to_float(cell)
                    if v is None:
                        raise FormatError(f"{name}.csv:{i + 2}", f"column {c.name} is numeric, got {cell!r}")
                    row[c.name] = v
                elif c.multi:
                    row[c.name] = tuple(x.strip() for x in cell.split(MULTI_SEP) if x.strip())
                else:
                    row[c.name] = cell
            table.rows[key] = row
            table.display[key] = r[0]
        tables[name] = table
    return GeoDatabase(tables, ctor_overrides)


# -- evaluation ------------------------------------------------------------

def _values_equal(a, b) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        try:
            return float(a) == float(b)
        except (TypeError, ValueError):
            return False
    if isinstance(a, str) and isinstance(b, str):
        return a.lower() == b.lower()
    return a == b


def _as_number(v):
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        return _to_float(v)
    return None


class Evaluator:
    """Prolog-style left-to-right backtracking over variable bindings."""

    def __init__(self, db: GeoDatabase):
        self.db = db

    # binding helpers
    def value(self, term: Term, env: dict):
        if isinstance(term, Variable):
            return env.get(term.name)
        if isinstance(term, Constant):
            n = _to_float(term.text)
            return n if n is not None else term.text
        raise TypeMismatch("argument", term)

    def unify(self, term: Term, val, env: dict):
        if isinstance(term, Variable):
            cur = env.get(term.name)
            if cur is None:
                new = dict(env)
                new[term.name] = val
                return new
            return env if _values_equal(cur, val) else None
        if isinstance(term, Constant):
            return env if _values_equal(self.value(term, env), val) else None
        raise TypeMismatch("argument", term)

    def solve(self, goal: Term, env: dict) -> Iterator[dict]:
        if isinstance(goal, Conjunction):
            yield from self._conj(list(goal.terms), env)
            return
        if not isinstance(goal, Predicate):
            raise TypeMismatch("goal", goal)
        handler = getattr(self, f"_p_{goal.name}", None)
        if handler is not None:
            yield from handler(goal, env)
            return
        yield from self._schema_predicate(goal, env)

    def _conj(self, goals: list, env: dict) -> Iterator[dict]:
        if not goals:
            yield env
            return
        for e in self.solve(goals[0], env):
            yield from self._conj(goals[1:], e)

    # -- core predicates --
    def _p_answer(self, goal: Predicate, env):
        raise TypeMismatch("answer", "nested answer")

    def _p_const(self, goal: Predicate, env):
        if len(goal.args) != 2:
            raise TypeMismatch("const", goal.args)
        target, spec = goal.args
        if isinstance(spec, Predicate):
            table = self.db.ctor_to_table.get(spec.name)
            if table is None or len(spec.args) != 1 or not isinstance(spec.args[0], Constant):
                raise UnknownPredicate(spec.name)
            val = Entity(table, spec.args[0].text.lower().strip())
        elif isinstance(spec, Constant):
            val = self.value(spec, env)
        else:
            raise TypeMismatch("const", spec)
        e = self.unify(target, val, env)
        if e is not None:
            yield e

    def _p_not(self, goal: Predicate, env):
        if len(goal.args) != 1:
            raise TypeMismatch("not", goal.args)
        for _ in self.solve(goal.args[0], env):
            return
        yield env

    def _collect(self, var: Term, goal: Term, env: dict) -> list:
        if not isinstance(var, Variable):
            raise TypeMismatch("aggregate", var)
        seen = []
        for e in self.solve(goal, env):
            v = e.get(var.name)
            if v is None:
                raise UnboundVariable(var.name)
            if not any(_values_equal(v, s) for s in seen):
                seen.append(v)
        return seen

    def _p_count(self, goal: Predicate, env):
        if len(goal.args) != 3:
            raise TypeMismatch("count", goal.args)
        var, body, out = goal.args
        n = float(len(self._collect(var, body, env)))
        e = self.unify(out, n, env)
        if e is not None:
            yield e

    def _p_sum(self, goal: Predicate, env):
        if len(goal.args) != 3:
            raise TypeMismatch("sum", goal.args)
        var, body, out = goal.args
        total = 0.0
        for v in self._collect(var, body, env):
            n = _as_number(v)
            if n is None:
                raise TypeMismatch("sum", v)
            total += n
        e = self.unify(out, total, env)
        if e is not None:
            yield e

    def _measure(self, v, columns):
        if isinstance(v, Entity):
            return self.db.attribute(v, columns)
        return _as_number(v)

    def _superlative(self, goal: Predicate, env, columns, pick_max: bool):
        if len(goal.args) != 2:
            raise TypeMismatch(goal.name, goal.args)
        var, body = goal.args
        if not isinstance(var, Variable):
            raise TypeMismatch(goal.name, var)
        sols = []
        for e in self.solve(body, env):
            v = e.get(var.name)
            if v is None:
                raise UnboundVariable(var.name)
            m = self._measure(v, columns)
            if m is not None:
                sols.append((m, e))
        if not sols:
            return
        best = max(m for m, _ in sols) if pick_max else min(m for m, _ in sols)
        emitted = []
        for m, e in sols:
            if m == best and e not in emitted:
                emitted.append(e)
                yield e

    def _p_largest(self, g, env):
        return self._superlative(g, env, SIZE_COLUMNS, True)

    def _p_smallest(self, g, env):
        return self._superlative(g, env, SIZE_COLUMNS, False)

    def _p_highest(self, g, env):
        return self._superlative(g, env, ELEVATION_COLUMNS, True)

    def _p_lowest(self, g, env):
        return self._superlative(g, env, ELEVATION_COLUMNS, False)

    def _p_longest(self, g, env):
        return self._superlative(g, env, LENGTH_COLUMNS, True)

    def _p_shortest(self, g, env):
        return self._superlative(g, env, LENGTH_COLUMNS, False)

    def _one(self, goal: Predicate, env, pick_max: bool):
        # largest_one(population(A,B)): the A whose B is extreme
        if len(goal.args) != 1 or not isinstance(goal.args[0], Predicate) or len(goal.args[0].args) != 2:
            raise TypeMismatch(goal.name, goal.args)
        inner = goal.args[0]
        measure_var = inner.args[1]
        if not isinstance(measure_var, Variable):
            raise TypeMismatch(goal.name, measure_var)
        return self._superlative(Predicate(goal.name, (measure_var, inner)), env, SIZE_COLUMNS, pick_max)

    def _p_largest_one(self, g, env):
        return self._one(g, env, True)

    def _p_smallest_one(self, g, env):
        return self._one(g, env, False)

    def _most(self, goal: Predicate, env, pick_max: bool):
        if len(goal.args) != 3:
            raise TypeMismatch(goal.name, goal.args)
        var, counted, body = goal.args
        if not isinstance(var, Variable) or not isinstance(counted, Variable):
            raise TypeMismatch(goal.name, goal.args)
        groups: list[tuple[object, list]] = []  # (value, distinct counted values)
        for e in self.solve(body, env):
            v, c = e.get(var.name), e.get(counted.name)
            if v is None:
                raise UnboundVariable(var.name)
            if c is None:
                raise UnboundVariable(counted.name)
            for g in groups:
                if _values_equal(g[0], v):
                    if not any(_values_equal(c, x) for x in g[1]):
                        g[1].append(c)
                    break
            else:
                groups.append((v, [c]))
        if not groups:
            return
        sizes = [len(g[1]) for g in groups]
        best = max(sizes) if pick_max else min(sizes)
        for (v, _), n in zip(groups, sizes):
            if n == best:
                out = self.unify(var, v, env)
                if out is not None:
                    yield out

    def _p_most(self, g, env):
        return self._most(g, env, True)

    def _p_fewest(self, g, env):
        return self._most(g, env, False)

    def _p_loc(self, goal: Predicate, env):
        if len(goal.args) != 2:
            raise TypeMismatch("loc", goal.args)
        x, y = goal.args
        xv = self.value(x, env)
        if xv is not None:
            if not isinstance(xv, Entity):
                return
            for ref in self.db.references(xv, loc_only=True):
                e = self.unify(y, ref, env)
                if e is not None:
                    yield e
            return
        yv = self.value(y, env)
        for table in self.db.tables.values():
            for key in table.rows:
                ent = Entity(table.name, key)
                for ref in self.db.references(ent, loc_only=True):
                    if yv is not None and ref != yv:
                        continue
                    e = self.unify(x, ent, env)
                    if e is not None:
                        e = self.unify(y, ref, e)
                    if e is not None:
                        yield e

    def _p_major(self, goal: Predicate, env):
        if len(goal.args) != 1:
            raise TypeMismatch("major", goal.args)
        for ent in self._candidates(goal.args[0], env):
            for col, threshold in MAJOR_THRESHOLDS.items():
                v = self.db.attribute(ent, (col,))
                if v is not None and v > threshold:
                    e = self.unify(goal.args[0], ent, env)
                    if e is not None:
                        yield e
                    break

    def _candidates(self, term: Term, env) -> Iterator[Entity]:
        v = self.value(term, env)
        if v is not None:
            if isinstance(v, Entity):
                yield v
            return
        for table in self.db.tables.values():
            for key in table.rows:
                yield Entity(table.name, key)

    def _p_density(self, goal: Predicate, env):
        # stored column when present, otherwise population / area
        if len(goal.args) != 2:
            raise TypeMismatch("density", goal.args)
        for ent in self._candidates(goal.args[0], env):
            row = self.db.row(ent)
            if row is None:
                continue
            d = self.db.attribute(ent, ("density",))
            if d is None:
                pop = self.db.attribute(ent, ("population",))
                area = self.db.attribute(ent, ("area",))
                if pop is None or not area:
                    continue
                d = pop / area
            e = self.unify(goal.args[0], ent, env)
            if e is not None:
                e = self.unify(goal.args[1], d, e)
            if e is not None:
                yield e

    def _measure_predicate(self, goal: Predicate, env, columns):
        if len(goal.args) != 2:
            raise TypeMismatch(goal.name, goal.args)
        for ent in self._candidates(goal.args[0], env):
            v = self.db.attribute(ent, columns)
            if v is None:
                continue
            e = self.unify(goal.args[0], ent, env)
            if e is not None:
                e = self.unify(goal.args[1], v, e)
            if e is not None:
                yield e

    def _p_size(self, g, env):
        return self._measure_predicate(g, env, SIZE_COLUMNS)

    def _p_elevation(self, g, env):
        return self._measure_predicate(g, env, ELEVATION_COLUMNS)

    def _p_len(self, g, env):
        return self._measure_predicate(g, env, LENGTH_COLUMNS)

    # -- schema-driven predicates --
    def _schema_predicate(self, goal: Predicate, env):
        name, args = goal.name, goal.args
        db = self.db
        if name in db.tables and len(args) == 1:
            v = self.value(args[0], env)
            if v is not None:
                if isinstance(v, Entity) and v.table == name and v.key in db.tables[name].rows:
                    yield env
                return
            for ent in db.entities(name):
                e = self.unify(args[0], ent, env)
                if e is not None:
                    yield e
            return
        owners = [t for t in db.tables.values() if t.column(name) is not None]
        if not owners:
            raise UnknownPredicate(name)
        if len(args) == 1:
            # unary use of a reference column: entities referenced by it (capital(X))
            refs = []
            for t in owners:
                col = t.column(name)
                if not col.ref:
                    continue
                for row in t.rows.values():
                    for v in _cell_values(row.get(name), col):
                        ent = Entity(col.ref, v.lower())
                        if ent not in refs:
                            refs.append(ent)
            if not any(t.column(name).ref for t in owners):
                raise TypeMismatch(name, args)
            for ent in refs:
                e = self.unify(args[0], ent, env)
                if e is not None:
                    yield e
            return
        if len(args) != 2:
            raise TypeMismatch(name, args)
        x, y = args
        xv = self.value(x, env)
        if xv is not None and not isinstance(xv, Entity):
            return
        for t in owners:
            col = t.column(name)
            keys = [xv.key] if xv is not None else list(t.rows)
            if xv is not None and xv.table != t.name:
                continue
            for key in keys:
                row = t.rows.get(key)
                if row is None:
                    continue
                for v in _cell_values(row.get(name), col):
                    val = Entity(col.ref, v.lower()) if col.ref else v
                    e = self.unify(x, Entity(t.name, key), env)
                    if e is not None:
                        e = self.unify(y, val, e)
                    if e is not None:
                        yield e


def evaluate(lf: Term | str, db: GeoDatabase) -> frozenset:
    """Answer set bound to the answer variable of ``answer(A, goal, ...)``."""
    term = parse(lf) if isinstance(lf, str) else lf
    if not (isinstance(term, Predicate) and term.name == "answer" and len(term.args) >= 2):
        raise TypeMismatch("answer", term)
    var = term.args[0]
    if not isinstance(var, Variable):
        raise TypeMismatch("answer", var)
    ev = Evaluator(db)
    goal = Conjunction(term.args[1:]) if len(term.args) > 2 else term.args[1]
    out = []
    for env in ev.solve(goal, {}):
        v = env.get(var.name)
        if v is None:
            raise UnboundVariable(var.name)
        if isinstance(v, str):
            v = v.lower()
        if v not in out:
            out.append(v)
    return frozenset(out)


def denotation_match(pred: Term | str, gold: Term | str, db: GeoDatabase) -> bool:
    """True iff both forms denote the same answer set; an unevaluable prediction is a miss."""
    try:
        p = evaluate(pred, db)
    except Exception:
        return False
    return p == evaluate(gold, db)
