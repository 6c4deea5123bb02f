"""End-to-end question answering: map, resolve, inject, translate, recover.

Also hosts dataset loading, training of both models, corpus evaluation with
per-stage failure attribution, and the ablation runner.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .augmentation import augment
from .comprehension import (ComprehensionModel, ComprehensionQuestion, gold_types_from_form,
                            train_comprehension)
from .config import Config
from .data import Example, load_corpus, load_split_indices, split_corpus, tokenize
from .embeddings import EmbeddingTable
from .geo_store import GeoDatabase, denotation_match, load_database
from .injection import (GoldResolver, InjectedQuestion, ModelResolver, RandomResolver, SymbolTable,
                        first_type, plain_question, recover, spatial_injection, symbolize)
from .logic_form import ParseError, forms_equal, parse, render
from .mapper import MapperConfig, load_lexicon, load_stop_words, spatial_mapper
from .translator import TranslatorModel, infer, train_translator

__all__ = [
    "StageError",
    "IncompatibleFlags",
    "ABLATION_FLAGS",
    "Dataset",
    "load_dataset",
    "mapper_config",
    "Resources",
    "Trace",
    "run_pipeline",
    "comprehension_questions",
    "training_pairs",
    "train_all",
    "evaluate_corpus",
    "run_ablation",
    "save_resources",
    "load_resources",
]

log = logging.getLogger("spatialnli")

ABLATION_FLAGS = frozenset({"no-copy", "no-comprehension", "no-augment", "no-typefeed", "no-inject"})
STAGES = ("mapper", "comprehension", "injection", "translation", "recovery")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.trace = None      # partial trace, set by run_pipeline
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class IncompatibleFlags(ValueError):
    pass


# -- datasets -------------------------------------------------------------

@dataclass
class Dataset:
    name: str
    root: Path
    db: GeoDatabase
    examples: list
    train: list
    test: list
    lexicon: dict


def load_dataset(root, test_fraction: float = 0.2, seed: int = 0, name: str | None = None) -> Dataset:
    """Directory layout: ``schema.txt`` + one CSV per table, ``questions.tsv``,
    optional ``lexicon.tsv``, ``ctors.tsv`` and ``train_idx.txt``/``test_idx.txt``.
    Without index files the split is a seeded shuffle."""
    root = Path(root)
    ctors = {}
    if (root / "ctors.tsv").exists():
        for line in (root / "ctors.tsv").read_text(encoding="utf-8").splitlines():
            if line.strip() and not line.startswith("#"):
                ctor, table = line.split("\t")
                ctors[ctor.strip()] = table.strip()
    db = load_database(root / "schema.txt", ctor_overrides=ctors or None)
    examples = load_corpus(root / "questions.tsv")
    if (root / "train_idx.txt").exists() and (root / "test_idx.txt").exists():
        train = [examples[i] for i in load_split_indices(root / "train_idx.txt")]
        test = [examples[i] for i in load_split_indices(root / "test_idx.txt")]
    else:
        train, test = split_corpus(examples, test_fraction, seed)
    lexicon = load_lexicon(root / "lexicon.tsv") if (root / "lexicon.tsv").exists() else {}
    return Dataset(name or root.name, root, db, examples, train, test, lexicon)


def mapper_config(cfg: Config, lexicon: dict | None = None) -> MapperConfig:
    m = cfg.mapper
    kw = dict(max_ngram=m.max_ngram, tau_sem=m.tau_sem, tau_ed=m.tau_ed, min_edit_length=m.min_edit_length,
              lexicon=load_lexicon(m.lexicon) if m.lexicon else dict(lexicon or {}))
    if m.stopwords:
        kw["stop_words"] = load_stop_words(m.stopwords)
    return MapperConfig(**kw)


# -- runtime resources ----------------------------------------------------

@dataclass
class Resources:
    db: GeoDatabase
    translator: TranslatorModel | None
    mapper: MapperConfig = field(default_factory=MapperConfig)
    E: EmbeddingTable | None = None
    comprehension: ComprehensionModel | None = None
    resolver: Callable | None = None
    inject: bool = True
    type_feeding: bool = True

    def type_resolver(self) -> Callable:
        if self.resolver is not None:
            return self.resolver
        if self.comprehension is not None:
            return ModelResolver(self.comprehension)
        return first_type


@dataclass
class Trace:
    question: str
    tokens: list = field(default_factory=list)
    P: list = field(default_factory=list)
    V: list = field(default_factory=list)
    injected: InjectedQuestion | None = None
    s2p: SymbolTable = field(default_factory=SymbolTable)
    l_sym: str | None = None
    l: str | None = None

    def as_dict(self) -> dict:
        return {
            "question": self.question,
            "P": [asdict(p) for p in self.P],
            "V": [asdict(v) for v in self.V],
            "q_prime": str(self.injected) if self.injected is not None else None,
            "s2p": self.s2p.as_dict(),
            "l_prime": self.l_sym,
            "l": self.l,
        }


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # tagged and re-raised
                raise StageError(name, exc) from exc
        return inner
    return wrap


def _inject(tokens, P, V, res: Resources, resolver):
    if not res.inject:
        return plain_question(tokens), SymbolTable(), V
    V = _stage("comprehension")(_resolve_all)(tokens, V, resolver)
    q_prime, s2p = _stage("injection")(spatial_injection)(tokens, V, P, resolver, res.db, res.type_feeding)
    return q_prime, s2p, V


def _resolve_all(tokens, V, resolver):
    return [v if not v.ambiguous else v.resolved(resolver(list(tokens), v.span, list(v.types))) for v in V]


def run_pipeline(q: str, res: Resources, translate: Callable | None = None) -> tuple[str, Trace]:
    """Answer one question; returns the executable form and its trace.

    ``translate(q_prime) -> l_sym`` replaces the translator (oracle runs).
    Failures raise :class:`StageError` tagged with the failing stage.
    """
    trace = Trace(q)
    try:
        trace.tokens = _stage("mapper")(tokenize)(q)
        P, V = _stage("mapper")(spatial_mapper)(res.db, trace.tokens, res.E, res.mapper)
        trace.P = P
        trace.injected, trace.s2p, trace.V = _inject(trace.tokens, P, V, res, res.type_resolver())
        if translate is None:
            if res.translator is None:
                raise StageError("translation", RuntimeError("no translator loaded"))
            translate = lambda qp: infer(res.translator, qp)  # noqa: E731
        trace.l_sym = _stage("translation")(translate)(trace.injected)
        trace.l = _stage("recovery")(recover)(trace.l_sym, trace.s2p)
    except StageError as err:
        err.trace = trace
        raise
    return trace.l, trace


# -- training data --------------------------------------------------------

def _analyse(ex: Example, db, E, mcfg):
    tokens = tokenize(ex.question)
    P, V = spatial_mapper(db, tokens, E, mcfg)
    gold = gold_types_from_form(ex.logic_form, V, db)
    return tokens, P, V, gold


def comprehension_questions(examples: Iterable[Example], db, E, mcfg) -> list[ComprehensionQuestion]:
    """Questions holding at least one ambiguous value whose gold table is known."""
    out = []
    for ex in examples:
        tokens, P, V, gold = _analyse(ex, db, E, mcfg)
        pois = [(v.start, v.end, tuple(v.types), gold[v.span]) for v in V if v.ambiguous and v.span in gold]
        if pois:
            out.append(ComprehensionQuestion(tokens, pois))
    return out


def training_pairs(examples: Iterable[Example], db, E, mcfg, inject=True, type_feeding=True):
    """(injected question, symbolic target) using gold tables for type feeding."""
    pairs = []
    for ex in examples:
        tokens, P, V, gold = _analyse(ex, db, E, mcfg)
        if not inject:
            pairs.append((plain_question(tokens), render(parse(ex.logic_form))))
            continue
        q_prime, s2p = spatial_injection(tokens, V, P, GoldResolver(gold), db, type_feeding)
        pairs.append((q_prime, symbolize(ex.logic_form, s2p, q_prime.feeds)))
    return pairs


@dataclass
class Trained:
    comprehension: dict            # dataset name -> model or None
    translators: dict              # dataset name -> model (shared object when joint)


def train_all(cfg: Config, datasets: Sequence[Dataset], E: EmbeddingTable | None = None, joint: bool = False,
              flags: Iterable[str] = (), out_dir=None) -> Trained:
    """Train comprehension per dataset, then the translator(s).

    ``joint`` pools every dataset's pairs into one shared translator.
    Augmentation applies to training splits only, before injection.
    """
    flags = _check_flags(flags)
    comp, pairs_by = {}, {}
    for ds in datasets:
        mcfg = mapper_config(cfg, ds.lexicon)
        cq = comprehension_questions(ds.train, ds.db, E, mcfg)
        comp[ds.name] = (train_comprehension(cq, cfg.comprehension, E, log=log.info)
                         if cq and "no-comprehension" not in flags else None)
        train = list(ds.train)
        if "no-augment" not in flags and cfg.pipeline.augment:
            train += augment(ds.train, ds.db, cfg.pipeline.augment, cfg.pipeline.max_per_source)
        pairs_by[ds.name] = training_pairs(train, ds.db, E, mcfg,
                                           inject="no-inject" not in flags,
                                           type_feeding="no-typefeed" not in flags)
    tcfg = _translator_cfg(cfg, flags)
    if joint:
        pooled = [p for ds in datasets for p in pairs_by[ds.name]]
        shared = train_translator(pooled, tcfg, E, log=log.info)
        translators = {ds.name: shared for ds in datasets}
    else:
        translators = {ds.name: train_translator(pairs_by[ds.name], _translator_cfg(cfg, flags), E, log=log.info)
                       for ds in datasets}
    trained = Trained(comp, translators)
    if out_dir is not None:
        for ds in datasets:
            save_resources(Path(out_dir) / ds.name, cfg, trained.translators[ds.name],
                           trained.comprehension[ds.name], flags)
    return trained


def _translator_cfg(cfg: Config, flags):
    from dataclasses import replace
    return replace(cfg.translator, copy=cfg.translator.copy and "no-copy" not in flags)


def _check_flags(flags) -> frozenset:
    flags = frozenset(flags)
    unknown = flags - ABLATION_FLAGS
    if unknown:
        raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
    if {"no-inject", "no-typefeed"} <= flags:
        raise IncompatibleFlags("no-inject already removes type feeding; pass only one of them")
    return flags


# -- persistence ----------------------------------------------------------

def save_resources(directory, cfg: Config, translator, comprehension=None, flags=()):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    translator.save(d / "translator.npz")
    if comprehension is not None:
        comprehension.save(d / "comprehension.npz")
    (d / "pipeline.json").write_text(json.dumps({"config": cfg.to_dict(), "flags": sorted(flags)}, indent=2))


def load_resources(directory, ds: Dataset, E: EmbeddingTable | None = None, cfg: Config | None = None,
                   seed: int = 0) -> Resources:
    d = Path(directory)
    meta = json.loads((d / "pipeline.json").read_text())
    cfg = cfg or Config.from_dict(meta["config"])
    flags = set(meta.get("flags", []))
    comp = ComprehensionModel.load(d / "comprehension.npz", E) if (d / "comprehension.npz").exists() else None
    res = Resources(ds.db, TranslatorModel.load(d / "translator.npz", E), mapper_config(cfg, ds.lexicon), E, comp,
                    inject="no-inject" not in flags, type_feeding="no-typefeed" not in flags)
    if "no-comprehension" in flags:
        res.resolver = RandomResolver(seed)
    return res


# -- evaluation -----------------------------------------------------------

def _gold_view(ex: Example, trace: Trace, res: Resources):
    """What a perfect translator would have had to emit for this trace."""
    gold = gold_types_from_form(ex.logic_form, trace.V, res.db)
    return gold, (symbolize(ex.logic_form, trace.s2p, trace.injected.feeds) if res.inject
                  else render(parse(ex.logic_form)))


def _unmatched_values(ex: Example, trace: Trace, res: Resources) -> bool:
    """True when a gold entity constant has no matching value span in the trace."""
    from .logic_form import Constant, Predicate, walk
    matched = {v.text.lower() for v in trace.V} | {res.db.display(v.text).lower() for v in trace.V}
    for node in walk(parse(ex.logic_form)):
        if (isinstance(node, Predicate) and node.name in res.db.ctor_to_table and len(node.args) == 1
                and isinstance(node.args[0], Constant) and node.args[0].text.lower() not in matched):
            return True
    return False


def _attribute(ex, trace, res, correct_sym) -> str:
    if res.inject and _unmatched_values(ex, trace, res):
        return "mapper"
    gold, _ = _gold_view(ex, trace, res)
    if res.inject and res.type_feeding:
        for v in trace.V:
            if v.ambiguous and v.span in gold and v.resolved_type != gold[v.span]:
                return "comprehension"
    if not correct_sym:
        return "translation"
    return "recovery"


def evaluate_corpus(examples: Sequence[Example], res: Resources, mode: str = "denotation",
                    oracle: bool = False, workers: int = 1) -> dict:
    """Score a split.

    ``mode`` is ``denotation`` (answer sets must match) or ``exact`` (forms
    equal up to constant case); both are always reported. ``oracle`` feeds
    the gold symbolic form to recovery instead of translating. Each failure
    is attributed to exactly one stage. Questions are independent, so
    ``workers > 1`` scores them on a thread pool; records keep input order.
    """
    if mode not in ("denotation", "exact"):
        raise ValueError("mode must be 'denotation' or 'exact'")
    score = lambda ex: _score_one(ex, res, mode, oracle)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(score, examples))
    else:
        records = [score(ex) for ex in examples]
    breakdown = Counter(r["stage"] for r in records if not r["correct"])
    n = len(records)
    n_den = sum(r["denotation"] for r in records)
    n_exact = sum(r["exact"] for r in records)
    return {
        "n": n,
        "mode": mode,
        "accuracy": (n_den if mode == "denotation" else n_exact) / n if n else 0.0,
        "denotation_accuracy": n_den / n if n else 0.0,
        "exact_accuracy": n_exact / n if n else 0.0,
        "breakdown": {s: breakdown.get(s, 0) for s in STAGES},
        "records": records,
    }


def _score_one(ex: Example, res: Resources, mode: str, oracle: bool) -> dict:
    rec = {"question": ex.question, "gold": ex.logic_form}
    try:
        if oracle:
            pred, trace = _stage("recovery")(_oracle_run)(ex, res)
        else:
            pred, trace = run_pipeline(ex.question, res)
        den = denotation_match(pred, ex.logic_form, res.db)
        exact = _exact(pred, ex.logic_form)
        _, gold_sym = _gold_view(ex, trace, res)
        sym_ok = _exact(trace.l_sym, gold_sym)
        rec.update(prediction=pred, trace=trace.as_dict(), denotation=den, exact=exact)
        ok = den if mode == "denotation" else exact
        rec["stage"] = None if ok else _attribute(ex, trace, res, sym_ok)
    except StageError as err:
        ok = False
        rec.update(prediction=None, error=str(err), denotation=False, exact=False, stage=err.stage)
    rec["correct"] = ok
    return rec


def _oracle_run(ex: Example, res: Resources):
    trace = Trace(ex.question)
    trace.tokens = tokenize(ex.question)
    trace.P, V = spatial_mapper(res.db, trace.tokens, res.E, res.mapper)
    trace.injected, trace.s2p, trace.V = _inject(trace.tokens, trace.P, V, res, res.type_resolver())
    _, trace.l_sym = _gold_view(ex, trace, res)
    trace.l = recover(trace.l_sym, trace.s2p)
    return trace.l, trace


def _exact(a, b) -> bool:
    if a is None or b is None:
        return False
    try:
        return forms_equal(a, b)
    except ParseError:
        return False


def run_ablation(flags: Iterable[str], ds: Dataset, cfg: Config, E: EmbeddingTable | None = None,
                 mode: str = "denotation", seed: int = 0) -> dict:
    """Retrain with the given components removed and score the test split.

    ``no-comprehension`` keeps type feeding but guesses each ambiguous
    value's table uniformly at random (seeded).
    """
    flags = _check_flags(flags)
    trained = train_all(cfg, [ds], E, flags=flags)
    res = Resources(ds.db, trained.translators[ds.name], mapper_config(cfg, ds.lexicon), E,
                    trained.comprehension[ds.name],
                    inject="no-inject" not in flags, type_feeding="no-typefeed" not in flags)
    if "no-comprehension" in flags:
        res.resolver = RandomResolver(seed)
    report = evaluate_corpus(ds.test, res, mode)
    report["flags"] = sorted(flags)
    return report
