"""One test per acceptance criterion; each prints a single PASS/FAIL line.

Criteria that need the full corpora or 300-d GloVe vectors read them from
``$SPATIALNLI_DATA`` (dataset directories ``geoquery/`` and ``restaurant/``)
and ``$SPATIALNLI_GLOVE`` (default ``$SPATIALNLI_DATA/glove.840B.300d.txt``).
Without them those criteria fail with a BLOCKED line instead of silently
passing on smaller stand-ins. The long full-corpus run is opt-in through
``SPATIALNLI_LONG=1``.
"""

import os
import re
import time
from pathlib import Path

import pytest
import torch

from conftest import ACCEPTANCE_LINES
from oracles import brute_force_denotation, denotation_cases, scope_depth
from spatialnli import kernel as K
from spatialnli.augmentation import answer_table, conjunction_combine, entity_replace, nested_replace, pp_shuffle
from spatialnli.comprehension import (
    ComprehensionConfig, ComprehensionModel, enclose, evaluate_comprehension, gold_types_from_form,
    train_comprehension, type_inventory,
)
from spatialnli.config import Config
from spatialnli.data import Example, data_root, load_corpus, sample_dir, tokenize
from spatialnli.embeddings import load_embeddings, semantic_distance
from spatialnli.geo_store import evaluate, load_database
from spatialnli.injection import FixedResolver, GoldResolver, recover, spatial_injection, strip_injection, symbolize
from spatialnli.logic_form import normalize, parse, render
from spatialnli.mapper import spatial_mapper
from spatialnli.pipeline import (
    Resources, comprehension_questions, load_dataset, mapper_config, run_ablation, run_pipeline, training_pairs,
)
from spatialnli.translator import TranslatorConfig, TranslatorModel, infer, source_tokens, target_tokens, \
    train_translator


def report(n: int, title: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2} {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def blocked(n: int, title: str, what: str):
    report(n, title, False, f"BLOCKED: {what} not found")


def dataset_dir(name: str) -> Path | None:
    root = data_root()
    if root is None or not (root / name / "questions.tsv").exists():
        return None
    return root / name


def glove_path() -> Path | None:
    p = os.environ.get("SPATIALNLI_GLOVE")
    if p:
        return Path(p) if Path(p).exists() else None
    root = data_root()
    if root is not None and (root / "glove.840B.300d.txt").exists():
        return root / "glove.840B.300d.txt"
    return None


def corpus_vocab(*datasets) -> set[str]:
    return {t.lower() for ds in datasets for ex in ds.examples for t in tokenize(ex.question)} | \
        {"place", "spot"}


# -- 1 ----------------------------------------------------------------------

WORKED = [
    ("How many rivers does Mississippi have ?", "gold",
     "answer(A,count(B,(river(B),const(C,stateid(Mississippi)),loc(B,C)),A))"),
    ("What is the population of San Antonio ?", "gold",
     "answer(A,population(B,A),const(B,cityid(San Antonio)))"),
    ("How many states does the Mississippi run through ?", "gold",
     "answer(A,count(B,(state(B),const(C,riverid(Mississippi)),traverse(C,B)),A))"),
    ("How many states does the Mississippi run through ?", "state",
     "answer(A,count(B,(state(B),const (C,stateid(Mississippi)),traverse(C,B)),A))"),
]


def test_criterion_01_worked_examples(sample_db, sample_vectors, sample_mapper_config):
    start = time.time()
    hits = 0
    for question, typing, expected in WORKED:
        toks = tokenize(question)
        _, V = spatial_mapper(sample_db, toks, sample_vectors, sample_mapper_config)
        resolver = (GoldResolver(gold_types_from_form(expected, V, sample_db)) if typing == "gold"
                    else FixedResolver(typing))
        res = Resources(sample_db, None, sample_mapper_config, sample_vectors, resolver=resolver)
        _, trace = run_pipeline(question, res, translate=lambda qp: "answer(A)")
        target = symbolize(expected, trace.s2p, trace.injected.feeds)
        cfg = TranslatorConfig(embed_dim=16, enc_hidden=24, dec_hidden=24, attn_dim=16, lr=3e-3, epochs=300,
                               batch_size=1, seed=0)
        res.translator = train_translator([(trace.injected, target)], cfg, target_loss=1e-3)
        got, _ = run_pipeline(question, res)
        hits += normalize(got) == normalize(expected)
    elapsed = time.time() - start
    report(1, "worked examples", hits == len(WORKED) and elapsed < 300,
           f"{hits}/{len(WORKED)} exact, {elapsed:.0f}s (limit 300s)")


# -- 2 ----------------------------------------------------------------------

def test_criterion_02_logic_form_round_trip():
    title = "logic-form round trip"
    dirs = {"geoquery": 880, "restaurant": 251}
    found = {name: dataset_dir(name) for name in dirs}
    missing = [n for n, d in found.items() if d is None]
    if missing:
        blocked(2, title, " and ".join(f"$SPATIALNLI_DATA/{n}/questions.tsv" for n in missing))
    parts, ok = [], True
    for name, expected_n in dirs.items():
        forms = [ex.logic_form for ex in load_corpus(found[name] / "questions.tsv", validate=False)]
        same = sum(render(parse(g)) == normalize(g) for g in forms)
        ok &= same == len(forms) == expected_n
        parts.append(f"{name} {same}/{len(forms)} (expected {expected_n} forms)")
    report(2, title, ok, "; ".join(parts))


# -- 3 ----------------------------------------------------------------------

def test_criterion_03_injection_round_trip():
    title = "injection/recovery round trip"
    found = {n: dataset_dir(n) for n in ("geoquery", "restaurant")}
    missing = [n for n, d in found.items() if d is None]
    if missing:
        blocked(3, title, " and ".join(f"$SPATIALNLI_DATA/{n}" for n in missing))
    parts, ok = [], True
    for name, root in found.items():
        ds = load_dataset(root)
        mcfg = mapper_config(Config(), ds.lexicon)
        good = 0
        for ex in ds.train:
            toks = tokenize(ex.question)
            P, V = spatial_mapper(ds.db, toks, None, mcfg)
            qp, s2p = spatial_injection(toks, V, P, GoldResolver(gold_types_from_form(ex.logic_form, V, ds.db)),
                                        ds.db)
            good += (strip_injection(qp) == toks
                     and recover(symbolize(ex.logic_form, s2p, qp.feeds), s2p) == normalize(ex.logic_form))
        ok &= good == len(ds.train)
        parts.append(f"{name} {good}/{len(ds.train)}")
    report(3, title, ok, "; ".join(parts))


# -- 4 ----------------------------------------------------------------------

def test_criterion_04_denotation_oracle(tmp_path):
    start = time.time()
    same, depths, n = 0, set(), 1000
    for form, rows, schema in denotation_cases(n, seed=2024, tmp=tmp_path):
        depths.add(scope_depth(form))
        same += evaluate(form, load_database(schema)) == brute_force_denotation(form, rows)
    elapsed = time.time() - start
    report(4, "denotation engine vs brute force", same == n and max(depths) <= 3 and elapsed < 120,
           f"{same}/{n} equal, depths {sorted(depths)}, {elapsed:.1f}s (limit 120s)")


# -- 5 ----------------------------------------------------------------------

def _inputs(T, d, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(T, d, generator=g, dtype=torch.float64)


def test_criterion_05_gradient_checks():
    errs = {}
    s = K.ParameterStore(1, torch.float64)
    s.add_lstm("l1", 3, 4)
    s.add_lstm("l2", 4, 3)
    x = _inputs(4, 3, 0)
    errs["lstm stack"] = K.grad_check(lambda: K.lstm_stack_forward(x, s, ("l1", "l2")).pow(2).sum(), s)

    s = K.ParameterStore(2, torch.float64)
    s.add_gru("g", 3, 4)
    x = _inputs(5, 3, 1)
    errs["gru"] = K.grad_check(lambda: K.gru_forward(x, s, "g").sin().sum(), s)

    s = K.ParameterStore(3, torch.float64)
    K.add_attention(s, "a", 3, 2, 4)
    H, q = _inputs(4, 3, 2), _inputs(1, 2, 3)[0]
    errs["attention"] = K.grad_check(lambda: K.attend(H, q, s, "a")[0].pow(2).sum(), s)

    # Coordinates whose gradient sits below what central differences can
    # resolve at this loss scale are compared absolutely (see grad_check).
    cm = ComprehensionModel(["how", "many", "rivers", "mississippi", "river", "have"],
                            ComprehensionConfig(hidden=3, mlp_hidden=3, attn_dim=2, embed_dim=4), None, torch.float64)
    qm = enclose(tokenize("How many rivers does Mississippi have ?"), 4, 5)
    errs["comprehension"] = K.grad_check(lambda: K.binary_cross_entropy(cm.logit(qm, ("river",)), True),
                                         cm.store, floor=1e-7)

    src = source_tokens("what is the <k0> population <eok> of <k1> cityid <eok> <v0> San Antonio <eov> ?")
    tgt = target_tokens("answer(A,<k0>(B,A),const(B,<k1>(<v0>)))")
    tm = TranslatorModel(src + tgt, tgt, TranslatorConfig(embed_dim=4, enc_hidden=3, dec_hidden=3, attn_dim=2,
                                                          symbol_slots=4), None, torch.float64)
    batch = [(src, tgt, tm.target_mask(src, tgt))]
    errs["translator"] = K.grad_check(lambda: tm.loss(batch), tm.store, floor=1e-4)

    report(5, "gradient checks", max(errs.values()) <= 1e-4,
           ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (limit 1e-4, eps 1e-5, float64)")


# -- 6 ----------------------------------------------------------------------

def test_criterion_06_comprehension_accuracy():
    title = "comprehension accuracy"
    found = {n: dataset_dir(n) for n in ("geoquery", "restaurant")}
    glove = glove_path()
    missing = [f"$SPATIALNLI_DATA/{n}" for n, d in found.items() if d is None] + \
        ([] if glove else ["300-d GloVe vectors"])
    if missing:
        blocked(6, title, " and ".join(missing))
    bars = {"geoquery": 0.95, "restaurant": 0.99}
    datasets = {n: load_dataset(d) for n, d in found.items()}
    E = load_embeddings(glove, vocab=corpus_vocab(*datasets.values()))
    parts, ok = [], True
    for name, ds in datasets.items():
        start = time.time()
        mcfg = mapper_config(Config(), ds.lexicon)
        tr = comprehension_questions(ds.train, ds.db, E, mcfg)
        te = comprehension_questions(ds.test, ds.db, E, mcfg)
        model = train_comprehension(tr, ComprehensionConfig(hidden=200), E)
        _, acc_qu = evaluate_comprehension(model, te, type_inventory(tr + te))
        elapsed = time.time() - start
        ok &= acc_qu >= bars[name] and elapsed <= 1800
        parts.append(f"{name} Acc_qu {acc_qu:.3f} (bar {bars[name]}), {elapsed / 60:.1f} min")
    report(6, title, ok, "; ".join(parts))


# -- 7 ----------------------------------------------------------------------

def test_criterion_07_translator_overfit(sample_vectors):
    root = dataset_dir("geoquery")
    ds = load_dataset(root if root else sample_dir())
    E = None if root else sample_vectors
    pairs = training_pairs(ds.train if root else ds.examples, ds.db, E, mapper_config(Config(), ds.lexicon))[:50]
    start = time.time()
    cfg = TranslatorConfig(embed_dim=64, enc_hidden=128, dec_hidden=128, attn_dim=64, lr=3e-3, epochs=200,
                           batch_size=10, seed=0)
    model = train_translator(pairs, cfg, target_loss=0.01)
    hits = sum(normalize(infer(model, q)) == normalize(l) for q, l in pairs)
    elapsed = time.time() - start
    report(7, "translator overfit", hits / len(pairs) >= 0.95 and elapsed < 1200,
           f"{hits}/{len(pairs)} {ds.name} pairs reproduced (bar 95%), {elapsed:.0f}s (limit 1200s)")


# -- 8 ----------------------------------------------------------------------

def test_criterion_08_full_corpus_accuracy():
    title = "full-corpus accuracy"
    if os.environ.get("SPATIALNLI_LONG") != "1":
        line = f"SKIP criterion  8 {title}: optional long run, set SPATIALNLI_LONG=1"
        print(line)
        ACCEPTANCE_LINES.append(line)
        pytest.skip(line)
    found = {n: dataset_dir(n) for n in ("geoquery", "restaurant")}
    glove = glove_path()
    missing = [f"$SPATIALNLI_DATA/{n}" for n, d in found.items() if d is None] + \
        ([] if glove else ["300-d GloVe vectors"])
    if missing:
        blocked(8, title, " and ".join(missing))
    bars = {"geoquery": 0.75, "restaurant": 0.90}
    parts, ok = [], True
    for name, root in found.items():
        ds = load_dataset(root)
        E = load_embeddings(glove, vocab=corpus_vocab(ds))
        start = time.time()
        report_ = run_ablation([], ds, Config(), E)
        hours = (time.time() - start) / 3600
        ok &= report_["denotation_accuracy"] >= bars[name] and hours <= 4
        parts.append(f"{name} {report_['denotation_accuracy']:.3f} (bar {bars[name]}), {hours:.1f} h")
    report(8, title, ok, "; ".join(parts))


# -- 9 ----------------------------------------------------------------------

def test_criterion_09_ablation_direction():
    title = "ablation direction"
    root = dataset_dir("restaurant")
    if root is None:
        blocked(9, title, "$SPATIALNLI_DATA/restaurant")
    ds = load_dataset(root)
    glove = glove_path()
    E = load_embeddings(glove, vocab=corpus_vocab(ds)) if glove else None
    acc = {tuple(f): run_ablation(f, ds, Config(), E)["denotation_accuracy"]
           for f in ([], ["no-inject"], ["no-typefeed"])}
    drop_inject = acc[()] - acc[("no-inject",)]
    drop_feed = acc[()] - acc[("no-typefeed",)]
    report(9, title, drop_inject >= 0.20 and drop_feed >= 0.10,
           f"full {acc[()]:.3f}; no-inject drop {drop_inject:.3f} (bar 0.20); "
           f"no-typefeed drop {drop_feed:.3f} (bar 0.10)")


# -- 10 ---------------------------------------------------------------------

def test_criterion_10_augmentation_fidelity(sample_examples):
    root = dataset_dir("geoquery")
    db = load_dataset(root).db if root else load_database(sample_dir() / "schema.txt")
    examples = load_dataset(root).train if root else sample_examples
    florida = Example("What is the highest point in Florida ?",
                      "answer(A,highest(A,(place(A),loc(A,B),const(B,stateid(Florida)))))")
    density = Example("what state has the smallest population density ?",
                      "answer(A,smallest(B,(state(A),density(A,B))))")
    largest = Example("what state has the largest population ?", "answer(A,largest(B,(state(A),population(A,B))))")
    no_rivers = Example("what state has no rivers ?", "answer(A,(state(A),not((river(B),loc(B,A)))))")
    nested = nested_replace(florida, density, db)
    conj = conjunction_combine(largest, no_rivers, db)
    checks = [
        pp_shuffle("Which states does the Mississippi river run through ?")
        == "Through which states does the Mississippi river run ?",
        pp_shuffle("In what state is Mount Mckinley ?") == "Mount Mckinley is in what state ?",
        any(e.question == "What is the highest point in Rhode Island ?"
            and "stateid(Rhode Island)" in e.logic_form for e in entity_replace(florida, db)),
        nested is not None
        and nested.question == "What is the highest point in state that has the smallest population density ?",
        conj is not None and conj.question == "what state has the largest population and has no rivers ?",
    ]
    composed = consistent = 0
    pool = list(examples)[:120]
    for a in [florida, largest] + pool:
        for b in [density, no_rivers] + pool:
            if a is b:
                continue
            n = nested_replace(a, b, db)
            if n is not None:
                composed += 1
                consistent += evaluate(n.logic_form, db) == evaluate(_manual_nested(a, b, db), db)
            c = conjunction_combine(a, b, db)
            if c is not None:
                composed += 1
                consistent += evaluate(c.logic_form, db) == evaluate(a.logic_form, db) & evaluate(b.logic_form, db)
    ok = all(checks) and composed > 0 and consistent == composed
    report(10, "augmentation fidelity", ok,
           f"{sum(checks)}/5 example outputs exact; {consistent}/{composed} Type 2/3 compositions "
           f"denotation-consistent on the {'geoquery' if root else 'bundled sample'} database")


def _manual_nested(outer, inner, db):
    """Outer form with the first constant of inner's answer table replaced by inner's single answer."""
    (ent,) = evaluate(inner.logic_form, db)
    table = answer_table(inner.logic_form, db)
    ctor, name = next((c, v) for c, v in re.findall(r"(\w+)\(([^()]*)\)", outer.logic_form)
                      if db.ctor_to_table.get(c) == table)
    return outer.logic_form.replace(f"{ctor}({name})", f"{ctor}({db.name_of(ent)})", 1)


# -- 11 ---------------------------------------------------------------------

def test_criterion_11_semantic_operating_point():
    title = "semantic distance operating point"
    glove = glove_path()
    if glove is None:
        blocked(11, title, "300-d GloVe vectors ($SPATIALNLI_GLOVE)")
    E = load_embeddings(glove, vocab=["place", "spot"])
    d = semantic_distance("place", "spot", E)
    report(11, title, E.dim == 300 and d < 0.368, f"distance(place, spot) = {d:.4f} (bar < 0.368), dim {E.dim}")
