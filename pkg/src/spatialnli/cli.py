"""Command-line entry point: ``spatialnli <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import Config, load_config, full_scale
from .data import load_corpus, sample_dir, save_corpus
from .embeddings import load_embeddings

log = logging.getLogger("spatialnli")


def _dataset_path(name_or_path: str) -> Path:
    if name_or_path == "sample":
        return sample_dir()
    p = Path(name_or_path)
    if p.exists():
        return p
    root = os.environ.get("SPATIALNLI_DATA")
    if root and (Path(root) / name_or_path).exists():
        return Path(root) / name_or_path
    raise SystemExit(f"dataset {name_or_path!r} not found (give a directory, 'sample', "
                     f"or a name under $SPATIALNLI_DATA)")


def _config(args) -> Config:
    if getattr(args, "full_scale", False):
        cfg = full_scale()
    else:
        cfg = load_config(getattr(args, "config", None))
    m = cfg.mapper
    for attr, key in (("tau_sem", "tau_sem"), ("tau_ed", "tau_ed"), ("max_ngram", "max_ngram"),
                      ("stopwords", "stopwords"), ("lexicon", "lexicon")):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(m, key, v)
    for attr in ("beam_width", "max_len"):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg.translator, attr, v)
    if getattr(args, "ratio_attention", False):
        cfg.comprehension.ratio_attention = True
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        cfg.override(key, yaml.safe_load(raw))
    return cfg


def _embeddings(args, ds_root: Path | None = None):
    path = getattr(args, "embeddings", None)
    if path is None and ds_root is not None and (ds_root / "vectors.txt").exists():
        path = ds_root / "vectors.txt"
    if path is None:
        return None
    return load_embeddings(path)


def _emit(record: dict, out):
    out.write(json.dumps(record, ensure_ascii=False, default=str) + "\n")


def _add_common(p, checkpoints=False):
    p.add_argument("--dataset", default="sample", help="dataset directory, 'sample', or name under $SPATIALNLI_DATA")
    p.add_argument("--config", help="YAML/JSON config document")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--embeddings", help="word vectors in GloVe text format")
    p.add_argument("--tau-sem", dest="tau_sem", type=float)
    p.add_argument("--tau-ed", dest="tau_ed", type=int)
    p.add_argument("--max-ngram", dest="max_ngram", type=int)
    p.add_argument("--stopwords")
    p.add_argument("--lexicon")
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--seed", type=int, default=0)
    if checkpoints:
        p.add_argument("--checkpoints", required=True, help="directory written by 'train'")


def cmd_train(args):
    from .pipeline import load_dataset, train_all
    cfg = _config(args)
    roots = [_dataset_path(args.dataset)] + [_dataset_path(d) for d in args.joint_with or []]
    datasets = [load_dataset(r, cfg.pipeline.test_fraction, args.seed) for r in roots]
    E = _embeddings(args, roots[0])
    flags = [f for f in (args.ablate or "").split(",") if f]
    train_all(cfg, datasets, E, joint=bool(args.joint_with), flags=flags, out_dir=args.out)
    for ds in datasets:
        print(f"checkpoints written to {Path(args.out) / ds.name}")


def cmd_infer(args):
    from .pipeline import StageError, load_dataset, load_resources, run_pipeline
    ds = load_dataset(_dataset_path(args.dataset), seed=args.seed)
    res = load_resources(args.checkpoints, ds, _embeddings(args, ds.root), seed=args.seed)
    questions = args.question or [line.strip() for line in sys.stdin if line.strip()]
    status = 0
    for q in questions:
        try:
            l, trace = run_pipeline(q, res)
            _emit(trace.as_dict() if args.trace else {"question": q, "l": l}, sys.stdout)
        except StageError as err:
            rec = err.trace.as_dict() if args.trace and err.trace is not None else {"question": q}
            _emit({**rec, "error": str(err), "stage": err.stage}, sys.stdout)
            status = 1
    return status


def cmd_evaluate(args):
    from .pipeline import evaluate_corpus, load_dataset, load_resources
    ds = load_dataset(_dataset_path(args.dataset), seed=args.seed)
    res = load_resources(args.checkpoints, ds, _embeddings(args, ds.root), seed=args.seed)
    split = {"test": ds.test, "train": ds.train, "all": ds.examples}[args.split]
    report = evaluate_corpus(split, res, args.mode, oracle=args.oracle, workers=args.workers)
    _report(report, args.records)


def _report(report: dict, records_path):
    if records_path:
        with open(records_path, "w", encoding="utf-8") as fh:
            for rec in report["records"]:
                _emit(rec, fh)
    summary = {k: v for k, v in report.items() if k != "records"}
    _emit(summary, sys.stdout)
    print(f"accuracy ({report['mode']}): {report['accuracy']:.3f} on {report['n']} questions; "
          f"denotation {report['denotation_accuracy']:.3f}, exact {report['exact_accuracy']:.3f}; "
          f"failures by stage: {report['breakdown']}", file=sys.stderr)


def cmd_ablate(args):
    from .pipeline import load_dataset, run_ablation
    cfg = _config(args)
    ds = load_dataset(_dataset_path(args.dataset), cfg.pipeline.test_fraction, args.seed)
    flags = [f for f in args.flags.split(",") if f]
    report = run_ablation(flags, ds, cfg, _embeddings(args, ds.root), args.mode, args.seed)
    _report(report, args.records)


def cmd_augment(args):
    from .augmentation import augment
    from .geo_store import load_database
    root = _dataset_path(args.dataset)
    db = load_database(root / "schema.txt")
    src = load_corpus(args.inp) if args.inp else load_corpus(root / "questions.tsv")
    kinds = [k for k in args.types.split(",") if k]
    out = augment(src, db, kinds, args.max_per_source)
    if args.out:
        save_corpus(out, args.out)
    else:
        for ex in out:
            print(f"{ex.question}\t{ex.logic_form}")
    print(f"{len(out)} augmented pairs from {len(src)} sources", file=sys.stderr)


def cmd_repl(args):
    from .pipeline import StageError, load_dataset, load_resources, run_pipeline
    ds = load_dataset(_dataset_path(args.dataset), seed=args.seed)
    res = load_resources(args.checkpoints, ds, _embeddings(args, ds.root), seed=args.seed)
    from .geo_store import evaluate
    print("type a question; empty line or Ctrl-D quits", file=sys.stderr)
    for line in sys.stdin:
        q = line.strip()
        if not q:
            break
        try:
            l, trace = run_pipeline(q, res)
            t = trace.as_dict()
            print(f"P    : {[(p['text'], p['entity'], p['method']) for p in t['P']]}")
            print(f"V    : {[(v['text'], v['types'], v['resolved_type']) for v in t['V']]}")
            print(f"q'   : {t['q_prime']}")
            print(f"s2p  : {t['s2p']}")
            print(f"l'   : {t['l_prime']}")
            print(f"l    : {l}")
            try:
                print(f"answer: {sorted(map(str, evaluate(l, ds.db)))}")
            except Exception as exc:
                print(f"answer: <not evaluable: {exc}>")
        except StageError as err:
            print(f"error: {err}")


def cmd_comprehend(args):
    from .comprehension import (ComprehensionModel, build_records, dump_records, evaluate_comprehension,
                                train_comprehension, type_inventory)
    from .pipeline import comprehension_questions, load_dataset, mapper_config
    cfg = _config(args)
    ds = load_dataset(_dataset_path(args.dataset), cfg.pipeline.test_fraction, args.seed)
    E = _embeddings(args, ds.root)
    mcfg = mapper_config(cfg, ds.lexicon)
    train_q = comprehension_questions(ds.train, ds.db, E, mcfg)
    test_q = comprehension_questions(ds.test, ds.db, E, mcfg)
    if args.dump:
        inv = type_inventory(train_q)
        recs = [r for i, cq in enumerate(train_q)
                for r in build_records(cq.tokens, [(s, e, t) for s, e, t, _ in cq.pois],
                                       {(s, e): g for s, e, _, g in cq.pois}, inv, True, i)]
        dump_records(recs, args.dump)
    if args.checkpoint and Path(args.checkpoint).exists() and not args.retrain:
        model = ComprehensionModel.load(args.checkpoint, E)
    else:
        model = train_comprehension(train_q, cfg.comprehension, E, log=log.info)
        if args.checkpoint:
            model.save(args.checkpoint)
    acc_rcd, acc_qu = evaluate_comprehension(model, test_q, type_inventory(train_q + test_q))
    _emit({"acc_rcd": acc_rcd, "acc_qu": acc_qu, "n_questions": len(test_q)}, sys.stdout)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spatialnli", description="Spatial questions to executable logic forms.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train comprehension and translator models")
    _add_common(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--joint-with", action="append", help="pool another dataset into one shared translator")
    p.add_argument("--ablate", help="comma-separated components to remove")
    p.add_argument("--full-scale", action="store_true", help="use the full-size model dimensions")
    p.add_argument("--ratio-attention", action="store_true",
                   help="normalise comprehension attention as e/sum(e) instead of softmax")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="translate questions (arguments or stdin)")
    _add_common(p, checkpoints=True)
    p.add_argument("question", nargs="*")
    p.add_argument("--trace", action="store_true", help="print the full trace record")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("evaluate", help="score a split")
    _add_common(p, checkpoints=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--mode", choices=("denotation", "exact"), default="denotation")
    p.add_argument("--oracle", action="store_true", help="feed gold symbolic forms to recovery")
    p.add_argument("--workers", type=int, default=1, help="score questions on this many threads")
    p.add_argument("--records", help="write per-question records (JSON lines) here")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="retrain without some components and score the test split")
    _add_common(p)
    p.add_argument("--flags", required=True,
                   help="comma-separated subset of no-copy,no-comprehension,no-augment,no-typefeed,no-inject")
    p.add_argument("--mode", choices=("denotation", "exact"), default="denotation")
    p.add_argument("--records")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("augment", help="write augmented training pairs")
    p.add_argument("--dataset", default="sample")
    p.add_argument("--types", default="pp,entity,nested,conj")
    p.add_argument("--in", dest="inp", help="question<TAB>form file (default: the dataset's questions)")
    p.add_argument("--out")
    p.add_argument("--max-per-source", dest="max_per_source", type=int)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("repl", help="interactive question loop printing full traces")
    _add_common(p, checkpoints=True)
    p.set_defaults(fn=cmd_repl)

    p = sub.add_parser("comprehend", help="train/evaluate the comprehension model alone")
    _add_common(p)
    p.add_argument("--checkpoint", help="comprehension checkpoint to load or write")
    p.add_argument("--retrain", action="store_true")
    p.add_argument("--dump", help="write training records as TSV (question, type, label)")
    p.add_argument("--ratio-attention", action="store_true")
    p.set_defaults(fn=cmd_comprehend)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.fn(args) or 0


if __name__ == "__main__":
    sys.exit(main())
