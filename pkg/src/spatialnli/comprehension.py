"""Context classifier deciding which table an ambiguous value refers to.

A question with the phrase of interest wrapped in ``<@>`` markers and a short
type phrase ("river") are encoded by separate two-layer LSTMs. An attentive
LSTM walks the type phrase, attending over the question states at each step,
and its final state goes through an MLP to a single logit.
"""

from __future__ import annotations

import csv
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import kernel as K
from .embeddings import EmbeddingTable
from .logic_form import Constant, Predicate, parse, walk

__all__ = [
    "MARKER",
    "SpanNotFound",
    "ComprehensionRecord",
    "ComprehensionQuestion",
    "ComprehensionConfig",
    "ComprehensionModel",
    "enclose",
    "type_phrase",
    "build_records",
    "gold_types_from_form",
    "predict",
    "resolve_type",
    "train_comprehension",
    "evaluate_comprehension",
    "dump_records",
]

MARKER = "<@>"
UNK = "<unk>"


class SpanNotFound(ValueError):
    pass


@dataclass(frozen=True)
class ComprehensionRecord:
    question: tuple          # tokens with exactly one MARKER-enclosed span
    type_phrase: tuple
    label: bool | None
    table: str = ""
    group: tuple = ()        # (question id, span start, span end)


@dataclass
class ComprehensionQuestion:
    """A question and its ambiguous values: ``pois`` holds (start, end, types, gold)."""
    tokens: list
    pois: list = field(default_factory=list)


def enclose(tokens: Sequence[str], start: int, end: int) -> tuple:
    if not (0 <= start < end <= len(tokens)):
        raise SpanNotFound(f"span [{start},{end}) outside a {len(tokens)}-token question")
    return tuple(tokens[:start]) + (MARKER,) + tuple(tokens[start:end]) + (MARKER,) + tuple(tokens[end:])


def type_phrase(table: str) -> tuple:
    return tuple(table.lower().replace("_", " ").split())


def build_records(q: Sequence[str], V, gold: dict | None = None, inventory: Sequence[str] | None = None,
                  replicate: bool = True, qid=0) -> list[ComprehensionRecord]:
    """Records for every value in ``V`` against every candidate type.

    Candidates are ``inventory`` when given (the global set of tables that
    ever hold an ambiguous value), else the value's own tables. ``gold`` maps
    ``(start, end)`` to the gold table; without it labels are None. With
    ``replicate``, positives are repeated round(#neg / #pos) times.
    """
    out: list[ComprehensionRecord] = []
    for v in V:
        start, end = v.span if hasattr(v, "span") else (v[0], v[1])
        text = getattr(v, "text", None)
        if text is not None and " ".join(q[start:end]) != text:
            raise SpanNotFound(f"{text!r} is not at [{start},{end}) of {' '.join(q)!r}")
        types = list(getattr(v, "types", None) or v[2])
        cands = list(inventory) if inventory else types
        qq = enclose(q, start, end)
        gold_t = None if gold is None else gold.get((start, end))
        group = []
        for t in cands:
            label = None if gold is None else (t == gold_t)
            group.append(ComprehensionRecord(qq, type_phrase(t), label, t, (qid, start, end)))
        if replicate and gold is not None:
            pos = [r for r in group if r.label]
            neg = [r for r in group if r.label is False]
            if pos and neg:
                times = max(1, int(round(len(neg) / len(pos))))
                group = neg + pos * times
        out.extend(group)
    return out


def gold_types_from_form(lf, V, db) -> dict:
    """Map each value span to the table named by the constructor wrapping it in ``lf``."""
    term = parse(lf) if isinstance(lf, str) else lf
    by_text: dict[str, set] = {}
    for node in walk(term):
        if (isinstance(node, Predicate) and node.name in db.ctor_to_table
                and len(node.args) == 1 and isinstance(node.args[0], Constant)):
            by_text.setdefault(node.args[0].text.lower(), set()).add(db.ctor_to_table[node.name])
    out = {}
    for v in V:
        tables = by_text.get(v.text.lower()) or by_text.get(db.display(v.text).lower())
        if tables:
            hits = [t for t in v.types if t in tables]
            if len(hits) == 1:
                out[v.span] = hits[0]
    return out


@dataclass
class ComprehensionConfig:
    hidden: int = 200
    mlp_hidden: int = 100
    attn_dim: int = 100
    embed_dim: int = 300
    bidirectional: bool = True
    ratio_attention: bool = False
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    clip: float = 5.0
    seed: int = 0
    replicate: bool = True


class ComprehensionModel:
    def __init__(self, vocab: Sequence[str], cfg: ComprehensionConfig | None = None,
                 E: EmbeddingTable | None = None, dtype=torch.float32):
        self.cfg = cfg or ComprehensionConfig()
        if E is not None:
            self.cfg.embed_dim = E.dim
        self.E = E
        self.vocab = [UNK, MARKER] + sorted(set(vocab) - {UNK, MARKER})
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.type_priority: list[str] = []
        c = self.cfg
        s = self.store = K.ParameterStore(c.seed, dtype)
        s.add("emb", (len(self.vocab), c.embed_dim), scale=0.05)
        if E is not None:
            with torch.no_grad():
                s["emb"].copy_(torch.as_tensor(np.stack([E.lookup(w) for w in self.vocab]), dtype=dtype))
        s.add_lstm("q1", c.embed_dim, c.hidden)
        s.add_lstm("q2", c.hidden, c.hidden)
        s.add_lstm("t1", c.embed_dim, c.hidden)
        s.add_lstm("t2", c.hidden, c.hidden)
        for d in ("fw", "bw") if c.bidirectional else ("fw",):
            K.add_attention(s, f"att_{d}", c.hidden, 2 * c.hidden, c.attn_dim)
            s.add_lstm(f"dec_{d}", 2 * c.hidden, c.hidden)
        width = c.hidden * (2 if c.bidirectional else 1)
        s.add_linear("mlp1", width, c.mlp_hidden)
        s.add_linear("mlp2", c.mlp_hidden, 1)

    # -- forward --------------------------------------------------------
    def embed(self, tokens: Sequence[str]) -> torch.Tensor:
        emb = self.store["emb"]
        rows = []
        for w in tokens:
            key = w if w == MARKER else w.lower()
            i = self.index.get(key)
            if i is not None:
                rows.append(emb[i])
            elif self.E is not None:
                rows.append(torch.as_tensor(self.E.lookup(key), dtype=emb.dtype))
            else:
                rows.append(emb[0])
        return torch.stack(rows)

    def _attentive(self, Hq, Ht, direction: str):
        s = self.store
        Wx, Wh, b = s[f"dec_{direction}.Wx"], s[f"dec_{direction}.Wh"], s[f"dec_{direction}.b"]
        hidden = Wh.shape[1]
        d = Hq.new_zeros(hidden)
        c = Hq.new_zeros(hidden)
        steps = range(Ht.shape[0] - 1, -1, -1) if direction == "bw" else range(Ht.shape[0])
        for i in steps:
            beta, _ = K.attend(Hq, torch.cat([Ht[i], d]), s, f"att_{direction}",
                               ratio=self.cfg.ratio_attention)
            d, c = K.lstm_cell(Wx @ torch.cat([Ht[i], beta]) + b, d, c, Wh)
        return d

    def logit(self, question: Sequence[str], tphrase: Sequence[str]) -> torch.Tensor:
        s = self.store
        Hq = K.lstm_stack_forward(self.embed(question), s, ("q1", "q2"))
        Ht = K.lstm_stack_forward(self.embed(tphrase), s, ("t1", "t2"))
        parts = [self._attentive(Hq, Ht, "fw")]
        if self.cfg.bidirectional:
            if Ht.shape[0] > 1:
                parts.append(self._attentive(Hq, Ht, "bw"))
            else:
                parts.append(Hq.new_zeros(self.cfg.hidden))
        out = K.mlp_forward(torch.cat(parts), s, ("mlp1", "mlp2"))
        return out[0]

    def prob(self, question, tphrase) -> float:
        with torch.no_grad():
            return float(torch.sigmoid(self.logit(question, tphrase)))

    def loss(self, batch: Sequence[ComprehensionRecord]) -> torch.Tensor:
        total = sum(K.binary_cross_entropy(self.logit(r.question, r.type_phrase), bool(r.label))
                    for r in batch)
        return total / len(batch)

    # -- persistence ----------------------------------------------------
    def save(self, path):
        from dataclasses import asdict
        K.save_checkpoint(path, self.store, asdict(self.cfg),
                          {"kind": "comprehension", "vocab": self.vocab,
                           "type_priority": self.type_priority})

    @classmethod
    def load(cls, path, E: EmbeddingTable | None = None) -> "ComprehensionModel":
        meta, arrays = K.load_checkpoint(path)
        if meta["extra"].get("kind") != "comprehension":
            raise K.CheckpointError(f"{path} is not a comprehension checkpoint")
        cfg = ComprehensionConfig(**meta["config"])
        model = cls(meta["extra"]["vocab"], cfg, None)
        model.E = E
        model.store.load_state(arrays)
        model.type_priority = list(meta["extra"].get("type_priority", []))
        return model


def predict(model: ComprehensionModel, q: Sequence[str], span: tuple, table: str) -> float:
    return model.prob(enclose(q, *span), type_phrase(table))


def resolve_type(model, q: Sequence[str], span: tuple, types: Sequence[str],
                 priority: Sequence[str] | None = None, score=None) -> str:
    """Pick the candidate with the highest predicted probability.

    A single candidate is returned without consulting the model. Ties go to
    the type seen most often in training (``priority``), then alphabetical.
    """
    types = list(types)
    if not types:
        raise ValueError("no candidate types")
    if len(types) == 1:
        return types[0]
    score = score or (lambda t: predict(model, q, span, t))
    priority = list(priority if priority is not None else getattr(model, "type_priority", []))
    rank = {t: i for i, t in enumerate(priority)}
    scored = [(score(t), t) for t in types]
    best = max(s for s, _ in scored)
    tied = [t for s, t in scored if s == best]
    return min(tied, key=lambda t: (rank.get(t, len(rank)), t))


def _records_for(questions: Sequence[ComprehensionQuestion], inventory, replicate):
    recs = []
    for qid, cq in enumerate(questions):
        V = [(s, e, types) for s, e, types, _ in cq.pois]
        gold = {(s, e): g for s, e, _, g in cq.pois}
        recs.extend(build_records(cq.tokens, V, gold, inventory, replicate, qid))
    return recs


def type_inventory(questions: Iterable[ComprehensionQuestion]) -> list[str]:
    return sorted({t for cq in questions for _, _, types, _ in cq.pois for t in types})


def train_comprehension(questions: Sequence[ComprehensionQuestion], cfg: ComprehensionConfig | None = None,
                        E: EmbeddingTable | None = None, log=None, dtype=torch.float32) -> ComprehensionModel:
    cfg = cfg or ComprehensionConfig()
    inventory = type_inventory(questions)
    records = _records_for(questions, inventory, cfg.replicate)
    if not records:
        raise ValueError("no comprehension records to train on")
    vocab = {w.lower() for r in records for w in r.question + r.type_phrase if w != MARKER}
    model = ComprehensionModel(sorted(vocab), cfg, E, dtype)
    freq = Counter(g for cq in questions for *_, g in cq.pois)
    model.type_priority = [t for t, _ in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))]
    opt = K.make_optimizer(model.store, cfg.lr)
    rng = random.Random(cfg.seed)
    order = list(range(len(records)))
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch = [records[j] for j in order[i:i + cfg.batch_size]]
            total += K.train_step(model, batch, opt, cfg.clip) * len(batch)
        if log:
            log(f"comprehension epoch {epoch + 1}: loss {total / len(records):.4f}")
    return model


def evaluate_comprehension(model, questions: Sequence[ComprehensionQuestion], inventory=None):
    """Return ``(acc_records, acc_questions)``.

    Record accuracy thresholds each record's probability at 0.5 over the full
    type inventory; question accuracy requires every value in the question to
    be resolved to its gold table by :func:`resolve_type`.
    """
    inventory = inventory or type_inventory(questions)
    records = _records_for(questions, inventory, replicate=False)
    if not records:
        return 0.0, 0.0
    cache: dict = {}

    def prob(r: ComprehensionRecord):
        key = (r.question, r.type_phrase)
        if key not in cache:
            cache[key] = model.prob(r.question, r.type_phrase)
        return cache[key]

    rec_ok = sum((prob(r) > 0.5) == bool(r.label) for r in records)
    q_ok = 0
    for cq in questions:
        good = True
        for s, e, types, gold in cq.pois:
            qq = enclose(cq.tokens, s, e)
            pick = resolve_type(model, cq.tokens, (s, e), types,
                                score=lambda t, qq=qq: prob(ComprehensionRecord(qq, type_phrase(t), None)))
            good &= pick == gold
        q_ok += good
    return rec_ok / len(records), q_ok / len(questions) if questions else 0.0


def dump_records(records: Iterable[ComprehensionRecord], path):
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in records:
            w.writerow([" ".join(r.question), " ".join(r.type_phrase),
                        "" if r.label is None else str(bool(r.label))])
