"""GRU encoder-decoder from injected questions to symbolic logic forms.

Copying: the decoder's raw attention scores over source positions are
appended to the generation logits and one softmax is taken over the lot, so
``p(y) = sum of generate(y) and every copy(j) whose source token is y``.
Decoding is beam search constrained to well-bracketed output.
"""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import kernel as K
from .embeddings import EmbeddingTable
from .logic_form import SYMBOL_RE, detokenize_form, tokenize_form

__all__ = [
    "BOS",
    "EOS",
    "UNK",
    "VocabularyOverflow",
    "NoCompleteHypothesis",
    "TranslatorConfig",
    "FULL_SCALE",
    "TranslatorModel",
    "Hypothesis",
    "beam_search",
    "bracket_constraint",
    "source_tokens",
    "target_tokens",
    "train_translator",
    "infer",
    "score_sequence",
]

BOS, EOS, UNK = "<s>", "</s>", "<unk>"


class VocabularyOverflow(ValueError):
    pass


class NoCompleteHypothesis(RuntimeError):
    pass


@dataclass
class TranslatorConfig:
    embed_dim: int = 100
    enc_hidden: int = 128
    dec_hidden: int = 256
    attn_dim: int = 128
    symbol_slots: int = 32
    copy: bool = True
    beam_width: int = 5
    max_len: int = 120
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    clip: float = 5.0
    seed: int = 0


FULL_SCALE = dict(embed_dim=300, enc_hidden=800, dec_hidden=1600, attn_dim=800)


def _symbol(tok: str):
    m = SYMBOL_RE.match(tok)
    return (m.group(1), int(m.group(2))) if m else None


def source_tokens(q) -> list[str]:
    """Injected question -> encoder tokens (words lowercased, symbols kept)."""
    toks = q.tokens if hasattr(q, "tokens") else (q.split() if isinstance(q, str) else list(q))
    return [t if _symbol(t) else t.lower() for t in toks]


def target_tokens(l_sym) -> list[str]:
    return tokenize_form(l_sym, lowercase=True)


class TranslatorModel:
    def __init__(self, words: Sequence[str], out_vocab: Sequence[str], cfg: TranslatorConfig | None = None,
                 E: EmbeddingTable | None = None, dtype=torch.float32):
        self.cfg = cfg = cfg or TranslatorConfig()
        if E is not None:
            cfg.embed_dim = E.dim + (E.dim % 2)
        if cfg.embed_dim % 2:
            raise ValueError("embed_dim must be even (class + index halves)")
        self.E = E
        self.words = [UNK, BOS, EOS] + sorted(set(words) - {UNK, BOS, EOS} - {t for t in words if _symbol(t)})
        self.word_index = {w: i for i, w in enumerate(self.words)}
        syms = [f"<{c}{i}>" for c in "kv" for i in range(cfg.symbol_slots)]
        base = [t for t in out_vocab if not _symbol(t) and t not in (EOS, BOS, UNK)]
        self.out_vocab = [EOS] + sorted(set(base)) + syms
        self.out_index = {t: i for i, t in enumerate(self.out_vocab)}

        s = self.store = K.ParameterStore(cfg.seed, dtype)
        s.add("emb", (len(self.words), cfg.embed_dim), scale=0.05)
        if E is not None:
            init = np.zeros((len(self.words), cfg.embed_dim))
            for i, w in enumerate(self.words):
                init[i, :E.dim] = E.lookup(w)
            with torch.no_grad():
                s["emb"].copy_(torch.as_tensor(init, dtype=dtype))
        half = cfg.embed_dim // 2
        s.add("sym_class", (2, half), scale=0.05)
        s.add("sym_index", (cfg.symbol_slots, half), scale=0.05)
        s.add_gru("enc", cfg.embed_dim, cfg.enc_hidden)
        s.add_linear("init", cfg.enc_hidden, cfg.dec_hidden)
        s.add_gru("dec", cfg.embed_dim + cfg.enc_hidden, cfg.dec_hidden)
        K.add_attention(s, "att", cfg.enc_hidden, cfg.dec_hidden, cfg.attn_dim)
        s.add_linear("out", cfg.dec_hidden + cfg.enc_hidden, len(self.out_vocab))

    # -- embedding --------------------------------------------------------
    def embed_token(self, tok: str) -> torch.Tensor:
        sym = _symbol(tok)
        s = self.store
        if sym is not None:
            cls, idx = sym
            if idx >= self.cfg.symbol_slots:
                raise VocabularyOverflow(f"symbol {tok} exceeds {self.cfg.symbol_slots} index slots")
            return torch.cat([s["sym_class"][0 if cls == "k" else 1], s["sym_index"][idx]])
        i = self.word_index.get(tok)
        if i is not None:
            return s["emb"][i]
        if self.E is not None:
            v = np.zeros(self.cfg.embed_dim)
            v[:self.E.dim] = self.E.lookup(tok)
            return torch.as_tensor(v, dtype=s.dtype)
        return s["emb"][0]

    def embed(self, toks: Sequence[str]) -> torch.Tensor:
        return torch.stack([self.embed_token(t) for t in toks])

    # -- network pieces -------------------------------------------------
    def encode(self, src: Sequence[str]):
        if not src:
            raise ValueError("empty source sequence")
        Hs = K.gru_forward(self.embed(src), self.store, "enc")
        s0 = torch.tanh(K.linear(Hs[-1], self.store, "init"))
        return Hs, s0, Hs.new_zeros(self.cfg.enc_hidden)

    def _step(self, Hs, keys, state, ctx, prev_tok: str):
        s = self.store
        x = torch.cat([self.embed_token(prev_tok), ctx])
        state = K.gru_cell(s["dec.Wx"] @ x + s["dec.bx"], state, s["dec.Wh"], s["dec.bh"])
        scores = torch.tanh(keys + s["att.Wq"] @ state) @ s["att.v"]
        ctx = torch.softmax(scores, 0) @ Hs
        gen = K.linear(torch.cat([state, ctx]), s, "out")
        logits = torch.cat([gen, scores]) if self.cfg.copy else gen
        return state, ctx, logits

    def _keys(self, Hs):
        return Hs @ self.store["att.Wk"].T

    def target_mask(self, src: Sequence[str], tgt: Sequence[str]) -> torch.Tensor:
        """(T+1, |out| + |src|) boolean matrix of the output slots that emit each target."""
        n_out = len(self.out_vocab)
        width = n_out + (len(src) if self.cfg.copy else 0)
        rows = []
        for tok in list(tgt) + [EOS]:
            row = torch.zeros(width, dtype=torch.bool)
            gi = self.out_index.get(tok)
            if gi is not None:
                row[gi] = True
            if self.cfg.copy and tok != EOS:
                for j, st in enumerate(src):
                    if st == tok:
                        row[n_out + j] = True
            if not row.any():
                raise VocabularyOverflow(f"target token {tok!r} can be neither generated nor copied")
            rows.append(row)
        return torch.stack(rows)

    def sequence_logprob(self, src: Sequence[str], tgt: Sequence[str], mask=None) -> torch.Tensor:
        mask = self.target_mask(src, tgt) if mask is None else mask
        Hs, state, ctx = self.encode(src)
        keys = self._keys(Hs)
        prev = BOS
        logps = []
        for t, tok in enumerate(list(tgt) + [EOS]):
            state, ctx, logits = self._step(Hs, keys, state, ctx, prev)
            lp = torch.log_softmax(logits, 0)
            logps.append(torch.logsumexp(lp.masked_fill(~mask[t], float("-inf")), 0))
            prev = tok
        return torch.stack(logps).sum()

    def loss(self, batch) -> torch.Tensor:
        """Mean negative log-likelihood of ``(src, tgt, mask)`` triples, computed padded."""
        s = self.store
        B = len(batch)
        n_out = len(self.out_vocab)
        src_len = [len(src) for src, _, _ in batch]
        N = max(src_len)
        T = max(len(tgt) + 1 for _, tgt, _ in batch)
        pad = lambda rows, n: torch.nn.functional.pad(rows, (0, 0, 0, n - rows.shape[0]))
        X = torch.stack([pad(self.embed(src), N) for src, _, _ in batch])
        src_mask = torch.arange(N)[None, :] < torch.tensor(src_len)[:, None]

        Wx, bx = s["enc.Wx"], s["enc.bx"]
        h = X.new_zeros(B, self.cfg.enc_hidden)
        states = []
        for j in range(N):
            nh = K.gru_cell(X[:, j] @ Wx.T + bx, h, s["enc.Wh"], s["enc.bh"])
            h = torch.where(src_mask[:, j:j + 1], nh, h)
            states.append(h)
        Hs = torch.stack(states, 1)
        state = torch.tanh(K.linear(h, s, "init"))
        ctx = X.new_zeros(B, self.cfg.enc_hidden)
        keys = Hs @ s["att.Wk"].T

        prev = torch.stack([pad(self.embed([BOS] + list(tgt)), T) for _, tgt, _ in batch])
        width = n_out + (N if self.cfg.copy else 0)
        gold = torch.zeros(B, T, width, dtype=torch.bool)
        for b, (src, tgt, mask) in enumerate(batch):
            gold[b, :mask.shape[0], :n_out] = mask[:, :n_out]
            if self.cfg.copy:
                gold[b, :mask.shape[0], n_out:n_out + len(src)] = mask[:, n_out:]
        steps = torch.arange(T)[None, :] < torch.tensor([len(t) + 1 for _, t, _ in batch])[:, None]

        total = X.new_zeros(B)
        for t in range(T):
            x = torch.cat([prev[:, t], ctx], 1)
            state = K.gru_cell(x @ s["dec.Wx"].T + s["dec.bx"], state, s["dec.Wh"], s["dec.bh"])
            scores = torch.tanh(keys + (state @ s["att.Wq"].T)[:, None, :]) @ s["att.v"]
            scores = scores.masked_fill(~src_mask, float("-inf"))
            ctx = torch.bmm(torch.softmax(scores, 1)[:, None, :], Hs)[:, 0]
            gen = K.linear(torch.cat([state, ctx], 1), s, "out")
            logits = torch.cat([gen, scores], 1) if self.cfg.copy else gen
            lp = torch.log_softmax(logits, 1)
            step_lp = torch.logsumexp(lp.masked_fill(~gold[:, t], float("-inf")), 1)
            total = total + torch.where(steps[:, t], step_lp, torch.zeros_like(step_lp))
        return -total.mean()

    # -- decoding -------------------------------------------------------
    def step_distribution(self, src, Hs, keys, state, ctx, prev_tok):
        """Return ``(token -> log p, new_state)`` with copy mass folded onto tokens."""
        state, ctx, logits = self._step(Hs, keys, state, ctx, prev_tok)
        probs = torch.softmax(logits.double(), 0).numpy()
        n_out = len(self.out_vocab)
        dist: dict[str, float] = {}
        for i, tok in enumerate(self.out_vocab):
            dist[tok] = float(probs[i])
        if self.cfg.copy:
            for j, tok in enumerate(src):
                dist[tok] = dist.get(tok, 0.0) + float(probs[n_out + j])
        return {t: (math.log(p) if p > 0 else float("-inf")) for t, p in dist.items()}, (state, ctx)

    # -- persistence ----------------------------------------------------
    def save(self, path, extra: dict | None = None):
        K.save_checkpoint(path, self.store, asdict(self.cfg),
                          {"kind": "translator", "words": self.words, "out_vocab": self.out_vocab,
                           **(extra or {})})

    @classmethod
    def load(cls, path, E: EmbeddingTable | None = None) -> "TranslatorModel":
        meta, arrays = K.load_checkpoint(path)
        if meta["extra"].get("kind") != "translator":
            raise K.CheckpointError(f"{path} is not a translator checkpoint")
        cfg = TranslatorConfig(**meta["config"])
        model = cls(meta["extra"]["words"], meta["extra"]["out_vocab"], cfg, None)
        model.E = E
        model.store.load_state(arrays)
        return model


# -- beam search ----------------------------------------------------------

@dataclass(order=True)
class Hypothesis:
    score: float
    tokens: tuple


def bracket_constraint(prefix: Sequence[str], tok: str) -> bool:
    """Allow ``tok`` after ``prefix`` only if the output stays a well-bracketed term.

    ``)`` never drops below depth zero, the end marker only follows a closed
    root, and once the root closes nothing but the end marker may follow.
    Separators may not follow ``(`` or ``,``.
    """
    depth = 0
    opened = False
    for t in prefix:
        if t == "(":
            depth += 1
            opened = True
        elif t == ")":
            depth -= 1
    last = prefix[-1] if prefix else None
    if opened and depth == 0:
        return tok == EOS
    if tok == EOS:
        return False
    if tok == ")":
        return depth > 0 and last not in ("(", ",")
    if tok == ",":
        return depth > 0 and last not in ("(", ",", None)
    if tok == "(":
        return last != ")"
    return last != ")"


def beam_search(step: Callable, init_state, width: int, max_len: int, eos: str = EOS,
                allowed: Callable[[Sequence[str], str], bool] | None = None) -> list[Hypothesis]:
    """Generic beam search.

    ``step(state, prefix) -> (dict token -> log p, new_state)``. Finished
    hypotheses end with ``eos`` (not included in ``tokens``) and are returned
    best first; search stops once no live hypothesis can beat the best
    finished one, since log-probabilities only decrease.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    live = [(0.0, (), init_state)]
    finished: list[Hypothesis] = []
    for _ in range(max_len + 1):
        cands = []
        for score, prefix, state in live:
            dist, new_state = step(state, prefix)
            for tok, lp in dist.items():
                if lp == float("-inf") or (allowed is not None and not allowed(prefix, tok)):
                    continue
                if tok != eos and len(prefix) >= max_len:
                    continue
                cands.append((score + lp, prefix, tok, new_state))
        if not cands:
            break
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for score, prefix, tok, st in cands[:width]:
            if tok == eos:
                finished.append(Hypothesis(score, prefix))
            else:
                live.append((score, prefix + (tok,), st))
        if not live:
            break
        if finished and max(h.score for h in finished) >= max(s for s, _, _ in live):
            break
    finished.sort(key=lambda h: (-h.score, h.tokens))
    return finished[:width]


# -- training / inference API --------------------------------------------

def _prepare(model, pairs):
    out = []
    for q, l_sym in pairs:
        src = source_tokens(q)
        tgt = target_tokens(l_sym)
        out.append((src, tgt, model.target_mask(src, tgt)))
    return out


def train_translator(pairs, cfg: TranslatorConfig | None = None, E: EmbeddingTable | None = None,
                     log=None, checkpoint_dir=None, dtype=torch.float32, target_loss: float | None = None):
    """Teacher-forced training. ``pairs`` holds (injected question, symbolic form).

    Returns the model; ``model.history`` lists the mean loss per epoch. When
    ``target_loss`` is set, training stops early once an epoch's mean loss
    falls below it.
    """
    if not pairs:
        raise ValueError("no training pairs")
    cfg = cfg or TranslatorConfig()
    words, outs = set(), set()
    for q, l_sym in pairs:
        words.update(t for t in source_tokens(q) if not _symbol(t))
        tt = target_tokens(l_sym)
        words.update(t for t in tt if not _symbol(t))
        outs.update(tt)
    model = TranslatorModel(sorted(words), sorted(outs), cfg, E, dtype)
    data = _prepare(model, pairs)
    opt = K.make_optimizer(model.store, cfg.lr)
    rng = random.Random(cfg.seed)
    order = list(range(len(data)))
    model.history = []
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch = [data[j] for j in order[i:i + cfg.batch_size]]
            total += K.train_step(model, batch, opt, cfg.clip) * len(batch)
        mean = total / len(data)
        model.history.append(mean)
        if log:
            log(f"translator epoch {epoch + 1}: loss {mean:.4f}")
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            model.save(Path(checkpoint_dir) / f"translator-epoch{epoch + 1:03d}.npz")
        if target_loss is not None and mean < target_loss:
            break
    return model


def decode(model: TranslatorModel, q, width: int | None = None, max_len: int | None = None,
           constrained: bool = True) -> list[Hypothesis]:
    width = width or model.cfg.beam_width
    max_len = max_len or model.cfg.max_len
    src = source_tokens(q)
    with torch.no_grad():
        Hs, s0, c0 = model.encode(src)
        keys = model._keys(Hs)

        def step(state, prefix):
            prev = prefix[-1] if prefix else BOS
            return model.step_distribution(src, Hs, keys, state[0], state[1], prev)

        return beam_search(step, (s0, c0), width, max_len, EOS,
                           bracket_constraint if constrained else None)


def infer(model: TranslatorModel, q, width: int | None = None, max_len: int | None = None) -> str:
    hyps = decode(model, q, width, max_len)
    if not hyps:
        raise NoCompleteHypothesis(f"no complete hypothesis within {max_len or model.cfg.max_len} tokens")
    return detokenize_form(list(hyps[0].tokens))


def score_sequence(model: TranslatorModel, q, l_sym) -> float:
    src = source_tokens(q)
    tgt = target_tokens(l_sym) if isinstance(l_sym, str) else list(l_sym)
    with torch.no_grad():
        return float(model.sequence_logprob(src, tgt))
