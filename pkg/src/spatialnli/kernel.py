"""Differentiable building blocks shared by the comprehension and translation models.

Reverse-mode differentiation and Adam come from torch; the recurrent cells,
additive attention, initialisation, clipping policy, gradient checking and the
checkpoint format live here.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

__all__ = [
    "ShapeMismatch",
    "EmptySequence",
    "NonFiniteLoss",
    "CheckpointError",
    "ParameterStore",
    "linear",
    "lstm_forward",
    "lstm_cell",
    "gru_cell",
    "add_attention",
    "attention_scores",
    "lstm_stack_forward",
    "gru_forward",
    "attend",
    "mlp_forward",
    "cross_entropy",
    "binary_cross_entropy",
    "clip_global_norm",
    "make_optimizer",
    "train_step",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class EmptySequence(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, loss, diagnostics: dict):
        self.loss = loss
        self.diagnostics = diagnostics
        super().__init__(f"non-finite loss {loss}: {diagnostics}")


class CheckpointError(ValueError):
    pass


def _name_seed(name: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


class ParameterStore:
    """Named tensors whose initial values depend only on (name, shape, seed).

    Matrices are uniform in +-1/sqrt(fan_in) where fan_in is the last axis;
    vectors named ``*.b`` start at zero, except LSTM forget-gate slices which
    start at 1.0 (see :func:`add_lstm`).
    """

    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.seed = int(seed)
        self.dtype = dtype
        self.params: "OrderedDict[str, torch.Tensor]" = OrderedDict()

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> torch.Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def values(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def shapes(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self.params.values())

    def add(self, name: str, shape: Sequence[int], init: str = "uniform", value: float = 0.0,
            scale: float | None = None) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            t = torch.zeros(shape, dtype=torch.float64)
        elif init == "constant":
            t = torch.full(shape, float(value), dtype=torch.float64)
        elif init == "uniform":
            bound = scale if scale is not None else 1.0 / math.sqrt(max(1, shape[-1]))
            g = torch.Generator().manual_seed(_name_seed(name, self.seed))
            t = (torch.rand(shape, generator=g, dtype=torch.float64) * 2.0 - 1.0) * bound
        else:
            raise ValueError(f"unknown init {init!r}")
        p = t.to(self.dtype).requires_grad_(True)
        p.grad = torch.zeros_like(p)
        self.params[name] = p
        return p

    def add_linear(self, prefix: str, n_in: int, n_out: int, bias: bool = True):
        self.add(f"{prefix}.W", (n_out, n_in))
        if bias:
            self.add(f"{prefix}.b", (n_out,), init="zeros")

    def add_lstm(self, prefix: str, n_in: int, n_hidden: int):
        """Gate order i, f, g, o in a single (4H, .) block."""
        self.add(f"{prefix}.Wx", (4 * n_hidden, n_in))
        self.add(f"{prefix}.Wh", (4 * n_hidden, n_hidden))
        b = self.add(f"{prefix}.b", (4 * n_hidden,), init="zeros")
        with torch.no_grad():
            b[n_hidden:2 * n_hidden] = 1.0

    def add_gru(self, prefix: str, n_in: int, n_hidden: int):
        """Gate order r, z, n."""
        self.add(f"{prefix}.Wx", (3 * n_hidden, n_in))
        self.add(f"{prefix}.Wh", (3 * n_hidden, n_hidden))
        self.add(f"{prefix}.bx", (3 * n_hidden,), init="zeros")
        self.add(f"{prefix}.bh", (3 * n_hidden,), init="zeros")

    def zero_grad(self):
        for p in self.params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            else:
                p.grad.zero_()

    def to_dtype(self, dtype: torch.dtype):
        for k, p in list(self.params.items()):
            q = p.detach().to(dtype).requires_grad_(True)
            q.grad = torch.zeros_like(q)
            self.params[k] = q
        self.dtype = dtype

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self.params.items():
            a = arrays[k]
            if tuple(a.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {k}: file {tuple(a.shape)} vs model {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.as_tensor(a, dtype=p.dtype))


# -- forward kernels ------------------------------------------------------

def _check_inputs(inputs: torch.Tensor, W: torch.Tensor, what: str):
    if inputs.dim() != 2:
        raise ShapeMismatch(f"{what}: inputs must be (T, d), got {tuple(inputs.shape)}")
    if inputs.shape[0] and inputs.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"{what}: input dim {inputs.shape[1]} != weight dim {W.shape[1]}")


def linear(x: torch.Tensor, store: ParameterStore, prefix: str) -> torch.Tensor:
    W = store[f"{prefix}.W"]
    if x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"{prefix}: input dim {x.shape[-1]} != {W.shape[1]}")
    y = x @ W.T
    b = store.params.get(f"{prefix}.b")
    return y + b if b is not None else y


def lstm_forward(inputs: torch.Tensor, store: ParameterStore, prefix: str,
                 reverse: bool = False) -> torch.Tensor:
    """Run an LSTM from a zero state; returns (T, H) hidden states in input order."""
    Wx, Wh, b = store[f"{prefix}.Wx"], store[f"{prefix}.Wh"], store[f"{prefix}.b"]
    _check_inputs(inputs, Wx, prefix)
    H = Wh.shape[1]
    T = inputs.shape[0]
    if T == 0:
        return inputs.new_zeros((0, H))
    xs = inputs @ Wx.T + b
    h = inputs.new_zeros(H)
    c = inputs.new_zeros(H)
    out = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, c = lstm_cell(xs[t], h, c, Wh)
        out[t] = h
    return torch.stack(out)


def lstm_cell(x_proj: torch.Tensor, h: torch.Tensor, c: torch.Tensor, Wh: torch.Tensor):
    """One step given the precomputed input projection ``Wx x + b``; returns (h, c)."""
    H = h.shape[-1]
    gates = x_proj + Wh @ h
    i = torch.sigmoid(gates[:H])
    f = torch.sigmoid(gates[H:2 * H])
    g = torch.tanh(gates[2 * H:3 * H])
    o = torch.sigmoid(gates[3 * H:])
    c = f * c + i * g
    return o * torch.tanh(c), c


def lstm_stack_forward(inputs: torch.Tensor, store: ParameterStore, prefixes: Sequence[str]) -> torch.Tensor:
    h = inputs
    for p in prefixes:
        h = lstm_forward(h, store, p)
    return h


def gru_forward(inputs: torch.Tensor, store: ParameterStore, prefix: str,
                h0: torch.Tensor | None = None) -> torch.Tensor:
    """GRU with the reset gate applied to the recurrent candidate term."""
    Wx, Wh = store[f"{prefix}.Wx"], store[f"{prefix}.Wh"]
    bx, bh = store[f"{prefix}.bx"], store[f"{prefix}.bh"]
    _check_inputs(inputs, Wx, prefix)
    H = Wh.shape[1]
    if inputs.shape[0] == 0:
        return inputs.new_zeros((0, H))
    xs = inputs @ Wx.T + bx
    h = inputs.new_zeros(H) if h0 is None else h0
    out = []
    for t in range(inputs.shape[0]):
        h = gru_cell(xs[t], h, Wh, bh)
        out.append(h)
    return torch.stack(out)


def gru_cell(x_proj: torch.Tensor, h: torch.Tensor, Wh: torch.Tensor, bh: torch.Tensor) -> torch.Tensor:
    """One step given the precomputed input projection ``Wx x + bx``; ``h`` may carry a leading batch axis."""
    H = h.shape[-1]
    hh = h @ Wh.T + bh
    r = torch.sigmoid(x_proj[..., :H] + hh[..., :H])
    z = torch.sigmoid(x_proj[..., H:2 * H] + hh[..., H:2 * H])
    n = torch.tanh(x_proj[..., 2 * H:] + r * hh[..., 2 * H:])
    return (1.0 - z) * n + z * h


def attention_scores(H: torch.Tensor, query: torch.Tensor, store: ParameterStore, prefix: str) -> torch.Tensor:
    """``v . tanh(Wq query + Wk h_j)`` for every row h_j of H."""
    Wk, Wq, v = store[f"{prefix}.Wk"], store[f"{prefix}.Wq"], store[f"{prefix}.v"]
    return torch.tanh(H @ Wk.T + Wq @ query) @ v


def attend(H: torch.Tensor, query: torch.Tensor, store: ParameterStore, prefix: str,
           ratio: bool = False):
    """Additive attention over the rows of ``H``.

    ``ratio=True`` normalises raw scores as ``e / sum(e)`` instead of softmax;
    with mixed-sign scores those weights can leave [0, 1].
    Returns ``(context, weights)``.
    """
    if H.dim() != 2 or H.shape[0] == 0:
        raise EmptySequence("attention over an empty sequence")
    e = attention_scores(H, query, store, prefix)
    if ratio:
        w = e / e.sum()
    else:
        w = torch.softmax(e, dim=0)
    return w @ H, w


def add_attention(store: ParameterStore, prefix: str, key_dim: int, query_dim: int, attn_dim: int):
    store.add(f"{prefix}.Wk", (attn_dim, key_dim))
    store.add(f"{prefix}.Wq", (attn_dim, query_dim))
    store.add(f"{prefix}.v", (attn_dim,))


def mlp_forward(x: torch.Tensor, store: ParameterStore, prefixes: Sequence[str]) -> torch.Tensor:
    """tanh between layers, linear output."""
    for i, p in enumerate(prefixes):
        x = linear(x, store, p)
        if i < len(prefixes) - 1:
            x = torch.tanh(x)
    return x


def cross_entropy(logits: torch.Tensor, target: int) -> torch.Tensor:
    return -torch.log_softmax(logits, dim=-1)[target]


def binary_cross_entropy(logit: torch.Tensor, label: float) -> torch.Tensor:
    # log(1 + exp(-z)) written stably for both label values.
    z = logit if label else -logit
    return torch.nn.functional.softplus(-z)


# -- training -------------------------------------------------------------

def clip_global_norm(params: Iterable[torch.Tensor], threshold: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``threshold``.
    Returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if threshold > 0 and total > threshold:
        scale = threshold / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


def make_optimizer(store: ParameterStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(store.values(), lr=lr, betas=betas, eps=eps)


def train_step(model, batch, optimizer, clip: float = 5.0) -> float:
    """One forward/backward/update. ``model.loss(batch)`` must return a scalar tensor.

    The optimizer is rebuilt transparently if the store's tensors were
    replaced (e.g. after a dtype change). Returns the pre-update loss.
    """
    if not batch:
        raise ValueError("empty batch")
    store = model.store
    store.zero_grad()
    loss = model.loss(batch)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLoss(value, {
            "batch_size": len(batch),
            "param_norms": {k: float(p.detach().norm()) for k, p in store},
        })
    loss.backward()
    clip_global_norm(store.values(), clip)
    optimizer.step()
    return value


def grad_check(loss_fn: Callable[[], torch.Tensor], store: ParameterStore, eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, names: Sequence[str] | None = None,
               floor: float = 1e-12) -> float:
    """Compare autograd gradients with central differences.

    Every coordinate is checked when the store holds at most ``max_coords``
    (or ``max_coords`` is None); otherwise a seeded random subset of that size.
    Returns ``max |a - n| / max(|a| + |n|, floor)``.  Central differences
    cannot resolve gradients much below ``|loss| * 1e-16 / eps``; raising
    ``floor`` turns the check into an absolute one for such coordinates.
    """
    if store.dtype != torch.float64:
        raise ValueError("grad_check needs a float64 store")
    names = list(names) if names is not None else [k for k, _ in store]
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: store[k].grad.detach().clone() for k in names}

    coords = [(k, i) for k in names for i in range(store[k].numel())]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    worst = 0.0
    with torch.no_grad():
        for k, i in coords:
            flat = store[k].view(-1)
            old = float(flat[i])
            flat[i] = old + eps
            up = float(loss_fn())
            flat[i] = old - eps
            down = float(loss_fn())
            flat[i] = old
            num = (up - down) / (2.0 * eps)
            ana = float(analytic[k].view(-1)[i])
            err = abs(ana - num) / max(abs(ana) + abs(num), floor)
            worst = max(worst, err)
    return worst


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path, store: ParameterStore, config: dict, extra: dict | None = None):
    """Write ``<path>`` (npz of named arrays) with a JSON header stored inside it."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "seed": store.seed,
        "shapes": {k: list(s) for k, s in store.shapes().items()},
        "config": config,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in store.state().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, arrays)``; callers rebuild the model from ``meta['config']``
    and then call ``store.load_state(arrays)``, which rejects shape mismatches."""
    with np.load(Path(path), allow_pickle=False) as z:
        if "__meta__" not in z:
            raise CheckpointError(f"{path}: missing metadata")
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    for k, shape in meta["shapes"].items():
        if k not in arrays or list(arrays[k].shape) != list(shape):
            raise CheckpointError(f"{path}: array {k} does not match recorded shape {shape}")
    return meta, arrays
