"""Small differentiable scorers on float64 torch tensors.

Parameters live in a :class:`ParamStore`; architectures are described by a
:class:`ScorerSpec` and evaluated functionally by :func:`forward`, which
returns the output together with a single-use :class:`Tape` for
:func:`backward`. The optimizer, spectral normalization and the
finite-difference gradient checker operate on stores by parameter name.

Autodiff is torch's; everything else (cells, update rules, normalization,
checking) is spelled out here so the numerics are inspectable.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import NonFiniteError, ShapeError, TapeError

DTYPE = torch.float64

MLP = "mlp"
BIRNN = "birnn"
CAUSAL_RNN = "causal_rnn"
EMBEDDING_MLP = "embedding_mlp"
ARCHITECTURES = (MLP, BIRNN, CAUSAL_RNN, EMBEDDING_MLP)


class ParamStore:
    """Named float64 parameters plus optimizer moments and auxiliary buffers."""

    def __init__(self):
        self.params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.exp_avg: dict = {}
        self.exp_avg_sq: dict = {}
        self.step = 0
        self.version = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = torch.as_tensor(value, dtype=DTYPE).clone().detach().requires_grad_(True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def grad(self, name) -> Optional[torch.Tensor]:
        return self.params[name].grad

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.params[k] = v.detach().clone().requires_grad_(True)
        out.buffers = OrderedDict((k, v.clone()) for k, v in self.buffers.items())
        out.exp_avg = {k: v.clone() for k, v in self.exp_avg.items()}
        out.exp_avg_sq = {k: v.clone() for k, v in self.exp_avg_sq.items()}
        out.step = self.step
        return out

    def equal(self, other: "ParamStore") -> bool:
        return sorted(self.names()) == sorted(other.names()) and all(
            torch.equal(self.params[k], other.params[k]) for k in self.params)

    def touch(self):
        self.version += 1

    def state(self) -> dict:
        return {
            "params": {k: v.detach().numpy().copy() for k, v in self.params.items()},
            "buffers": {k: v.numpy().copy() for k, v in self.buffers.items()},
            "exp_avg": {k: v.numpy().copy() for k, v in self.exp_avg.items()},
            "exp_avg_sq": {k: v.numpy().copy() for k, v in self.exp_avg_sq.items()},
            "step": self.step,
        }

    @classmethod
    def from_state(cls, state: dict) -> "ParamStore":
        out = cls()
        for k, v in state["params"].items():
            out.params[k] = torch.tensor(np.asarray(v), dtype=DTYPE).requires_grad_(True)
        for key in ("buffers", "exp_avg", "exp_avg_sq"):
            target = getattr(out, key)
            for k, v in state.get(key, {}).items():
                target[k] = torch.tensor(np.asarray(v), dtype=DTYPE)
        out.step = int(state.get("step", 0))
        return out


@dataclass(frozen=True)
class ScorerSpec:
    """Architecture description.

    ``input_dim`` is the feature width for ``mlp`` and the vocabulary size for
    the token-id architectures. ``hidden`` lists the widths of the ReLU layers
    of the feed-forward head.
    """
    architecture: str
    input_dim: int
    hidden: tuple = (64, 64)
    output_dim: int = 1
    output: str = "logistic"          # logistic | linear
    embed_dim: int = 64
    rnn_hidden: int = 128
    prefix: str = ""
    zero_final: bool = True
    embed_scale: float = 0.1          # std of the initial embedding table

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        widths = (self.input_dim, self.output_dim, self.embed_dim, self.rnn_hidden) + tuple(self.hidden)
        if min(widths) < 1:
            raise ValueError("all widths must be >= 1")

    def key(self, name: str) -> str:
        return f"{self.prefix}{name}"

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, obj) -> "ScorerSpec":
        obj = dict(obj)
        obj["hidden"] = tuple(obj["hidden"])
        return cls(**obj)


# -- initialization ----------------------------------------------------------

def _uniform(gen: torch.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound


def _init_linear(store, gen, name, n_in, n_out, zero=False):
    if zero:
        store.add(name + ".w", torch.zeros(n_out, n_in, dtype=DTYPE))
        store.add(name + ".b", torch.zeros(n_out, dtype=DTYPE))
    else:
        store.add(name + ".w", _uniform(gen, (n_out, n_in), n_in))
        store.add(name + ".b", _uniform(gen, (n_out,), n_in))


def _init_mlp(store, gen, spec, name, n_in):
    widths = [n_in] + list(spec.hidden)
    for i in range(len(spec.hidden)):
        _init_linear(store, gen, spec.key(f"{name}{i}"), widths[i], widths[i + 1])
    _init_linear(store, gen, spec.key(f"{name}out"), widths[-1], spec.output_dim, zero=spec.zero_final)


def _init_gru(store, gen, name, n_in, n_h):
    store.add(name + ".w_ih", _uniform(gen, (3 * n_h, n_in), n_h))
    store.add(name + ".w_hh", _uniform(gen, (3 * n_h, n_h), n_h))
    store.add(name + ".b_ih", _uniform(gen, (3 * n_h,), n_h))
    store.add(name + ".b_hh", _uniform(gen, (3 * n_h,), n_h))


def init_params(spec: ScorerSpec, store: Optional[ParamStore] = None, seed: int = 0) -> ParamStore:
    """Uniform fan-in initialization; the final layer is zero when ``zero_final``."""
    store = ParamStore() if store is None else store
    gen = torch.Generator().manual_seed(seed)
    a = spec.architecture
    if a == MLP:
        _init_mlp(store, gen, spec, "mlp", spec.input_dim)
    elif a == EMBEDDING_MLP:
        store.add(spec.key("embed"), torch.randn(spec.input_dim, spec.embed_dim, generator=gen, dtype=DTYPE) * spec.embed_scale)
        _init_mlp(store, gen, spec, "mlp", spec.embed_dim)
    elif a == BIRNN:
        store.add(spec.key("embed"), torch.randn(spec.input_dim, spec.embed_dim, generator=gen, dtype=DTYPE) * spec.embed_scale)
        _init_gru(store, gen, spec.key("fwd"), spec.embed_dim, spec.rnn_hidden)
        _init_gru(store, gen, spec.key("bwd"), spec.embed_dim, spec.rnn_hidden)
        _init_mlp(store, gen, spec, "mlp", 2 * spec.rnn_hidden)
    elif a == CAUSAL_RNN:
        store.add(spec.key("embed"), torch.randn(spec.input_dim, spec.embed_dim, generator=gen, dtype=DTYPE) * spec.embed_scale)
        _init_gru(store, gen, spec.key("gru"), spec.embed_dim, spec.rnn_hidden)
        # start-of-sequence input, learned
        store.add(spec.key("bos"), torch.zeros(spec.embed_dim, dtype=DTYPE))
        _init_linear(store, gen, spec.key("head"), spec.rnn_hidden, spec.output_dim, zero=spec.zero_final)
    return store


# -- building blocks ---------------------------------------------------------

def linear(store, name, x):
    w, b = store[name + ".w"], store[name + ".b"]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"layer {name!r}: expected input width {w.shape[1]}, got {x.shape[-1]}")
    return x @ w.T + b


def mlp(store, spec: ScorerSpec, name: str, x):
    for i in range(len(spec.hidden)):
        x = torch.relu(linear(store, spec.key(f"{name}{i}"), x))
    out = linear(store, spec.key(f"{name}out"), x)
    if spec.output == "logistic":
        out = torch.sigmoid(out)
    return out


def gru_cell(store, name, x, h):
    gi = x @ store[name + ".w_ih"].T + store[name + ".b_ih"]
    gh = h @ store[name + ".w_hh"].T + store[name + ".b_hh"]
    i_r, i_z, i_n = gi.chunk(3, dim=-1)
    h_r, h_z, h_n = gh.chunk(3, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1 - z) * n + z * h


def run_gru(store, name, x, n_h):
    """Unroll a GRU over ``x`` of shape (B, T, D); returns (B, T, n_h)."""
    b, t, _ = x.shape
    h = torch.zeros(b, n_h, dtype=DTYPE)
    out = []
    for s in range(t):
        h = gru_cell(store, name, x[:, s], h)
        out.append(h)
    return torch.stack(out, dim=1)


def _reverse_within(x, lengths):
    """Reverse each row's first ``lengths[i]`` positions, leaving padding in place."""
    b, t = x.shape[:2]
    pos = torch.arange(t).expand(b, t)
    lens = lengths.view(-1, 1)
    idx = torch.where(pos < lens, lens - 1 - pos, pos)
    return torch.gather(x, 1, idx.unsqueeze(-1).expand_as(x))


def embed(store, spec, ids):
    table = store[spec.key("embed")]
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id outside embedding table of size {table.shape[0]}")
    return table[ids]


@dataclass
class CausalOutput:
    logits: torch.Tensor    # (B, T, V): distribution over token t given tokens < t
    hidden: torch.Tensor    # (B, T, H): state after consuming token t
    prefix: torch.Tensor    # (B, T, H): state before emitting token t


# -- forward / backward ------------------------------------------------------

class Tape:
    """Record of one forward evaluation; consumable once by :func:`backward`."""

    def __init__(self, output, stores):
        self.output = output
        self.stores = list(stores)
        self.versions = [s.version for s in self.stores]
        self.used = False


def _mask_of(ids, lengths):
    b, t = ids.shape
    return torch.arange(t).expand(b, t) < lengths.view(-1, 1)


def _forward_raw(spec: ScorerSpec, store: ParamStore, inputs):
    a = spec.architecture
    if a == MLP:
        x = torch.as_tensor(inputs, dtype=DTYPE)
        if x.shape[-1] != spec.input_dim:
            raise ShapeError(f"mlp input width {x.shape[-1]} != {spec.input_dim}")
        out = mlp(store, spec, "mlp", x)
        return out.squeeze(-1) if spec.output_dim == 1 else out
    if a == EMBEDDING_MLP:
        ids, lengths = inputs
        ids = torch.as_tensor(ids, dtype=torch.long)
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        if ids.dim() != 2:
            raise ShapeError("embedding_mlp expects (B, L) token ids")
        mask = _mask_of(ids, lengths).to(DTYPE).unsqueeze(-1)
        pooled = (embed(store, spec, ids) * mask).sum(1) / lengths.clamp(min=1).to(DTYPE).unsqueeze(-1)
        out = mlp(store, spec, "mlp", pooled)
        return out.squeeze(-1) if spec.output_dim == 1 else out
    if a == BIRNN:
        ids, lengths = inputs
        ids = torch.as_tensor(ids, dtype=torch.long)
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        if ids.dim() != 2:
            raise ShapeError("birnn expects (B, T) token ids")
        x = embed(store, spec, ids)
        fwd = run_gru(store, spec.key("fwd"), x, spec.rnn_hidden)
        bwd = _reverse_within(run_gru(store, spec.key("bwd"), _reverse_within(x, lengths), spec.rnn_hidden), lengths)
        out = mlp(store, spec, "mlp", torch.cat([fwd, bwd], dim=-1))
        return out.squeeze(-1) if spec.output_dim == 1 else out
    if a == CAUSAL_RNN:
        ids = torch.as_tensor(inputs, dtype=torch.long)
        if ids.dim() != 2:
            raise ShapeError("causal_rnn expects (B, T) token ids")
        b, t = ids.shape
        x = embed(store, spec, ids)
        h = torch.zeros(b, spec.rnn_hidden, dtype=DTYPE)
        step_in = store[spec.key("bos")].expand(b, spec.embed_dim)
        states = []
        for s in range(t + 1):
            h = gru_cell(store, spec.key("gru"), step_in, h)
            states.append(h)
            if s < t:
                step_in = x[:, s]
        states = torch.stack(states, 1)
        prefix = states[:, :t]
        return CausalOutput(linear(store, spec.key("head"), prefix), states[:, 1:], prefix)
    raise ValueError(a)


def forward(spec: ScorerSpec, store: ParamStore, inputs):
    """Evaluate ``spec`` with ``store`` on ``inputs``.

    Input contracts: ``mlp`` takes a (B, D) array; ``embedding_mlp`` and
    ``birnn`` take ``(ids, lengths)`` with ids of shape (B, L); ``causal_rnn``
    takes (B, T) ids and returns a :class:`CausalOutput`.
    """
    out = _forward_raw(spec, store, inputs)
    return out, Tape(out, [store])


def backward(tape: Tape, upstream=None):
    """Accumulate reverse-mode gradients of ``tape.output`` into the stores."""
    if tape.used:
        raise TapeError("tape already consumed")
    if any(s.version != v for s, v in zip(tape.stores, tape.versions)):
        raise TapeError("parameters changed since the forward pass")
    out = tape.output
    if isinstance(out, CausalOutput):
        if upstream is None:
            raise ValueError("causal output needs an explicit upstream gradient for logits")
        out, upstream = out.logits, upstream
    if upstream is None:
        upstream = torch.ones_like(out)
    upstream = torch.as_tensor(upstream, dtype=DTYPE)
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream gradient shape {tuple(upstream.shape)} != output {tuple(out.shape)}")
    tape.used = True
    if not out.requires_grad:
        return
    out.backward(upstream)


def scalar_tape(loss: torch.Tensor, *stores) -> Tape:
    """Tape for a scalar objective built from one or more forward passes."""
    return Tape(loss, stores)


# -- optimizer ---------------------------------------------------------------

def adam_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.01, names=None) -> ParamStore:
    """AdamW update (decoupled weight decay) of parameters that carry a gradient.

    Parameters without a gradient are left untouched. Gradients are cleared.
    """
    b1, b2 = betas
    names = store.names() if names is None else names
    for name in names:
        g = store.params[name].grad
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}", name)
    store.step += 1
    t = store.step
    with torch.no_grad():
        for name in names:
            p = store.params[name]
            g = p.grad
            if g is None:
                continue
            m = store.exp_avg.get(name)
            v = store.exp_avg_sq.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            store.exp_avg[name] = m
            store.exp_avg_sq[name] = v
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.mul_(1 - lr * weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
            if not torch.isfinite(p).all():
                raise NonFiniteError(f"non-finite value in {name!r} after update", name)
    store.zero_grad()
    store.touch()
    return store


# -- spectral normalization --------------------------------------------------

def spectral_normalize(store: ParamStore, name: str, n_iter: int = 1, seed: int = 0) -> float:
    """Divide weight matrix ``name`` by its power-iteration σ_max estimate.

    The left/right singular vector estimates persist in ``store.buffers`` so
    successive calls keep refining them. Returns the estimate used (0 for a
    zero matrix, which is left unchanged).
    """
    w = store.params[name]
    if w.dim() != 2:
        raise ShapeError(f"{name!r} is not a matrix")
    u_key, v_key = name + ".sn_u", name + ".sn_v"
    with torch.no_grad():
        if u_key not in store.buffers:
            gen = torch.Generator().manual_seed(seed)
            u = torch.randn(w.shape[0], generator=gen, dtype=DTYPE)
            store.buffers[u_key] = u / u.norm()
            store.buffers[v_key] = torch.zeros(w.shape[1], dtype=DTYPE)
        u = store.buffers[u_key]
        v = store.buffers[v_key]
        for _ in range(n_iter):
            wv = w.T @ u
            if wv.norm() == 0:
                return 0.0
            v = wv / wv.norm()
            wu = w @ v
            if wu.norm() == 0:
                return 0.0
            u = wu / wu.norm()
        store.buffers[u_key] = u
        store.buffers[v_key] = v
        sigma = float(u @ w @ v)
        if sigma > 0:
            w.div_(sigma)
            store.touch()
    return sigma


def weight_matrices(store: ParamStore, prefix: str = "") -> list:
    """2-D weights under ``prefix`` excluding embedding tables."""
    return [k for k, v in store.params.items()
            if k.startswith(prefix) and v.dim() == 2 and not k.endswith("embed")]


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    worst: float
    worst_param: Optional[str]
    per_param: dict = field(default_factory=dict)


def _projected_loss(spec, store, inputs, weights):
    out = _forward_raw(spec, store, inputs)
    if isinstance(out, CausalOutput):
        return (out.logits * weights[0]).sum() + (out.hidden * weights[1]).sum()
    return (out * weights[0]).sum()


def grad_check(spec: ScorerSpec, store: ParamStore, inputs, tolerance: float = 1e-4,
               h: float = 1e-5, max_entries: Optional[int] = None, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    The scalar probed is a fixed random projection of the output. Relative
    error is ``|a - n| / max(|a|, |n|, floor)``. ``max_entries`` limits the
    number of probed entries per parameter (sampled with ``seed``).
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        sample = _forward_raw(spec, store, inputs)
    if isinstance(sample, CausalOutput):
        weights = (torch.randn(sample.logits.shape, generator=gen, dtype=DTYPE),
                   torch.randn(sample.hidden.shape, generator=gen, dtype=DTYPE))
    else:
        weights = (torch.randn(sample.shape, generator=gen, dtype=DTYPE),)

    store.zero_grad()
    loss = _projected_loss(spec, store, inputs, weights)
    backward(scalar_tape(loss, store))
    analytic = {k: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
                for k, p in store.params.items()}
    store.zero_grad()

    rng = np.random.default_rng(seed)
    per_param = {}
    with torch.no_grad():
        for name, p in store.params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            worst = 0.0
            a_flat = analytic[name].view(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = _projected_loss(spec, store, inputs, weights).item()
                flat[i] = orig - h
                down = _projected_loss(spec, store, inputs, weights).item()
                flat[i] = orig
                num = (up - down) / (2 * h)
                a = a_flat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
            per_param[name] = worst
    worst_param = max(per_param, key=per_param.get) if per_param else None
    worst = per_param[worst_param] if worst_param else 0.0
    return GradCheckReport(worst < tolerance, worst, worst_param, per_param)
