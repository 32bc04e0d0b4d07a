"""Autoregressive record generator with a value head.

The generator is a causal GRU over the serializer's token vocabulary. It is
pretrained by teacher-forced maximum likelihood, then acts as the PPO policy;
a frozen copy taken at the end of pretraining is the KL reference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import neural
from .data import Dataset
from .errors import NonFiniteError, VocabError
from .neural import DTYPE, ParamStore, ScorerSpec
from .serializer import TokenVocabulary, label_of, serialize_dataset

log = logging.getLogger(__name__)


@dataclass
class PolicyState:
    spec: ScorerSpec
    theta: ParamStore
    value_spec: ScorerSpec
    phi: ParamStore
    ref: ParamStore
    vocab: TokenVocabulary
    temperature: float = 1.0
    seed: int = 0

    def snapshot_reference(self):
        self.ref = self.theta.clone()
        for p in self.ref.params.values():
            p.requires_grad_(False)

    def clone(self) -> "PolicyState":
        out = PolicyState(self.spec, self.theta.clone(), self.value_spec, self.phi.clone(),
                          self.ref.clone(), self.vocab, self.temperature, self.seed)
        for p in out.ref.params.values():
            p.requires_grad_(False)
        return out


@dataclass
class Rollout:
    tokens: tuple
    log_probs: np.ndarray
    values: np.ndarray
    label: Optional[str] = None
    temperature: float = 1.0

    def __len__(self):
        return len(self.tokens)


def new_policy(vocab: TokenVocabulary, embed_dim: int = 64, hidden: int = 128,
               value_hidden: int = 64, seed: int = 0, temperature: float = 1.0) -> PolicyState:
    spec = ScorerSpec(neural.CAUSAL_RNN, len(vocab), hidden=(), output_dim=len(vocab),
                      output="linear", embed_dim=embed_dim, rnn_hidden=hidden, prefix="gen.",
                      zero_final=True)
    theta = neural.init_params(spec, seed=seed)
    value_spec = ScorerSpec(neural.MLP, hidden, hidden=(value_hidden,), output="linear",
                            prefix="value.", zero_final=True)
    phi = neural.init_params(value_spec, seed=seed + 1)
    state = PolicyState(spec, theta, value_spec, phi, ParamStore(), vocab, temperature, seed)
    state.snapshot_reference()
    return state


# -- batched evaluation ------------------------------------------------------

def pad(sequences: Sequence[Sequence[int]], fill: int = 0):
    lengths = torch.tensor([len(s) for s in sequences], dtype=torch.long)
    t = int(lengths.max()) if len(sequences) else 0
    ids = torch.full((len(sequences), t), fill, dtype=torch.long)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return ids, lengths


def _check_vocab(policy: PolicyState, ids):
    if ids.numel() and (ids.min() < 0 or ids.max() >= len(policy.vocab)):
        raise VocabError("token id outside the policy vocabulary")


def _step(spec, store, inp, h):
    h = neural.gru_cell(store, spec.key("gru"), inp, h)
    return h, neural.linear(store, spec.key("head"), h)


def _scaled_log_softmax(logits, temperature):
    # greedy decoding records log-probs of the unscaled distribution
    if temperature == 0:
        return torch.log_softmax(logits, dim=-1)
    return torch.log_softmax(logits / temperature, dim=-1)


def teacher_forced(policy: PolicyState, ids, store: Optional[ParamStore] = None):
    """Run the decoder over padded ids; returns (logits, hidden, prefix) tensors.

    ``logits[:, t]`` scores token t given tokens < t, ``hidden[:, t]`` is the
    state after consuming token t, ``prefix[:, t]`` the state before it.
    """
    spec = policy.spec
    store = policy.theta if store is None else store
    _check_vocab(policy, ids)
    b, t = ids.shape
    x = store[spec.key("embed")][ids]
    h = torch.zeros(b, spec.rnn_hidden, dtype=DTYPE)
    inp = store[spec.key("bos")].expand(b, spec.embed_dim)
    logits, states = [], []
    for s in range(t):
        h, lg = _step(spec, store, inp, h)
        states.append(h)
        logits.append(lg)
        inp = x[:, s]
    h_last = neural.gru_cell(store, spec.key("gru"), inp, h)
    states.append(h_last)
    states = torch.stack(states, 1)
    return torch.stack(logits, 1), states[:, 1:], states[:, :-1]


def values_of(policy: PolicyState, prefix_states) -> torch.Tensor:
    """Value head on detached decoder states."""
    return neural.mlp(policy.phi, policy.value_spec, "mlp", prefix_states.detach()).squeeze(-1)


def log_probs_and_values(policy: PolicyState, tokens: Sequence[Sequence[int]],
                         temperature: Optional[float] = None, differentiable: bool = False):
    """Teacher-forced per-step log-probabilities and values.

    Returns padded ``(log_probs, values, mask)`` tensors of shape (B, T). With
    ``differentiable`` the graph is kept for PPO updates.
    """
    temperature = policy.temperature if temperature is None else temperature
    ids, lengths = pad(tokens)
    with torch.set_grad_enabled(differentiable):
        logits, _, prefix = teacher_forced(policy, ids)
        steps = [_scaled_log_softmax(logits[:, s].contiguous(), temperature) for s in range(ids.shape[1])]
        logp_all = torch.stack(steps, 1)
        chosen = logp_all.gather(-1, ids.unsqueeze(-1)).squeeze(-1)
        values = values_of(policy, prefix)
    mask = torch.arange(ids.shape[1]).expand_as(ids) < lengths.view(-1, 1)
    return chosen, values, mask


def rollout_log_probs(policy: PolicyState, rollouts: Sequence[Rollout]):
    """Per-rollout numpy arrays of (log_probs, values) recomputed at current θ."""
    lp, v, mask = log_probs_and_values(policy, [r.tokens for r in rollouts],
                                       temperature=rollouts[0].temperature if rollouts else None)
    out = []
    for i, r in enumerate(rollouts):
        n = len(r.tokens)
        out.append((lp[i, :n].numpy().copy(), v[i, :n].numpy().copy()))
    return out


# -- sampling ----------------------------------------------------------------

def sample_batch(policy: PolicyState, n: int, seed: int, temperature: Optional[float] = None,
                 max_length: Optional[int] = None) -> list:
    """Ancestral sampling of ``n`` records until EOR or the length cap.

    Temperature 0 decodes greedily.
    """
    temperature = policy.temperature if temperature is None else temperature
    vocab = policy.vocab
    max_length = vocab.max_length if max_length is None else max_length
    spec, store = policy.spec, policy.theta
    gen = torch.Generator().manual_seed(int(seed))
    if n == 0:
        return []
    tokens = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]
    done = torch.zeros(n, dtype=torch.bool)
    prefix_states = []
    with torch.no_grad():
        h = torch.zeros(n, spec.rnn_hidden, dtype=DTYPE)
        inp = store[spec.key("bos")].expand(n, spec.embed_dim)
        for _ in range(max_length):
            h, logits = _step(spec, store, inp, h)
            prefix_states.append(h)
            logp = _scaled_log_softmax(logits, temperature)
            if temperature == 0:
                choice = logp.argmax(dim=-1)
            else:
                choice = torch.multinomial(logp.exp(), 1, generator=gen).squeeze(-1)
            chosen_lp = logp.gather(-1, choice.unsqueeze(-1)).squeeze(-1)
            for i in torch.nonzero(~done).flatten().tolist():
                tokens[i].append(int(choice[i]))
                logps[i].append(float(chosen_lp[i]))
            done |= choice == vocab.eor_id
            if bool(done.all()):
                break
            inp = store[spec.key("embed")][choice]
        values = values_of(policy, torch.stack(prefix_states, 1))
    out = []
    for i in range(n):
        k = len(tokens[i])
        out.append(Rollout(tuple(tokens[i]), np.array(logps[i]), values[i, :k].numpy().copy(),
                           label_of(tokens[i], vocab), temperature))
    return out


def sample_record(policy: PolicyState, seed: int, temperature: Optional[float] = None) -> Rollout:
    return sample_batch(policy, 1, seed, temperature)[0]


def step_distribution(policy: PolicyState, prefix: Sequence[int], temperature: float = 1.0) -> np.ndarray:
    """Next-token distribution after ``prefix``."""
    ids = torch.tensor([list(prefix) + [0]], dtype=torch.long)
    with torch.no_grad():
        logits, _, _ = teacher_forced(policy, ids)
        return torch.softmax(logits[0, len(prefix)] / temperature, dim=-1).numpy()


def extract_label(rollout: Rollout, vocab: TokenVocabulary):
    return label_of(rollout.tokens, vocab)


def kl_to_reference(policy: PolicyState, tokens: Sequence[Sequence[int]],
                    differentiable: bool = False):
    """Exact per-state KL(π_θ ‖ π_ref) over the full vocabulary, (B, T) + mask."""
    ids, lengths = pad(tokens)
    with torch.set_grad_enabled(differentiable):
        logits, _, _ = teacher_forced(policy, ids)
        with torch.no_grad():
            ref_logits, _, _ = teacher_forced(policy, ids, store=policy.ref)
        logp = torch.log_softmax(logits, dim=-1)
        logq = torch.log_softmax(ref_logits, dim=-1)
        kl = (logp.exp() * (logp - logq)).sum(-1)
    mask = torch.arange(ids.shape[1]).expand_as(ids) < lengths.view(-1, 1)
    return kl, mask


# -- maximum-likelihood pretraining -----------------------------------------

@dataclass
class PretrainResult:
    policy: PolicyState
    val_perplexity: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    best_epoch: int = 0


def sequence_nll(policy: PolicyState, tokens, store=None):
    """Mean per-token negative log-likelihood (temperature 1)."""
    ids, lengths = pad(tokens)
    logits, _, _ = teacher_forced(policy, ids, store=store)
    logp = torch.log_softmax(logits, dim=-1).gather(-1, ids.unsqueeze(-1)).squeeze(-1)
    mask = (torch.arange(ids.shape[1]).expand_as(ids) < lengths.view(-1, 1)).to(DTYPE)
    return -(logp * mask).sum() / mask.sum()


def mle_pretrain(ds: Dataset, vocab: TokenVocabulary, epochs: int = 100, seed: int = 0,
                 lr: float = 2e-4, batch_size: int = 16, patience: int = 10,
                 val_fraction: float = 0.1, embed_dim: int = 64, hidden: int = 128,
                 weight_decay: float = 0.01) -> PretrainResult:
    """Teacher-forced next-token training with validation-perplexity early stopping.

    The parameters of the best validation epoch are kept, and the reference
    policy is snapshotted from them.
    """
    if not len(ds):
        raise ValueError("cannot pretrain on an empty dataset")
    records = [r.token_ids for r in serialize_dataset(ds, vocab)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_val = max(1, int(round(val_fraction * len(records)))) if len(records) > 1 else 0
    val = [records[i] for i in order[:n_val]]
    train = [records[i] for i in order[n_val:]] or val
    policy = new_policy(vocab, embed_dim=embed_dim, hidden=hidden, seed=seed)
    result = PretrainResult(policy)

    def val_ppl():
        with torch.no_grad():
            return math.exp(float(sequence_nll(policy, val))) if val else float("nan")

    best = val_ppl()
    best_theta = policy.theta.clone()
    since_best = 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), batch_size):
            batch = [train[i] for i in perm[start:start + batch_size]]
            loss = sequence_nll(policy, batch)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite MLE loss at epoch {epoch}", "mle_loss")
            neural.backward(neural.scalar_tape(loss, policy.theta))
            neural.adam_step(policy.theta, lr, weight_decay=weight_decay)
            losses.append(float(loss.detach()))
        ppl = val_ppl()
        result.train_loss.append(float(np.mean(losses)))
        result.val_perplexity.append(ppl)
        log.debug("mle epoch %d loss %.4f val ppl %.4f", epoch, result.train_loss[-1], ppl)
        if ppl < best:
            best, best_theta, since_best = ppl, policy.theta.clone(), 0
            result.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= patience:
                break
    policy.theta = best_theta
    policy.theta.exp_avg.clear()
    policy.theta.exp_avg_sq.clear()
    policy.theta.step = 0
    policy.snapshot_reference()
    return result
