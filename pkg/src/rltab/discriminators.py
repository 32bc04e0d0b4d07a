"""Four-level discriminator ensemble: token, clause, critical pair, record.

Every level maps its local inputs to probabilities of being real. Token and
clause scorers read token ids through their own embedding tables; the pair
and record scorers read the generator's hidden states, mean-pooled over value
spans (pairs) or over the whole record (row).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import neural
from .constraints import CriticalPairs
from .errors import VocabError
from .neural import DTYPE, ParamStore, ScorerSpec
from .policy import PolicyState, pad, teacher_forced
from .serializer import MalformedReport, SerializedRecord, TokenVocabulary, parse

TOKEN, SENT, FEAT, ROW = "token", "sent", "feat", "row"
LEVELS = (TOKEN, SENT, FEAT, ROW)

EPS_LOG = 1e-7
MALFORMED_SCORE = 1e-7


@dataclass
class DiscriminatorEnsemble:
    specs: dict                  # level -> ScorerSpec
    store: ParamStore
    pairs: list                  # critical (a, b) feature pairs
    mu: dict = field(default_factory=lambda: {k: 1.0 for k in LEVELS})
    lam: dict = field(default_factory=lambda: {k: 0.25 for k in LEVELS})

    def active(self, level: str) -> bool:
        if level == FEAT and not self.pairs:
            return False
        return self.mu.get(level, 0) > 0 or self.lam.get(level, 0) > 0

    def clone(self) -> "DiscriminatorEnsemble":
        return DiscriminatorEnsemble(self.specs, self.store.clone(), list(self.pairs),
                                     dict(self.mu), dict(self.lam))


def new_ensemble(vocab: TokenVocabulary, hidden_dim: int, pcrit: Optional[CriticalPairs] = None,
                 seed: int = 0, embed_dim: int = 64, rnn_hidden: int = 128, head=(64, 64),
                 mu=None, lam=None) -> DiscriminatorEnsemble:
    """``hidden_dim`` is the generator's hidden width (input of pair/row heads)."""
    v = len(vocab)
    specs = {
        TOKEN: ScorerSpec(neural.BIRNN, v, hidden=tuple(head), embed_dim=embed_dim,
                          rnn_hidden=rnn_hidden, prefix="tok.", embed_scale=1.0),
        SENT: ScorerSpec(neural.EMBEDDING_MLP, v, hidden=tuple(head), embed_dim=embed_dim,
                         prefix="sent.", embed_scale=1.0),
        FEAT: ScorerSpec(neural.MLP, 2 * hidden_dim, hidden=tuple(head), prefix="feat."),
        ROW: ScorerSpec(neural.MLP, hidden_dim, hidden=tuple(head), prefix="row."),
    }
    store = ParamStore()
    for i, level in enumerate(LEVELS):
        neural.init_params(specs[level], store, seed=seed + 101 * i)
    pairs = pcrit.index_pairs() if pcrit is not None else []
    ens = DiscriminatorEnsemble(specs, store, pairs)
    if mu is not None:
        ens.mu = {k: float(mu.get(k, 0.0)) for k in LEVELS}
    if lam is not None:
        ens.lam = {k: float(lam.get(k, 0.0)) for k in LEVELS}
    return ens


# -- embeddings --------------------------------------------------------------

def embed_sequences(policy: PolicyState, token_seqs: Sequence[Sequence[int]]):
    """Generator hidden states H (B, T, h) under teacher forcing, plus lengths."""
    ids, lengths = pad(token_seqs)
    if ids.numel() and (ids.min() < 0 or ids.max() >= len(policy.vocab)):
        raise VocabError("token id outside the vocabulary")
    with torch.no_grad():
        _, hidden, _ = teacher_forced(policy, ids)
    return hidden, lengths


def embed_sequence(policy: PolicyState, record) -> torch.Tensor:
    tokens = record.token_ids if isinstance(record, SerializedRecord) else record
    hidden, _ = embed_sequences(policy, [tokens])
    return hidden[0]


def pool_feature_embedding(H, record: SerializedRecord, feature: int) -> Optional[torch.Tensor]:
    """Mean of H over the value span of ``feature``; None for an empty span."""
    span = record.value_spans.get(feature, ())
    if not span:
        return None
    return H[list(span)].mean(dim=0)


# -- scoring -----------------------------------------------------------------

@dataclass
class ScoreBreakdown:
    token: list
    sent: list
    feat: list
    row: Optional[float]
    aggregated: dict
    well_formed: bool = True


def _clause_inputs(records: Sequence[SerializedRecord]):
    clauses = [list(r.token_ids[a:b]) for r in records for a, b in r.clause_boundaries]
    owner = [i for i, r in enumerate(records) for _ in r.clause_boundaries]
    return clauses, owner


def _pair_inputs(hidden, records: Sequence[Optional[SerializedRecord]], pairs):
    feats, owner = [], []
    for i, r in enumerate(records):
        if r is None:
            continue
        for a, b in pairs:
            ha = pool_feature_embedding(hidden[i], r, a)
            hb = pool_feature_embedding(hidden[i], r, b)
            if ha is None or hb is None:
                continue
            feats.append(torch.cat([ha, hb]))
            owner.append(i)
    return feats, owner


def _row_inputs(hidden, lengths):
    mask = (torch.arange(hidden.shape[1]).expand(hidden.shape[:2]) < lengths.view(-1, 1)).to(DTYPE)
    return (hidden * mask.unsqueeze(-1)).sum(1) / lengths.to(DTYPE).unsqueeze(-1)


def level_scores(ens: DiscriminatorEnsemble, level: str, token_seqs, parsed, hidden, lengths):
    """Differentiable local scores for one level.

    Returns ``(scores, owner)``: a 1-D tensor and, per score, the index of the
    record it belongs to. ``parsed[i]`` is a SerializedRecord or None.
    """
    spec = ens.specs[level]
    store = ens.store
    if level == TOKEN:
        ids, lens = pad(token_seqs)
        out = neural._forward_raw(spec, store, (ids, lens))
        mask = torch.arange(ids.shape[1]).expand_as(ids) < lens.view(-1, 1)
        owner = torch.arange(len(token_seqs)).view(-1, 1).expand_as(ids)[mask]
        return out[mask], owner.tolist()
    if level == SENT:
        records = [r for r in parsed if r is not None]
        index = [i for i, r in enumerate(parsed) if r is not None]
        clauses, local_owner = _clause_inputs(records)
        if not clauses:
            return torch.zeros(0, dtype=DTYPE), []
        ids, lens = pad(clauses)
        return neural._forward_raw(spec, store, (ids, lens)), [index[j] for j in local_owner]
    if level == FEAT:
        feats, owner = _pair_inputs(hidden, parsed, ens.pairs)
        if not feats:
            return torch.zeros(0, dtype=DTYPE), []
        return neural._forward_raw(spec, store, torch.stack(feats)), owner
    if level == ROW:
        index = [i for i, r in enumerate(parsed) if r is not None]
        if not index:
            return torch.zeros(0, dtype=DTYPE), []
        pooled = _row_inputs(hidden[index], lengths[index])
        return neural._forward_raw(spec, store, pooled), index
    raise ValueError(level)


def parse_all(token_seqs, vocab: TokenVocabulary) -> list:
    out = []
    for seq in token_seqs:
        p = parse(seq, vocab)
        out.append(None if isinstance(p, MalformedReport) else p[1])
    return out


def score_records(ens: DiscriminatorEnsemble, policy: PolicyState, token_seqs) -> list:
    """Per-record :class:`ScoreBreakdown` against a frozen ensemble.

    Malformed records get token scores only; their clause, pair and row levels
    are fixed at ``MALFORMED_SCORE``. A record without any scorable critical
    pair has no pair level in its aggregate.
    """
    token_seqs = [list(s) for s in token_seqs]
    n = len(token_seqs)
    if n == 0:
        return []
    parsed = parse_all(token_seqs, policy.vocab)
    hidden, lengths = embed_sequences(policy, token_seqs)
    local = {k: [[] for _ in range(n)] for k in LEVELS}
    with torch.no_grad():
        for level in LEVELS:
            if not ens.active(level):
                continue
            scores, owner = level_scores(ens, level, token_seqs, parsed, hidden, lengths)
            for s, i in zip(scores.tolist(), owner):
                local[level][i].append(s)
    out = []
    for i in range(n):
        ok = parsed[i] is not None
        agg = {}
        for level in LEVELS:
            if not ens.active(level):
                continue
            if level != TOKEN and not ok:
                agg[level] = MALFORMED_SCORE
            elif local[level][i]:
                agg[level] = float(np.mean(local[level][i]))
        row = local[ROW][i][0] if local[ROW][i] else None
        out.append(ScoreBreakdown(local[TOKEN][i], local[SENT][i], local[FEAT][i], row, agg, ok))
    return out


def score_record(ens, policy, record) -> ScoreBreakdown:
    tokens = record.token_ids if isinstance(record, SerializedRecord) else record
    return score_records(ens, policy, [tokens])[0]


# -- loss and training -------------------------------------------------------

def bce_level(real_scores, syn_scores) -> torch.Tensor:
    """-mean log D(real) - mean log(1 - D(synthetic)), clamped away from 0 and 1."""
    real = torch.as_tensor(real_scores, dtype=DTYPE).clamp(EPS_LOG, 1 - EPS_LOG)
    syn = torch.as_tensor(syn_scores, dtype=DTYPE).clamp(EPS_LOG, 1 - EPS_LOG)
    return -torch.log(real).mean() - torch.log(1 - syn).mean()


def discriminator_loss(ens: DiscriminatorEnsemble, real: dict, syn: dict):
    """Weighted sum of per-level BCE losses over levels present in both batches.

    ``real`` and ``syn`` map level name to score tensors.
    """
    per_level = {}
    total = torch.zeros((), dtype=DTYPE)
    for level in LEVELS:
        if level not in real or level not in syn:
            continue
        if len(real[level]) == 0 or len(syn[level]) == 0:
            continue
        loss = bce_level(real[level], syn[level])
        per_level[level] = loss
        total = total + ens.mu.get(level, 1.0) * loss
    return total, per_level


def _batch_scores(ens, policy, token_seqs, levels):
    parsed = parse_all(token_seqs, policy.vocab)
    hidden, lengths = embed_sequences(policy, token_seqs)
    out = {}
    for level in levels:
        scores, _ = level_scores(ens, level, token_seqs, parsed, hidden, lengths)
        out[level] = scores
    return out


def training_levels(ens: DiscriminatorEnsemble) -> list:
    return [k for k in LEVELS if ens.active(k) and ens.mu.get(k, 0) > 0]


def discriminator_batch_loss(ens, policy, real_seqs, syn_seqs):
    levels = training_levels(ens)
    real = _batch_scores(ens, policy, real_seqs, levels)
    syn = _batch_scores(ens, policy, syn_seqs, levels)
    return discriminator_loss(ens, real, syn)


def train_discriminators(ens: DiscriminatorEnsemble, policy: PolicyState, real_seqs, syn_seqs,
                         steps: int = 4, lr: float = 1e-4, batch_size: int = 64, seed: int = 0,
                         spectral: bool = True) -> list:
    """Adversarial updates on minibatches drawn from the two token corpora.

    Each step samples ``batch_size`` real and synthetic records, builds the
    per-granularity batches from them, takes one AdamW step on the weighted
    BCE and spectrally normalizes the weight matrices. Returns the loss trace
    as a list of ``{level: loss, "total": loss}`` dicts.
    """
    rng = np.random.default_rng(seed)
    trace = []
    if steps <= 0 or not real_seqs or not syn_seqs:
        return trace
    levels = training_levels(ens)
    matrices = [w for level in levels for w in neural.weight_matrices(ens.store, ens.specs[level].prefix)]
    for _ in range(steps):
        ri = rng.choice(len(real_seqs), size=min(batch_size, len(real_seqs)), replace=False)
        si = rng.choice(len(syn_seqs), size=min(batch_size, len(syn_seqs)), replace=False)
        total, per_level = discriminator_batch_loss(
            ens, policy, [list(real_seqs[i]) for i in ri], [list(syn_seqs[i]) for i in si])
        entry = {k: float(v.detach()) for k, v in per_level.items()}
        entry["total"] = float(total.detach())
        trace.append(entry)
        if not per_level:
            continue
        ens.store.zero_grad()
        neural.backward(neural.scalar_tape(total, ens.store))
        neural.adam_step(ens.store, lr)
        if spectral:
            for name in matrices:
                neural.spectral_normalize(ens.store, name)
    return trace
