"""Reward composition, inverse-frequency shaping and the PPO update loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import neural
from .data import ClassCensus
from .discriminators import LEVELS, TOKEN, DiscriminatorEnsemble, ScoreBreakdown, score_records, train_discriminators
from .errors import NonFiniteError
from .neural import DTYPE
from .policy import PolicyState, Rollout, pad, sample_batch, teacher_forced, values_of, _scaled_log_softmax

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    clip: float = 0.2
    beta: float = 0.1
    value_coef: float = 0.5
    alpha: float = 1.0
    policy_lr: float = 2e-4
    value_lr: float = 1e-3
    minibatch_size: int = 64
    epochs: int = 4
    rollouts_per_epoch: int = 256
    update_passes: int = 4
    temperature: float = 1.0
    disc_steps: int = 4
    disc_batch_size: int = 64
    disc_lr: float = 1e-4
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.beta < 0 or self.value_coef < 0 or self.alpha < 0:
            raise ValueError("beta, value_coef and alpha must be non-negative")


# -- rewards -----------------------------------------------------------------

def raw_reward(breakdown, lam: dict) -> float:
    """Σ λ_k D_k(S) with λ renormalized over the levels present for this record."""
    scores = breakdown.aggregated if isinstance(breakdown, ScoreBreakdown) else breakdown
    weights = {k: lam.get(k, 0.0) for k in scores}
    total = sum(weights.values())
    if total <= 0:
        return 0.0
    return sum(weights[k] / total * scores[k] for k in scores)


def level_contributions(breakdown, lam: dict) -> dict:
    scores = breakdown.aggregated if isinstance(breakdown, ScoreBreakdown) else breakdown
    total = sum(lam.get(k, 0.0) for k in scores)
    if total <= 0:
        return {k: 0.0 for k in scores}
    return {k: lam.get(k, 0.0) / total * scores[k] for k in scores}


def ifrs_weight(census: ClassCensus, y, alpha: float) -> float:
    """1 + α·max(0, ln(N_total / (N_y·|Y|))); unknown or absent labels weigh 1."""
    if y is None:
        return 1.0
    n_y = census.count(y)
    if n_y <= 0:
        return 1.0
    return 1.0 + alpha * max(0.0, math.log(census.total / (n_y * census.n_classes)))


def shaped_reward(r_raw: float, weight: float) -> float:
    return weight * r_raw


@dataclass
class RewardRecord:
    raw: float
    weight: float
    total: float
    contributions: dict = field(default_factory=dict)


def reward_records(breakdowns, labels, census, lam, alpha) -> list:
    out = []
    for b, y in zip(breakdowns, labels):
        raw = raw_reward(b, lam)
        w = ifrs_weight(census, y, alpha)
        out.append(RewardRecord(raw, w, shaped_reward(raw, w), level_contributions(b, lam)))
    return out


def advantages(rollout: Rollout, r_total: float):
    """Terminal reward broadcast as the return at every step; Â = Ĝ - V."""
    returns = np.full(len(rollout.tokens), float(r_total))
    return returns - np.asarray(rollout.values, dtype=float), returns


# -- PPO objective -----------------------------------------------------------

def clip_contribution(ratio, adv, eps):
    """min(r·Â, clip(r, 1-ε, 1+ε)·Â), elementwise."""
    ratio = torch.as_tensor(ratio, dtype=DTYPE)
    adv = torch.as_tensor(adv, dtype=DTYPE)
    return torch.minimum(ratio * adv, ratio.clamp(1 - eps, 1 + eps) * adv)


@dataclass
class PpoBatch:
    tokens: list
    old_log_probs: torch.Tensor   # (B, T)
    adv: torch.Tensor             # (B, T)
    returns: torch.Tensor         # (B, T)
    mask: torch.Tensor            # (B, T) bool
    temperature: float = 1.0


def make_batch(rollouts: Sequence[Rollout], r_totals: Sequence[float]) -> PpoBatch:
    tokens = [list(r.tokens) for r in rollouts]
    ids, lengths = pad(tokens)
    b, t = ids.shape
    old = torch.zeros(b, t, dtype=DTYPE)
    adv = torch.zeros(b, t, dtype=DTYPE)
    ret = torch.zeros(b, t, dtype=DTYPE)
    for i, (r, g) in enumerate(zip(rollouts, r_totals)):
        n = len(r.tokens)
        a, returns = advantages(r, g)
        old[i, :n] = torch.from_numpy(np.asarray(r.log_probs, dtype=float))
        adv[i, :n] = torch.from_numpy(a)
        ret[i, :n] = torch.from_numpy(returns)
    mask = torch.arange(t).expand(b, t) < lengths.view(-1, 1)
    temp = rollouts[0].temperature if rollouts else 1.0
    return PpoBatch(tokens, old, adv, ret, mask, temp)


def ppo_loss(batch: PpoBatch, policy: PolicyState, config: PpoConfig):
    """Clipped surrogate minus KL and value penalties, averaged per token.

    Returns ``(objective, components)`` where objective is a differentiable
    scalar to be maximized and components holds the clip, kl and value terms
    plus the per-step ratios.
    """
    ids, _ = pad(batch.tokens)
    logits, _, prefix = teacher_forced(policy, ids)
    steps = [_scaled_log_softmax(logits[:, s].contiguous(), batch.temperature) for s in range(ids.shape[1])]
    logp = torch.stack(steps, 1).gather(-1, ids.unsqueeze(-1)).squeeze(-1)
    m = batch.mask.to(DTYPE)
    n = m.sum()
    ratio = torch.exp((logp - batch.old_log_probs) * m)
    clip_term = (clip_contribution(ratio, batch.adv, config.clip) * m).sum() / n

    with torch.no_grad():
        ref_logits, _, _ = teacher_forced(policy, ids, store=policy.ref)
    lp = torch.log_softmax(logits, dim=-1)
    lq = torch.log_softmax(ref_logits, dim=-1)
    kl = (lp.exp() * (lp - lq)).sum(-1)
    kl_term = (kl * m).sum() / n

    values = values_of(policy, prefix)
    value_term = (((values - batch.returns) ** 2) * m).sum() / n

    objective = clip_term - config.beta * kl_term - config.value_coef * value_term
    components = {"clip": clip_term, "kl": kl_term, "value": value_term}
    for name, v in components.items():
        if not torch.isfinite(v):
            raise NonFiniteError(f"non-finite PPO {name} term", name)
    components["ratio"] = ratio.detach()
    return objective, components


def ppo_update(policy: PolicyState, rollouts, r_totals, config: PpoConfig, rng) -> dict:
    """Several passes of minibatch ascent on the PPO objective."""
    n = len(rollouts)
    stats = {"clip": [], "kl": [], "value": [], "clip_frac": []}
    for _ in range(config.update_passes):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            batch = make_batch([rollouts[i] for i in idx], [r_totals[i] for i in idx])
            objective, comp = ppo_loss(batch, policy, config)
            policy.theta.zero_grad()
            policy.phi.zero_grad()
            neural.backward(neural.scalar_tape(-objective, policy.theta, policy.phi))
            neural.adam_step(policy.theta, config.policy_lr, weight_decay=config.weight_decay)
            neural.adam_step(policy.phi, config.value_lr, weight_decay=config.weight_decay)
            for k in ("clip", "kl", "value"):
                stats[k].append(float(comp[k].detach()))
            r = comp["ratio"][batch.mask]
            stats["clip_frac"].append(float(((r - 1).abs() > config.clip).to(DTYPE).mean()))
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}


# -- training loop -----------------------------------------------------------

class TrainingAborted(NonFiniteError):
    def __init__(self, message, name=None, last_good=None, log=None):
        super().__init__(message, name)
        self.last_good = last_good
        self.log = log or []


def _epoch_seed(seed: int, epoch: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, salt]).generate_state(1)[0])


def train(policy: PolicyState, ens: DiscriminatorEnsemble, real_seqs: Sequence[Sequence[int]],
          census: ClassCensus, config: PpoConfig, seed: int = 0,
          on_epoch: Optional[Callable] = None):
    """Alternate discriminator and PPO policy updates for ``config.epochs`` epochs.

    ``real_seqs`` are the serialized training records. Returns
    ``(policy, run_log)`` with one dict per epoch. ``on_epoch(epoch, policy,
    ens, record)`` is called after each epoch (checkpointing hook). On a
    non-finite value a :class:`TrainingAborted` carrying the last good policy
    is raised.
    """
    run_log = []
    rng = np.random.default_rng(seed)
    last_good = policy.clone()
    for epoch in range(1, config.epochs + 1):
        try:
            rollouts = sample_batch(policy, config.rollouts_per_epoch, _epoch_seed(seed, epoch, 0),
                                    temperature=config.temperature)
            syn_seqs = [r.tokens for r in rollouts]
            trace = train_discriminators(ens, policy, real_seqs, syn_seqs, steps=config.disc_steps,
                                         lr=config.disc_lr, batch_size=config.disc_batch_size,
                                         seed=_epoch_seed(seed, epoch, 1))
            breakdowns = score_records(ens, policy, syn_seqs)
            labels = [r.label for r in rollouts]
            rewards = reward_records(breakdowns, labels, census, ens.lam, config.alpha)
            totals = [r.total for r in rewards]
            stats = ppo_update(policy, rollouts, totals, config, rng)
        except NonFiniteError as exc:
            raise TrainingAborted(str(exc), exc.name, last_good, run_log) from exc
        well_formed = [b.well_formed for b in breakdowns]
        tok = [b.aggregated.get(TOKEN) for b in breakdowns if TOKEN in b.aggregated]
        record = {
            "epoch": epoch,
            "mean_R_raw": float(np.mean([r.raw for r in rewards])),
            "mean_W": float(np.mean([r.weight for r in rewards])),
            "mean_R_total": float(np.mean(totals)),
            "kl": stats["kl"],
            "L_disc": {k: float(np.mean([t[k] for t in trace if k in t])) for k in LEVELS
                       if any(k in t for t in trace)},
            "ppo": {"clip": stats["clip"], "kl": stats["kl"], "value": stats["value"],
                    "clip_frac": stats["clip_frac"]},
            "well_formed": float(np.mean(well_formed)),
            "mean_D_token": float(np.mean(tok)) if tok else None,
            "label_counts": {str(y): labels.count(y) for y in sorted(set(map(str, labels)))},
            "decomposition_ok": all(abs(r.total / r.weight - r.raw) <= 1e-12 for r in rewards),
        }
        run_log.append(record)
        log.info("epoch %d R_raw %.4f R_total %.4f kl %.4f well-formed %.3f", epoch,
                 record["mean_R_raw"], record["mean_R_total"], record["kl"], record["well_formed"])
        last_good = policy.clone()
        if on_epoch is not None:
            on_epoch(epoch, policy, ens, record)
    return policy, run_log
