"""End-to-end stages shared by the command line and the demos."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rl
from .constraints import CriticalPairs, discover
from .data import Dataset, census, destandardize, load_csv, split, standardize
from .discriminators import new_ensemble
from .policy import PolicyState, mle_pretrain, sample_batch
from .serializer import MalformedReport, TokenVocabulary, build_vocabulary, parse, serialize_dataset
from .toy import load_toy

log = logging.getLogger(__name__)

RETRY_FACTOR = 10


@dataclass
class Prepared:
    """Raw data, its stratified split and the standardized training view."""

    full: Dataset
    train: Dataset          # original units
    holdout: Dataset        # original units
    train_std: Dataset
    vocab: TokenVocabulary


def prepare(data: Dataset, holdout_fraction: float, seed: int) -> Prepared:
    train, holdout = split(data, holdout_fraction, seed)
    train_std = standardize(train)
    return Prepared(data, train, holdout, train_std, build_vocabulary(train_std))


def load_input(path=None, schema=None) -> Dataset:
    return load_toy() if path is None else load_csv(path, schema)


def pretrain(prep: Prepared, seed: int, epochs: int = 100, lr: float = 2e-4, batch_size: int = 16,
             patience: int = 10, val_fraction: float = 0.1, embed_dim: int = 64, hidden: int = 128):
    return mle_pretrain(prep.train_std, prep.vocab, epochs=epochs, seed=seed, lr=lr,
                        batch_size=batch_size, patience=patience, val_fraction=val_fraction,
                        embed_dim=embed_dim, hidden=hidden)


def rl_train(policy: PolicyState, prep: Prepared, pcrit: Optional[CriticalPairs], config: rl.PpoConfig,
             seed: int, lam: Optional[dict] = None, mu: Optional[dict] = None, ensemble=None,
             on_epoch=None, disc_kwargs: Optional[dict] = None):
    """Run the adversarial PPO phase on a copy of ``policy``."""
    policy = policy.clone()
    ens = ensemble if ensemble is not None else new_ensemble(
        prep.vocab, policy.spec.rnn_hidden, pcrit, seed=seed, mu=mu, lam=lam, **(disc_kwargs or {}))
    real_seqs = [sr.token_ids for sr in serialize_dataset(prep.train_std, prep.vocab)]
    policy, run_log = rl.train(policy, ens, real_seqs, census(prep.train_std), config, seed=seed,
                               on_epoch=on_epoch)
    return policy, ens, run_log


@dataclass
class GenerationResult:
    data: Dataset           # original units, rounded to each feature's decimals
    attempts: int
    malformed: int
    complete: bool

    @property
    def malformed_rate(self) -> float:
        return self.malformed / self.attempts if self.attempts else 0.0

    def summary(self) -> dict:
        return {"requested": None, "written": len(self.data), "attempts": self.attempts,
                "malformed": self.malformed, "malformed_rate": self.malformed_rate,
                "complete": self.complete}


def generate(policy: PolicyState, count: int, seed: int, temperature: float = 0.8,
             retry_factor: int = RETRY_FACTOR, batch_size: int = 256) -> GenerationResult:
    """Sample until ``count`` well-formed rows are collected or the retry cap is hit.

    The cap bounds total sampled rollouts at ``retry_factor * count``.
    """
    vocab = policy.vocab
    rows, attempts, malformed, draw = [], 0, 0, 0
    cap = retry_factor * count
    while len(rows) < count and attempts < cap:
        n = min(batch_size, cap - attempts)
        stream = int(np.random.SeedSequence([seed, draw]).generate_state(1)[0])
        for r in sample_batch(policy, n, stream, temperature=temperature):
            attempts += 1
            out = parse(r.tokens, vocab)
            if isinstance(out, MalformedReport):
                malformed += 1
            elif len(rows) < count:
                rows.append(out[0])
        draw += 1
    std = Dataset(vocab.schema, rows, vocab.label_index, standardized=True)
    return GenerationResult(destandardize(std, round_values=True), attempts, malformed, len(rows) == count)


def well_formed_rate(policy: PolicyState, n: int, seed: int, temperature: float) -> float:
    from .serializer import is_well_formed
    rs = sample_batch(policy, n, seed, temperature=temperature)
    return float(np.mean([is_well_formed(r.tokens, policy.vocab) for r in rs])) if rs else 0.0


def discover_pairs(prep: Prepared, delta_thresh: float, k: int):
    return discover(prep.train, delta_thresh, k)
