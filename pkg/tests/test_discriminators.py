import math

import numpy as np
import pytest
import torch

from rltab.constraints import CriticalPairs
from rltab.data import CATEGORICAL, CONTINUOUS, MISSING
from rltab.discriminators import (
    FEAT,
    LEVELS,
    MALFORMED_SCORE,
    ROW,
    SENT,
    TOKEN,
    bce_level,
    discriminator_batch_loss,
    discriminator_loss,
    embed_sequence,
    embed_sequences,
    new_ensemble,
    pool_feature_embedding,
    score_record,
    score_records,
    train_discriminators,
)
from rltab.errors import VocabError
from rltab.policy import new_policy
from rltab.serializer import build_vocabulary, serialize, serialize_dataset

from .helpers import make_dataset


@pytest.fixture(scope="module")
def world():
    rng = np.random.default_rng(0)
    n = 200
    x = (rng.normal(size=n) * 3).round(2)
    ds = make_dataset({"x": x.tolist(), "z": (x + rng.normal(size=n)).round(2).tolist(),
                       "y": rng.choice(["a", "b"], size=n).tolist()},
                      {"x": CONTINUOUS, "z": CONTINUOUS, "y": CATEGORICAL}, "y")
    vocab = build_vocabulary(ds)
    policy = new_policy(vocab, embed_dim=8, hidden=8, seed=0)
    real = [list(s.token_ids) for s in serialize_dataset(ds, vocab)]
    return ds, vocab, policy, real


def _ensemble(vocab, pairs=((0, 1, 0.9),), **kw):
    pcrit = CriticalPairs(list(pairs), 0.3, 10)
    return new_ensemble(vocab, 8, pcrit, seed=0, embed_dim=16, rnn_hidden=16, head=(16, 16), **kw)


def _corrupt(seq, vocab, rng):
    seq = list(seq)
    i = int(rng.integers(2, seq.index(vocab.sep_id)))
    bad = [t for t in (vocab.point_id, vocab.minus_id, vocab.is_id, vocab.missing_id) if t != seq[i]]
    seq[i] = int(rng.choice(bad))
    return seq


def test_zero_initialized_scores_are_half(world):
    _, vocab, policy, real = world
    b = score_record(_ensemble(vocab), policy, real[0])
    assert set(b.token) == {0.5} and set(b.sent) == {0.5} and set(b.feat) == {0.5} and b.row == 0.5
    assert b.aggregated == {k: 0.5 for k in LEVELS}


def test_aggregates_are_means(world):
    _, vocab, policy, real = world
    ens = _ensemble(vocab)
    train_discriminators(ens, policy, real[:50], [_corrupt(s, vocab, np.random.default_rng(i))
                                                  for i, s in enumerate(real[50:100])], steps=3, lr=1e-2)
    for seq, b in zip(real[:5], score_records(ens, policy, real[:5])):
        assert b.aggregated[TOKEN] == float(np.mean(b.token))
        assert b.aggregated[SENT] == float(np.mean(b.sent))
        assert b.aggregated[FEAT] == float(np.mean(b.feat))
        assert b.aggregated[ROW] == b.row
        assert all(0 < s < 1 for s in b.token + b.sent + b.feat)
        assert len(b.token) == len(seq) and len(b.sent) == 3


def test_no_pairs_means_no_feature_level(world):
    _, vocab, policy, real = world
    b = score_record(_ensemble(vocab, pairs=()), policy, real[0])
    assert FEAT not in b.aggregated and b.feat == []


def test_missing_value_skips_pair(world):
    ds, vocab, policy, _ = world
    sr = serialize((MISSING, 1.0, "a"), vocab)
    b = score_record(_ensemble(vocab), policy, sr)
    assert FEAT not in b.aggregated


def test_malformed_records_get_token_scores_only(world):
    _, vocab, policy, real = world
    bad = _corrupt(real[0], vocab, np.random.default_rng(1))
    b = score_record(_ensemble(vocab), policy, bad)
    assert not b.well_formed and len(b.token) == len(bad)
    assert b.aggregated[SENT] == b.aggregated[ROW] == b.aggregated[FEAT] == MALFORMED_SCORE


def test_embed_shapes_and_determinism(world):
    _, vocab, policy, real = world
    H = embed_sequence(policy, real[3])
    assert H.shape == (len(real[3]), 8)
    assert torch.equal(H, embed_sequence(policy, real[3]))
    with pytest.raises(VocabError):
        embed_sequences(policy, [[len(vocab)]])


def test_embed_matches_restored_policy(world, tmp_path):
    from rltab.checkpoint import load_checkpoint, save_checkpoint
    _, vocab, policy, real = world
    save_checkpoint(tmp_path / "c.json", policy)
    restored, _, _ = load_checkpoint(tmp_path / "c.json")
    assert torch.equal(embed_sequence(policy, real[7]), embed_sequence(restored, real[7]))


def test_pool_examples(world):
    _, vocab, _, _ = world
    sr = serialize((1.25, 2.0, "b"), vocab)
    H = torch.tensor(np.random.default_rng(2).normal(size=(len(sr), 5)))
    span = sr.value_spans[0]
    brute = sum(H[i] for i in span) / len(span)
    assert torch.allclose(pool_feature_embedding(H, sr, 0), brute, atol=1e-12, rtol=0)
    label_span = sr.value_spans[2]
    assert torch.equal(pool_feature_embedding(H, sr, 2), H[label_span[0]])
    const = torch.ones(len(sr), 5) * 3
    assert torch.equal(pool_feature_embedding(const, sr, 1), torch.full((5,), 3.0))
    assert pool_feature_embedding(H, serialize((MISSING, 2.0, "b"), vocab), 0) is None


def test_bce_examples():
    assert bce_level([0.5], [0.5]).item() == pytest.approx(2 * math.log(2), abs=1e-15)
    assert bce_level([1 - 1e-7], [1e-7]).item() == pytest.approx(2e-7, rel=1e-3)
    assert math.isfinite(bce_level([0.0], [1.0]).item())


def test_weighted_sum_of_levels(world):
    _, vocab, _, _ = world
    ens = _ensemble(vocab)
    e = math.exp(-1.0)
    real = {k: torch.tensor([e], dtype=torch.float64) for k in LEVELS}
    syn = {k: torch.tensor([0.0], dtype=torch.float64) for k in LEVELS}
    total, per = discriminator_loss(ens, real, syn)
    assert all(v.item() == pytest.approx(1.0, abs=1e-6) for v in per.values())
    assert total.item() == pytest.approx(4.0, abs=1e-5)


def test_zero_steps_leave_ensemble_unchanged(world):
    _, vocab, policy, real = world
    ens = _ensemble(vocab)
    before = ens.store.clone()
    assert train_discriminators(ens, policy, real, real, steps=0) == []
    assert ens.store.equal(before)


def test_loss_trace_finite(world):
    _, vocab, policy, real = world
    ens = _ensemble(vocab)
    fake = [_corrupt(s, vocab, np.random.default_rng(i)) for i, s in enumerate(real)]
    trace = train_discriminators(ens, policy, real, fake, steps=5, lr=1e-3, batch_size=16)
    assert len(trace) == 5 and all(math.isfinite(v) for e in trace for v in e.values())


def test_small_step_reduces_batch_loss(world):
    from rltab import neural
    _, vocab, policy, real = world
    ens = _ensemble(vocab)
    fake = [_corrupt(s, vocab, np.random.default_rng(i)) for i, s in enumerate(real[:16])]
    train_discriminators(ens, policy, real[16:48], fake, steps=2, lr=1e-2, spectral=False)
    before, _ = discriminator_batch_loss(ens, policy, real[:16], fake)
    ens.store.zero_grad()
    neural.backward(neural.scalar_tape(before, ens.store))
    neural.adam_step(ens.store, 1e-4, weight_decay=0.0)
    after, _ = discriminator_batch_loss(ens, policy, real[:16], fake)
    assert after.item() < before.item()


def test_disabling_a_level_leaves_others_identical(world):
    _, vocab, policy, real = world
    full = _ensemble(vocab)
    fake = [_corrupt(s, vocab, np.random.default_rng(i)) for i, s in enumerate(real[:32])]
    train_discriminators(full, policy, real[32:64], fake, steps=2, lr=1e-2)
    partial = full.clone()
    partial.mu[SENT] = partial.lam[SENT] = 0.0
    a = score_records(full, policy, real[:4] + fake[:4])
    b = score_records(partial, policy, real[:4] + fake[:4])
    for x, y in zip(a, b):
        assert x.token == y.token and x.feat == y.feat and x.row == y.row
        assert SENT not in y.aggregated


def _separable(world, spectral):
    _, vocab, policy, real = world
    rng = np.random.default_rng(0)
    fake = [_corrupt(s, vocab, rng) for s in real]
    ens = _ensemble(vocab, pairs=(), mu={TOKEN: 1.0}, lam={TOKEN: 1.0})
    train_discriminators(ens, policy, real[:150], fake[:150], steps=200, lr=1e-3, batch_size=32,
                         seed=1, spectral=spectral)
    scores = [b.aggregated[TOKEN] for b in score_records(ens, policy, real[150:] + fake[150:])]
    truth = [True] * 50 + [False] * 50
    return np.mean([(s > 0.5) == t for s, t in zip(scores, truth)])


def test_separable_task_without_spectral_norm(world):
    assert _separable(world, spectral=False) >= 0.95


@pytest.mark.xfail(strict=True, reason="spectral normalization caps the logit scale of the token scorer")
def test_separable_task_with_spectral_norm(world):
    assert _separable(world, spectral=True) >= 0.95
