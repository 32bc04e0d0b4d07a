"""Compare MLE-only, full RL, alpha=0 and lambda=0 runs on the toy data.

Prints well-formedness, marginal fidelity, minority share and TSTR macro-F1
for each run. Takes three to four minutes on one core.
"""

import numpy as np

from rltab import pipeline
from rltab.data import census
from rltab.evaluation import marginal_divergences, tstr_f1
from rltab.rl import PpoConfig
from rltab.toy import load_toy


def summarize(name, policy, prep, minority):
    g = pipeline.generate(policy, 1000, seed=7, temperature=0.8)
    feats = marginal_divergences(prep.train, g.data)
    ks = np.mean([f.ks for f in feats if f.ks is not None])
    js = np.mean([f.jsd for f in feats])
    wf = pipeline.well_formed_rate(policy, 500, 1, 1.0)
    share = g.data.labels().count(minority) / len(g.data)
    f1 = tstr_f1(g.data, prep.holdout).mean
    print(f"{name:8s} wf {wf:.3f}  KS {ks:.4f}  JSD {js:.4f}  minority {share:.3f}  F1 {f1:.3f}  "
          f"composite {wf + 2 - ks - js:.3f}")


def main():
    prep = pipeline.prepare(load_toy(), 0.2, 0)
    _, pcrit = pipeline.discover_pairs(prep, 0.3, 10)
    counts = census(prep.train).counts
    minority = min(counts, key=counts.get)
    base = pipeline.pretrain(prep, seed=0).policy
    summarize("mle", base, prep, minority)
    off = {k: 0.0 for k in ("token", "sent", "feat", "row")}
    for name, cfg, lam in [("full", PpoConfig(), None), ("alpha=0", PpoConfig(alpha=0.0), None),
                           ("lambda=0", PpoConfig(), off)]:
        policy, _, _ = pipeline.rl_train(base, prep, pcrit, cfg, seed=0, lam=lam)
        summarize(name, policy, prep, minority)


if __name__ == "__main__":
    main()
