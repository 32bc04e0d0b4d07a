"""Audit metrics on hand-made inputs, plus an identity audit of the toy data."""

from rltab import pipeline
from rltab.evaluation import audit, faith_composite, hellinger, jsd, ks_statistic
from rltab.toy import load_toy

print("KS [1,2,3] vs [2,3,4]:", ks_statistic([1, 2, 3], [2, 3, 4]))
print("JSD (.5,.5) vs (.25,.75), bits:", round(jsd([0.5, 0.5], [0.25, 0.75]), 6))
print("Hellinger (.5,.5) vs (.25,.75):", round(hellinger([0.5, 0.5], [0.25, 0.75]), 5))
print("FAITH composite of (0.875, 0.9839, 0.2303, 0.992):",
      round(faith_composite({"fact": 0.875, "align": 0.9839, "integ": 0.2303, "track": 0.992}), 4))

prep = pipeline.prepare(load_toy(), 0.2, 0)
_, pcrit = pipeline.discover_pairs(prep, 0.3, 10)
report = audit(prep.train, prep.train, pcrit=pcrit)
f = report.faith
print(f"real vs copy: mean JSD {report.mean_jsd}, correlation fidelity {report.correlation_fidelity}, "
      f"S_Integ {f.integ}, S_Fact {f.fact}, S_Track {f.track}")
