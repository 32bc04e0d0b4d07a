"""Plain-Python reference implementations used as independent test oracles.

Written loop-by-loop from textbook definitions, sharing no code with the
package.
"""

import math


def pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def chi2_from_table(table):
    rows = [sum(r) for r in table]
    cols = [sum(table[i][j] for i in range(len(table))) for j in range(len(table[0]))]
    n = sum(rows)
    chi2 = 0.0
    for i in range(len(table)):
        for j in range(len(table[0])):
            e = rows[i] * cols[j] / n
            chi2 += (table[i][j] - e) ** 2 / e
    return chi2, n


def cramers_v_table(table):
    chi2, n = chi2_from_table(table)
    return math.sqrt(chi2 / (n * (min(len(table), len(table[0])) - 1)))


def cramers_v(x, y):
    xs, ys = sorted(set(x)), sorted(set(y))
    table = [[sum(1 for a, b in zip(x, y) if a == u and b == w) for w in ys] for u in xs]
    return cramers_v_table(table)


def correlation_ratio(cat, num):
    groups = {}
    for c, v in zip(cat, num):
        groups.setdefault(c, []).append(v)
    grand = sum(num) / len(num)
    between = sum(len(g) * (sum(g) / len(g) - grand) ** 2 for g in groups.values())
    total = sum((v - grand) ** 2 for v in num)
    return math.sqrt(between / total)


def ks(a, b):
    points = sorted(set(a) | set(b))
    best = 0.0
    for t in points:
        fa = sum(1 for v in a if v <= t) / len(a)
        fb = sum(1 for v in b if v <= t) / len(b)
        best = max(best, abs(fa - fb))
    return best


def kl_bits(p, q):
    return sum(pi * math.log2(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def jsd(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl_bits(p, m) + 0.5 * kl_bits(q, m)


def kl_smoothed(p, q, eps=1e-8):
    ps = [v + eps for v in p]
    qs = [v + eps for v in q]
    sp, sq = sum(ps), sum(qs)
    return sum((a / sp) * math.log((a / sp) / (b / sq)) for a, b in zip(ps, qs))


def hellinger(p, q):
    return math.sqrt(sum((math.sqrt(a) - math.sqrt(b)) ** 2 for a, b in zip(p, q)) / 2)
