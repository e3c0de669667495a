"""Scalar-loop reference implementations used as test oracles.

Everything here is written with plain Python loops over rows and
coordinates, deliberately sharing no code with the package.
"""
import math


def dist(u, v):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))


def within(rows):
    n = len(rows)
    s = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            s += dist(rows[i], rows[j])
    return s / (n * n - n)


def cross(a, b):
    s = 0.0
    for u in a:
        for v in b:
            s += dist(u, v)
    return s / (len(a) * len(b))


def heterogeneity(rows, classes, domains, eps=1e-8):
    cells = {}
    for r, c, d in zip(rows, classes, domains):
        cells.setdefault((c, d), []).append(r)
    keys = sorted(cells)
    total = 0.0
    for i, (c1, d1) in enumerate(keys):
        for c2, d2 in keys[i + 1:]:
            if c1 != c2:
                continue
            a, b = cells[(c1, d1)], cells[(c2, d2)]
            wa = within(a) if len(a) > 1 else 0.0
            wb = within(b) if len(b) > 1 else 0.0
            total -= math.log(cross(a, b) / (wa + wb + eps))
    return total


def cov(rows):
    n, d = len(rows), len(rows[0])
    mean = [sum(r[k] for r in rows) / n for k in range(d)]
    out = [[0.0] * d for _ in range(d)]
    for r in rows:
        for p in range(d):
            for q in range(d):
                out[p][q] += (r[p] - mean[p]) * (r[q] - mean[q])
    return [[v / (n - 1) for v in row] for row in out]


def cov_gap(ca, cb):
    d = len(ca)
    s = 0.0
    for p in range(d):
        for q in range(d):
            s += (ca[p][q] - cb[p][q]) ** 2
    return s / (4 * d * d)


def mmd(a, b):
    return cov_gap(cov(a), cov(b))


def contrastive(rows, classes, domains, min_group=2, eps=1e-8):
    total = 0.0
    for e in sorted(set(domains)):
        for y in sorted(set(classes)):
            same = [r for r, c, d in zip(rows, classes, domains) if d == e and c == y]
            pos = [r for r, c, d in zip(rows, classes, domains) if d != e and c == y]
            neg = [r for r, c, d in zip(rows, classes, domains) if d == e and c != y]
            if min(len(same), len(pos), len(neg)) < min_group:
                continue
            total += math.log(1 + mmd(same, pos) / (mmd(same, neg) + eps))
    return total


def alignment(rows, domains, min_group=2):
    groups = {}
    for r, d in zip(rows, domains):
        groups.setdefault(d, []).append(r)
    ids = sorted(e for e, g in groups.items() if len(g) >= min_group)
    total = 0.0
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            total += mmd(groups[a], groups[b])
    return total


def cross_entropy(logits, labels):
    total = 0.0
    for z, y in zip(logits, labels):
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[y]
    return total / len(labels)


def ari(a, b):
    """Adjusted Rand index from the contingency table."""
    def comb2(n):
        return n * (n - 1) / 2
    n = len(a)
    table = {}
    for x, y in zip(a, b):
        table[(x, y)] = table.get((x, y), 0) + 1
    rows, cols = {}, {}
    for (x, y), v in table.items():
        rows[x] = rows.get(x, 0) + v
        cols[y] = cols.get(y, 0) + v
    index = sum(comb2(v) for v in table.values())
    sr = sum(comb2(v) for v in rows.values())
    sc = sum(comb2(v) for v in cols.values())
    expected = sr * sc / comb2(n)
    top = (sr + sc) / 2
    return 1.0 if top == expected else (index - expected) / (top - expected)
