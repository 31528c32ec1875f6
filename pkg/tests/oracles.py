"""Plain-loop reference implementations, written independently of the package."""
import math


def recall(flags, n):
    return sum(1 for f in flags if any(f[:n])) / len(flags)


def map_at(flags, n):
    total = 0.0
    for f in flags:
        hits, s = 0, 0.0
        for k in range(n):
            if f[k]:
                hits += 1
                s += hits / (k + 1)
        total += s / n
    return total / len(flags)


def ap(dists, labels):
    """Sweep every distinct threshold; integrate precision over recall increments."""
    n_pos = sum(labels)
    if n_pos == 0:
        return 0.0
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(dists)):
        tp = sum(1 for d, y in zip(dists, labels) if d <= t and y)
        fp = sum(1 for d, y in zip(dists, labels) if d <= t and not y)
        r = tp / n_pos
        area += (r - prev_recall) * (tp / (tp + fp))
        prev_recall = r
    return area


def bins(u, m):
    order = sorted(range(len(u)), key=lambda i: (u[i], i))
    n = len(u)
    size, extra = n // m, n % m
    out, pos = [], 0
    for b in range(m):
        s = size + (1 if b < extra else 0)
        out.append(order[pos:pos + s])
        pos += s
    return out


def metric(flags, dists, name):
    if name == "ap":
        return ap(dists, [f[0] for f in flags])
    kind, n = name.split("@")
    return recall(flags, int(n)) if kind == "r" else map_at(flags, int(n))


def ece(flags, dists, u, name, m):
    groups = bins(u, m)
    means = [sum(u[i] for i in g) / len(g) for g in groups]
    top = max(means)
    total = 0.0
    for g, mu in zip(groups, means):
        level = mu / top if top > 0 else 1.0
        v = metric([flags[i] for i in g], [dists[i] for i in g], name)
        total += len(g) * abs(v - (1.0 - level))
    return total / len(u)


def removal(flags, u, frac):
    n = len(u)
    order = sorted(range(n), key=lambda i: (u[i], i))
    keep = order[: n - int(math.floor(frac * n + 1e-9))]
    return sum(1 for i in keep if flags[i][0]) / len(keep)


def quantile_sorted(vals, q):
    h = q * (len(vals) - 1)
    lo = int(math.floor(h))
    hi = min(lo + 1, len(vals) - 1)
    return vals[lo] + (h - lo) * (vals[hi] - vals[lo])


def hs(pixels, levels=256):
    vals = sorted(pixels)
    return (quantile_sorted(vals, 0.75) - quantile_sorted(vals, 0.25)) / (levels - 1)


def l2_topk(db, q, k):
    d = [(math.sqrt(sum((a - b) ** 2 for a, b in zip(row, q))), i) for i, row in enumerate(db)]
    d.sort()
    return [i for _, i in d[:k]], [x for x, _ in d[:k]]


def mls_topk(db_m, db_v, q_m, q_v, k):
    scored = []
    for i, (m, v) in enumerate(zip(db_m, db_v)):
        s = 0.0
        for a, va, b, vb in zip(q_m, q_v, m, v):
            t = va + vb
            s += (a - b) ** 2 / t + math.log(t)
        scored.append((-0.5 * s, i))
    scored.sort(key=lambda x: (-x[0], x[1]))
    return [i for _, i in scored[:k]], [s for s, _ in scored[:k]]


def euclid(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def violating(kind, means, geo, r_pos, r_neg, margins):
    """Every geometrically valid tuple with strictly positive loss, by nested loops."""
    n = len(geo)
    g = [[euclid(geo[i], geo[j]) for j in range(n)] for i in range(n)]
    e = [[euclid(means[i], means[j]) for j in range(n)] for i in range(n)]
    pos = [[j for j in range(n) if j != i and g[i][j] <= r_pos] for i in range(n)]
    neg = [[j for j in range(n) if g[i][j] > r_neg] for i in range(n)]
    out = set()
    for a in range(n):
        if not pos[a]:
            continue
        if kind == "doublet":
            out.update((a, p, 1) for p in pos[a] if e[a][p] ** 2 > 1e-9)
            out.update((a, q, 0) for q in neg[a] if margins[0] - e[a][q] ** 2 > 1e-9)
            continue
        for p in pos[a]:
            for n1 in neg[a]:
                h1 = max(e[a][p] - e[a][n1] + margins[0], 0.0)
                if kind == "triplet":
                    if h1 > 1e-9:
                        out.add((a, p, n1))
                    continue
                for n2 in neg[a]:
                    if g[p][n2] <= r_neg or g[n1][n2] <= r_neg:
                        continue
                    if h1 + max(e[a][p] - e[a][n2] + margins[1], 0.0) > 1e-9:
                        out.add((a, p, n1, n2))
    return out
