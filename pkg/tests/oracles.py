"""Slow, independent reference implementations used as test oracles."""
import itertools
import math

import numpy as np


def lloyd_bruteforce(data, init_rows, max_iter=100):
    """Plain-loop Lloyd's algorithm; returns (sse, labels, centroids)."""
    pts = [list(map(float, row)) for row in np.asarray(data)]
    cents = [list(map(float, pts[i])) for i in init_rows]
    d = len(pts[0])

    def dist(p, c):
        return math.fsum((p[i] - c[i]) ** 2 for i in range(d))

    def assign():
        out = []
        for p in pts:
            ds = [dist(p, c) for c in cents]
            out.append(min(range(len(cents)), key=lambda j: (ds[j], j)))
        return out

    def means(labels):
        for j in range(len(cents)):
            members = [p for p, lab in zip(pts, labels) if lab == j]
            if members:
                cents[j] = [math.fsum(col) / len(members) for col in zip(*members)]

    labels = assign()
    for _ in range(max_iter):
        means(labels)
        new = assign()
        for j in range(len(cents)):
            if j not in new:
                own = [dist(p, cents[lab]) for p, lab in zip(pts, new)]
                far = max(range(len(pts)), key=lambda i: (own[i], -i))
                cents[j] = list(pts[far])
                new[far] = j
        if new == labels:
            break
        labels = new
    means(labels)
    sse = math.fsum(dist(p, cents[lab]) for p, lab in zip(pts, labels))
    return sse, labels, cents


def chamfer_bruteforce(a, b, empty=math.sqrt(3.0)):
    """Halved symmetric mean nearest-neighbour distance by O(n*m) loops."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return empty

    def one_way(p, q):
        return math.fsum(min(math.dist(x, y) for y in q) for x in p) / len(p)

    return 0.5 * (one_way(a, b) + one_way(b, a))


def iou_counting(a, b):
    inter = union = 0
    for x, y in zip(np.asarray(a, bool).ravel(), np.asarray(b, bool).ravel()):
        inter += bool(x and y)
        union += bool(x or y)
    return 1.0 if union == 0 else inter / union


def best_permutation_cost(cost):
    """Cheapest injective map of columns into rows; rows >= columns."""
    n_rows, n_cols = len(cost), len(cost[0])
    return min(sum(cost[r][j] for j, r in enumerate(rows))
               for rows in itertools.permutations(range(n_rows), n_cols))
