"""Slow, literal reference implementations used as test oracles."""

import math


def ranks_by_counting(v):
    # rank of x = (# strictly smaller) + (# equal + 1) / 2
    return [sum(u < x for u in v) + (sum(u == x for u in v) + 1) / 2 for x in v]


def pearson_loops(a, b):
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def spearman_oracle(y, yhat):
    return pearson_loops(ranks_by_counting(list(y)), ranks_by_counting(list(yhat)))


def pr_by_enumeration(scores, labels, th):
    """(precision or None, recall, n_served) from literal indicator sums."""
    served = 0
    hits = 0
    positives = 0
    for k in scores:
        above = 1 if scores[k] > th else 0
        good = 1 if labels[k] else 0
        served += above
        hits += good * above
        positives += good
    return (hits / served if served else None), (hits / positives if positives else 0.0), served


def pr_curve_by_enumeration(scores, labels):
    thresholds = sorted(set(scores.values()), reverse=True)
    thresholds.append(math.nextafter(thresholds[-1], -math.inf))
    return [(th,) + pr_by_enumeration(scores, labels, th) for th in thresholds]
