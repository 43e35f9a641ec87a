"""Slow, obviously-correct reference implementations used by the tests."""

import itertools

import numpy as np


def auroc_pairs(scores, labels):
    """Count every (positive, negative) pair; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def ap_curve(scores, labels):
    """Walk the ranked list (stable on ties) and integrate precision over
    each recall step."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for y in labels if y)
    if n_pos == 0:
        return None
    area, hits, prev_recall = 0.0, 0, 0.0
    for k, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            recall = hits / n_pos
            area += (recall - prev_recall) * (hits / k)
            prev_recall = recall
    return area


def samplewise(fn, vectors, answers):
    vals = []
    for v, a in zip(vectors, answers):
        if len(v) < 2:
            continue
        labels = [i == a for i in range(len(v))]
        vals.append(fn(list(v), labels))
    return float(np.mean(vals))


def best_affine_grid(scores, labels, grid):
    """Exhaustive search over per-class (alpha, beta) from ``grid`` maximising
    argmax accuracy. Returns the best accuracy."""
    s = np.asarray(scores)
    c = s.shape[1]
    best = 0.0
    for params in itertools.product(grid, repeat=c):
        beta = np.array(params)
        acc = np.mean(np.argmax(s + beta, axis=1) == labels)
        best = max(best, acc)
    return best
