"""Independent reference implementations used as test oracles.

These favour obviousness over speed: plain loops, direct formulas and the
standard library where possible, so they share no code with the package.
"""
import statistics

import numpy as np


def brute_zscore(x, threshold):
    mu = statistics.fmean(x)
    sd = statistics.pstdev(x)
    if sd == 0:
        return []
    return [i for i, v in enumerate(x) if abs(v - mu) / sd > threshold]


def brute_iqr(x, k):
    # statistics' "inclusive" method is the type-7 linear interpolation
    q1, _, q3 = statistics.quantiles(x, n=4, method="inclusive")
    iqr = q3 - q1
    if iqr == 0:
        return []
    return [i for i, v in enumerate(x) if v < q1 - k * iqr or v > q3 + k * iqr]


def pca_oracle(columns, k):
    Z = np.column_stack([(c - c.mean()) / c.std() for c in columns])
    _, _, vt = np.linalg.svd(Z, full_matrices=False)
    V = vt[:k].T
    err = ((Z - Z @ V @ V.T) ** 2).sum(axis=1)
    return (err - err.mean()) / err.std()


def sse(seg):
    seg = np.asarray(seg, dtype=float)
    return float(((seg - seg.mean()) ** 2).sum())


def split_scan(x, penalty, max_cp=10, min_size=2):
    """Greedy binary segmentation with every split cost computed directly."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if x.max() == x.min():
        return []

    def best(a, b):
        whole = sse(x[a:b])
        top_k, top_gain = -1, 0.0
        for k in range(a + min_size, b - min_size + 1):
            gain = whole - sse(x[a:k]) - sse(x[k:b])
            if top_k < 0 or gain > top_gain + 1e-9 * max(1.0, abs(top_gain)):
                top_k, top_gain = k, gain
        return top_k, top_gain

    candidates = {(0, n): best(0, n)}
    accepted = []
    while len(accepted) < max_cp:
        seg = max(candidates, key=lambda s: (candidates[s][1], -s[0]))
        k, gain = candidates.pop(seg)
        if k < 0 or gain <= penalty:
            break
        accepted.append(k)
        candidates[(seg[0], k)] = best(seg[0], k)
        candidates[(k, seg[1])] = best(k, seg[1])
    return sorted(accepted)


def auc(scores, positives):
    """Mann-Whitney AUC with ties counted as one half."""
    pos = [s for i, s in enumerate(scores) if i in positives]
    neg = [s for i, s in enumerate(scores) if i not in positives]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def cv(values):
    mu = statistics.fmean(values)
    return statistics.pstdev(values) / mu if mu else 0.0
