"""Independent scalar-loop reference implementations used to check the
vectorized code paths. These deliberately avoid torch and any shared code
with the package: plain Python loops over numpy scalars."""

import math

import numpy as np


def mean_distance(part, negatives):
    """Mean of -cosine(part, neg), one negative at a time."""
    part = np.asarray(part, dtype=np.float64)
    total = 0.0
    for neg in np.asarray(negatives, dtype=np.float64):
        num = sum(float(a) * float(b) for a, b in zip(part, neg))
        na = math.sqrt(sum(float(a) ** 2 for a in part))
        nb = math.sqrt(sum(float(b) ** 2 for b in neg))
        total += -num / (na * nb)
    return total / len(negatives)


def argmax_part(parts, negatives):
    """Exhaustive argmax of mean_distance; first index wins ties."""
    best_i, best_d = 0, -np.inf
    for i, p in enumerate(parts):
        d = mean_distance(p, negatives)
        if d > best_d:
            best_i, best_d = i, d
    return best_i


def gap(feature_map):
    """Spatial mean by explicit per-position accumulation; map is (D, H, W)."""
    m = np.asarray(feature_map, dtype=np.float64)
    d, h, w = m.shape
    out = np.zeros(d)
    for i in range(h):
        for j in range(w):
            out += m[:, i, j]
    return out / (h * w)


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def classify(features, W, b):
    """Per-image argmax of softmax(W z + b); first index wins ties."""
    labels, probs = [], []
    for z in np.asarray(features, dtype=np.float64):
        logits = [sum(float(wk) * float(zk) for wk, zk in zip(row, z)) + float(bk)
                  for row, bk in zip(W, b)]
        p = softmax(logits)
        k = 0
        for i in range(1, len(p)):
            if p[i] > p[k]:
                k = i
        labels.append(k)
        probs.append(float(p[k]))
    return np.asarray(labels), np.asarray(probs)


def top_retrieval(pseudo, probs, class_k, n_a):
    """Full sort of the class-k candidates by (-prob, index)."""
    cand = [(-float(probs[i]), i) for i in range(len(pseudo)) if pseudo[i] == class_k]
    cand.sort()
    return [i for _, i in cand[:n_a]]


def attention_scores(feature_map, W, b):
    """(H, W, C) class scores by an explicit double loop over locations."""
    m = np.asarray(feature_map, dtype=np.float64)
    d, h, w = m.shape
    way = len(b)
    out = np.zeros((h, w, way))
    for i in range(h):
        for j in range(w):
            for k in range(way):
                out[i, j, k] = sum(
                    float(W[k][c]) * float(m[c, i, j]) for c in range(d)
                ) + float(b[k])
    return out


def location_softmax(scores):
    """Per-location softmax across classes."""
    s = np.asarray(scores, dtype=np.float64)
    h, w, c = s.shape
    out = np.zeros_like(s)
    for i in range(h):
        for j in range(w):
            out[i, j] = softmax(s[i, j])
    return out


def weighted_pool(feature_map, alpha):
    """Sum alpha[i,j] * M[:, i, j] / sum alpha, scalar loop."""
    m = np.asarray(feature_map, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    d, h, w = m.shape
    num = np.zeros(d)
    den = 0.0
    for i in range(h):
        for j in range(w):
            num += a[i, j] * m[:, i, j]
            den += a[i, j]
    return num / den


def info_nce(s_pos, s_negs, tau):
    """-log(exp(s_pos/tau) / (exp(s_pos/tau) + sum exp(s_neg/tau)))."""
    num = math.exp(s_pos / tau)
    den = num + sum(math.exp(s / tau) for s in s_negs)
    return -math.log(num / den)


def confidence_interval(values):
    """Textbook mean and 1.96 * sample std / sqrt(n)."""
    vals = [float(v) for v in values]
    n = len(vals)
    mean = sum(vals) / n
    var = sum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, 1.96 * math.sqrt(var) / math.sqrt(n)


def central_difference_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return grad
