"""Naive reference implementations used as independent test oracles.

Plain Python loops over floats; nothing here imports the code under test.
"""
import math


def naive_recon_loss(logits, targets, mask, label_smoothing=0.0):
    """Mean cross-entropy over masked positions of one sample (lists of lists)."""
    total, count = 0.0, 0
    for row, t, m in zip(logits, targets, mask):
        if not m:
            continue
        v = len(row)
        top = max(row)
        lse = top + math.log(sum(math.exp(x - top) for x in row))
        ce = 0.0
        for j, x in enumerate(row):
            q = label_smoothing / v + (1.0 - label_smoothing if j == t else 0.0)
            ce -= q * (x - lse)
        total += ce
        count += 1
    return total / count


def naive_neighbors(centroids, k_sel):
    """Exhaustive O(K^2) scan: per row, top-k_sel (sim desc, index asc), self excluded."""
    out = []
    for i, ci in enumerate(centroids):
        sims = []
        for j, cj in enumerate(centroids):
            if i != j:
                sims.append((-sum(a * b for a, b in zip(ci, cj)), j))
        sims.sort()
        out.append([(j, -s) for s, j in sims[:k_sel]])
    return out


def naive_contrast_loss(z, anchors, centroids, k_sel, tau, alpha):
    """Weighted multi-positive contrast over all tokens in ``z`` (one sample)."""
    nbrs = naive_neighbors(centroids, k_sel)
    total = 0.0
    for zi, a in zip(z, anchors):
        pos = [(a, 1.0)] + nbrs[a]
        wl = [s / tau for _, s in pos]
        m = max(wl)
        wz = sum(math.exp(x - m) for x in wl)
        weights = [math.exp(x - m) / wz for x in wl]
        logits = [sum(p * q for p, q in zip(zi, c)) / alpha for c in centroids]
        top = max(logits)
        lse = top + math.log(sum(math.exp(x - top) for x in logits))
        total -= sum(w * (logits[j] - lse) for w, (j, _) in zip(weights, pos))
    return total / len(z)


def brute_force_nearest(points, centroids):
    out = []
    for p in points:
        best, best_d = 0, None
        for k, c in enumerate(centroids):
            d = sum((a - b) ** 2 for a, b in zip(p, c))
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return out


def adamw_by_hand(p, g, lr, b1, b2, wd, eps=1e-8):
    """One AdamW step from zero state on a scalar."""
    p = p * (1 - lr * wd)
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    return p - lr * m_hat / (math.sqrt(v_hat) + eps)
