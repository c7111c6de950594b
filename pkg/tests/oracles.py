"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports from the package's numeric code paths; every oracle is
written as plain Python loops over scalars.
"""
from __future__ import annotations

import math

import numpy as np


def scalar_iou(a, b):
    """IoU of centre-form tuples (cx, cy, w, h)."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_nms(items, thresh):
    """items: list of (box tuple, score, class). Returns kept indices.

    Visit in descending score (stable), keep a box unless some already-kept
    box of the same class overlaps it by more than ``thresh``.
    """
    order = sorted(range(len(items)), key=lambda i: -items[i][1])
    kept = []
    for i in order:
        box, _, cls = items[i]
        if all(items[k][2] != cls or scalar_iou(items[k][0], box) <= thresh for k in kept):
            kept.append(i)
    return kept


def brute_ue(u_correct, u_incorrect):
    """Exhaustive search over every interval of the threshold line.

    Returns (ue, lo, hi): the best error and the open interval (lo, hi) of the
    leftmost interval that attains it; any threshold inside it is optimal.
    """
    values = sorted(set(u_correct) | set(u_incorrect))
    edges = [-math.inf] + values + [math.inf]
    best = None
    for lo, hi in zip(edges[:-1], edges[1:]):
        # any delta in (lo, hi) classifies the data the same way; u > delta is rejected
        rej_c = sum(1 for u in u_correct if u > lo)
        ret_i = sum(1 for u in u_incorrect if u <= lo)
        ue = (rej_c / len(u_correct) + ret_i / len(u_incorrect)) / 2
        if best is None or ue < best[0]:
            best = (ue, lo, hi)
    return best


def pairwise_auc(in_scores, ood_scores):
    total = 0.0
    for o in ood_scores:
        for i in in_scores:
            total += 1.0 if o > i else 0.5 if o == i else 0.0
    return total / (len(in_scores) * len(ood_scores))


def hsic_cka(x, y):
    """Linear CKA through centred n x n Gram matrices."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    kx = h @ (x @ x.T) @ h
    ky = h @ (y @ y.T) @ h
    hsic = lambda a, b: float(np.sum(a * b))  # noqa: E731
    return hsic(kx, ky) / math.sqrt(hsic(kx, kx) * hsic(ky, ky))


def tandem_loop(alpha, beta, obj, noobj, eps, channels):
    """Mean-reduced aiding/quelling sums via a loop over every anchor index."""
    ta = tq = 0.0
    for c in channels:
        s_ta = n_ta = s_tq = n_tq = 0
        for idx in np.ndindex(*obj.shape):
            d = float(alpha[idx + (c,)]) - float(beta[idx + (c,)])
            if obj[idx]:
                s_ta += math.sqrt(d * d) / 2
                n_ta += 1
            if noobj[idx]:
                s_tq += 2 / math.sqrt(d * d + eps)
                n_tq += 1
        ta += s_ta / n_ta if n_ta else 0.0
        tq += s_tq / n_tq if n_tq else 0.0
    return ta, tq


def _bce(p, t):
    p = min(max(p, 1e-300), 1 - 1e-16)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def conventional_loop(pred, obj, box_t, cls_t, S, K, box_weight=5.0):
    """One image: box squared error in cell units on responsible anchors, BCE everywhere."""
    loss = 0.0
    for i in range(S):
        for j in range(S):
            for b in range(obj.shape[2]):
                p = pred[i, j, b]
                if obj[i, j, b]:
                    t = box_t[i, j, b]
                    err = (p[0] - t[0]) ** 2 + (p[1] - t[1]) ** 2
                    err += (S * (p[2] - t[2])) ** 2 + (S * (p[3] - t[3])) ** 2
                    loss += box_weight * err + _bce(p[4], 1.0)
                    for k in range(K):
                        loss += _bce(p[5 + k], 1.0 if k == cls_t[i, j, b] else 0.0)
                else:
                    loss += _bce(p[4], 0.0)
    return loss


def mse_loop(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)


def entropy(p):
    return -p * math.log(p) - (1 - p) * math.log(1 - p)


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


def max_relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)
