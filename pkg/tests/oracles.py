"""Independent reference computations used by the test suite.

Nothing here imports the code under test's algorithms; each function is a
deliberately naive reimplementation.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np


def central_difference(f, arrays, h=1e-4):
    """Numerical gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def jacobi_eigh(A, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns (values, vectors)."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                V = V @ J
    return np.diag(A).copy(), V


def scalar_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p


def brute_n_core(rows, n):
    """rows: list of (user, item). Alternate user and item filters until nothing changes."""
    rows = list(rows)
    while True:
        uc = Counter(u for u, _ in rows)
        ic = Counter(i for _, i in rows)
        bad_u = {u for u, c in uc.items() if c < n}
        bad_i = {i for i, c in ic.items() if c < n}
        if not bad_u and not bad_i:
            return rows
        rows = [(u, i) for u, i in rows if u not in bad_u]
        ic = Counter(i for _, i in rows)
        rows = [(u, i) for u, i in rows if ic[i] >= n]


def brute_metrics(ranked_lists, truths, k):
    hr = nd = 0.0
    for ranked, gt in zip(ranked_lists, truths):
        top = list(ranked)[:k]
        if gt in top:
            pos = top.index(gt)
            hr += 1
            nd += 1 / math.log2(pos + 2)
    n = len(truths)
    return hr / n, nd / n


def brute_rank(scores, candidates, k):
    """Sort candidates by (-score, index) with plain Python sorting."""
    pairs = sorted(((-float(scores[i]), int(i)) for i in candidates))
    return [i for _, i in pairs[:k]]
