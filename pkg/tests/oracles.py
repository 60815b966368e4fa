"""Slow, loop-based reference implementations used as test oracles.

None of these share code with the package beyond plain numpy.
"""
import numpy as np


def conv2d_loops(x, w, b, stride=1):
    """Same-padded cross-correlation over (N, H, W, Cin) with (k, k, Cin, Cout) kernels."""
    n, h, wd, cin = x.shape
    k = w.shape[0]
    pad = k // 2
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oh, ow, w.shape[3]))
    for i in range(n):
        for r in range(oh):
            for c in range(ow):
                for o in range(w.shape[3]):
                    acc = b[o]
                    for dy in range(k):
                        for dx in range(k):
                            for ci in range(cin):
                                acc += xp[i, r * stride + dy, c * stride + dx, ci] * w[dy, dx, ci, o]
                    out[i, r, c, o] = acc
    return out


def maxpool_loops(x, size=2):
    n, h, w, c = x.shape
    out = np.zeros((n, h // size, w // size, c))
    for i in range(n):
        for r in range(h // size):
            for s in range(w // size):
                for ch in range(c):
                    out[i, r, s, ch] = max(x[i, r * size + a, s * size + e, ch]
                                           for a in range(size) for e in range(size))
    return out


def similarity_loops(emb, concepts, eps):
    """(H, W, Q) embedding map -> (C, H, W) inverse-distance similarities."""
    h, w, _ = emb.shape
    out = np.zeros((len(concepts), h, w))
    for j, c in enumerate(concepts):
        for r in range(h):
            for s in range(w):
                out[j, r, s] = 1.0 / (eps + np.sqrt(sum((emb[r, s] - c) ** 2)))
    return out


def presence_loops(sim, tau):
    c, h, w = sim.shape
    out = np.zeros((c, h, w), dtype=bool)
    for j in range(c):
        peak = max(sim[j, r, s] for r in range(h) for s in range(w))
        for r in range(h):
            for s in range(w):
                out[j, r, s] = sim[j, r, s] >= tau / 100.0 * peak
    return out


def concept_map_loops(emb, concepts, sim, pres):
    out = emb.copy()
    c, h, w = sim.shape
    for r in range(h):
        for s in range(w):
            if not any(pres[j, r, s] for j in range(c)):
                continue
            best = 0
            for j in range(1, c):
                if sim[j, r, s] > sim[best, r, s]:
                    best = j
            out[r, s] = concepts[best]
    return out


def diversity_loops(concept_sets):
    total = 0.0
    for cs in concept_sets:
        for a in cs:
            for b in cs:
                total += float(np.sum((a - b) ** 2))
    return total


def triplet_loops(emb, concepts, eps, alpha):
    """Exhaustive semi-hard triplet loss for one class.

    emb is (n, H, W, Q). The anchor for (image i, concept j) is the embedding
    of image i closest to concept j (first in row-major order on ties).
    """
    n = emb.shape[0]
    c = len(concepts)
    picks = {}
    for i in range(n):
        for j in range(c):
            sim = similarity_loops(emb[i], concepts[j:j + 1], eps)[0]
            flat = sim.reshape(-1)
            best = 0
            for t in range(1, flat.size):
                if flat[t] > flat[best]:
                    best = t
            picks[i, j] = emb[i].reshape(-1, emb.shape[-1])[best]
    total = 0.0
    for i in range(n):
        for j in range(c):
            a = picks[i, j]
            for i2 in range(n):
                if i2 == i:
                    continue
                p = picks[i2, j]
                dap = float(np.sum((a - p) ** 2))
                negs = [float(np.sum((a - picks[i3, j3]) ** 2))
                        for i3 in range(n) for j3 in range(c) if j3 != j]
                if not negs:
                    continue
                semi = [d for d in negs if dap < d < dap + alpha]
                dan = min(semi) if semi else min(negs)
                total += max(0.0, dap - dan + alpha)
    return total


def pca_error_eigh(x, q):
    """Squared reconstruction error of the best rank-q affine approximation via eigh."""
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:q]]
    recon = xc @ top @ top.T + mean
    return float(np.sum((x - recon) ** 2))


def kmeans_inertia(points, centroids):
    total = 0.0
    for p in points:
        total += min(float(np.sum((p - c) ** 2)) for c in centroids)
    return total
