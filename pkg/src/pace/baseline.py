"""PCA + K-means concept baseline.

Per class, PCA is fitted on every spatial feature vector of the images the
black-box assigns to that class, and K-means centroids in the reduced space
act as that class's concepts. Prediction replaces every location's
projection with its nearest centroid, maps back to feature space and reads
the class probability from the rest of the black-box.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import blackbox as bb
from .container import FormatError, Reader, Writer

log = logging.getLogger(__name__)

MAGIC = b"PACEPCA1"


@dataclass
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (Q, D), orthonormal rows
    explained_variance: np.ndarray  # (Q,)
    rank_deficient: bool = False

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return z @ self.components + self.mean


@dataclass
class BaselineBank:
    pca: list[PcaModel | None]
    centroids: list[np.ndarray | None]  # (C, Q) per class
    omitted: list[int] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.pca)

    def predict(self, model: bb.BlackBox, fmaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        probs = np.zeros((len(fmaps), self.num_classes))
        for k in range(self.num_classes):
            if self.pca[k] is None:
                continue
            probs[:, k] = bb.resume_forward(model, reconstruct(self, k, fmaps))[:, k]
        return probs.argmax(axis=1), probs


def fit_pca(vectors: np.ndarray, q: int) -> PcaModel:
    """Top-``q`` principal directions via SVD of the centred data.

    Each component's largest-magnitude entry is made positive. When the data
    has rank below ``q`` the missing components are zero rows.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n, d = x.shape
    if n <= q:
        raise ValueError(f"need more than {q} samples, got {n}")
    if q > d:
        raise ValueError(f"cannot keep {q} components of {d}-dimensional data")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s ** 2 / (n - 1)
    tol = s[0] * max(n, d) * np.finfo(float).eps if s.size and s[0] > 0 else 0.0
    rank = int(np.sum(s > tol))
    comps = vt[:q].copy()
    var = var[:q].copy()
    if rank < q:
        comps[rank:] = 0.0
        var[rank:] = 0.0
    for row in comps[:rank]:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return PcaModel(mean, comps, var, rank < q)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("ncq,ncq->nc", diff, diff)


def fit_kmeans(points: np.ndarray, c: int, seed: int = 0, max_iter: int = 100
               ) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm from k-means++ seeding; returns centroids and the inertia log.

    The log holds the inertia after every assignment step. An empty cluster is
    reseeded at the point farthest from its current centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < c:
        raise ValueError(f"need at least {c} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((c, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1])[:, 0]
    for i in range(1, c):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[i:i + 1])[:, 0])
    inertia = []
    assign = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new_assign = d2.argmin(axis=1)
        inertia.append(float(d2[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        point_d2 = d2[np.arange(n), assign]
        for j in range(c):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(point_d2))
                centroids[j] = x[far]
                point_d2[far] = 0.0
    return centroids, inertia


def nearest_centroid(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return centroids[_sq_dists(z, centroids).argmin(axis=1)]


def reconstruct(bank: BaselineBank, k: int, fmaps: np.ndarray) -> np.ndarray:
    pca, cents = bank.pca[k], bank.centroids[k]
    flat = fmaps.reshape(-1, fmaps.shape[-1])
    z = nearest_centroid(pca.transform(flat), cents)
    return pca.inverse_transform(z).reshape(fmaps.shape)


def fit_baseline(model: bb.BlackBox, images: np.ndarray | None, c: int, q: int, seed: int = 0,
                 fmaps: np.ndarray | None = None) -> BaselineBank:
    if fmaps is None:
        fmaps = np.concatenate([bb.feature_map(model, images[i:i + 256])
                                for i in range(0, len(images), 256)])
    labels = bb.resume_forward(model, fmaps).argmax(axis=1)
    seeds = np.random.SeedSequence(seed).generate_state(model.num_classes)
    pcas, cents, omitted = [], [], []
    for k in range(model.num_classes):
        sel = fmaps[labels == k]
        if len(sel) == 0:
            log.warning("no training images predicted as class %d; module omitted", k)
            pcas.append(None)
            cents.append(None)
            omitted.append(k)
            continue
        vecs = sel.reshape(-1, sel.shape[-1])
        pca = fit_pca(vecs, q)
        centroids, _ = fit_kmeans(pca.transform(vecs), c, int(seeds[k]))
        pcas.append(pca)
        cents.append(centroids)
    return BaselineBank(pcas, cents, omitted)


def baseline_predict(model: bb.BlackBox, bank: BaselineBank, image: np.ndarray
                     ) -> tuple[int, np.ndarray]:
    fmap = bb.feature_map(model, image)[None]
    labels, probs = bank.predict(model, fmap)
    return int(labels[0]), probs[0]


def save_checkpoint(bank: BaselineBank) -> bytes:
    w = Writer(MAGIC)
    w.u32(bank.num_classes)
    for pca, cents in zip(bank.pca, bank.centroids):
        if pca is None:
            w.u32(0)
            continue
        w.u32(1)
        w.u32(int(pca.rank_deficient))
        w.tensor(pca.mean)
        w.tensor(pca.components)
        w.tensor(pca.explained_variance)
        w.tensor(cents)
    return w.getvalue()


def load_checkpoint(data: bytes) -> BaselineBank:
    r = Reader(data, MAGIC)
    pcas, cents, omitted = [], [], []
    for k in range(r.u32()):
        flag = r.u32()
        if flag == 0:
            pcas.append(None)
            cents.append(None)
            omitted.append(k)
            continue
        if flag != 1:
            raise FormatError(f"bad module flag {flag}")
        deficient = bool(r.u32())
        mean, comps, var, c = r.tensor(), r.tensor(), r.tensor(), r.tensor()
        pcas.append(PcaModel(mean, comps, var, deficient))
        cents.append(c)
    r.done()
    return BaselineBank(pcas, cents, omitted)
