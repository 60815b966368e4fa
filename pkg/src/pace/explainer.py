"""Per-class concept explainers trained against a frozen black-box.

Each class module owns a bias-free 1x1 encoder (D -> Q), a bias-free 1x1
transpose decoder (Q -> D) and a bank of C concept vectors in the Q-space.
A feature map is encoded, concept vectors replace embeddings at locations
where a concept is strongly present, the result is decoded and pushed
through the rest of the black-box. Concept relevance is the drop in the
class probability when the concept's locations are zeroed.

Internal arrays use (batch, H, W, C) for similarities; the public
:class:`SimilarityStack` exposes them as (..., C, H, W).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import blackbox as bb
from . import tensor as T
from .container import FormatError, Reader, Writer

log = logging.getLogger(__name__)

MAGIC = b"PACEEXP1"

# How the concatenated module probabilities P enter the cross-entropy:
#   binary      each p_k is scored as an independent Bernoulli against b(x)_k
#   normalized  P is divided by its sum, then categorical cross-entropy
#   plain       categorical cross-entropy on P as-is
CE_FORMS = ("binary", "normalized", "plain")


@dataclass
class Hyper:
    tau: float = 95.0  # presence threshold, percent of the per-concept maximum
    eps: float = 1e-6
    alpha: float = 1.0  # triplet margin
    beta: float = 100.0  # cross-entropy weight
    gamma: float = 10.0  # relevance weight
    delta: float = 1.0  # diversity weight (subtracted)
    omega: float = 1.0  # triplet weight
    rho: int = 5  # pure batches per mixed batch
    onehot_target: bool = False
    ce_form: str = "binary"

    def __post_init__(self):
        if not 0 < self.tau <= 100:
            raise ValueError("tau must lie in (0, 100]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if min(self.alpha, self.beta, self.gamma, self.delta, self.omega) < 0:
            raise ValueError("loss weights and margin must be non-negative")
        if self.rho < 1:
            raise ValueError("rho must be at least 1")
        if self.ce_form not in CE_FORMS:
            raise ValueError(f"ce_form must be one of {CE_FORMS}")

    def to_list(self) -> list[float]:
        return [self.tau, self.eps, self.alpha, self.beta, self.gamma, self.delta,
                self.omega, self.rho, float(self.onehot_target), float(CE_FORMS.index(self.ce_form))]

    @classmethod
    def from_list(cls, v) -> "Hyper":
        return cls(v[0], v[1], v[2], v[3], v[4], v[5], v[6], int(v[7]), bool(v[8]),
                   CE_FORMS[int(v[9])])


@dataclass
class ClassExplainer:
    encoder: T.LayerParams
    decoder: T.LayerParams
    concepts: np.ndarray  # (C, Q)

    def __post_init__(self):
        if self.encoder.kind != T.LayerKind.POINTWISE or \
                self.decoder.kind != T.LayerKind.POINTWISE_T:
            raise ValueError("encoder must be pointwise and decoder pointwise-transpose")
        q = self.encoder.hyper["out_ch"]
        if self.decoder.hyper["in_ch"] != q or self.concepts.ndim != 2 \
                or self.concepts.shape[1] != q:
            raise T.ShapeError("encoder, decoder and concept dimensions disagree")

    @property
    def num_concepts(self) -> int:
        return self.concepts.shape[0]


@dataclass
class ExplainerBank:
    modules: list[ClassExplainer]
    hyper: Hyper = field(default_factory=Hyper)

    @property
    def num_classes(self) -> int:
        return len(self.modules)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, m in enumerate(self.modules):
            out[f"{k}.enc"] = m.encoder.weights["w"]
            out[f"{k}.dec"] = m.decoder.weights["w"]
            out[f"{k}.concepts"] = m.concepts
        return out

    def predict(self, model: bb.BlackBox, fmaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Explainer labels and probabilities P for a batch of feature maps."""
        probs = explainer_probs(model, self, fmaps)
        return probs.argmax(axis=1), probs


@dataclass
class SimilarityStack:
    similarity: np.ndarray  # (..., C, H, W), strictly positive
    presence: np.ndarray  # (..., C, H, W) bool


@dataclass
class Explanation:
    predicted_label: int
    explainer_probs: np.ndarray
    black_box_probs: np.ndarray
    relevance: np.ndarray  # (C,) for the predicted class
    percentages: np.ndarray | None  # None when the relevance sum is not positive
    heatmaps: np.ndarray  # (C, h, w) similarity upsampled to image size
    presence: np.ndarray  # (C, H, W) bool at feature-map resolution
    presence_upsampled: np.ndarray  # (C, h, w) bool

    @property
    def degenerate(self) -> bool:
        return self.percentages is None


def init_bank(num_classes: int, fmap_channels: int, num_concepts: int = 4, embed_dim: int = 8,
              hyper: Hyper | None = None, rng: np.random.Generator | None = None) -> ExplainerBank:
    rng = rng if rng is not None else np.random.default_rng(0)
    modules = []
    for _ in range(num_classes):
        enc = T.pointwise(fmap_channels, embed_dim, rng=rng)
        dec = T.pointwise(embed_dim, fmap_channels, rng=rng, transpose=True)
        concepts = rng.normal(0.0, 0.1, size=(num_concepts, embed_dim))
        modules.append(ClassExplainer(enc, dec, concepts))
    return ExplainerBank(modules, hyper or Hyper())


# -- forward pieces --------------------------------------------------------

def encode(exp: ClassExplainer, fmap: np.ndarray) -> np.ndarray:
    return T.forward(exp.encoder, np.asarray(fmap, dtype=np.float64))


def decode(exp: ClassExplainer, emb: np.ndarray) -> np.ndarray:
    return T.forward(exp.decoder, emb)


def _distances(emb: np.ndarray, concepts: np.ndarray) -> np.ndarray:
    diff = emb[..., None, :] - concepts
    return np.sqrt(np.einsum("...q,...q->...", diff, diff))


def _similarity_last(emb, concepts, tau, eps):
    """Similarities and presence laid out (..., H, W, C)."""
    sim = 1.0 / (eps + _distances(emb, concepts))
    peak = sim.max(axis=(-3, -2), keepdims=True)
    return sim, sim >= (tau / 100.0) * peak


def similarity(exp: ClassExplainer, emb: np.ndarray, tau: float = 95.0,
               eps: float = 1e-6) -> SimilarityStack:
    sim, pres = _similarity_last(emb, exp.concepts, tau, eps)
    return SimilarityStack(np.moveaxis(sim, -1, -3), np.moveaxis(pres, -1, -3))


def _concept_map_last(emb, concepts, sim, pres):
    replace = pres.any(axis=-1)
    best = sim.argmax(axis=-1)
    out = np.where(replace[..., None], concepts[best], emb)
    return out, replace, best


def concept_map(exp: ClassExplainer, emb: np.ndarray, stack: SimilarityStack) -> np.ndarray:
    """Replace embeddings by their most similar concept wherever any concept is present."""
    sim = np.moveaxis(stack.similarity, -3, -1)
    pres = np.moveaxis(stack.presence, -3, -1)
    return _concept_map_last(emb, exp.concepts, sim, pres)[0]


def reconstruct_and_score(model: bb.BlackBox, exp: ClassExplainer, cmap: np.ndarray, k: int
                          ) -> tuple[np.ndarray, float | np.ndarray]:
    recon = decode(exp, cmap)
    probs = bb.resume_forward(model, recon)
    return recon, probs[..., k]


def relevance(model: bb.BlackBox, exp: ClassExplainer, cmap: np.ndarray,
              stack: SimilarityStack, k: int) -> np.ndarray:
    """Relevance of each concept for class ``k`` on a single concept map."""
    _, p = reconstruct_and_score(model, exp, cmap, k)
    pres = stack.presence
    masked = cmap[None] * (~pres)[..., None]
    _, pj = reconstruct_and_score(model, exp, masked, k)
    # a concept with no presence leaves the map untouched
    pj = np.where(pres.any(axis=(-2, -1)), pj, p)
    return p - pj


def _module_probs(model, exp, hyper, fmaps, k):
    emb = encode(exp, fmaps)
    sim, pres = _similarity_last(emb, exp.concepts, hyper.tau, hyper.eps)
    cmap = _concept_map_last(emb, exp.concepts, sim, pres)[0]
    return bb.resume_forward(model, decode(exp, cmap))[:, k]


def explainer_probs(model: bb.BlackBox, bank: ExplainerBank, fmaps: np.ndarray,
                    batch: int = 256) -> np.ndarray:
    """P: column k holds class-k probability from module k's reconstruction."""
    fmaps = np.asarray(fmaps, dtype=np.float64)
    out = np.empty((len(fmaps), bank.num_classes))
    for start in range(0, len(fmaps), batch):
        f = fmaps[start:start + batch]
        for k, exp in enumerate(bank.modules):
            out[start:start + batch, k] = _module_probs(model, exp, bank.hyper, f, k)
    return out


def upsample_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the trailing two axes with half-pixel centres."""
    def weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), lo] += 1 - frac
        m[np.arange(n_out), hi] += frac
        return m
    wh = weights(x.shape[-2], out_h)
    ww = weights(x.shape[-1], out_w)
    return np.einsum("ih,...hw,jw->...ij", wh, x, ww)


def upsample_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour block upsampling of a boolean mask."""
    fh, fw = out_h // mask.shape[-2], out_w // mask.shape[-1]
    return np.repeat(np.repeat(mask, fh, axis=-2), fw, axis=-1)


def explain(model: bb.BlackBox, bank: ExplainerBank, image: np.ndarray) -> Explanation:
    image = np.asarray(image, dtype=np.float64)
    fmap = bb.feature_map(model, image)
    probs = np.array([_module_probs(model, exp, bank.hyper, fmap[None], k)[0]
                      for k, exp in enumerate(bank.modules)])
    k = int(np.argmax(probs))
    exp = bank.modules[k]
    emb = encode(exp, fmap)
    stack = similarity(exp, emb, bank.hyper.tau, bank.hyper.eps)
    cmap = concept_map(exp, emb, stack)
    r = relevance(model, exp, cmap, stack, k)
    total = r.sum()
    pct = 100.0 * r / total if total > 1e-6 else None
    h, w = image.shape[:2]
    return Explanation(
        predicted_label=k,
        explainer_probs=probs,
        black_box_probs=bb.predict(model, image),
        relevance=r,
        percentages=pct,
        heatmaps=upsample_bilinear(stack.similarity, h, w),
        presence=stack.presence,
        presence_upsampled=upsample_mask(stack.presence, h, w),
    )


# -- losses ----------------------------------------------------------------

@dataclass
class Batch:
    fmaps: np.ndarray  # (B, H, W, D)
    targets: np.ndarray  # (B, K) black-box probabilities b(x)
    labels: np.ndarray  # (B,) black-box predicted labels

    @classmethod
    def from_images(cls, model: bb.BlackBox, images: np.ndarray) -> "Batch":
        fmaps = bb.feature_map(model, images)
        targets = bb.resume_forward(model, fmaps)
        return cls(fmaps, targets, targets.argmax(axis=1))


def _targets(batch: Batch, hyper: Hyper) -> np.ndarray:
    if hyper.onehot_target:
        return np.eye(batch.targets.shape[1])[batch.targets.argmax(axis=1)]
    return batch.targets


def loss_ce(P: np.ndarray, target: np.ndarray, form: str = "binary") -> float:
    """Cross-entropy of explainer probabilities against ``target``; batch mean for 2-d input.

    ``form`` is one of :data:`CE_FORMS`.
    """
    P = np.atleast_2d(P)
    target = np.atleast_2d(target)
    return _ce_and_grad(P, target, form)[0]


def loss_diversity(bank: ExplainerBank) -> float:
    total = 0.0
    for m in bank.modules:
        diff = m.concepts[:, None, :] - m.concepts[None, :, :]
        total += float(np.sum(diff * diff))
    return total


def _triplet(emb: np.ndarray, concepts: np.ndarray, sim: np.ndarray, alpha: float,
             need_grad: bool = False):
    """Semi-hard triplet loss on the most-similar embedding of each concept.

    ``emb`` is (n, H, W, Q) for images predicted as this class and ``sim``
    the matching (n, H, W, C) similarities.
    """
    n, h, w, q = emb.shape
    c = concepts.shape[0]
    grad = np.zeros_like(emb) if need_grad else None
    if n < 2 or c < 2:
        return 0.0, grad
    flat_emb = emb.reshape(n, h * w, q)
    loc = sim.reshape(n, h * w, c).argmax(axis=1)  # (n, C)
    vecs = flat_emb[np.arange(n)[:, None], loc].reshape(n * c, q)
    img = np.repeat(np.arange(n), c)
    con = np.tile(np.arange(c), n)
    diff = vecs[:, None, :] - vecs[None, :, :]
    d2 = np.einsum("abq,abq->ab", diff, diff)
    neg = con[:, None] != con[None, :]
    a_idx, p_idx = np.nonzero((con[:, None] == con[None, :]) & (img[:, None] != img[None, :]))
    dap = d2[a_idx, p_idx]
    dan = d2[a_idx]  # (pairs, n*C)
    nmask = neg[a_idx]
    semi = nmask & (dan > dap[:, None]) & (dan < dap[:, None] + alpha)
    has_semi = semi.any(axis=1)
    pick_semi = np.where(semi, dan, np.inf).argmin(axis=1)
    pick_hard = np.where(nmask, dan, np.inf).argmin(axis=1)
    n_idx = np.where(has_semi, pick_semi, pick_hard)
    terms = dap - d2[a_idx, n_idx] + alpha
    active = terms > 0
    loss = float(np.sum(terms[active]))
    if need_grad and active.any():
        a, p, m = a_idx[active], p_idx[active], n_idx[active]
        dv = np.zeros_like(vecs)
        np.add.at(dv, a, 2.0 * (vecs[m] - vecs[p]))
        np.add.at(dv, p, 2.0 * (vecs[p] - vecs[a]))
        np.add.at(dv, m, 2.0 * (vecs[a] - vecs[m]))
        gflat = grad.reshape(n, h * w, q)
        np.add.at(gflat, (img, loc.reshape(-1)), dv)
    return loss, grad


def loss_triplet(bank: ExplainerBank, emb: np.ndarray, k: int) -> float:
    """Triplet loss of class ``k`` over the embeddings of images predicted as ``k``."""
    exp = bank.modules[k]
    sim, _ = _similarity_last(emb, exp.concepts, bank.hyper.tau, bank.hyper.eps)
    return _triplet(emb, exp.concepts, sim, bank.hyper.alpha)[0]


def _relevance_probs(model, exp, fmaps, hyper, k):
    emb = encode(exp, fmaps)
    sim, pres = _similarity_last(emb, exp.concepts, hyper.tau, hyper.eps)
    cmap = _concept_map_last(emb, exp.concepts, sim, pres)[0]
    p = bb.resume_forward(model, decode(exp, cmap))[:, k]
    masked = cmap[:, None] * np.moveaxis(~pres, -1, 1)[..., None]
    n, c = masked.shape[:2]
    pj = bb.resume_forward(model, decode(exp, masked.reshape((n * c,) + cmap.shape[1:])))
    return p, pj[:, k].reshape(n, c)


def loss_relevance(model: bb.BlackBox, bank: ExplainerBank, batch: Batch) -> float:
    """Mean over the batch of sum_j (r^j - p)^2, using each image's predicted-class module."""
    total = 0.0
    for k, exp in enumerate(bank.modules):
        idx = np.flatnonzero(batch.labels == k)
        if idx.size == 0:
            continue
        p, pj = _relevance_probs(model, exp, batch.fmaps[idx], bank.hyper, k)
        r = p[:, None] - pj
        total += float(np.sum((r - p[:, None]) ** 2))
    return total / len(batch.labels)


def loss_triplet_batch(bank: ExplainerBank, batch: Batch) -> float:
    total = 0.0
    for k, exp in enumerate(bank.modules):
        idx = np.flatnonzero(batch.labels == k)
        if idx.size:
            total += loss_triplet(bank, encode(exp, batch.fmaps[idx]), k)
    return total


def loss_ce_batch(model: bb.BlackBox, bank: ExplainerBank, batch: Batch) -> float:
    P = explainer_probs(model, bank, batch.fmaps)
    return loss_ce(P, _targets(batch, bank.hyper), bank.hyper.ce_form)


def combine(hyper: Hyper, l_c: float, l_r: float, l_d: float, l_t: float) -> float:
    return hyper.beta * l_c + hyper.gamma * l_r - hyper.delta * l_d + hyper.omega * l_t


def total_loss(model: bb.BlackBox, bank: ExplainerBank, batch: Batch) -> float:
    return objective(model, bank, batch, need_grad=False)[0]


def objective(model: bb.BlackBox, bank: ExplainerBank, batch: Batch, need_grad: bool = True):
    """Weighted objective, its four terms and (optionally) gradients for ``bank.params()``.

    Presence masks and argmax selections are held fixed when differentiating.
    """
    hp = bank.hyper
    fmaps = batch.fmaps
    b, h, w, d = fmaps.shape
    target = _targets(batch, hp)
    terms = {"ce": 0.0, "relevance": 0.0, "diversity": 0.0, "triplet": 0.0}
    grads: dict[str, np.ndarray] = {}
    cache = []
    P = np.empty((b, bank.num_classes))
    for k, exp in enumerate(bank.modules):
        we, wd, cv = exp.encoder.weights["w"], exp.decoder.weights["w"], exp.concepts
        c, q = cv.shape
        emb = fmaps @ we
        sim, pres = _similarity_last(emb, cv, hp.tau, hp.eps)
        cmap, replace, best = _concept_map_last(emb, cv, sim, pres)
        ridx = np.flatnonzero(batch.labels == k)
        nr = ridx.size
        keep = np.moveaxis(~pres[ridx], -1, 1)[..., None]  # (nr, C, H, W, 1)
        masked = cmap[ridx][:, None] * keep
        maps = np.concatenate([cmap, masked.reshape(nr * c, h, w, q)])
        recon = maps @ wd
        tape = T.GradientTape() if need_grad else None
        probs = bb.resume_forward(model, recon, tape)
        P[:, k] = probs[:b, k]
        pj = probs[b:, k].reshape(nr, c)
        u = (P[ridx, k, None] - pj) - P[ridx, k, None]
        terms["relevance"] += float(np.sum(u * u) / b)
        diff = cv[:, None, :] - cv[None, :, :]
        terms["diversity"] += float(np.sum(diff * diff))
        l_t, demb_t = _triplet(emb[ridx], cv, sim[ridx], hp.alpha, need_grad)
        terms["triplet"] += l_t
        cache.append((emb, replace, best, ridx, keep, maps, recon, tape, probs, u, demb_t))
    terms["ce"], g_ce = _ce_and_grad(P, target, hp.ce_form)
    total = combine(hp, terms["ce"], terms["relevance"], terms["diversity"], terms["triplet"])
    if not need_grad:
        return total, terms, grads
    for k, exp in enumerate(bank.modules):
        emb, replace, best, ridx, keep, maps, recon, tape, probs, u, demb_t = cache[k]
        wd, cv = exp.decoder.weights["w"], exp.concepts
        c, q = cv.shape
        nr = ridx.size
        gout = np.zeros_like(probs)
        gout[:b, k] = hp.beta * g_ce[:, k]
        du = hp.gamma * 2.0 * u / b  # d/du of gamma * u^2 / b
        # u = (p - pj) - p: the two p contributions cancel, only pj gets gradient
        gout[b:, k] = -du.reshape(-1)
        grecon = bb.resume_backward(model, recon, gout, tape)
        grads[f"{k}.dec"] = maps.reshape(-1, q).T @ grecon.reshape(-1, d)
        gmaps = grecon @ wd.T
        gcmap = gmaps[:b].copy()
        gmasked = gmaps[b:].reshape(nr, c, h, w, q) * keep
        gcmap[ridx] += gmasked.sum(axis=1)
        gemb = gcmap * (~replace)[..., None]
        gcv = np.zeros_like(cv)
        np.add.at(gcv, best[replace], gcmap[replace])
        gcv -= hp.delta * 4.0 * (c * cv - cv.sum(axis=0))
        if demb_t is not None:
            gemb[ridx] += hp.omega * demb_t
        grads[f"{k}.enc"] = fmaps.reshape(-1, d).T @ gemb.reshape(-1, q)
        grads[f"{k}.concepts"] = gcv
    return total, terms, grads


def _ce_and_grad(P: np.ndarray, target: np.ndarray, form: str):
    """Batch-mean cross-entropy of P against ``target`` and its gradient w.r.t. P."""
    b = P.shape[0]
    if form == "binary":
        # a module probability can round to exactly 1.0; keep log1p(-P) finite
        P = np.minimum(P, 1.0 - 2.0 ** -53)
        loss = float(-np.sum(target * np.log(P) + (1 - target) * np.log1p(-P)) / b)
        grad = (-target / P + (1 - target) / (1 - P)) / b
    elif form == "normalized":
        s = P.sum(axis=1, keepdims=True)
        loss = float(-np.sum(target * np.log(P / s)) / b)
        grad = (target.sum(axis=1, keepdims=True) / s - target / P) / b
    else:
        loss = float(-np.sum(target * np.log(P)) / b)
        grad = -target / (P * b)
    return loss, grad


# -- training --------------------------------------------------------------

@dataclass
class ExplainerConfig:
    num_concepts: int = 4
    embed_dim: int = 8
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    seed: int = 0
    hyper: Hyper = field(default_factory=Hyper)


def batch_schedule(rho: int, n_iters: int) -> list[str]:
    """'P' for pure, 'M' for mixed: rho pure batches then one mixed, repeating."""
    return ["M" if t % (rho + 1) == rho else "P" for t in range(n_iters)]


def _dominant_term(terms: dict, hyper: Hyper) -> str:
    weights = {"ce": hyper.beta, "relevance": hyper.gamma, "diversity": hyper.delta,
               "triplet": hyper.omega}
    bad = [t for t, v in terms.items() if not np.isfinite(v)]
    if bad:
        return bad[0]
    return max(terms, key=lambda t: abs(weights[t] * terms[t]))


def train_explainer(model: bb.BlackBox, images: np.ndarray, cfg: ExplainerConfig,
                    fmaps: np.ndarray | None = None) -> tuple[ExplainerBank, list[dict]]:
    """Fit one module per class; returns the bank and a per-epoch loss log."""
    if fmaps is None and len(images) == 0:
        raise ValueError("empty training set")
    if fmaps is None:
        fmaps = np.concatenate([bb.feature_map(model, images[i:i + 256])
                                for i in range(0, len(images), 256)])
    targets = bb.resume_forward(model, fmaps)
    labels = targets.argmax(axis=1)
    n, _, _, d = fmaps.shape
    k_classes = model.num_classes
    init_seq, order_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    bank = init_bank(k_classes, d, cfg.num_concepts, cfg.embed_dim, cfg.hyper,
                     np.random.default_rng(init_seq))
    rng = np.random.default_rng(order_seq)
    pools = [np.flatnonzero(labels == k) for k in range(k_classes)]
    live = [k for k in range(k_classes) if pools[k].size]
    opt = T.Adam(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    params = bank.params()
    iters_per_epoch = -(-n // cfg.batch_size)
    history = []
    step = 0
    pure_count = 0
    for epoch in range(cfg.epochs):
        sums = {"ce": 0.0, "relevance": 0.0, "diversity": 0.0, "triplet": 0.0, "total": 0.0}
        for _ in range(iters_per_epoch):
            if step % (cfg.hyper.rho + 1) == cfg.hyper.rho:
                idx = rng.choice(n, cfg.batch_size, replace=n < cfg.batch_size)
            else:
                pool = pools[live[pure_count % len(live)]]
                pure_count += 1
                idx = rng.choice(pool, cfg.batch_size, replace=pool.size < cfg.batch_size)
            batch = Batch(fmaps[idx], targets[idx], labels[idx])
            try:
                total, terms, grads = objective(model, bank, batch)
            except (T.NumericError, FloatingPointError) as exc:
                raise T.DivergenceError(f"explainer training diverged at step {step}: {exc}",
                                        step) from exc
            if not np.isfinite(total) or not all(np.isfinite(g).all() for g in grads.values()):
                term = _dominant_term(terms, cfg.hyper)
                raise T.DivergenceError(f"non-finite loss at step {step} (term: {term})",
                                        step, term)
            opt.step(params, grads)
            for key, v in terms.items():
                sums[key] += v
            sums["total"] += total
            step += 1
        entry = {"epoch": epoch, **{key: v / iters_per_epoch for key, v in sums.items()}}
        log.info("explainer epoch %d total %.4f ce %.4f rel %.4f div %.4f trip %.4f", epoch,
                 entry["total"], entry["ce"], entry["relevance"], entry["diversity"],
                 entry["triplet"])
        history.append(entry)
    return bank, history


# -- persistence -----------------------------------------------------------

def save_checkpoint(bank: ExplainerBank) -> bytes:
    w = Writer(MAGIC)
    w.f64s(bank.hyper.to_list())
    w.u32(bank.num_classes)
    for m in bank.modules:
        w.tensor(m.encoder.weights["w"])
        w.tensor(m.decoder.weights["w"])
        w.tensor(m.concepts)
    return w.getvalue()


def load_checkpoint(data: bytes) -> ExplainerBank:
    r = Reader(data, MAGIC)
    values = r.f64s()
    if len(values) != 10:
        raise FormatError("unexpected hyperparameter block")
    try:
        hyper = Hyper.from_list(values)
    except (IndexError, ValueError) as exc:
        raise FormatError(f"invalid hyperparameters: {exc}") from exc
    modules = []
    for _ in range(r.u32()):
        we, wd, cv = r.tensor(), r.tensor(), r.tensor()
        if we.ndim != 2 or wd.ndim != 2:
            raise FormatError("encoder/decoder weights must be matrices")
        enc = T.LayerParams(T.LayerKind.POINTWISE, {"w": we},
                            {"in_ch": we.shape[0], "out_ch": we.shape[1]})
        dec = T.LayerParams(T.LayerKind.POINTWISE_T, {"w": wd},
                            {"in_ch": wd.shape[0], "out_ch": wd.shape[1]})
        modules.append(ClassExplainer(enc, dec, cv))
    r.done()
    return ExplainerBank(modules, hyper)
