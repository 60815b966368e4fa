"""Agreement accuracy, concept-localization IoU proxy and misclassification digests."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import blackbox as bb
from . import explainer as X

IMAGE_SIZE = 32


@dataclass
class AgreementReport:
    n_test: int
    n_agree: int
    accuracy: float  # percent
    per_class: dict[int, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


@dataclass
class ConceptLocalization:
    class_index: int
    concept: int
    best_part: int | None
    mean_iou: float
    relevance_rank: int
    null_p95: float
    null_mean: float
    exceeds_null: bool


@dataclass
class LocalizationReport:
    concepts: list[ConceptLocalization]
    permutations: int
    note: str = ("localization IoU against synthetic part masks is a programmatic proxy "
                 "for human interpretability, not a measure of it")

    @property
    def fraction_exceeding(self) -> float:
        if not self.concepts:
            return 0.0
        return float(np.mean([c.exceeds_null for c in self.concepts]))

    def to_dict(self) -> dict:
        return {"note": self.note, "permutations": self.permutations,
                "fraction_exceeding_null_p95": self.fraction_exceeding,
                "concepts": [asdict(c) for c in self.concepts]}


def _fmaps(model, images, batch=256):
    return np.concatenate([bb.feature_map(model, images[i:i + batch])
                           for i in range(0, len(images), batch)])


def agreement_accuracy(model: bb.BlackBox, explainer, images: np.ndarray,
                       fmaps: np.ndarray | None = None) -> AgreementReport:
    """Share of images where the explainer's argmax label equals the black-box's.

    ``explainer`` is anything with ``predict(model, fmaps) -> (labels, probs)``.
    """
    if len(images) == 0 and fmaps is None:
        raise ValueError("empty test set")
    if fmaps is None:
        fmaps = _fmaps(model, images)
    bb_labels = bb.resume_forward(model, fmaps).argmax(axis=1)
    ex_labels, _ = explainer.predict(model, fmaps)
    agree = ex_labels == bb_labels
    per_class = {}
    for k in range(model.num_classes):
        sel = bb_labels == k
        n = int(sel.sum())
        per_class[k] = {"n": n, "n_agree": int(agree[sel].sum()),
                        "accuracy": 100.0 * float(agree[sel].mean()) if n else None}
    n_agree = int(agree.sum())
    return AgreementReport(len(agree), n_agree, 100.0 * n_agree / len(agree), per_class)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _batch_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU over the last two axes with broadcasting; empty unions give 0."""
    inter = np.logical_and(a, b).sum(axis=(-2, -1))
    union = np.logical_or(a, b).sum(axis=(-2, -1))
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _best_mean_iou(masks: np.ndarray, parts: np.ndarray, present: np.ndarray):
    """masks (n, C, S, S); parts (n, P, S, S); present (n, P).

    Returns per-concept best part index and its mean IoU over the images
    where that part is present (-1 when no part is ever present).
    """
    scores = _batch_iou(masks[:, :, None], parts[:, None])  # (n, C, P)
    counts = present.sum(axis=0)
    sums = (scores * present[:, None, :]).sum(axis=0)  # (C, P)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), -1.0)
    best = means.argmax(axis=1)
    return best, means[np.arange(len(best)), best]


def _translate(parts: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Cyclically shift each (image, part) mask by its own (dy, dx)."""
    n, p, s, _ = parts.shape
    ar = np.arange(s)
    yy = (ar[None, None, :, None] - shifts[..., 0, None, None]) % s
    xx = (ar[None, None, None, :] - shifts[..., 1, None, None]) % s
    return parts[np.arange(n)[:, None, None, None], np.arange(p)[None, :, None, None], yy, xx]


def localization_iou(bank: X.ExplainerBank, model: bb.BlackBox, dataset,
                     permutations: int = 100, seed: int = 0) -> LocalizationReport:
    """Match each concept's upsampled presence masks against ground-truth part masks.

    Images are grouped by black-box predicted class; each concept of that
    class is scored by its best mean IoU over parts, and compared against
    the same statistic with every part mask randomly translated
    (cyclically) ``permutations`` times.
    """
    images = np.asarray(dataset.images)
    fmaps = _fmaps(model, images)
    labels = bb.resume_forward(model, fmaps).argmax(axis=1)
    n_parts = len(dataset.parts) if dataset.parts else 1 + max(
        (max(m) for m in dataset.part_masks if m), default=-1)
    rng = np.random.default_rng(seed)
    out = []
    hp = bank.hyper
    for k, exp in enumerate(bank.modules):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        emb = X.encode(exp, fmaps[idx])
        stack = X.similarity(exp, emb, hp.tau, hp.eps)
        masks = X.upsample_mask(stack.presence, IMAGE_SIZE, IMAGE_SIZE)  # (n, C, S, S)
        cmap = X.concept_map(exp, emb, stack)
        rel = np.array([X.relevance(model, exp, cmap[i], X.SimilarityStack(
            stack.similarity[i], stack.presence[i]), k) for i in range(idx.size)])
        order = np.argsort(-rel.mean(axis=0), kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(1, order.size + 1)
        parts = np.zeros((idx.size, n_parts, IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        present = np.zeros((idx.size, n_parts), dtype=bool)
        for row, i in enumerate(idx):
            for pid, m in dataset.part_masks[i].items():
                parts[row, pid] = m
                present[row, pid] = True
        best, score = _best_mean_iou(masks, parts, present)
        null = np.empty((permutations, exp.num_concepts))
        for t in range(permutations):
            shifts = rng.integers(0, IMAGE_SIZE, size=(idx.size, n_parts, 2))
            null[t] = _best_mean_iou(masks, _translate(parts, shifts), present)[1]
        for j in range(exp.num_concepts):
            p95 = float(np.percentile(null[:, j], 95))
            found = score[j] >= 0
            out.append(ConceptLocalization(k, j, int(best[j]) if found else None,
                                           float(max(score[j], 0.0)), int(rank[j]), p95,
                                           float(null[:, j].mean()), bool(score[j] > p95)))
    return LocalizationReport(out, permutations)


def misclassification_digest(model: bb.BlackBox, bank: X.ExplainerBank, dataset) -> list[dict]:
    """Black-box test errors with the concept relevances of the (wrong) predicted class."""
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels)
    entries = []
    if len(images) == 0:
        return entries
    fmaps = _fmaps(model, images)
    preds = bb.resume_forward(model, fmaps).argmax(axis=1)
    for i in np.flatnonzero(preds != labels):
        k = int(preds[i])
        exp = bank.modules[k]
        emb = X.encode(exp, fmaps[i])
        stack = X.similarity(exp, emb, bank.hyper.tau, bank.hyper.eps)
        r = X.relevance(model, exp, X.concept_map(exp, emb, stack), stack, k)
        entries.append({"index": int(i), "true_label": int(labels[i]), "predicted_label": k,
                        "relevance": r.tolist(), "top_concept": int(np.argmax(r))})
    return entries


def summary_table(rows: list[dict], columns: list[str]) -> str:
    """Tab-separated table with a header row."""
    buf = io.StringIO()
    buf.write("\t".join(columns) + "\n")
    for row in rows:
        buf.write("\t".join(_fmt(row.get(c)) for c in columns) + "\n")
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
