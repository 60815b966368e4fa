import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradsuite
from pace import blackbox as bb
from pace import evalkit as E
from pace import explainer as X
from pace import synthparts as S


class _Wrap:
    """Explainer that reproduces the black-box, optionally with permuted labels."""

    def __init__(self, perm=None):
        self.perm = perm

    def predict(self, model, fmaps):
        p = bb.resume_forward(model, fmaps)
        if self.perm is not None:
            p = p[:, self.perm]
        return p.argmax(axis=1), p


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    return gradsuite.toy_model(rng), rng.normal(size=(300, 4, 4, 2))


def test_identity_explainer_agrees_fully(toy):
    model, images = toy
    rep = E.agreement_accuracy(model, _Wrap(), images)
    assert rep.accuracy == 100.0 and rep.n_agree == rep.n_test == 300
    assert sum(v["n"] for v in rep.per_class.values()) == 300


def test_permuted_explainer_agreement_matches_expectation(toy):
    model, images = toy
    fmaps = bb.feature_map(model, images)
    labels = bb.resume_forward(model, fmaps).argmax(axis=1)
    perm = np.array([1, 2, 0])
    rep = E.agreement_accuracy(model, _Wrap(perm), images)
    # the permuted explainer predicts inv(perm)[label]; a cyclic permutation never agrees
    assert rep.accuracy == 0.0
    swap = np.array([0, 2, 1])
    rep = E.agreement_accuracy(model, _Wrap(swap), images)
    assert rep.accuracy == pytest.approx(100.0 * np.mean(labels == 0))
    assert rep.accuracy == pytest.approx(100.0 * rep.n_agree / rep.n_test)


def test_empty_test_set_is_an_error(toy):
    model, _ = toy
    with pytest.raises(ValueError):
        E.agreement_accuracy(model, _Wrap(), np.zeros((0, 4, 4, 2)))


def test_iou_basics():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    b = np.zeros((4, 4), bool)
    b[2:, 2:] = True
    assert E.iou(a, a) == 1.0
    assert E.iou(a, b) == 0.0
    c = np.zeros((4, 4), bool)
    c[:2, :] = True
    assert E.iou(a, c) == 0.5
    assert E.iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 6, 6)) < rng.random()
    v = E.iou(a, b)
    assert v == E.iou(b, a)
    assert 0.0 <= v <= 1.0
    np.testing.assert_allclose(E._batch_iou(a, b), v)


def test_best_mean_iou_uses_images_where_part_is_present():
    masks = np.zeros((2, 1, 4, 4), bool)
    parts = np.zeros((2, 2, 4, 4), bool)
    masks[:, 0, :2, :2] = True
    parts[0, 0, :2, :2] = True  # perfect match in image 0
    parts[1, 1, :2, :2] = True  # part 1 only in image 1
    present = np.array([[True, False], [False, True]])
    best, score = E._best_mean_iou(masks, parts, present)
    assert score[0] == 1.0


def test_translate_is_cyclic():
    parts = np.zeros((1, 1, 4, 4), bool)
    parts[0, 0, 0, 0] = True
    out = E._translate(parts, np.array([[[1, 3]]]))
    assert out[0, 0, 1, 3] and out.sum() == 1


@pytest.fixture(scope="module")
def tiny_pipeline():
    ds = S.generate(3, 2, 12)
    model = bb.desk_model(2, np.random.default_rng(0))
    bank = X.init_bank(2, 64, 2, 3, rng=np.random.default_rng(1))
    return ds, model, bank


def test_localization_report_shape_and_determinism(tiny_pipeline):
    ds, model, bank = tiny_pipeline
    rep = E.localization_iou(bank, model, ds, permutations=10, seed=4)
    again = E.localization_iou(bank, model, ds, permutations=10, seed=4)
    assert rep.to_dict() == again.to_dict()
    assert "proxy" in rep.note
    for c in rep.concepts:
        assert 0.0 <= c.mean_iou <= 1.0
        assert 1 <= c.relevance_rank <= 2
    assert 0.0 <= rep.fraction_exceeding <= 1.0


def test_localization_recovers_a_planted_concept(tiny_pipeline):
    ds, model, bank = tiny_pipeline
    # presence exactly on a part: construct the report inputs by hand
    n = len(ds)
    masks = np.zeros((n, 1, 32, 32), bool)
    parts = np.zeros((n, len(ds.parts), 32, 32), bool)
    present = np.zeros((n, len(ds.parts)), bool)
    for i, pm in enumerate(ds.part_masks):
        for pid, m in pm.items():
            parts[i, pid] = m
            present[i, pid] = True
        owner_part = min(pid for pid in pm if ds.parts[pid].owner is not None)
        masks[i, 0] = pm[owner_part]
    _, score = E._best_mean_iou(masks, parts, present)
    rng = np.random.default_rng(0)
    null = [E._best_mean_iou(masks, E._translate(parts, rng.integers(0, 32, (n, len(ds.parts), 2))),
                             present)[1][0] for _ in range(50)]
    assert score[0] == 1.0
    assert score[0] > np.percentile(null, 95)


def test_misclassification_digest(tiny_pipeline):
    ds, model, bank = tiny_pipeline
    digest = E.misclassification_digest(model, bank, ds)
    preds = bb.predict(model, ds.images).argmax(axis=1)
    assert len(digest) == int(np.sum(preds != ds.labels))
    for entry in digest:
        assert entry["top_concept"] == int(np.argmax(entry["relevance"]))
        assert entry["predicted_label"] != entry["true_label"]


def test_digest_empty_for_perfect_model(tiny_pipeline):
    ds, model, bank = tiny_pipeline
    preds = bb.predict(model, ds.images).argmax(axis=1)
    relabelled = S.LabeledDataset(ds.images, preds, ds.part_masks, ds.split, 2, ds.parts)
    assert E.misclassification_digest(model, bank, relabelled) == []


def test_summary_table():
    text = E.summary_table([{"a": 1, "b": 0.5}, {"a": None, "b": "x"}], ["a", "b"])
    assert text == "a\tb\n1\t0.5000\n-\tx\n"
