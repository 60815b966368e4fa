import numpy as np
import pytest

from pace import blackbox as bb
from pace import container
from pace import tensor as T


@pytest.fixture(scope="module")
def desk():
    return bb.desk_model(4, np.random.default_rng(0))


def test_desk_feature_map_shape(desk):
    assert desk.fmap_shape() == (8, 8, 64)


def test_resume_forward_completes_the_network(desk):
    x = np.random.default_rng(1).uniform(size=(3, 32, 32, 3))
    np.testing.assert_allclose(bb.resume_forward(desk, bb.feature_map(desk, x)),
                               bb.predict(desk, x), atol=1e-14)
    # single image without batch axis
    np.testing.assert_allclose(bb.predict(desk, x[0]), bb.predict(desk, x)[0], atol=1e-14)


def test_predict_rejects_wrong_image_shape(desk):
    with pytest.raises(T.ShapeError):
        bb.predict(desk, np.zeros((2, 16, 16, 3)))


def test_resume_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    layers = [T.conv2d(2, 3, rng=rng), T.relu(), T.global_avg_pool(), T.dense(3, 2, rng=rng),
              T.softmax_layer()]
    model = bb.BlackBox(layers, 0, 2, (4, 4, 2))
    fmap = rng.normal(size=(2, 4, 4, 3))
    g = rng.normal(size=(2, 2))

    def f(x):
        return float(np.sum(g * bb.resume_forward(model, x))), bb.resume_backward(model, x, g)
    assert T.fd_check(f, fmap, 1e-6) < 1e-6


def test_split_must_leave_layers():
    with pytest.raises(ValueError):
        bb.BlackBox([T.relu(), T.softmax_layer()], 1, 2, (2, 2, 1))


def test_checkpoint_round_trip(desk):
    data = bb.save_checkpoint(desk)
    assert data[:8] == b"PACEBBX1"
    again = bb.load_checkpoint(data)
    assert bb.save_checkpoint(again) == data
    x = np.random.default_rng(3).uniform(size=(2, 32, 32, 3))
    np.testing.assert_array_equal(bb.predict(again, x), bb.predict(desk, x))


def test_checkpoint_corruption_is_detected(desk):
    data = bb.save_checkpoint(desk)
    with pytest.raises(container.FormatError):
        bb.load_checkpoint(b"PACEEXP1" + data[8:])
    with pytest.raises(container.FormatError):
        bb.load_checkpoint(data[:-5])
    with pytest.raises(container.FormatError):
        bb.load_checkpoint(data + b"\0")
    bad_version = data[:8] + (99).to_bytes(4, "little") + data[12:]
    with pytest.raises(container.FormatError):
        bb.load_checkpoint(bad_version)


def test_container_tensor_layout():
    w = container.Writer(b"TESTMAGC")
    w.tensor(np.arange(6, dtype=float).reshape(2, 3))
    raw = w.getvalue()
    # magic, version, rank, two extents, six float64 values
    assert len(raw) == 8 + 4 + 4 + 8 + 48
    assert raw[12:16] == (2).to_bytes(4, "little")
    r = container.Reader(raw, b"TESTMAGC")
    np.testing.assert_array_equal(r.tensor(), np.arange(6.0).reshape(2, 3))
    r.done()


class _Toy:
    """Two linearly separable colour classes on tiny images."""

    def __init__(self, n=40):
        rng = np.random.default_rng(5)
        self.labels = np.arange(n) % 2
        self.images = rng.uniform(0, 0.2, size=(n, 32, 32, 3))
        self.images[self.labels == 1, :, :, 0] += 0.7
        self.num_classes = 2


def test_training_is_deterministic_and_learns():
    ds = _Toy()
    cfg = bb.TrainConfig(epochs=3, batch_size=8, learning_rate=3e-3, seed=11)
    m1, h1 = bb.train_blackbox(ds, cfg)
    m2, h2 = bb.train_blackbox(ds, cfg)
    assert bb.save_checkpoint(m1) == bb.save_checkpoint(m2)
    assert h1 == h2
    assert bb.accuracy(m1, ds.images, ds.labels) == 1.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        bb.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        bb.TrainConfig(learning_rate=-1)
