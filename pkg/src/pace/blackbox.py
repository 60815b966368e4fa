"""The CNN classifier being explained.

The model is a flat list of layers with a designated split layer whose
output is the feature map handed to the explainers. Everything after the
split is the "rest of the network", which can be run (and differentiated)
on arbitrary feature maps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .container import FormatError, Reader, Writer

log = logging.getLogger(__name__)

MAGIC = b"PACEBBX1"

_HYPER_KEYS = {
    T.LayerKind.CONV2D: ("kernel", "stride", "in_ch", "out_ch"),
    T.LayerKind.POINTWISE: ("in_ch", "out_ch"),
    T.LayerKind.POINTWISE_T: ("in_ch", "out_ch"),
    T.LayerKind.DENSE: ("in_ch", "out_ch"),
    T.LayerKind.MAXPOOL2D: ("size",),
}
_WEIGHT_KEYS = {
    T.LayerKind.CONV2D: ("w", "b"),
    T.LayerKind.POINTWISE: ("w",),
    T.LayerKind.POINTWISE_T: ("w",),
    T.LayerKind.DENSE: ("w", "b"),
}


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0 \
                or self.weight_decay < 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class BlackBox:
    layers: list[T.LayerParams]
    split_index: int
    num_classes: int
    input_shape: tuple[int, int, int] = (32, 32, 3)

    def __post_init__(self):
        if not 0 <= self.split_index < len(self.layers) - 1:
            raise ValueError(f"split index {self.split_index} leaves no rest of network")
        if self.layers[-1].kind != T.LayerKind.SOFTMAX:
            raise ValueError("last layer must be a softmax")

    @property
    def head(self) -> list[T.LayerParams]:
        return self.layers[:self.split_index + 1]

    @property
    def rest(self) -> list[T.LayerParams]:
        return self.layers[self.split_index + 1:]

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed ``"<layer>.<name>"``; views into the layers."""
        return {f"{i}.{name}": arr
                for i, layer in enumerate(self.layers)
                for name, arr in layer.weights.items()}

    def fmap_shape(self) -> tuple[int, ...]:
        return feature_map(self, np.zeros((1,) + tuple(self.input_shape))).shape[1:]


def desk_model(num_classes: int = 4, rng: np.random.Generator | None = None) -> BlackBox:
    """32x32x3 -> three conv/ReLU stages -> 8x8x64 feature map -> GAP -> dense -> softmax."""
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = [
        T.conv2d(3, 16, rng=rng), T.relu(), T.maxpool2d(2),
        T.conv2d(16, 32, rng=rng), T.relu(), T.maxpool2d(2),
        T.conv2d(32, 64, rng=rng), T.relu(),
        T.global_avg_pool(), T.dense(64, num_classes, rng=rng), T.softmax_layer(),
    ]
    return BlackBox(layers, split_index=7, num_classes=num_classes)


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise T.ShapeError(f"expected {ndim - 1}-d input or a batch of them, got {x.shape}")
    return x, False


def _run(layers, x, tape=None):
    for layer in layers:
        x = T.forward(layer, x, tape)
    return x


def predict(model: BlackBox, images: np.ndarray) -> np.ndarray:
    """Class probabilities b(x) for one image or a batch."""
    x, single = _batched(images, 4)
    if x.shape[1:] != tuple(model.input_shape):
        raise T.ShapeError(f"image shape {x.shape[1:]} != {model.input_shape}")
    out = _run(model.layers, x)
    return out[0] if single else out


def feature_map(model: BlackBox, images: np.ndarray) -> np.ndarray:
    x, single = _batched(images, 4)
    if x.shape[1:] != tuple(model.input_shape):
        raise T.ShapeError(f"image shape {x.shape[1:]} != {model.input_shape}")
    out = _run(model.head, x)
    return out[0] if single else out


def resume_forward(model: BlackBox, fmap: np.ndarray,
                   tape: T.GradientTape | None = None) -> np.ndarray:
    """Probabilities from feature maps, running only the layers after the split."""
    x, single = _batched(fmap, 4)
    out = _run(model.rest, x, tape)
    return out[0] if single else out


def resume_backward(model: BlackBox, fmap: np.ndarray, output_grad: np.ndarray,
                    tape: T.GradientTape | None = None) -> np.ndarray:
    """Gradient w.r.t. ``fmap`` of ``sum(output_grad * resume_forward(fmap))``.

    When ``tape`` holds a matching :func:`resume_forward` record it is
    consumed instead of re-running the forward pass.
    """
    x, single = _batched(fmap, 4)
    g = np.asarray(output_grad, dtype=np.float64)
    if single:
        g = g[None]
    if tape is None:
        tape = T.GradientTape()
        _run(model.rest, x, tape)
    if g.shape != (x.shape[0], model.num_classes):
        raise T.ShapeError(f"output gradient shape {g.shape} does not match batch")
    for layer in reversed(model.rest):
        g, _ = T.backward(layer, g, tape)
    if g.shape != x.shape:
        raise T.ShapeError("gradient does not match feature map shape")
    return g[0] if single else g


def _loss_and_grads(model: BlackBox, x: np.ndarray, y: np.ndarray):
    tape = T.GradientTape()
    logits = _run(model.layers[:-1], x, tape)
    target = np.eye(model.num_classes)[y]
    loss, g = T.softmax_cross_entropy(logits, target)
    grads = {}
    for i in range(len(model.layers) - 2, -1, -1):
        layer = model.layers[i]
        g, wg = T.backward(layer, g, tape)
        for name, arr in wg.items():
            grads[f"{i}.{name}"] = arr
    return loss, grads, logits


def train_blackbox(dataset, cfg: TrainConfig, model: BlackBox | None = None
                   ) -> tuple[BlackBox, list[dict]]:
    """Train with Adam and return the model plus a per-epoch log.

    ``dataset`` needs ``images``, ``labels`` and ``num_classes``.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    if len(images) == 0:
        raise ValueError("empty training set")
    k = int(dataset.num_classes)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels out of range")
    ss = np.random.SeedSequence(cfg.seed)
    init_seq, order_seq = ss.spawn(2)
    if model is None:
        model = desk_model(k, np.random.default_rng(init_seq))
    order_rng = np.random.default_rng(order_seq)
    opt = T.Adam(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    params = model.params()
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(images))
        total, correct = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            try:
                loss, grads, logits = _loss_and_grads(model, images[idx], labels[idx])
            except T.NumericError as exc:
                raise T.DivergenceError(f"black-box training diverged at step {step}: {exc}",
                                        step) from exc
            if not np.isfinite(loss):
                raise T.DivergenceError(f"non-finite loss at step {step}", step)
            opt.step(params, grads)
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            step += 1
        entry = {"epoch": epoch, "loss": total / len(images), "train_acc": correct / len(images)}
        log.info("black-box epoch %d loss %.4f acc %.3f", epoch, entry["loss"], entry["train_acc"])
        history.append(entry)
    return model, history


def accuracy(model: BlackBox, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    preds = np.concatenate([predict(model, images[i:i + batch]).argmax(axis=1)
                            for i in range(0, len(images), batch)])
    return float(np.mean(preds == np.asarray(labels)))


def save_checkpoint(model: BlackBox) -> bytes:
    w = Writer(MAGIC)
    w.u32(model.split_index)
    w.u32(model.num_classes)
    w.u32s(model.input_shape)
    w.u32(len(model.layers))
    for layer in model.layers:
        w.u32(int(layer.kind))
        w.u32s([layer.hyper[key] for key in _HYPER_KEYS.get(layer.kind, ())])
        keys = _WEIGHT_KEYS.get(layer.kind, ())
        w.u32(len(keys))
        for key in keys:
            w.tensor(layer.weights[key])
    return w.getvalue()


def load_checkpoint(data: bytes) -> BlackBox:
    r = Reader(data, MAGIC)
    split = r.u32()
    k = r.u32()
    input_shape = tuple(r.u32s())
    layers = []
    for _ in range(r.u32()):
        try:
            kind = T.LayerKind(r.u32())
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
        hyper = dict(zip(_HYPER_KEYS.get(kind, ()), r.u32s()))
        keys = _WEIGHT_KEYS.get(kind, ())
        if r.u32() != len(keys):
            raise FormatError(f"wrong tensor count for {kind.name}")
        weights = {key: r.tensor() for key in keys}
        layers.append(T.LayerParams(kind, weights, hyper))
    r.done()
    return BlackBox(layers, split, k, input_shape)
