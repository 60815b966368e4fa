"""Layer zoo with hand-written forward/backward passes.

Tensors are plain ``float64`` numpy arrays in (batch, height, width, channel)
order. Every layer function works on a leading batch axis.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class DivergenceError(NumericError):
    def __init__(self, message: str, step: int, term: str | None = None):
        super().__init__(message)
        self.step = step
        self.term = term


class LayerKind(enum.IntEnum):
    CONV2D = 1
    POINTWISE = 2
    POINTWISE_T = 3
    DENSE = 4
    RELU = 5
    MAXPOOL2D = 6
    GAP = 7
    SOFTMAX = 8


@dataclass
class LayerParams:
    kind: LayerKind
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    hyper: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        _check_weights(self)

    @property
    def trainable(self) -> bool:
        return bool(self.weights)


def _check_weights(layer: LayerParams) -> None:
    k, w, h = layer.kind, layer.weights, layer.hyper
    if k == LayerKind.CONV2D:
        shape = (h["kernel"], h["kernel"], h["in_ch"], h["out_ch"])
        if w["w"].shape != shape or w["b"].shape != (h["out_ch"],):
            raise ShapeError(f"conv weights {w['w'].shape} do not match {shape}")
    elif k in (LayerKind.POINTWISE, LayerKind.POINTWISE_T):
        if set(w) != {"w"}:
            raise ShapeError("pointwise layers carry a single bias-free weight matrix")
        if w["w"].shape != (h["in_ch"], h["out_ch"]):
            raise ShapeError(f"pointwise weights {w['w'].shape} do not match "
                             f"({h['in_ch']}, {h['out_ch']})")
    elif k == LayerKind.DENSE:
        if w["w"].shape != (h["in_ch"], h["out_ch"]) or w["b"].shape != (h["out_ch"],):
            raise ShapeError("dense weights do not match declared sizes")
    elif w:
        raise ShapeError(f"{k.name} has no weights")


# -- constructors ----------------------------------------------------------

def conv2d(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
           rng: np.random.Generator | None = None) -> LayerParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    fan_in = kernel * kernel * in_ch
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel, kernel, in_ch, out_ch))
    return LayerParams(LayerKind.CONV2D, {"w": w, "b": np.zeros(out_ch)},
                       {"kernel": kernel, "stride": stride, "in_ch": in_ch, "out_ch": out_ch})


def pointwise(in_ch: int, out_ch: int, rng: np.random.Generator | None = None,
              transpose: bool = False) -> LayerParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    w = rng.normal(0.0, 1.0 / np.sqrt(in_ch), size=(in_ch, out_ch))
    kind = LayerKind.POINTWISE_T if transpose else LayerKind.POINTWISE
    return LayerParams(kind, {"w": w}, {"in_ch": in_ch, "out_ch": out_ch})


def dense(in_ch: int, out_ch: int, rng: np.random.Generator | None = None) -> LayerParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    w = rng.normal(0.0, 1.0 / np.sqrt(in_ch), size=(in_ch, out_ch))
    return LayerParams(LayerKind.DENSE, {"w": w, "b": np.zeros(out_ch)},
                       {"in_ch": in_ch, "out_ch": out_ch})


def relu() -> LayerParams:
    return LayerParams(LayerKind.RELU)


def maxpool2d(size: int = 2) -> LayerParams:
    return LayerParams(LayerKind.MAXPOOL2D, hyper={"size": size})


def global_avg_pool() -> LayerParams:
    return LayerParams(LayerKind.GAP)


def softmax_layer() -> LayerParams:
    return LayerParams(LayerKind.SOFTMAX)


# -- tape ------------------------------------------------------------------

class GradientTape:
    """Stack of per-layer caches recorded by :func:`forward`.

    ``backward`` pops records in reverse order, so layers must be unwound in
    the opposite order they were run.
    """

    def __init__(self):
        self._records: list[tuple[LayerParams, object]] = []

    def push(self, layer: LayerParams, cache) -> None:
        self._records.append((layer, cache))

    def pop(self, layer: LayerParams):
        if not self._records:
            raise TapeError(f"backward through {layer.kind.name} with an empty tape")
        recorded, cache = self._records.pop()
        if recorded is not layer:
            raise TapeError(f"backward through {layer.kind.name} but tape holds "
                            f"{recorded.kind.name}")
        return cache

    def __len__(self) -> int:
        return len(self._records)


# -- forward / backward ----------------------------------------------------

def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _conv_out(n: int, k: int, s: int) -> int:
    return (n + 2 * (k // 2) - k) // s + 1


def forward(layer: LayerParams, x: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
    """Run one layer on a batch. Pass ``tape=None`` for inference."""
    kind, h = layer.kind, layer.hyper
    cache = None
    if kind == LayerKind.CONV2D:
        if x.ndim != 4 or x.shape[-1] != h["in_ch"]:
            raise ShapeError(f"conv expects (N,H,W,{h['in_ch']}), got {x.shape}")
        k, s = h["kernel"], h["stride"]
        p = k // 2
        n, hh, ww, _ = x.shape
        ho, wo = _conv_out(hh, k, s), _conv_out(ww, k, s)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        w = layer.weights["w"]
        out = np.empty((n, ho, wo, h["out_ch"]))
        out[...] = layer.weights["b"]
        for di in range(k):
            for dj in range(k):
                patch = xp[:, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s, :]
                out += patch @ w[di, dj]
        cache = xp
    elif kind in (LayerKind.POINTWISE, LayerKind.POINTWISE_T):
        if x.shape[-1] != h["in_ch"]:
            raise ShapeError(f"{kind.name} expects {h['in_ch']} channels, got {x.shape}")
        out = x @ layer.weights["w"]
        cache = x
    elif kind == LayerKind.DENSE:
        if x.ndim != 2 or x.shape[1] != h["in_ch"]:
            raise ShapeError(f"dense expects (N,{h['in_ch']}), got {x.shape}")
        out = x @ layer.weights["w"] + layer.weights["b"]
        cache = x
    elif kind == LayerKind.RELU:
        out = np.maximum(x, 0.0)
        cache = x > 0
    elif kind == LayerKind.MAXPOOL2D:
        s = h["size"]
        n, hh, ww, c = x.shape
        if hh % s or ww % s:
            raise ShapeError(f"maxpool size {s} does not divide {x.shape}")
        blocks = x.reshape(n, hh // s, s, ww // s, s, c)
        out = blocks.max(axis=(2, 4))
        # first maximal element in each window gets the gradient
        flat = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, hh // s, ww // s, c, s * s)
        cache = (x.shape, flat.argmax(axis=-1))
    elif kind == LayerKind.GAP:
        if x.ndim != 4:
            raise ShapeError(f"global average pool expects (N,H,W,C), got {x.shape}")
        out = x.mean(axis=(1, 2))
        cache = x.shape
    elif kind == LayerKind.SOFTMAX:
        out = softmax(x)
        cache = out
    else:  # pragma: no cover
        raise ValueError(kind)
    _finite(out, kind.name)
    if tape is not None:
        tape.push(layer, cache)
    return out


def backward(layer: LayerParams, grad: np.ndarray, tape: GradientTape
             ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Return (input gradient, weight gradients) for the last ``forward`` of ``layer``."""
    cache = tape.pop(layer)
    kind, h = layer.kind, layer.hyper
    wgrad: dict[str, np.ndarray] = {}
    if kind == LayerKind.CONV2D:
        xp = cache
        k, s = h["kernel"], h["stride"]
        p = k // 2
        n, ho, wo, co = grad.shape
        w = layer.weights["w"]
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        g2 = grad.reshape(-1, co)
        for di in range(k):
            for dj in range(k):
                sl = (slice(None), slice(di, di + s * (ho - 1) + 1, s),
                      slice(dj, dj + s * (wo - 1) + 1, s), slice(None))
                patch = xp[sl]
                dw[di, dj] = patch.reshape(-1, patch.shape[-1]).T @ g2
                dxp[sl] += grad @ w[di, dj].T
        wgrad = {"w": dw, "b": g2.sum(axis=0)}
        hh, ww = xp.shape[1] - 2 * p, xp.shape[2] - 2 * p
        dx = dxp[:, p:p + hh, p:p + ww, :]
    elif kind in (LayerKind.POINTWISE, LayerKind.POINTWISE_T):
        x = cache
        w = layer.weights["w"]
        wgrad = {"w": x.reshape(-1, w.shape[0]).T @ grad.reshape(-1, w.shape[1])}
        dx = grad @ w.T
    elif kind == LayerKind.DENSE:
        x = cache
        wgrad = {"w": x.T @ grad, "b": grad.sum(axis=0)}
        dx = grad @ layer.weights["w"].T
    elif kind == LayerKind.RELU:
        dx = grad * cache
    elif kind == LayerKind.MAXPOOL2D:
        shape, arg = cache
        s = h["size"]
        n, hh, ww, c = shape
        onehot = np.zeros(arg.shape + (s * s,))
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        onehot *= grad[..., None]
        dx = onehot.reshape(n, hh // s, ww // s, c, s, s).transpose(0, 1, 4, 2, 5, 3)
        dx = dx.reshape(shape)
    elif kind == LayerKind.GAP:
        n, hh, ww, c = cache
        dx = np.broadcast_to(grad[:, None, None, :] / (hh * ww), cache).copy()
    elif kind == LayerKind.SOFTMAX:
        p = cache
        dx = p * (grad - (grad * p).sum(axis=-1, keepdims=True))
    else:  # pragma: no cover
        raise ValueError(kind)
    return dx, wgrad


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against target rows, and its logit gradient."""
    p = softmax(logits)
    n = logits.shape[0]
    loss = -float(np.sum(target * np.log(np.clip(p, 1e-300, None)))) / n
    return loss, (p - target) / n


# -- checks and optimisation ----------------------------------------------

def fd_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray,
             h: float = 1e-5) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f`` returns ``(value, gradient)``; error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    _, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        numeric = (f(xp)[0] - f(xm)[0]) / (2 * h)
        a = analytic[idx]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


class Adam:
    """Adam with decoupled weight decay over a flat dict of named arrays.

    Parameters are updated in place.
    """

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if set(grads) - set(params):
            raise KeyError(f"gradients for unknown parameters: {set(grads) - set(params)}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)
