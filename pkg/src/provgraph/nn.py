"""Dense tensor engine for the fixed layer vocabulary used by target models.

Tensors are float64 numpy arrays. Every layer computes on a leading batch
axis and carries a hand-derived backward pass; there is no general tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    """Input does not fit a layer; ``layer_index`` names the offender."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        super().__init__(message)
        self.layer_index = layer_index


class NumericalError(ArithmeticError):
    """A NaN or Inf was produced inside the engine."""


def check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced in {what}")
    return arr


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=DTYPE))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    kind: str = ""
    has_params = False

    @property
    def params(self) -> list:
        return []

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if params:
            raise ValueError(f"{self.kind} layer has no parameters")

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x: np.ndarray):
        """Return (output, cache) for a batch ``x`` of shape (N, *in_shape)."""
        raise NotImplementedError

    def backward(self, cache, grad_out: np.ndarray):
        """Return (grad_input, [grad per parameter])."""
        raise NotImplementedError


@dataclass(eq=False)
class Dense(Layer):
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    kind = "dense"
    has_params = True

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def params(self):
        return [self.weight, self.bias]

    def set_params(self, params):
        w, b = params
        if w.shape != self.weight.shape or b.shape != self.bias.shape:
            raise ShapeError("dense parameter shape mismatch")
        self.weight, self.bias = as_tensor(w), as_tensor(b)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, x, grad_out):
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        return grad_out @ self.weight, [grad_w, grad_b]


@dataclass(eq=False)
class Conv2d(Layer):
    weight: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0
    kind = "conv2d"
    has_params = True

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError("conv2d weight must be (out, in, k, k)")
        if self.weight.shape[2] < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeError("conv2d needs kernel >= 1, stride >= 1, padding >= 0")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def params(self):
        return [self.weight, self.bias]

    def set_params(self, params):
        w, b = params
        if w.shape != self.weight.shape or b.shape != self.bias.shape:
            raise ShapeError("conv2d parameter shape mismatch")
        self.weight, self.bias = as_tensor(w), as_tensor(b)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        k, s, p = self.kernel_size, self.stride, self.padding
        h = (in_shape[1] + 2 * p - k) // s + 1
        w = (in_shape[2] + 2 * p - k) // s + 1
        if h < 1 or w < 1:
            raise ShapeError(f"conv2d kernel {k} does not fit input {tuple(in_shape)}")
        return (self.out_channels, h, w)

    def _windows(self, xp):
        k, s = self.kernel_size, self.stride
        # (N, C, H', W', k, k)
        return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x):
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = self._windows(xp)
        out = np.einsum("nchwij,ocij->nohw", win, self.weight, optimize=True)
        out = out + self.bias[None, :, None, None]
        return out, (x.shape, xp)

    def backward(self, cache, grad_out):
        x_shape, xp = cache
        k, s, p = self.kernel_size, self.stride, self.padding
        win = self._windows(xp)
        grad_w = np.einsum("nchwij,nohw->ocij", win, grad_out, optimize=True)
        grad_b = grad_out.sum(axis=(0, 2, 3))
        grad_xp = np.zeros_like(xp)
        oh, ow = grad_out.shape[2], grad_out.shape[3]
        # scatter each kernel tap back onto the padded input
        contrib = np.einsum("nohw,ocij->ncijhw", grad_out, self.weight, optimize=True)
        for i in range(k):
            for j in range(k):
                grad_xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += contrib[:, :, i, j]
        grad_x = grad_xp[:, :, p:p + x_shape[2], p:p + x_shape[3]] if p else grad_xp
        return grad_x, [grad_w, grad_b]


@dataclass(eq=False)
class ReLU(Layer):
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, mask, grad_out):
        return np.where(mask, grad_out, 0.0), []


@dataclass(eq=False)
class MaxPool2d(Layer):
    size: int = 2
    stride: Optional[int] = None
    kind = "maxpool2d"

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.size
        if self.size < 1 or self.stride < 1:
            raise ShapeError("maxpool2d needs size >= 1 and stride >= 1")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W), got {tuple(in_shape)}")
        h = (in_shape[1] - self.size) // self.stride + 1
        w = (in_shape[2] - self.size) // self.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"maxpool2d window {self.size} exhausts spatial dims {tuple(in_shape[1:])}")
        return (in_shape[0], h, w)

    def forward(self, x):
        k, s = self.size, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, oh, ow = win.shape[:4]
        flat = win.reshape(n, c, oh, ow, k * k)
        # argmax returns the first maximum in row-major window order
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, cache, grad_out):
        x_shape, arg = cache
        k, s = self.size, self.stride
        grad_x = np.zeros(x_shape, dtype=DTYPE)
        n, c, oh, ow = arg.shape
        di, dj = np.divmod(arg, k)
        rows = np.arange(oh)[None, None, :, None] * s + di
        cols = np.arange(ow)[None, None, None, :] * s + dj
        nn_idx = np.arange(n)[:, None, None, None]
        cc_idx = np.arange(c)[None, :, None, None]
        np.add.at(grad_x, (nn_idx, cc_idx, rows, cols), grad_out)
        return grad_x, []


@dataclass(eq=False)
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, grad_out):
        return grad_out.reshape(shape), []


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2d, Flatten)}


# ---------------------------------------------------------------------------
# Model container and passes
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TargetModel:
    layers: list
    input_shape: tuple
    num_classes: int
    model_id: str = "model"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ShapeError(f"unknown layer kind {layer.kind!r}", i)
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}", i) from None
        if shape != (self.num_classes,):
            raise ShapeError(f"model output shape {shape} != ({self.num_classes},)")

    @property
    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params]

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        for layer in self.layers:
            n = len(layer.params)
            layer.set_params(params[:n])
            params = params[n:]
        if params:
            raise ShapeError("too many parameter tensors for model")

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def layer_shapes(self) -> list:
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes


@dataclass
class ActivationTrace:
    outputs: list  # per-layer outputs, execution order
    logits: np.ndarray


Hook = Callable[[int, Layer, np.ndarray], None]


def _check_input(model: TargetModel, x: np.ndarray, batched: bool) -> np.ndarray:
    x = as_tensor(x)
    shape = x.shape[1:] if batched else x.shape
    if tuple(shape) != model.input_shape:
        raise ShapeError(
            f"layer 0 ({model.layers[0].kind if model.layers else 'none'}): "
            f"input shape {tuple(shape)} != model input {model.input_shape}", 0)
    check_finite(x, "input")
    return x


def _forward_batch(model, xb, hook: Optional[Hook] = None, keep_cache=False):
    caches, outputs = [], []
    h = xb
    for i, layer in enumerate(model.layers):
        h, cache = layer.forward(h)
        check_finite(h, f"layer {i} ({layer.kind})")
        outputs.append(h)
        if keep_cache:
            caches.append(cache)
        if hook is not None:
            hook(i, layer, h)
    return outputs, caches


def forward(model: TargetModel, x, hook: Optional[Hook] = None) -> ActivationTrace:
    """Single-input forward pass. ``hook(i, layer, out)`` sees each layer output."""
    x = _check_input(model, x, batched=False)
    batch_hook = None
    if hook is not None:
        def batch_hook(i, layer, out):
            hook(i, layer, out[0])
    outputs, _ = _forward_batch(model, x[None], batch_hook)
    outs = [o[0] for o in outputs]
    return ActivationTrace(outs, outs[-1] if outs else x)


def forward_batch(model: TargetModel, xs) -> np.ndarray:
    """Logits for a stacked batch of inputs, shape (N, K)."""
    xs = _check_input(model, xs, batched=True)
    outputs, _ = _forward_batch(model, xs)
    return outputs[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _cross_entropy_rows(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    top = logits.argmax(axis=-1)
    m = np.take_along_axis(logits, top[:, None], axis=-1)
    e = np.exp(logits - m)
    np.put_along_axis(e, top[:, None], 0.0, axis=-1)
    # log1p keeps precision for saturated logits
    lse_minus_m = np.log1p(e.sum(axis=-1))
    return lse_minus_m + (m[:, 0] - np.take_along_axis(logits, labels[:, None], axis=-1)[:, 0])


def cross_entropy(logits, label: int) -> float:
    logits = as_tensor(logits)
    if not 0 <= int(label) < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    loss = _cross_entropy_rows(logits[None], np.array([int(label)]))[0]
    return float(check_finite(loss, "cross_entropy"))


def cross_entropy_batch(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError("label out of range")
    return check_finite(_cross_entropy_rows(logits, labels), "cross_entropy")


def _backward(model, caches, grad):
    grads_per_layer = []
    for i in range(len(model.layers) - 1, -1, -1):
        grad, pgrads = model.layers[i].backward(caches[i], grad)
        grads_per_layer.append(pgrads)
    grads_per_layer.reverse()
    return grad, [g for gs in grads_per_layer for g in gs]


def _loss_and_backward(model, xb, labels):
    outputs, caches = _forward_batch(model, xb, keep_cache=True)
    logits = outputs[-1]
    losses = cross_entropy_batch(logits, labels)
    onehot = np.zeros_like(logits)
    onehot[np.arange(len(labels)), labels] = 1.0
    grad_logits = (softmax(logits) - onehot) / len(labels)
    grad_x, grad_params = _backward(model, caches, grad_logits)
    return losses, grad_x, grad_params


def grad_input(model: TargetModel, x, label: int) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to the input."""
    x = _check_input(model, x, batched=False)
    if not 0 <= int(label) < model.num_classes:
        raise ValueError(f"label {label} out of range")
    _, gx, _ = _loss_and_backward(model, x[None], np.array([int(label)]))
    return check_finite(gx[0], "grad_input")


def loss_and_grad_params(model: TargetModel, xs, labels):
    """Mean batch loss and mean-over-batch parameter gradients."""
    xs = _check_input(model, xs, batched=True)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty batch")
    losses, _, grads = _loss_and_backward(model, xs, labels)
    for g in grads:
        check_finite(g, "grad_params")
    return float(losses.mean()), grads


def grad_params(model: TargetModel, batch) -> list:
    """Mean-over-batch gradients for ``batch`` = list of (input, label)."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    xs = np.stack([as_tensor(x) for x, _ in batch])
    labels = [int(y) for _, y in batch]
    return loss_and_grad_params(model, xs, labels)[1]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One Adam update; returns (new_params, new_state) without mutating inputs."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam: parameter/gradient/state counts differ")
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"adam: shape mismatch {p.shape} vs {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p.append(check_finite(p - lr * m_hat / (np.sqrt(v_hat) + eps), "adam_step"))
        new_m.append(check_finite(m, "adam first moment"))
        new_v.append(check_finite(v, "adam second moment"))
    return new_p, AdamState(new_m, new_v, t)
