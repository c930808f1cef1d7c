"""Differentiable layer operations used by the network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import Function, Tensor, _norm_axes

AXIS_NAMES = ("N", "C", "F", "T")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self) -> None:
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.in_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} not divisible by groups={self.groups}"
            )
        if self.out_channels % self.groups:
            raise ValueError(
                f"out_channels={self.out_channels} not divisible by groups={self.groups}"
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_hw(self, f: int, t: int) -> Tuple[int, int]:
        dims = []
        for name, size, k, s, p in zip(("F", "T"), (f, t), self.kernel, self.stride, self.padding):
            if size + 2 * p < k:
                raise ValueError(
                    f"conv2d: kernel {k} does not fit padded {name} axis ({size} + 2*{p})"
                )
            dims.append((size + 2 * p - k) // s + 1)
        return dims[0], dims[1]


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, s: Tuple[int, int]) -> np.ndarray:
    return xp[:, :, i : i + s[0] * (ho - 1) + 1 : s[0], j : j + s[1] * (wo - 1) + 1 : s[1]]


class Conv2d(Function):
    def forward(self, x, w, *maybe_bias, spec: ConvSpec = None):
        n, c, f, t = x.shape
        if c != spec.in_channels:
            raise ValueError(
                f"conv2d: input channel axis C={c} does not match in_channels={spec.in_channels}"
            )
        if w.shape != spec.weight_shape:
            raise ValueError(f"conv2d: weight shape {w.shape} != expected {spec.weight_shape}")
        ho, wo = spec.output_hw(f, t)
        ph, pw = spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        self.spec, self.xp_shape, self.x_shape, self.w = spec, xp.shape, x.shape, w
        self.has_bias = bool(maybe_bias)
        kh, kw = spec.kernel
        s = spec.stride
        if spec.depthwise:
            self.xp = xp
            out = np.zeros((n, c, ho, wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    out += _window(xp, i, j, ho, wo, s) * w[:, 0, i, j][None, :, None, None]
        elif kh == kw == 1 and s == (1, 1) and spec.groups == 1:
            self.x = x
            out = np.matmul(w[:, :, 0, 0], x.reshape(n, c, f * t)).reshape(n, -1, f, t)
        else:
            g = spec.groups
            cg, og = c // g, spec.out_channels // g
            cols = np.empty((n, g, ho, wo, cg, kh, kw), dtype=x.dtype)
            xg = xp.reshape(n, g, cg, *xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    win = xg[:, :, :, i : i + s[0] * (ho - 1) + 1 : s[0], j : j + s[1] * (wo - 1) + 1 : s[1]]
                    cols[..., i, j] = win.transpose(0, 1, 3, 4, 2)
            cols = cols.reshape(n, g, ho * wo, cg * kh * kw)
            wm = w.reshape(g, og, cg * kh * kw)
            self.cols = cols
            out = np.matmul(cols, wm.transpose(0, 2, 1)[None])  # (n, g, ho*wo, og)
            out = out.transpose(0, 1, 3, 2).reshape(n, g * og, ho, wo)
        if maybe_bias:
            out = out + maybe_bias[0][None, :, None, None]
        return out

    def backward(self, grad):
        spec, w = self.spec, self.w
        n, c, f, t = self.x_shape
        ho, wo = grad.shape[2:]
        kh, kw = spec.kernel
        s = spec.stride
        ph, pw = spec.padding
        gx = gw = None
        if spec.depthwise:
            xp = self.xp
            gw = np.zeros_like(w)
            gxp = np.zeros(self.xp_shape, dtype=grad.dtype) if self.needs[0] else None
            for i in range(kh):
                for j in range(kw):
                    win = _window(xp, i, j, ho, wo, s)
                    gw[:, 0, i, j] = np.einsum("ncht,ncht->c", grad, win)
                    if gxp is not None:
                        _window(gxp, i, j, ho, wo, s)[...] += grad * w[:, 0, i, j][None, :, None, None]
            if gxp is not None:
                gx = gxp[:, :, ph : ph + f, pw : pw + t]
        elif kh == kw == 1 and s == (1, 1) and spec.groups == 1:
            g2 = grad.reshape(n, -1, f * t)
            x2 = self.x.reshape(n, c, f * t)
            gw = np.einsum("nop,ncp->oc", g2, x2).reshape(w.shape)
            if self.needs[0]:
                gx = np.matmul(w[:, :, 0, 0].T, g2).reshape(self.x_shape)
        else:
            g = spec.groups
            cg, og = c // g, spec.out_channels // g
            gm = grad.reshape(n, g, og, ho * wo)  # (n, g, og, p)
            gw = np.einsum("ngop,ngpk->gok", gm, self.cols).reshape(w.shape)
            if self.needs[0]:
                wm = w.reshape(g, og, cg * kh * kw)
                gcols = np.matmul(gm.transpose(0, 1, 3, 2), wm[None])  # (n, g, p, k)
                gcols = gcols.reshape(n, g, ho, wo, cg, kh, kw)
                gxp = np.zeros((n, g, cg, *self.xp_shape[2:]), dtype=grad.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, :, i : i + s[0] * (ho - 1) + 1 : s[0], j : j + s[1] * (wo - 1) + 1 : s[1]] += (
                            gcols[..., i, j].transpose(0, 1, 4, 2, 3)
                        )
                gxp = gxp.reshape(self.xp_shape)
                gx = gxp[:, :, ph : ph + f, pw : pw + t]
        gb = grad.sum(axis=(0, 2, 3)) if self.has_bias else None
        if not self.needs[1]:
            gw = None
        return (gx, gw, gb) if self.has_bias else (gx, gw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """2-D cross-correlation with grouped / depthwise support."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (N, C, F, T) input, got shape {x.shape}")
    if bias is None:
        return Conv2d.apply(x, weight, spec=spec)
    return Conv2d.apply(x, weight, bias, spec=spec)


class MaxPool2d(Function):
    def forward(self, x, kernel=(2, 2)):
        n, c, f, t = x.shape
        kf, kt = kernel
        fo, to = f // kf, t // kt
        self.x_shape, self.kernel = x.shape, kernel
        win = x[:, :, : fo * kf, : to * kt].reshape(n, c, fo, kf, to, kt)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, fo, to, kf * kt)
        # first maximum wins ties, keeps backward deterministic
        self.arg = win.argmax(axis=-1)
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, f, t = self.x_shape
        kf, kt = self.kernel
        fo, to = grad.shape[2:]
        gwin = np.zeros((n, c, fo, to, kf * kt), dtype=grad.dtype)
        np.put_along_axis(gwin, self.arg[..., None], grad[..., None], axis=-1)
        gwin = gwin.reshape(n, c, fo, to, kf, kt).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros(self.x_shape, dtype=grad.dtype)
        gx[:, :, : fo * kf, : to * kt] = gwin.reshape(n, c, fo * kf, to * kt)
        return (gx,)


class AvgPool2d(Function):
    def forward(self, x, kernel=(2, 2)):
        n, c, f, t = x.shape
        kf, kt = kernel
        fo, to = f // kf, t // kt
        self.x_shape, self.kernel = x.shape, kernel
        win = x[:, :, : fo * kf, : to * kt].reshape(n, c, fo, kf, to, kt)
        return win.mean(axis=(3, 5))

    def backward(self, grad):
        kf, kt = self.kernel
        fo, to = grad.shape[2:]
        g = np.repeat(np.repeat(grad, kf, axis=2), kt, axis=3) / np.asarray(kf * kt, dtype=grad.dtype)
        gx = np.zeros(self.x_shape, dtype=grad.dtype)
        gx[:, :, : fo * kf, : to * kt] = g
        return (gx,)


def pool2d(
    x: Tensor,
    kind: str = "max",
    kernel: Tuple[int, int] = (2, 2),
    stride: Tuple[int, int] = (2, 2),
) -> Tensor:
    """Non-overlapping 2-D pooling; output spatial dims are floored."""
    if tuple(kernel) != tuple(stride):
        raise ValueError("pool2d supports only stride == kernel")
    f, t = x.shape[2:]
    for name, size, k in (("F", f, kernel[0]), ("T", t, kernel[1])):
        if size < k:
            raise ValueError(f"pool2d: kernel {k} larger than {name} axis of size {size}")
    if kind == "max":
        return MaxPool2d.apply(x, kernel=tuple(kernel))
    if kind == "avg":
        return AvgPool2d.apply(x, kernel=tuple(kernel))
    raise ValueError(f"unknown pool kind {kind!r}")


def reduce_mean(x: Tensor, axes: Sequence, keepdims: bool = False) -> Tensor:
    """Mean over ``axes``; accepts indices or axis letters N/C/F/T."""
    if not axes:
        raise ValueError("reduce_mean needs at least one axis")
    idx = [AXIS_NAMES.index(a) if isinstance(a, str) else int(a) for a in axes]
    for a in _norm_axes(idx, x.ndim):
        if x.shape[a] == 0:
            raise ValueError(f"reduce_mean over zero-size axis {a}")
    return x.mean(axes=idx, keepdims=keepdims)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        return (grad * self.mask,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Swish(Function):
    def forward(self, x):
        self.x = x
        self.sig = _sigmoid(x)
        return x * self.sig

    def backward(self, grad):
        s = self.sig
        return (grad * (s + self.x * s * (1 - s)),)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return ReLU.apply(x)
    if kind == "swish":
        return Swish.apply(x)
    raise ValueError(f"unknown activation {kind!r}")


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    zs = z - m
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


class SoftmaxXent(Function):
    def forward(self, logits, labels):
        self.p = softmax(logits)
        self.labels = labels
        return np.asarray(-(labels * log_softmax(logits)).sum(axis=-1).mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = self.p.shape[0]
        return (grad * (self.p - self.labels) / np.asarray(n, dtype=grad.dtype), None)


def softmax_xent(logits: Tensor, labels, atol: float = 1e-4) -> Tensor:
    """Mean cross-entropy of softmax(logits) against label distributions."""
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if lab.ndim == 1:
        lab = np.eye(logits.shape[-1], dtype=logits.dtype)[lab.astype(int)]
    lab = lab.astype(logits.dtype, copy=False)
    if lab.shape != logits.shape:
        raise ValueError(f"labels shape {lab.shape} != logits shape {logits.shape}")
    sums = lab.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > atol) or np.any(lab < 0):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"label row {bad} is not a distribution (sum={sums[bad]:.6f})")
    return SoftmaxXent.apply(logits, Tensor(lab, dtype=lab.dtype))


class Standardize(Function):
    """(x - mean) / sqrt(var + eps) with statistics over ``axes`` (biased var)."""

    def forward(self, x, axes=(), eps=1e-5):
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        self.axes = axes
        self.y = xc * self.inv
        self.mu, self.var = mu, var
        return self.y

    def backward(self, grad):
        y, ax = self.y, self.axes
        gm = grad.mean(axis=ax, keepdims=True)
        gym = (grad * y).mean(axis=ax, keepdims=True)
        return (self.inv * (grad - gm - y * gym),)


def standardize(x: Tensor, axes: Sequence[int], eps: float) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Returns the normalized tensor plus the batch mean and biased variance."""
    fn_out = Standardize.apply(x, axes=_norm_axes(axes, x.ndim), eps=eps)
    node = fn_out._ctx[0] if fn_out._ctx is not None else None
    if node is None:
        # graph recording disabled: recompute the stats cheaply
        mu = x.data.mean(axis=tuple(axes), keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=tuple(axes), keepdims=True)
        return fn_out, mu, var
    return fn_out, node.mu, node.var


class Dropout(Function):
    def forward(self, x, rate=0.1, rng=None):
        keep = rng.random(x.shape) >= rate
        self.mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not training or rate <= 0:
        return x
    return Dropout.apply(x, rate=rate, rng=rng)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def symmetric_quantize(w: np.ndarray, bits: int = 8) -> Tuple[np.ndarray, np.float32]:
    """Per-tensor symmetric quantization: integers in [-qmax, qmax] and a f32 scale."""
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.abs(w).max()) if w.size else 0.0
    scale = np.float32(amax / qmax) if amax > 0 else np.float32(1.0)
    q = np.clip(round_half_away(w.astype(np.float64) / np.float64(scale)), -qmax, qmax)
    return q.astype(np.int8 if bits <= 8 else np.int32), scale


def dequantize(q: np.ndarray, scale: np.float32, dtype=np.float32) -> np.ndarray:
    return q.astype(dtype) * np.asarray(scale, dtype=dtype)


class FakeQuant(Function):
    """Masked fake quantization with a straight-through backward.

    ``bits`` is 8 (symmetric integer), 16 (IEEE half) or None (mask only).
    """

    def forward(self, w, mask, bits=8):
        self.mask = mask
        wm = w * mask
        if bits is None:
            return wm
        if bits == 16:
            return wm.astype(np.float16).astype(w.dtype)
        q, scale = symmetric_quantize(wm, bits)
        return dequantize(q, scale, w.dtype)

    def backward(self, grad):
        return (grad * self.mask, None)


def fake_quant(w: Tensor, mask: np.ndarray, bits: Optional[int]) -> Tensor:
    return FakeQuant.apply(w, Tensor(mask.astype(w.dtype), dtype=w.dtype), bits=bits)

