"""Frequency-wise normalization family.

``freq_in`` normalizes each (sample, frequency bin) over channels and time.
``res_norm`` adds a scaled identity path on top of it. ``SubSpectralNorm`` is
batch normalization applied per contiguous frequency sub-band; with one band
it is plain batch norm. ``GlobalFreqStats`` holds the dataset-level per-bin
statistics used by the global normalization baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .ops import standardize
from .tensor import Tensor

FREQ_IN_AXES = (1, 3)  # (C, T) of an (N, C, F, T) tensor
DEAD_VAR_FRACTION = 1e-2  # running var below this fraction of eps marks a constant channel


@dataclass
class NormConfig:
    epsilon: float = 1e-5
    lam: float = 0.1
    sub_bands: int = 4

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.sub_bands < 1:
            raise ValueError("sub_bands must be >= 1")


def freq_in(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Instance normalization by frequency: stats per (n, f) over (c, t)."""
    if x.ndim != 4:
        raise ValueError(f"freq_in expects (N, C, F, T), got {x.shape}")
    return standardize(x, FREQ_IN_AXES, eps)[0]


def res_norm(x: Tensor, lam: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Residual normalization: ``lam * x + freq_in(x)``."""
    normed = freq_in(x, eps)
    if lam == 0:
        return normed
    return x * lam + normed


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    training: bool = True

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * batch_mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * batch_var_unbiased).astype(self.var.dtype)


class SubSpectralNorm:
    """Batch norm per (channel, frequency sub-band) with its own affine.

    Frozen running statistics are used in eval mode; ``folded`` (scale, shift)
    arrays, when set, replace the running-stat path entirely in eval mode
    (used for half-precision inference).
    """

    def __init__(self, channels: int, sub_bands: int = 1, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32) -> None:
        if sub_bands < 1:
            raise ValueError("sub_bands must be >= 1")
        self.channels, self.sub_bands, self.eps = channels, sub_bands, eps
        shape = (channels, sub_bands)
        self.gamma = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.stats = RunningStats(np.zeros(shape, dtype=dtype), np.ones(shape, dtype=dtype), momentum)
        self.folded: Optional[tuple] = None

    @property
    def kind(self) -> str:
        return "bn" if self.sub_bands == 1 else "ssn"

    def band_edges(self, f: int) -> list:
        if f % self.sub_bands:
            raise ValueError(f"frequency extent {f} not divisible by {self.sub_bands} sub-bands")
        w = f // self.sub_bands
        return [(i * w, (i + 1) * w - 1) for i in range(self.sub_bands)]

    def inv_std(self) -> np.ndarray:
        """1/sqrt(var + eps) per (C, S); zero where the running variance says the input is constant.

        A constant input normalizes to exactly ``beta`` under batch statistics.
        Folding it with the full 1/sqrt(eps) gain instead would turn tiny mean
        drift and half-precision rounding into large output errors.
        """
        var = self.stats.var
        inv = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=var.dtype))
        return np.where(var < DEAD_VAR_FRACTION * self.eps, 0.0, inv).astype(var.dtype)

    def fold(self) -> tuple:
        """Eval-mode affine as (scale, shift), each shaped (C, S)."""
        scale = self.gamma.data * self.inv_std()
        shift = self.beta.data - self.stats.mean * scale
        return scale.astype(self.gamma.dtype), shift.astype(self.gamma.dtype)

    def half_eval(self, x: Tensor) -> Tensor:
        """Eval-mode forward with (scale, shift) rounded to half precision, as a packed model stores them."""
        n, c, f, t = x.shape
        s = self.sub_bands
        if f % s:
            raise ValueError(f"frequency extent {f} not divisible by {s} sub-bands")
        pair = self.folded if self.folded is not None else self.fold()
        scale, shift = (Tensor(a.astype(np.float16).astype(x.dtype).reshape(1, c, s, 1, 1)) for a in pair)
        return (x.reshape(n, c, s, f // s, t) * scale + shift).reshape(n, c, f, t)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        n, c, f, t = x.shape
        s = self.sub_bands
        if c != self.channels:
            raise ValueError(f"norm: channel axis C={c} != {self.channels}")
        if f % s:
            raise ValueError(f"frequency extent {f} not divisible by {s} sub-bands")
        xr = x.reshape(n, c, s, f // s, t)
        if training:
            y, mu, var = standardize(xr, (0, 3, 4), self.eps)
            count = n * (f // s) * t
            unbiased = var * (count / max(count - 1, 1))
            self.stats.update(mu.reshape(c, s), unbiased.reshape(c, s))
            y = y * self.gamma.reshape(1, c, s, 1, 1) + self.beta.reshape(1, c, s, 1, 1)
        else:
            scale, shift = self.folded if self.folded is not None else self.fold()
            y = xr * Tensor(scale.reshape(1, c, s, 1, 1), dtype=x.dtype) + Tensor(
                shift.reshape(1, c, s, 1, 1), dtype=x.dtype
            )
        return y.reshape(n, c, f, t)


def subspectral_norm(x: Tensor, norm: SubSpectralNorm, training: bool = True) -> Tensor:
    return norm(x, training)


@dataclass
class GlobalFreqStats:
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None and self.var is not None

    @classmethod
    def fit(cls, features: Iterable[np.ndarray]) -> "GlobalFreqStats":
        """Per-bin mean/variance over every frame of every clip.

        Each item is an array shaped (..., F, T); accumulation is in float64.
        """
        total = None
        sq = None
        count = 0
        for feat in features:
            a = np.asarray(feat, dtype=np.float64)
            a = a.reshape(-1, a.shape[-2], a.shape[-1])
            s1 = a.sum(axis=(0, 2))
            s2 = (a * a).sum(axis=(0, 2))
            total = s1 if total is None else total + s1
            sq = s2 if sq is None else sq + s2
            count += a.shape[0] * a.shape[2]
        if count == 0:
            raise ValueError("cannot fit global stats on an empty dataset")
        mean = total / count
        var = np.maximum(sq / count - mean * mean, 0.0)
        return cls(mean.astype(np.float32), var.astype(np.float32))


def global_freq_norm(x: Tensor, stats: GlobalFreqStats, eps: float = 1e-5) -> Tensor:
    if not stats.fitted:
        raise ValueError("global frequency stats are not fitted")
    f = x.shape[2]
    if stats.mean.shape != (f,):
        raise ValueError(f"stats cover {stats.mean.shape[0]} bins, input has {f}")
    inv = 1.0 / np.sqrt(stats.var.astype(np.float64) + eps)
    shift = Tensor((-stats.mean.astype(np.float64) * inv).reshape(1, 1, f, 1), dtype=x.dtype)
    return x * Tensor(inv.reshape(1, 1, f, 1), dtype=x.dtype) + shift
