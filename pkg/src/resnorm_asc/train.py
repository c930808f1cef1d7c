"""Training recipe: augmentation, SGD with warmup + cosine, evaluation, distillation."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import FeatureSet
from .model import GlobalFreqNormLayer, NetworkGraph, RunContext
from .normalization import GlobalFreqStats
from .ops import log_softmax, softmax, softmax_xent
from .tensor import Tensor, backward, no_grad

# Mask fill: "bin_mean" = each frequency bin's own temporal mean, "mean" = one
# scalar per clip, "zero" = 0.
SPECAUG_FILL = "bin_mean"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SpecAugConfig:
    n_freq_masks: int = 2
    freq_param: int = 40
    n_time_masks: int = 2
    time_param: int = 80


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: float = 5
    peak_lr: float = 0.06
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 64
    mixup_alpha: float = 0.3
    specaug: SpecAugConfig = field(default_factory=SpecAugConfig)
    roll_range_sec: float = 1.5
    hop_sec: float = 0.03
    seed: int = 0
    augment: bool = True
    kd_temperature: float = 4.0
    kd_beta: float = 0.5

    def __post_init__(self) -> None:
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> List[str]:
        errors = []
        for name in ("epochs", "batch_size"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be positive")
        for name in ("peak_lr", "momentum", "weight_decay", "mixup_alpha", "roll_range_sec", "hop_sec"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be non-negative")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            errors.append("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if not 0 <= self.kd_beta <= 1:
            errors.append("kd_beta must be in [0, 1]")
        return errors

    @property
    def roll_frames(self) -> int:
        return int(round(self.roll_range_sec / self.hop_sec))

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to peak, then cosine decay to 0 at the last step."""
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.peak_lr * step / warm
    progress = min(1.0, (step - warm) / (total - warm))
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ------------------------------------------------------------------ augmentation


def time_roll(feat: np.ndarray, shift_frames: Optional[int] = None, rng: Optional[np.random.Generator] = None,
              max_shift: int = 50) -> np.ndarray:
    """Circular shift along the last (time) axis; shifts wrap modulo the extent."""
    if shift_frames is None:
        if rng is None:
            raise ValueError("time_roll needs a shift or an rng")
        shift_frames = int(rng.integers(-max_shift, max_shift + 1))
    return np.roll(feat, shift_frames, axis=-1)


def mixup(x: np.ndarray, y: np.ndarray, alpha: float, rng: np.random.Generator,
          weight: Optional[float] = None, perm: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, float]:
    """Convex combination with a permuted partner; returns (x, y, weight)."""
    if alpha <= 0 and weight is None:
        raise ValueError("mixup alpha must be > 0")
    w = float(rng.beta(alpha, alpha)) if weight is None else float(weight)
    perm = rng.permutation(len(x)) if perm is None else np.asarray(perm)
    wx = np.asarray(w, dtype=x.dtype)
    mixed_x = wx * x + (1 - wx) * x[perm]
    mixed_y = w * y + (1 - w) * y[perm]
    return mixed_x, mixed_y.astype(y.dtype), w


def draw_masks(f: int, t: int, cfg: SpecAugConfig, rng: np.random.Generator) -> List[Tuple[str, int, int]]:
    """(axis, start, width) for every mask of one sample."""
    out = []
    for axis, count, param, extent in (("F", cfg.n_freq_masks, cfg.freq_param, f),
                                       ("T", cfg.n_time_masks, cfg.time_param, t)):
        param = min(param, extent)
        for _ in range(count):
            width = int(rng.integers(0, param + 1))
            start = int(rng.integers(0, extent - width + 1))
            out.append((axis, start, width))
    return out


def mask_fill(feat: np.ndarray, how: str = SPECAUG_FILL) -> np.ndarray:
    """Fill values broadcastable against ``feat`` (..., F, T)."""
    if how == "bin_mean":
        return feat.mean(axis=-1, keepdims=True)
    if how == "mean":
        return np.asarray(feat.mean(), dtype=feat.dtype)
    if how == "zero":
        return np.zeros((), dtype=feat.dtype)
    raise ValueError(f"unknown fill {how!r}")


def apply_masks(feat: np.ndarray, masks: Sequence[Tuple[str, int, int]], fill=None) -> np.ndarray:
    out = feat.copy()
    fill = mask_fill(feat) if fill is None else np.asarray(fill, dtype=feat.dtype)
    fill = np.broadcast_to(fill, feat.shape[:-1] + (1,)) if fill.ndim else fill
    for axis, start, width in masks:
        if width == 0:
            continue
        if axis == "F":
            out[..., start : start + width, :] = fill[..., start : start + width, :] if fill.ndim else fill
        else:
            out[..., start : start + width] = fill
    return out


def spec_augment(feat: np.ndarray, cfg: SpecAugConfig, rng: np.random.Generator) -> np.ndarray:
    """Frequency and time masking (no warping) of one (..., F, T) feature."""
    f, t = feat.shape[-2:]
    return apply_masks(feat, draw_masks(f, t, cfg, rng))


# ------------------------------------------------------------------ losses


def kd_loss(student_logits: Tensor, teacher_logits, labels, temperature: float = 4.0,
            beta: float = 0.5) -> Tensor:
    """beta * CE(student, labels) + (1 - beta) * T^2 * KL(teacher_T || student_T)."""
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_logits.shape != student_logits.shape:
        raise ValueError("student and teacher logits must have the same shape")
    if not 0 <= beta <= 1:
        raise ValueError("beta must be in [0, 1]")
    terms = []
    if beta > 0:
        terms.append(softmax_xent(student_logits, labels) * beta)
    if beta < 1:
        t64 = t_logits.astype(np.float64) / temperature
        p_t = softmax(t64)
        entropy = float(-(p_t * log_softmax(t64)).sum(axis=-1).mean())
        soft = softmax_xent(student_logits * (1.0 / temperature), p_t.astype(student_logits.dtype))
        terms.append((soft - entropy) * ((1 - beta) * temperature ** 2))
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalReport:
    per_device: Dict[str, float]
    overall: float
    device_mean: float
    log_loss: float
    device_variance: float
    counts: Dict[str, int]
    flagged: List[str] = field(default_factory=list)

    def mean_over(self, devices: Sequence[str]) -> float:
        vals = [self.per_device[d] for d in devices if d in self.per_device]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def predict_logits(model: NetworkGraph, x: np.ndarray, batch_size: int = 128,
                   run: Optional[RunContext] = None) -> np.ndarray:
    run = run or RunContext(training=False)
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            xb = Tensor(x[i : i + batch_size, None].astype(np.float32))
            outs.append(model.forward(xb, run).data)
    return np.concatenate(outs) if outs else np.zeros((0, model.config.num_classes), np.float32)


def report_from_logits(logits: np.ndarray, y: np.ndarray, devices: Sequence, expected: Sequence[str] = ()) -> EvalReport:
    """Top-1 accuracy (%) per device and overall, plus clamped log loss.

    argmax ties resolve to the lowest class index.
    """
    y = np.asarray(y)
    devices = np.asarray(devices, dtype=object)
    probs = softmax(logits.astype(np.float64))
    pred = np.argmax(probs, axis=1)
    correct = pred == y
    p_true = np.clip(probs[np.arange(len(y)), y], 1e-15, 1.0) if len(y) else np.zeros(0)
    per_device, counts = {}, {}
    for d in sorted(set(devices.tolist())):
        sel = devices == d
        per_device[d] = 100.0 * float(correct[sel].mean())
        counts[d] = int(sel.sum())
    flagged = [d for d in expected if d not in per_device]
    accs = np.array(list(per_device.values())) if per_device else np.zeros(0)
    return EvalReport(
        per_device=per_device,
        overall=100.0 * float(correct.mean()) if len(y) else float("nan"),
        device_mean=float(accs.mean()) if len(accs) else float("nan"),
        log_loss=float(-np.log(p_true).mean()) if len(y) else float("nan"),
        device_variance=float(accs.var()) if len(accs) else float("nan"),
        counts=counts,
        flagged=flagged,
    )


def evaluate(model: NetworkGraph, dataset: FeatureSet, batch_size: int = 128,
             expected_devices: Sequence[str] = (), run: Optional[RunContext] = None) -> EvalReport:
    logits = predict_logits(model, dataset.x, batch_size, run)
    return report_from_logits(logits, dataset.y, dataset.devices, expected_devices)


def select_checkpoint(history: Sequence, policy: str = "last") -> int:
    """Index into ``history``; ``min_var`` picks the lowest per-device accuracy variance (ties -> later)."""
    if not history:
        raise ValueError("empty history")
    if policy == "last":
        return len(history) - 1
    if policy != "min_var":
        raise ValueError(f"unknown policy {policy!r}")
    variances = [h.device_variance if isinstance(h, EvalReport) else float(h) for h in history]
    best = 0
    for i, v in enumerate(variances):
        if v <= variances[best]:
            best = i
    return best


# ------------------------------------------------------------------ optimizer


class SGD:
    """Momentum SGD; weight decay is added to the gradient before the momentum update."""

    def __init__(self, params: List[Tensor], momentum: float, weight_decay: float,
                 masks: Optional[Dict[int, np.ndarray]] = None) -> None:
        self.params = params
        self.momentum, self.weight_decay = momentum, weight_decay
        self.buffers = [np.zeros_like(p.data) for p in params]
        self.masks = masks or {}

    def step(self, lr: float) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf *= self.momentum
            buf += g
            if lr != 0:
                p.data -= np.asarray(lr, dtype=p.dtype) * buf
            mask = self.masks.get(id(p))
            if mask is not None:
                p.data *= mask

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ------------------------------------------------------------------ training loop


def _one_hot(y: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k, dtype=np.float32)[y]


def fit_global_stats(model: NetworkGraph, dataset: FeatureSet) -> None:
    norm = model.input_norm
    if isinstance(norm, GlobalFreqNormLayer) and not norm.stats.fitted:
        norm.stats = GlobalFreqStats.fit([dataset.x])


def train(
    model: NetworkGraph,
    dataset: FeatureSet,
    cfg: TrainConfig,
    eval_set: Optional[FeatureSet] = None,
    teacher: Optional[NetworkGraph] = None,
    qat: bool = False,
    keep_checkpoints: bool = False,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Tuple[NetworkGraph, List[dict]]:
    """Run the recipe in place; returns the model and per-epoch history records.

    Per batch: time roll -> mixup -> SpecAugment -> forward/backward -> SGD.
    With ``teacher`` the loss is :func:`kd_loss` against the teacher's eval
    logits on the same augmented batch. Conv masks set on the model keep
    pruned weights at zero throughout.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    fit_global_stats(model, dataset)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(5)]
    rng_shuffle, rng_roll, rng_mix, rng_mask, rng_drop = streams
    k = model.config.num_classes
    params = model.parameters()
    masks = {id(c.weight): c.mask.astype(c.weight.dtype) for c in model.conv_layers() if c.mask is not None}
    opt = SGD(params, cfg.momentum, cfg.weight_decay, masks)
    n = len(dataset)
    spe = math.ceil(n / cfg.batch_size)
    step = 0
    history: List[dict] = []
    run = RunContext(training=True, rng=rng_drop, qat=qat)
    teacher_run = RunContext(training=False)
    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(n)
        losses = []
        lr = 0.0
        for b in range(spe):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb = dataset.x[idx].astype(np.float32)
            yb = _one_hot(dataset.y[idx], k)
            if cfg.augment:
                xb = np.stack([time_roll(s, rng=rng_roll, max_shift=cfg.roll_frames) for s in xb])
                if cfg.mixup_alpha > 0 and len(xb) > 1:
                    xb, yb, _ = mixup(xb, yb, cfg.mixup_alpha, rng_mix)
                xb = np.stack([spec_augment(s, cfg.specaug, rng_mask) for s in xb])
            x = Tensor(xb[:, None])
            logits = model.forward(x, run)
            if teacher is not None:
                with no_grad():
                    t_logits = teacher.forward(x, teacher_run).data
                loss = kd_loss(logits, t_logits, yb, cfg.kd_temperature, cfg.kd_beta)
            else:
                loss = softmax_xent(logits, yb)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss is {value} at epoch {epoch} step {step}")
            opt.zero_grad()
            backward(loss)
            lr = lr_at(cfg, step, spe)
            opt.step(lr)
            losses.append(value)
            step += 1
        record = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses))}
        if eval_set is not None:
            rep = evaluate(model, eval_set, run=RunContext(training=False, qat=qat))
            record.update(per_device=rep.per_device, overall=rep.overall, logloss=rep.log_loss,
                          device_variance=rep.device_variance)
        if keep_checkpoints:
            record["state"] = copy.deepcopy(model.state_dict())
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return model, history
