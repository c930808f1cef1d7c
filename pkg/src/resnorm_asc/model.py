"""BC-ResNet-Mod: broadcasted-residual CNN with frequency-wise normalization.

Macro layout for base width ``c`` on a (N, 1, 256, T) log-mel input::

    conv 5x5 /2 -> 2c      128 x T/2
    stage1  2 blocks -> c  128 x T/2,  max-pool 2x2
    stage2  2 blocks -> 1.5c 64 x T/4, max-pool 2x2
    stage3  2 blocks -> 2c  32 x T/8
    stage4  3 blocks -> 2.5c 32 x T/8
    conv 1x1 -> classes, average over every position
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .normalization import GlobalFreqStats, SubSpectralNorm, global_freq_norm, res_norm
from .ops import ConvSpec
from .tensor import Tensor

NORM_MODES = ("resnorm", "pre-resnorm", "freqin", "global", "none")
STAGE_MULTIPLIERS = (1.0, 1.5, 2.0, 2.5)
STAGE_DEPTHS = (2, 2, 2, 3)
POOL_AFTER_STAGES = (0, 1)
N_MELS = 256


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


@dataclass
class ModelConfig:
    base_channels: int = 80
    num_classes: int = 10
    dropout: float = 0.1
    ssn_sub_bands: int = 4
    norm_mode: str = "resnorm"
    lam: float = 0.1
    eps: float = 1e-5
    resnorm_after_pool: bool = False

    def __post_init__(self) -> None:
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.base_channels < 1 or self.num_classes < 1:
            raise ValueError("base_channels and num_classes must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def stage_widths(self) -> Tuple[int, ...]:
        return tuple(_round_half_up(self.base_channels * m) for m in STAGE_MULTIPLIERS)

    @property
    def front_channels(self) -> int:
        return 2 * self.base_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class RunContext:
    """Per-call execution settings."""

    training: bool = False
    rng: Optional[np.random.Generator] = None
    qat: bool = False
    trace: Optional[List[Tuple[str, Tuple[int, ...]]]] = None
    hooks: Dict[str, Callable[[Tensor], None]] = field(default_factory=dict)


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    def __init__(self, name: str) -> None:
        self.name = name

    def params(self) -> List[Tuple[str, Tensor, str]]:
        """(qualified name, tensor, family) triples; family in conv/norm/bias."""
        return []

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []

    def children(self) -> List["Layer"]:
        return []

    def rf_terms(self) -> List[Tuple[int, int, int, int]]:
        """Receptive-field contributions (kF, kT, sF, sT) along the serial path."""
        return []

    def forward(self, x: Tensor, run: RunContext) -> Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Conv(Layer):
    def __init__(self, name: str, spec: ConvSpec, kind: str, bias: bool, rng: np.random.Generator,
                 dtype=np.float32) -> None:
        super().__init__(name)
        self.kind = kind
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if bias else None
        self.mask: Optional[np.ndarray] = None
        self.quant_bits: Optional[int] = None

    def params(self):
        out = [(f"{self.name}.weight", self.weight, "conv")]
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias, "bias"))
        return out

    def rf_terms(self):
        return [(*self.spec.kernel, *self.spec.stride)]

    def effective_weight(self, run: RunContext) -> Tensor:
        if self.mask is None and not (run.qat and self.quant_bits):
            return self.weight
        mask = self.mask if self.mask is not None else np.ones(self.weight.shape, dtype=bool)
        bits = self.quant_bits if run.qat else None
        return ops.fake_quant(self.weight, mask, bits)

    def forward(self, x, run):
        bias = self.bias
        if run.qat and bias is not None:
            bias = ops.fake_quant(bias, np.ones(bias.shape, dtype=bool), 16)
        return ops.conv2d(x, self.effective_weight(run), bias, self.spec)


class Norm(Layer):
    def __init__(self, name: str, channels: int, sub_bands: int, eps: float, dtype=np.float32) -> None:
        super().__init__(name)
        self.norm = SubSpectralNorm(channels, sub_bands, eps, dtype=dtype)
        self.kind = self.norm.kind

    def params(self):
        return [(f"{self.name}.gamma", self.norm.gamma, "norm"), (f"{self.name}.beta", self.norm.beta, "norm")]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.norm.stats.mean),
                (f"{self.name}.running_var", self.norm.stats.var)]

    def forward(self, x, run):
        # QAT evaluation uses the half-precision fold the export stores
        if run.qat and not run.training:
            return self.norm.half_eval(x)
        return self.norm(x, run.training)


class ResNormLayer(Layer):
    def __init__(self, name: str, lam: float, eps: float) -> None:
        super().__init__(name)
        self.lam, self.eps = lam, eps
        self.kind = "resnorm" if lam > 0 else "freqin"

    def forward(self, x, run):
        return res_norm(x, self.lam, self.eps)


class GlobalFreqNormLayer(Layer):
    kind = "global-freqnorm"

    def __init__(self, name: str, eps: float) -> None:
        super().__init__(name)
        self.eps = eps
        self.stats = GlobalFreqStats()

    def buffers(self):
        if not self.stats.fitted:
            return []
        return [(f"{self.name}.mean", self.stats.mean), (f"{self.name}.var", self.stats.var)]

    def forward(self, x, run):
        return global_freq_norm(x, self.stats, self.eps)


class Act(Layer):
    def __init__(self, name: str, kind: str) -> None:
        super().__init__(name)
        self.kind = kind

    def forward(self, x, run):
        return ops.activation(x, self.kind)


class MaxPool(Layer):
    kind = "maxpool"

    def rf_terms(self):
        return [(2, 2, 2, 2)]

    def forward(self, x, run):
        return ops.pool2d(x, "max", (2, 2), (2, 2))


class FreqAvgPool(Layer):
    kind = "freq-avgpool"

    def forward(self, x, run):
        return ops.reduce_mean(x, ("F",), keepdims=True)


class DropoutLayer(Layer):
    kind = "dropout"

    def __init__(self, name: str, rate: float) -> None:
        super().__init__(name)
        self.rate = rate

    def forward(self, x, run):
        return ops.dropout(x, self.rate, run.rng, run.training and run.rng is not None)


class BroadcastAdd(Layer):
    """Marker for the residual sum; the enclosing block performs it."""

    kind = "broadcast-add"


class GlobalAvgPool(Layer):
    kind = "global-avgpool"

    def forward(self, x, run):
        n, k = x.shape[:2]
        return ops.reduce_mean(x, ("F", "T"), keepdims=False).reshape(n, k)


class BCResBlock(Layer):
    """Broadcasted residual block.

    2-D path: depthwise 3x1 conv over frequency + sub-spectral norm.
    1-D path: average over frequency, depthwise 1x3 conv over time, BN,
    swish, pointwise conv, dropout. The 1-D result is broadcast back over
    frequency and summed with the 2-D path (plus the identity for non
    transition blocks), then ReLU. Transition blocks change width with a
    leading pointwise conv + BN + ReLU and have no identity shortcut.
    """

    kind = "bc-resblock"

    def __init__(self, name: str, in_ch: int, out_ch: int, sub_bands: int, dropout: float, eps: float,
                 rng: np.random.Generator, dtype=np.float32) -> None:
        super().__init__(name)
        self.in_channels, self.out_channels = in_ch, out_ch
        self.is_transition = in_ch != out_ch
        layers: List[Layer] = []
        if self.is_transition:
            layers += [
                Conv(f"{name}.trans_conv", ConvSpec(in_ch, out_ch), "conv", False, rng, dtype),
                Norm(f"{name}.trans_bn", out_ch, 1, eps, dtype),
                Act(f"{name}.trans_relu", "relu"),
            ]
        self.freq_conv = Conv(f"{name}.freq_dw",
                              ConvSpec(out_ch, out_ch, (3, 1), (1, 1), (1, 0), groups=out_ch),
                              "dwconv-freq", False, rng, dtype)
        self.ssn = Norm(f"{name}.ssn", out_ch, sub_bands, eps, dtype)
        self.freq_pool = FreqAvgPool(f"{name}.freq_pool")
        self.time_conv = Conv(f"{name}.time_dw",
                              ConvSpec(out_ch, out_ch, (1, 3), (1, 1), (0, 1), groups=out_ch),
                              "dwconv-time", False, rng, dtype)
        self.time_bn = Norm(f"{name}.time_bn", out_ch, 1, eps, dtype)
        self.swish = Act(f"{name}.swish", "swish")
        self.pw = Conv(f"{name}.pw", ConvSpec(out_ch, out_ch), "conv", False, rng, dtype)
        self.drop = DropoutLayer(f"{name}.dropout", dropout)
        self.add = BroadcastAdd(f"{name}.add")
        self.out_act = Act(f"{name}.relu", "relu")
        self.transition = layers
        self.layers = layers + [self.freq_conv, self.ssn, self.freq_pool, self.time_conv, self.time_bn,
                                self.swish, self.pw, self.drop, self.add, self.out_act]

    def children(self):
        return self.layers

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]

    def rf_terms(self):
        return [t for layer in self.layers for t in layer.rf_terms()]

    def forward(self, x, run):
        for layer in self.transition:
            x = layer.forward(x, run)
        two_d = self.ssn.forward(self.freq_conv.forward(x, run), run)
        y = self.freq_pool.forward(two_d, run)
        for layer in (self.time_conv, self.time_bn, self.swish, self.pw, self.drop):
            y = layer.forward(y, run)
        hook = run.hooks.get(self.name)
        if hook is not None:
            hook(y)
        out = two_d + y
        if not self.is_transition:
            out = out + x
        return self.out_act.forward(out, run)


# ---------------------------------------------------------------- graph


def resnorm_sites(cfg: ModelConfig) -> List[Tuple[int, str]]:
    """Where stage-level ResNorm sits: (stage index, 'before_pool'|'after_pool')."""
    if cfg.norm_mode != "resnorm":
        return []
    where = "after_pool" if cfg.resnorm_after_pool else "before_pool"
    return [(i, where if i in POOL_AFTER_STAGES else "before_pool") for i in range(len(STAGE_DEPTHS))]


class NetworkGraph:
    """Ordered top-level layer list of a built model."""

    def __init__(self, config: ModelConfig, layers: List[Layer]) -> None:
        self.config = config
        self.layers = layers

    def iter_layers(self) -> Iterator[Layer]:
        stack = list(reversed(self.layers))
        while stack:
            layer = stack.pop()
            yield layer
            stack.extend(reversed(layer.children()))

    def named_params(self) -> List[Tuple[str, Tensor, str]]:
        return [p for layer in self.layers for p in layer.params()]

    def parameters(self) -> List[Tensor]:
        return [p for _, p, _ in self.named_params()]

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [b for layer in self.layers for b in layer.buffers()]

    def conv_layers(self) -> List[Conv]:
        return [layer for layer in self.iter_layers() if isinstance(layer, Conv)]

    def norm_layers(self) -> List[Norm]:
        return [layer for layer in self.iter_layers() if isinstance(layer, Norm)]

    def blocks(self) -> List[BCResBlock]:
        return [layer for layer in self.layers if isinstance(layer, BCResBlock)]

    def count_kind(self, kind: str) -> int:
        return sum(1 for layer in self.iter_layers() if layer.kind == kind)

    @property
    def input_norm(self) -> Optional[Layer]:
        for layer in self.layers:
            if layer.name == "input_norm":
                return layer
        return None

    def forward(self, x: Tensor, run: Optional[RunContext] = None) -> Tensor:
        run = run or RunContext()
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input (N, 1, {N_MELS}, T), got {x.shape}")
        if x.shape[2] != N_MELS:
            raise ValueError(f"input frequency axis F={x.shape[2]}, model expects {N_MELS}")
        if x.shape[3] < 8:
            raise ValueError(f"input time axis T={x.shape[3]} < 8")
        for layer in self.layers:
            x = layer.forward(x, run)
            if run.trace is not None:
                run.trace.append((layer.name, x.shape))
        return x

    __call__ = forward

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p, _ in self.named_params()}
        state.update(dict(self.buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p, _ in self.named_params():
            if name not in state:
                raise KeyError(f"missing tensor {name!r}")
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for layer in self.iter_layers():
            if isinstance(layer, Norm):
                layer.norm.stats.mean = np.array(state[f"{layer.name}.running_mean"], dtype=layer.norm.gamma.dtype)
                layer.norm.stats.var = np.array(state[f"{layer.name}.running_var"], dtype=layer.norm.gamma.dtype)
            elif isinstance(layer, GlobalFreqNormLayer) and f"{layer.name}.mean" in state:
                layer.stats = GlobalFreqStats(np.array(state[f"{layer.name}.mean"], dtype=np.float32),
                                              np.array(state[f"{layer.name}.var"], dtype=np.float32))


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> NetworkGraph:
    """Construct the layer list for ``cfg`` with seeded He-normal conv weights."""
    rng = np.random.default_rng(seed)
    widths = cfg.stage_widths
    if min(widths) < 1:
        raise ValueError(f"stage widths {widths} must all be >= 1")
    freq = N_MELS // 2
    layers: List[Layer] = []
    if cfg.norm_mode in ("resnorm", "pre-resnorm"):
        layers.append(ResNormLayer("input_norm", cfg.lam, cfg.eps))
    elif cfg.norm_mode == "freqin":
        layers.append(ResNormLayer("input_norm", 0.0, cfg.eps))
    elif cfg.norm_mode == "global":
        layers.append(GlobalFreqNormLayer("input_norm", cfg.eps))
    front = cfg.front_channels
    layers += [
        Conv("front.conv", ConvSpec(1, front, (5, 5), (2, 2), (2, 2)), "conv", False, rng, dtype),
        Norm("front.bn", front, 1, cfg.eps, dtype),
        Act("front.relu", "relu"),
    ]
    sites = dict(resnorm_sites(cfg))
    in_ch = front
    for s, (width, depth) in enumerate(zip(widths, STAGE_DEPTHS)):
        if freq % cfg.ssn_sub_bands:
            raise ValueError(
                f"stage{s + 1}: frequency extent {freq} not divisible by {cfg.ssn_sub_bands} sub-bands"
            )
        for b in range(depth):
            layers.append(BCResBlock(f"stage{s + 1}.block{b}", in_ch, width, cfg.ssn_sub_bands,
                                     cfg.dropout, cfg.eps, rng, dtype))
            in_ch = width
        norm = ResNormLayer(f"stage{s + 1}.resnorm", cfg.lam, cfg.eps) if s in sites else None
        if norm is not None and sites[s] == "before_pool":
            layers.append(norm)
        if s in POOL_AFTER_STAGES:
            layers.append(MaxPool(f"pool{s + 1}"))
            freq //= 2
        if norm is not None and sites[s] == "after_pool":
            layers.append(norm)
    layers += [
        Conv("classifier", ConvSpec(in_ch, cfg.num_classes), "conv", True, rng, dtype),
        GlobalAvgPool("global_pool"),
    ]
    return NetworkGraph(cfg, layers)


def forward(graph: NetworkGraph, x: Tensor, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    return graph.forward(x, RunContext(training=mode == "train", rng=rng))


def shape_chain(graph: NetworkGraph, t: int = 330) -> List[Tuple[str, Tuple[int, ...]]]:
    """Output shape after every top-level layer for a (1, 1, 256, t) input."""
    from .tensor import no_grad

    trace: List[Tuple[str, Tuple[int, ...]]] = []
    with no_grad():
        x = Tensor(np.zeros((1, 1, N_MELS, t), dtype=np.float32))
        if isinstance(graph.input_norm, GlobalFreqNormLayer) and not graph.input_norm.stats.fitted:
            graph.input_norm.stats = GlobalFreqStats(np.zeros(N_MELS, np.float32), np.ones(N_MELS, np.float32))
            try:
                graph.forward(x, RunContext(trace=trace))
            finally:
                graph.input_norm.stats = GlobalFreqStats()
        else:
            graph.forward(x, RunContext(trace=trace))
    return trace


# ---------------------------------------------------------------- accounting


@dataclass
class ParamRow:
    name: str
    kind: str
    shape: Tuple[int, ...]
    count: int
    family: str
    nonzero: int


def count_params(graph: Optional[NetworkGraph]) -> dict:
    """Per-tensor table plus totals split into conv weights, norm affine and biases."""
    rows: List[ParamRow] = []
    if graph is not None:
        kinds = {}
        for layer in graph.iter_layers():
            for name, _, _ in layer.params():
                kinds.setdefault(name, layer.kind)
        for name, p, family in graph.named_params():
            rows.append(ParamRow(name, kinds[name], tuple(p.shape), int(p.size), family,
                                 int(np.count_nonzero(p.data))))
    totals = {
        "conv_params": sum(r.count for r in rows if r.family == "conv"),
        "norm_params": sum(r.count for r in rows if r.family == "norm"),
        "bias_params": sum(r.count for r in rows if r.family == "bias"),
    }
    totals["other_params"] = totals["norm_params"] + totals["bias_params"]
    totals["total"] = totals["conv_params"] + totals["other_params"]
    totals["nonzero"] = sum(r.nonzero for r in rows)
    return {"rows": rows, "totals": totals}


def receptive_field(graph: NetworkGraph, count_pool_extent: bool = True) -> Tuple[int, int, int, int]:
    """(rf_freq, rf_time, jump_freq, jump_time) along the serial path.

    Each layer contributes ``rf += (k - 1) * jump`` then ``jump *= stride``.
    The frequency-averaging branch inside blocks is excluded (it is global
    over frequency by construction). With ``count_pool_extent=False`` pooling
    only rescales the jump and adds no extent.
    """
    rf_f = rf_t = 1
    j_f = j_t = 1
    for layer in graph.layers:
        pool = isinstance(layer, MaxPool)
        for kf, kt, sf, st in layer.rf_terms():
            if count_pool_extent or not pool:
                rf_f += (kf - 1) * j_f
                rf_t += (kt - 1) * j_t
            j_f *= sf
            j_t *= st
    return rf_f, rf_t, j_f, j_t


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"BCRM"
CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.float16): 2,
               np.dtype(np.int8): 3, np.dtype(np.uint8): 4, np.dtype(np.int32): 5, np.dtype(np.uint32): 6}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(ValueError):
    """Bad magic, version, CRC or truncated payload."""


def write_tensor_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


class Reader:
    def __init__(self, data: bytes) -> None:
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor_record(self) -> Tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode("utf-8")
        tag, ndim = self.unpack("<BB")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        dt = _TAG_DTYPES[tag].newbyteorder("<")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.astype(dt.newbyteorder("="))


def check_crc(data: bytes, magic: bytes) -> bytes:
    """Validate magic + trailing CRC32 and return the body without the CRC."""
    if len(data) < len(magic) + 4 or data[: len(magic)] != magic:
        raise FormatError(f"bad magic: expected {magic!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("CRC mismatch (corrupt or truncated file)")
    return body


def save_checkpoint(graph: NetworkGraph, meta: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    header = json.dumps({"config": graph.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    state = graph.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        write_tensor_record(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def load_checkpoint(data: bytes) -> Tuple[NetworkGraph, dict]:
    body = check_crc(data, CKPT_MAGIC)
    r = Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    (count,) = r.unpack("<I")
    state = dict(r.tensor_record() for _ in range(count))
    graph = build(ModelConfig.from_dict(header["config"]))
    graph.load_state_dict(state)
    return graph, header.get("meta", {})
