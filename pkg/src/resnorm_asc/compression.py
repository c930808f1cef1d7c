"""Magnitude pruning, symmetric quantization, quantized inference and the packed model format."""

from __future__ import annotations

import copy
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import FeatureSet
from .model import (Conv, FormatError, GlobalFreqNormLayer, ModelConfig, NetworkGraph, Reader, RunContext,
                    build, check_crc)
from .normalization import GlobalFreqStats
from .ops import dequantize, symmetric_quantize
from .tensor import Tensor, no_grad
from .train import EvalReport, TrainConfig, evaluate, train

PACK_MAGIC = b"BCRQ"
PACK_VERSION = 1

# Record encodings. Sparse records list kept positions as delta-coded u32 indices.
DENSE16, SPARSE8, SPARSE16, DENSE32, DENSE8 = 0, 1, 2, 3, 4
ENCODING_NAMES = {DENSE16: "dense16", SPARSE8: "sparse8", SPARSE16: "sparse16", DENSE32: "dense32", DENSE8: "dense8"}
_VALUE_DTYPES = {DENSE16: "<f2", SPARSE8: "<i1", SPARSE16: "<f2", DENSE32: "<f4", DENSE8: "<i1"}


# ------------------------------------------------------------------ pruning


@dataclass
class PruneMask:
    """Boolean keep-masks per conv layer name (True = weight survives)."""

    masks: Dict[str, np.ndarray]
    ratio: float = 0.0
    scope: str = "global"

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    @property
    def kept(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    @property
    def sparsity(self) -> float:
        return 1.0 - self.kept / self.total if self.total else 0.0

    def apply(self, graph: NetworkGraph) -> None:
        """Install masks on the graph's conv layers and zero the pruned weights."""
        for conv in graph.conv_layers():
            mask = self.masks.get(conv.name)
            if mask is None:
                continue
            if mask.shape != conv.weight.shape:
                raise ValueError(f"{conv.name}: mask shape {mask.shape} != weight {conv.weight.shape}")
            conv.mask = mask.copy()
            conv.weight.data = conv.weight.data * mask.astype(conv.weight.dtype)


def _prune_count(n: int, ratio: float) -> int:
    return int(np.floor(ratio * n + 0.5))


def magnitude_prune(graph: NetworkGraph, ratio: float, scope: str = "global", apply: bool = True) -> PruneMask:
    """Zero the ``ratio`` fraction of smallest-magnitude conv weights.

    ``scope="global"`` ranks all conv weights together; ``"layer"`` prunes each
    layer to the same ratio. Equal magnitudes are removed in layer order, then
    flat index order, so the result is deterministic.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"prune ratio must be in [0, 1), got {ratio}")
    if scope not in ("global", "layer"):
        raise ValueError(f"unknown prune scope {scope!r}")
    convs = graph.conv_layers()
    if scope == "global":
        flat = np.concatenate([np.abs(c.weight.data.astype(np.float64)).ravel() for c in convs])
        k = _prune_count(flat.size, ratio)
        order = np.argsort(flat, kind="stable")
        keep = np.ones(flat.size, dtype=bool)
        keep[order[:k]] = False
        masks, pos = {}, 0
        for c in convs:
            size = c.weight.data.size
            masks[c.name] = keep[pos : pos + size].reshape(c.weight.shape)
            pos += size
    else:
        masks = {}
        for c in convs:
            flat = np.abs(c.weight.data.astype(np.float64)).ravel()
            keep = np.ones(flat.size, dtype=bool)
            keep[np.argsort(flat, kind="stable")[: _prune_count(flat.size, ratio)]] = False
            masks[c.name] = keep.reshape(c.weight.shape)
    result = PruneMask(masks, ratio, scope)
    if apply:
        result.apply(graph)
    return result


def current_mask(graph: NetworkGraph) -> PruneMask:
    """Masks already installed on ``graph`` (all-True where none is set)."""
    masks = {c.name: (c.mask if c.mask is not None else np.ones(c.weight.shape, dtype=bool)).copy()
             for c in graph.conv_layers()}
    out = PruneMask(masks)
    out.ratio = out.sparsity
    return out


# ------------------------------------------------------------------ quantization


@dataclass(frozen=True)
class QuantScheme:
    """Storage precision: conv weights 8 (int8) or 16 (fp16) bits; everything else fp16.

    ``conv_bits=None`` keeps float32 conv weights and disables fake quantization.
    """

    conv_bits: Optional[int] = 8
    other_bits: int = 16

    def __post_init__(self) -> None:
        if self.conv_bits not in (8, 16, None):
            raise ValueError(f"conv_bits must be 8, 16 or None, got {self.conv_bits}")
        if self.other_bits != 16:
            raise ValueError("non-conv parameters are stored as fp16")

    @property
    def enabled(self) -> bool:
        return self.conv_bits is not None


def quantize_sym(w: np.ndarray, bits: int = 8) -> Tuple[np.ndarray, np.float32]:
    """Per-tensor symmetric quantization, round half away from zero."""
    return symmetric_quantize(np.asarray(w), bits)


def attach(graph: NetworkGraph, mask: Optional[PruneMask], scheme: QuantScheme) -> None:
    """Install masks and fake-quant precision on every conv layer."""
    if mask is not None:
        mask.apply(graph)
    for conv in graph.conv_layers():
        conv.quant_bits = scheme.conv_bits


def qat_forward(graph: NetworkGraph, x: Tensor, training: bool = True,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """Forward with masked, fake-quantized conv weights (straight-through gradients)."""
    return graph.forward(x, RunContext(training=training, rng=rng, qat=True))


def _stored_conv_weight(conv: Conv, scheme: QuantScheme) -> np.ndarray:
    mask = conv.mask if conv.mask is not None else np.ones(conv.weight.shape, dtype=bool)
    w = conv.weight.data * mask.astype(conv.weight.dtype)
    if scheme.conv_bits == 8:
        q, scale = quantize_sym(w, 8)
        return dequantize(q, scale, np.float32)
    if scheme.conv_bits == 16:
        return w.astype(np.float16).astype(np.float32)
    return w.astype(np.float32)


def _half(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).astype(np.float16).astype(np.float32)


def quantized_model(graph: NetworkGraph, scheme: QuantScheme = QuantScheme()) -> NetworkGraph:
    """Eval-only copy with stored-precision weights.

    Conv weights are masked and rounded to the storage precision, each norm is
    folded into an fp16 (scale, shift) pair and the classifier bias is fp16.
    """
    out = copy.deepcopy(graph)
    for conv in out.conv_layers():
        conv.weight.data = _stored_conv_weight(conv, scheme)
        conv.quant_bits = None
        if conv.bias is not None:
            conv.bias.data = _half(conv.bias.data)
    for norm in out.norm_layers():
        scale, shift = norm.norm.fold()
        norm.norm.folded = (_half(scale), _half(shift))
    gnorm = out.input_norm
    if isinstance(gnorm, GlobalFreqNormLayer) and gnorm.stats.fitted:
        gnorm.stats = GlobalFreqStats(gnorm.stats.mean.astype(np.float32), gnorm.stats.var.astype(np.float32))
    return out


# ------------------------------------------------------------------ size accounting


@dataclass
class SizeRow:
    name: str
    encoding: str
    count: int
    stored: int
    payload_bytes: int
    index_bytes: int


@dataclass
class SizeReport:
    """Model size where KiB = payload bytes / 1024.

    Payload counts one value per stored parameter at its storage width; sparse
    index bytes, scales, names and headers are reported separately.
    """

    rows: List[SizeRow] = field(default_factory=list)
    file_bytes: int = 0

    @property
    def payload_bytes(self) -> int:
        return sum(r.payload_bytes for r in self.rows)

    @property
    def index_bytes(self) -> int:
        return sum(r.index_bytes for r in self.rows)

    @property
    def kib(self) -> float:
        return self.payload_bytes / 1024

    @property
    def kib_with_index(self) -> float:
        return (self.payload_bytes + self.index_bytes) / 1024

    @property
    def nonzero(self) -> int:
        return sum(r.stored for r in self.rows if r.encoding != ENCODING_NAMES[DENSE32])

    def to_dict(self) -> dict:
        return {
            "payload_bytes": self.payload_bytes,
            "index_bytes": self.index_bytes,
            "file_bytes": self.file_bytes,
            "kib": self.kib,
            "kib_with_index": self.kib_with_index,
            "rows": [asdict(r) for r in self.rows],
        }


def size_from_counts(int8_params: int = 0, fp16_params: int = 0, fp32_params: int = 0) -> float:
    """KiB of a parameter inventory: 1, 2 and 4 bytes per value, 1024 bytes per KiB."""
    return (int8_params + 2 * fp16_params + 4 * fp32_params) / 1024


# ------------------------------------------------------------------ packed format


def _write_json(buf: io.BytesIO, obj: dict) -> None:
    raw = json.dumps(obj, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_record(buf: io.BytesIO, report: SizeReport, name: str, shape: Tuple[int, ...], encoding: int,
                  values: np.ndarray, indices: Optional[np.ndarray] = None,
                  scale: np.float32 = np.float32(1.0)) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<BB", encoding, len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(struct.pack("<I", len(values)))
    index_bytes = 0
    if indices is not None:
        deltas = np.diff(indices.astype(np.int64), prepend=0).astype("<u4")
        buf.write(deltas.tobytes())
        index_bytes = deltas.nbytes
    payload = np.ascontiguousarray(values).astype(_VALUE_DTYPES[encoding]).tobytes()
    buf.write(payload)
    buf.write(struct.pack("<f", scale))
    report.rows.append(SizeRow(name, ENCODING_NAMES[encoding], int(np.prod(shape)), len(values),
                               len(payload), index_bytes))


def pack(graph: NetworkGraph, scheme: QuantScheme = QuantScheme(), meta: Optional[dict] = None
         ) -> Tuple[bytes, SizeReport]:
    """Serialize a trained (optionally masked) model at storage precision; returns (bytes, size report).

    Weights are quantized here, so pass the float model rather than the output
    of :func:`quantized_model`; :func:`unpack` reproduces that output exactly.

    Layout: magic, u16 version, JSON header {config, scheme, meta}, u32 record
    count, records, CRC32 of everything before it. A record is: u16 name
    length, name, u8 encoding, u8 ndim, u32 dims, u32 stored count, stored
    u32 index deltas (sparse only), values, f32 scale.
    """
    if scheme.conv_bits is None:
        raise ValueError("packing needs conv_bits of 8 or 16")
    report = SizeReport()
    buf = io.BytesIO()
    buf.write(PACK_MAGIC + struct.pack("<H", PACK_VERSION))
    _write_json(buf, {"config": graph.config.to_dict(), "scheme": asdict(scheme), "meta": meta or {}})
    records = io.BytesIO()
    n_records = 0
    for conv in graph.conv_layers():
        mask = conv.mask
        w = conv.weight.data if mask is None else conv.weight.data * mask.astype(conv.weight.dtype)
        name = f"{conv.name}.weight"
        if mask is None:
            if scheme.conv_bits == 8:
                q, scale = quantize_sym(w, 8)
                _write_record(records, report, name, w.shape, DENSE8, q.ravel(), scale=scale)
            else:
                _write_record(records, report, name, w.shape, DENSE16, w.ravel())
        else:
            idx = np.flatnonzero(mask.ravel())
            if scheme.conv_bits == 8:
                q, scale = quantize_sym(w, 8)
                _write_record(records, report, name, w.shape, SPARSE8, q.ravel()[idx], idx, scale)
            else:
                _write_record(records, report, name, w.shape, SPARSE16, w.ravel()[idx], idx)
        n_records += 1
        if conv.bias is not None:
            _write_record(records, report, f"{conv.name}.bias", conv.bias.shape, DENSE16, conv.bias.data.ravel())
            n_records += 1
    for norm in graph.norm_layers():
        scale, shift = norm.norm.folded if norm.norm.folded is not None else norm.norm.fold()
        _write_record(records, report, f"{norm.name}.scale", scale.shape, DENSE16, scale.ravel())
        _write_record(records, report, f"{norm.name}.shift", shift.shape, DENSE16, shift.ravel())
        n_records += 2
    gnorm = graph.input_norm
    if isinstance(gnorm, GlobalFreqNormLayer) and gnorm.stats.fitted:
        _write_record(records, report, "input_norm.mean", gnorm.stats.mean.shape, DENSE32, gnorm.stats.mean)
        _write_record(records, report, "input_norm.var", gnorm.stats.var.shape, DENSE32, gnorm.stats.var)
        n_records += 2
    buf.write(struct.pack("<I", n_records))
    buf.write(records.getvalue())
    body = buf.getvalue()
    data = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    report.file_bytes = len(data)
    return data, report


def _read_record(r: Reader) -> Tuple[str, int, Tuple[int, ...], np.ndarray, Optional[np.ndarray], np.float32]:
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode("utf-8")
    encoding, ndim = r.unpack("<BB")
    if encoding not in ENCODING_NAMES:
        raise FormatError(f"{name}: unknown encoding {encoding}")
    shape = r.unpack(f"<{ndim}I") if ndim else ()
    (stored,) = r.unpack("<I")
    indices = None
    if encoding in (SPARSE8, SPARSE16):
        deltas = np.frombuffer(r.take(4 * stored), dtype="<u4").astype(np.int64)
        indices = np.cumsum(deltas)
        if stored and (indices[-1] >= int(np.prod(shape)) or np.any(deltas[1:] == 0)):
            raise FormatError(f"{name}: sparse indices out of range or not increasing")
    dt = np.dtype(_VALUE_DTYPES[encoding])
    values = np.frombuffer(r.take(stored * dt.itemsize), dtype=dt)
    (scale,) = r.unpack("<f")
    return name, encoding, tuple(shape), values, indices, np.float32(scale)


def unpack(data: bytes) -> Tuple[NetworkGraph, dict]:
    """Rebuild the eval-only quantized model from :func:`pack` output.

    Returns (graph, header) where header holds config, scheme and meta.
    """
    body = check_crc(data, PACK_MAGIC)
    r = Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != PACK_VERSION:
        raise FormatError(f"unsupported packed-model version {version}")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen))
    (count,) = r.unpack("<I")
    graph = build(ModelConfig.from_dict(header["config"]))
    convs = {c.name: c for c in graph.conv_layers()}
    norms = {n.name: n for n in graph.norm_layers()}
    folded: Dict[str, Dict[str, np.ndarray]] = {}
    gstats: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name, enc, shape, values, indices, scale = _read_record(r)
        owner, _, field_name = name.rpartition(".")
        if enc == DENSE8:
            arr = dequantize(values, scale, np.float32).reshape(shape)
        elif enc == SPARSE8:
            dense = np.zeros(int(np.prod(shape)), dtype=np.float32)
            dense[indices] = dequantize(values, scale, np.float32)
            arr = dense.reshape(shape)
        elif enc == SPARSE16:
            dense = np.zeros(int(np.prod(shape)), dtype=np.float32)
            dense[indices] = values.astype(np.float32)
            arr = dense.reshape(shape)
        else:
            arr = values.astype(np.float32).reshape(shape)
        if owner in convs and field_name == "weight":
            conv = convs[owner]
            conv.weight.data = arr
            if indices is not None and len(indices) < arr.size:
                mask = np.zeros(arr.size, dtype=bool)
                mask[indices] = True
                conv.mask = mask.reshape(shape)
        elif owner in convs and field_name == "bias":
            convs[owner].bias.data = arr
        elif owner in norms and field_name in ("scale", "shift"):
            folded.setdefault(owner, {})[field_name] = arr
        elif owner == "input_norm" and field_name in ("mean", "var"):
            gstats[field_name] = arr
        else:
            raise FormatError(f"unexpected record {name!r}")
    if r.pos != len(body):
        raise FormatError("trailing bytes after the last record")
    for name, pair in folded.items():
        norms[name].norm.folded = (pair["scale"], pair["shift"])
    missing = [n for n in norms if n not in folded]
    if missing:
        raise FormatError(f"missing folded norms: {missing[:3]}")
    if gstats:
        graph.input_norm.stats = GlobalFreqStats(gstats["mean"], gstats["var"])
    return graph, header


# ------------------------------------------------------------------ distill + compress


@dataclass
class CompressConfig:
    prune_ratio: float = 0.89
    prune_scope: str = "global"
    conv_bits: Optional[int] = 8
    student_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, warmup_epochs=0, peak_lr=0.01))


@dataclass
class CompressResult:
    dense: NetworkGraph
    compressed: NetworkGraph
    mask: PruneMask
    scheme: QuantScheme
    packed: bytes
    size: SizeReport
    dense_report: Optional[EvalReport] = None
    compressed_report: Optional[EvalReport] = None
    history: List[dict] = field(default_factory=list)


def compress(model: NetworkGraph, dataset: FeatureSet, cfg: CompressConfig,
             teacher: Optional[NetworkGraph] = None) -> Tuple[NetworkGraph, PruneMask, QuantScheme, List[dict]]:
    """Prune a trained copy of ``model`` and fine-tune it with fake quantization.

    With a ``teacher`` the fine-tune loss is the distillation loss. When nothing
    is compressed (ratio 0, no quantization) the copy is returned untouched.
    """
    scheme = QuantScheme(cfg.conv_bits)
    student = copy.deepcopy(model)
    mask = magnitude_prune(student, cfg.prune_ratio, cfg.prune_scope)
    attach(student, mask, scheme)
    history: List[dict] = []
    if cfg.prune_ratio > 0 or scheme.enabled:
        _, history = train(student, dataset, cfg.finetune, teacher=teacher, qat=scheme.enabled)
    return student, mask, scheme, history


def distill_compress(teacher: NetworkGraph, dataset: FeatureSet, cfg: CompressConfig,
                     eval_set: Optional[FeatureSet] = None, student: Optional[NetworkGraph] = None
                     ) -> CompressResult:
    """Distill a student from ``teacher``, then prune, quantization-aware fine-tune and pack it.

    Pass ``student`` to skip the distillation stage and compress an already
    trained dense model (``teacher`` then only supplies fine-tune targets).
    """
    if student is None:
        student = build(teacher.config, seed=cfg.student_seed)
        train(student, dataset, cfg.train, teacher=teacher)
    compressed, mask, scheme, history = compress(student, dataset, cfg, teacher=teacher)
    result_graph = quantized_model(compressed, scheme) if scheme.enabled else compressed
    packed, size = pack(compressed, scheme if scheme.enabled else QuantScheme(16))
    result = CompressResult(student, result_graph, mask, scheme, packed, size, history=history)
    if eval_set is not None:
        result.dense_report = evaluate(student, eval_set)
        result.compressed_report = evaluate(result_graph, eval_set)
    return result
