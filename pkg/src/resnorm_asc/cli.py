"""``asc`` command line: features, synthetic data, training, compression and inspection.

Every command takes ``--config FILE`` (flat ``key=value`` lines), ``--set
key=value`` overrides, ``--seed`` and ``--out DIR``. Each run writes
``manifest.json`` (resolved config, seed, inputs, outputs) and ``report.jsonl``
(one JSON record per line) into the output directory.

Exit codes: 0 success, 1 validation error, 2 partial data failure, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .compression import (CompressConfig, QuantScheme, attach, compress, magnitude_prune, pack, quantized_model,
                          size_from_counts, unpack)
from .data import FeatureSet, label_index, read_metadata
from .devsim import SplitSpec, make_benchmark
from .frontend import FeatureConfig, WavFormatError, features_from_wav, read_lmel, write_lmel
from .model import (CKPT_MAGIC, FormatError, ModelConfig, NetworkGraph, build, count_params, load_checkpoint,
                    receptive_field, save_checkpoint)
from .train import SpecAugConfig, TrainConfig, evaluate, train

log = logging.getLogger("asc")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ROOT_ENV = "ASC_DATA_ROOT"


class ConfigError(ValueError):
    """Carries every validation problem found in one pass."""

    def __init__(self, errors: Sequence[str]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ------------------------------------------------------------------ config schema

_OPTIONAL_INT = "optional-int"
_ANNOTATED = {"int": int, "float": float, "bool": bool, "str": str, int: int, float: float, bool: bool, str: str}


def _schema() -> Dict[str, Tuple[Any, Any]]:
    """key -> (type, default) for every configurable value."""
    out: Dict[str, Tuple[Any, Any]] = {}
    for f in fields(ModelConfig):
        out[f.name] = (_ANNOTATED[f.type], getattr(ModelConfig(), f.name))
    tc = TrainConfig()
    for f in fields(TrainConfig):
        if f.name in ("specaug", "seed"):
            continue
        out[f.name] = (_ANNOTATED[f.type], getattr(tc, f.name))
    for f in fields(SpecAugConfig):
        default = getattr(tc.specaug, f.name)
        out[f"specaug_{f.name}"] = (int, default)
    out.update({
        "prune_ratio": (float, 0.0),
        "prune_scope": (str, "global"),
        "conv_bits": (_OPTIONAL_INT, None),
        "finetune_epochs": (int, 10),
        "finetune_lr": (float, 0.01),
        "duration": (float, 5.0),
        "test_per_device": (int, 10),
        "n_classes": (int, 10),
        "data": (str, ""),
        "eval_data": (str, ""),
        "model": (str, ""),
        "teacher": (str, ""),
        "int8_params": (int, 0),
        "fp16_params": (int, 0),
        "fp32_params": (int, 0),
    })
    return out


SCHEMA = _schema()
_TRUE, _FALSE = {"1", "true", "yes", "on"}, {"0", "false", "no", "off"}


def _parse_value(key: str, raw: str) -> Any:
    kind, _ = SCHEMA[key]
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind == _OPTIONAL_INT:
        return None if raw.lower() in ("", "none", "null") else int(raw)
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_pairs(lines: Sequence[str], source: str) -> Tuple[Dict[str, Any], List[str]]:
    values, errors = {}, []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{n}: expected key=value, got {line!r}")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            errors.append(f"{source}:{n}: unknown key {key!r}")
            continue
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            errors.append(f"{source}:{n}: {exc}")
    return values, errors


def resolve_config(config_file: Optional[str], overrides: Sequence[str]) -> Dict[str, Any]:
    """Defaults <- file <- overrides; raises ConfigError listing every problem."""
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    errors: List[str] = []
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            errors.append(f"config file {config_file} not found")
        else:
            vals, errs = parse_pairs(path.read_text().splitlines(), path.name)
            cfg.update(vals)
            errors += errs
    vals, errs = parse_pairs(list(overrides), "--set")
    cfg.update(vals)
    errors += errs
    errors += _semantic_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def _semantic_errors(cfg: Dict[str, Any]) -> List[str]:
    errors = []
    try:
        model_config(cfg)
    except ValueError as exc:
        errors.append(str(exc))
    tc = TrainConfig.__new__(TrainConfig)
    for f in fields(TrainConfig):
        setattr(tc, f.name, cfg.get(f.name, getattr(TrainConfig(), f.name)))
    errors += tc.validate()
    if not 0 <= cfg["prune_ratio"] < 1:
        errors.append("prune_ratio must be in [0, 1)")
    if cfg["prune_scope"] not in ("global", "layer"):
        errors.append("prune_scope must be global or layer")
    if cfg["conv_bits"] not in (None, 8, 16):
        errors.append("conv_bits must be 8, 16 or none")
    if cfg["finetune_epochs"] < 0:
        errors.append("finetune_epochs must be non-negative")
    if cfg["duration"] <= 0:
        errors.append("duration must be positive")
    return errors


def model_config(cfg: Dict[str, Any]) -> ModelConfig:
    return ModelConfig(**{f.name: cfg[f.name] for f in fields(ModelConfig)})


def train_config(cfg: Dict[str, Any], seed: int) -> TrainConfig:
    spec = SpecAugConfig(**{f.name: cfg[f"specaug_{f.name}"] for f in fields(SpecAugConfig)})
    kwargs = {f.name: cfg[f.name] for f in fields(TrainConfig) if f.name not in ("specaug", "seed")}
    return TrainConfig(seed=seed, specaug=spec, **kwargs)


# ------------------------------------------------------------------ run plumbing


class Run:
    """Output directory, manifest and line-delimited report for one command."""

    def __init__(self, command: str, args: argparse.Namespace, cfg: Dict[str, Any]) -> None:
        self.command, self.cfg, self.seed = command, cfg, args.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.report_path = self.out / "report.jsonl"
        self.report_path.write_text("")

    def emit(self, record: Dict[str, Any]) -> None:
        with self.report_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True, default=_jsonable) + "\n")

    def write(self, name: str, data: bytes) -> Path:
        path = self.out / name
        path.write_bytes(data)
        self.outputs[name] = str(path)
        return path

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "config": self.cfg,
            "seed": self.seed,
            "version": __version__,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"not serializable: {type(obj)}")


def resolve_input(path: str, what: str) -> Path:
    """Existing path as given, else relative to the data root env var."""
    if not path:
        raise ConfigError([f"{what} is required"])
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(DATA_ROOT_ENV):
        p = Path(os.environ[DATA_ROOT_ENV]) / p
    if not p.exists():
        raise ConfigError([f"{what} {path} not found"])
    return p


def load_features(path: Path) -> FeatureSet:
    """A ``.npz`` feature set or the ``index.csv`` written by ``asc features``."""
    if path.suffix == ".npz":
        return FeatureSet.load_npz(path)
    rows = read_metadata(path)
    if not rows:
        raise ConfigError([f"{path}: no rows"])
    feats = [read_lmel(path.parent / name) for name, _, _ in rows]
    t = min(f.shape[1] for f in feats)
    labels = label_index([r[1] for r in rows])
    return FeatureSet(
        np.stack([f[:, :t] for f in feats]).astype(np.float32),
        np.array([labels[r[1]] for r in rows]),
        np.array([r[2] for r in rows], dtype=object),
        np.arange(len(rows)),
    )


def load_model(path: Path) -> NetworkGraph:
    data = path.read_bytes()
    if data[:4] == CKPT_MAGIC:
        graph, meta = load_checkpoint(data)
        if "masks" in meta:
            mask_path = path.with_suffix(".mask.npz")
            if mask_path.exists():
                with np.load(mask_path) as z:
                    for conv in graph.conv_layers():
                        if conv.name in z:
                            conv.mask = z[conv.name].astype(bool)
        return graph
    graph, _ = unpack(data)
    return graph


def save_model(run: Run, name: str, graph: NetworkGraph) -> None:
    masks = {c.name: c.mask for c in graph.conv_layers() if c.mask is not None}
    meta = {"masks": sorted(masks)} if masks else {}
    run.write(name, save_checkpoint(graph, meta))
    if masks:
        path = run.out / Path(name).with_suffix(".mask.npz")
        np.savez(path, **masks)
        run.outputs[path.name] = str(path)


# ------------------------------------------------------------------ commands


def cmd_features(run: Run, args: argparse.Namespace) -> int:
    in_dir = resolve_input(args.input, "input directory")
    wavs = sorted(in_dir.glob("*.wav"))
    meta_files = [p for p in (in_dir / "meta.csv", in_dir / "metadata.csv") if p.exists()]
    if meta_files:
        rows = read_metadata(meta_files[0])
        run.inputs["metadata"] = str(meta_files[0])
    else:
        rows = [(p.name, "unknown", "unknown") for p in wavs]
    if not rows:
        raise ConfigError([f"no clips in {in_dir}"])
    cfg = FeatureConfig()
    index, failures = [], 0
    for name, label, device in rows:
        try:
            feat = features_from_wav(in_dir / name, cfg)
        except (OSError, WavFormatError, ValueError) as exc:
            failures += 1
            log.error("%s: %s", name, exc)
            run.emit({"clip": name, "status": "error", "error": str(exc)})
            continue
        out_name = Path(name).with_suffix(".lmel").name
        run.write(out_name, write_lmel(feat))
        index.append((out_name, label, device))
        run.emit({"clip": name, "status": "ok", "frames": int(feat.shape[1])})
    lines = ["filename,scene_label,device_id"] + [",".join(r) for r in index]
    run.write("index.csv", ("\n".join(lines) + "\n").encode())
    run.emit({"summary": True, "clips": len(rows), "written": len(index), "failed": failures})
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_synth_data(run: Run, args: argparse.Namespace) -> int:
    cfg = run.cfg
    split = SplitSpec(test_per_device=cfg["test_per_device"])
    bench = make_benchmark(seed=args.seed, split=split, duration=cfg["duration"], n_classes=cfg["n_classes"])
    for name, fs in (("train.npz", bench.train), ("test.npz", bench.test)):
        fs.save_npz(run.out / name)
        run.outputs[name] = str(run.out / name)
        run.emit({"file": name, "clips": len(fs), "devices": {d: int((fs.devices == d).sum())
                                                                for d in fs.device_names()}})
    return EXIT_OK


def _eval_record(graph: NetworkGraph, path_key: str, run: Run, tag: str) -> None:
    if not run.cfg[path_key]:
        return
    path = resolve_input(run.cfg[path_key], path_key)
    run.inputs[path_key] = str(path)
    rep = evaluate(graph, load_features(path))
    run.emit({"eval": tag, **rep.to_dict()})


def cmd_train(run: Run, args: argparse.Namespace) -> int:
    data = resolve_input(run.cfg["data"], "data")
    run.inputs["data"] = str(data)
    teacher = None
    if run.cfg["teacher"]:
        tpath = resolve_input(run.cfg["teacher"], "teacher")
        run.inputs["teacher"] = str(tpath)
        teacher = load_model(tpath)
    graph = build(model_config(run.cfg), seed=args.seed)
    train(graph, load_features(data), train_config(run.cfg, args.seed), teacher=teacher,
          on_epoch=lambda rec: run.emit({"epoch_record": rec}))
    save_model(run, "model.bcrm", graph)
    _eval_record(graph, "eval_data", run, "final")
    return EXIT_OK


def cmd_eval(run: Run, args: argparse.Namespace) -> int:
    mpath = resolve_input(run.cfg["model"], "model")
    data = resolve_input(run.cfg["data"], "data")
    run.inputs.update(model=str(mpath), data=str(data))
    rep = evaluate(load_model(mpath), load_features(data))
    run.emit({"eval": "model", **rep.to_dict()})
    print(f"overall accuracy {rep.overall:.2f}")
    return EXIT_OK


def cmd_prune(run: Run, args: argparse.Namespace) -> int:
    mpath = resolve_input(run.cfg["model"], "model")
    run.inputs["model"] = str(mpath)
    graph = load_model(mpath)
    mask = magnitude_prune(graph, run.cfg["prune_ratio"], run.cfg["prune_scope"])
    save_model(run, "pruned.bcrm", graph)
    run.emit({"prune_ratio": mask.ratio, "scope": mask.scope, "total": mask.total, "kept": mask.kept,
              "per_layer": {k: int(v.sum()) for k, v in mask.masks.items()}})
    return EXIT_OK


def _pack_and_report(run: Run, graph: NetworkGraph, scheme: QuantScheme) -> None:
    data, size = pack(graph, scheme, meta={"seed": run.seed})
    run.write("model.bcrq", data)
    run.emit({"size": size.to_dict()})
    print(f"packed size {size.kib:.2f} KiB ({size.kib_with_index:.2f} KiB with sparse indices)")


def cmd_quantize(run: Run, args: argparse.Namespace) -> int:
    """Optional QAT fine-tune (``finetune_epochs`` > 0 needs ``data``), then pack."""
    mpath = resolve_input(run.cfg["model"], "model")
    run.inputs["model"] = str(mpath)
    graph = load_model(mpath)
    scheme = QuantScheme(run.cfg["conv_bits"] if run.cfg["conv_bits"] is not None else 8)
    attach(graph, None, scheme)
    if run.cfg["finetune_epochs"] > 0:
        data = resolve_input(run.cfg["data"], "data")
        run.inputs["data"] = str(data)
        teacher = load_model(resolve_input(run.cfg["teacher"], "teacher")) if run.cfg["teacher"] else None
        ft = train_config({**run.cfg, "epochs": run.cfg["finetune_epochs"], "warmup_epochs": 0,
                           "peak_lr": run.cfg["finetune_lr"]}, args.seed)
        train(graph, load_features(data), ft, teacher=teacher, qat=True)
    _pack_and_report(run, graph, scheme)
    _eval_record(quantized_model(graph, scheme), "eval_data", run, "quantized")
    return EXIT_OK


def cmd_distill(run: Run, args: argparse.Namespace) -> int:
    """Train a student against ``teacher``; compress it when pruning or quantization is requested."""
    tpath = resolve_input(run.cfg["teacher"], "teacher")
    data = resolve_input(run.cfg["data"], "data")
    run.inputs.update(teacher=str(tpath), data=str(data))
    teacher = load_model(tpath)
    fs = load_features(data)
    student = build(model_config(run.cfg), seed=args.seed)
    train(student, fs, train_config(run.cfg, args.seed), teacher=teacher)
    save_model(run, "model.bcrm", student)
    _eval_record(student, "eval_data", run, "dense")
    if run.cfg["prune_ratio"] > 0 or run.cfg["conv_bits"] is not None:
        ft = train_config({**run.cfg, "epochs": max(run.cfg["finetune_epochs"], 1), "warmup_epochs": 0,
                           "peak_lr": run.cfg["finetune_lr"]}, args.seed)
        ccfg = CompressConfig(prune_ratio=run.cfg["prune_ratio"], prune_scope=run.cfg["prune_scope"],
                              conv_bits=run.cfg["conv_bits"], finetune=ft)
        compressed, _, scheme, _ = compress(student, fs, ccfg, teacher=teacher)
        packed_scheme = scheme if scheme.enabled else QuantScheme(16)
        _pack_and_report(run, compressed, packed_scheme)
        _eval_record(quantized_model(compressed, packed_scheme), "eval_data", run, "compressed")
    return EXIT_OK


def cmd_pack(run: Run, args: argparse.Namespace) -> int:
    if args.size_manifest:
        path = resolve_input(args.size_manifest, "size manifest")
        run.inputs["size_manifest"] = str(path)
        vals, errs = parse_pairs(path.read_text().splitlines(), path.name)
        if errs:
            raise ConfigError(errs)
        counts = {k: vals.get(k, 0) for k in ("int8_params", "fp16_params", "fp32_params")}
        kib = size_from_counts(counts["int8_params"], counts["fp16_params"], counts["fp32_params"])
        run.emit({"size_manifest": counts, "kib": kib})
        print(f"size {kib:.2f} KiB")
        return EXIT_OK
    mpath = resolve_input(run.cfg["model"], "model")
    run.inputs["model"] = str(mpath)
    bits = run.cfg["conv_bits"] if run.cfg["conv_bits"] is not None else 8
    _pack_and_report(run, load_model(mpath), QuantScheme(bits))
    return EXIT_OK


def cmd_info(run: Run, args: argparse.Namespace) -> int:
    path = resolve_input(args.input, "model file")
    run.inputs["model"] = str(path)
    data = path.read_bytes()
    size = None
    if data[:4] == CKPT_MAGIC:
        graph, meta = load_checkpoint(data)
        kind, scheme = "checkpoint", None
    else:
        graph, header = unpack(data)
        kind, scheme = "packed", header["scheme"]
        size = sum(r.payload_bytes for r in _packed_rows(graph, scheme))
    counts = count_params(graph)
    totals = counts["totals"]
    rf = receptive_field(graph)
    record = {"kind": kind, "config": graph.config.to_dict(), "totals": totals, "scheme": scheme,
              "receptive_field": rf, "file_bytes": len(data),
              "layers": [r.__dict__ for r in counts["rows"]]}
    if size is not None:
        record["packed_kib"] = size / 1024
    run.emit(record)
    print(f"{kind}: {path.name}")
    print(f"config: {json.dumps(graph.config.to_dict(), sort_keys=True)}")
    print(f"{'layer':40s} {'kind':>10s} {'params':>8s} {'nonzero':>8s}")
    for row in counts["rows"]:
        print(f"{row.name:40s} {row.kind:>10s} {row.count:8d} {row.nonzero:8d}")
    print(f"params total/nonzero: {totals['total']}/{totals['nonzero']} "
          f"({totals['total'] / 1000:.0f}k/{totals['nonzero'] / 1000:.0f}k)")
    if scheme is not None:
        print(f"quantization: conv {scheme['conv_bits']}-bit, other fp16; packed {size / 1024:.2f} KiB")
    print(f"receptive field (F x T input bins): {rf[0]} x {rf[1]}, jump {rf[2]} x {rf[3]}")
    return EXIT_OK


def _packed_rows(graph: NetworkGraph, scheme: dict):
    _, report = pack(graph, QuantScheme(scheme["conv_bits"]))
    return report.rows


COMMANDS = {
    "features": cmd_features,
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "prune": cmd_prune,
    "quantize": cmd_quantize,
    "distill": cmd_distill,
    "pack": cmd_pack,
    "info": cmd_info,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=f"asc-{name}", help="output directory")
        if name in ("features", "info"):
            p.add_argument("input", help="input directory" if name == "features" else "model file")
        if name == "pack":
            p.add_argument("--size-manifest", help="key=value file of int8/fp16/fp32 parameter counts")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set)
        run = Run(args.command, args, cfg)
        code = COMMANDS[args.command](run, args)
        run.finish()
        return code
    except ConfigError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
