"""In-memory feature sets and the TAU-style metadata CSV."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

SCENE_LABELS = (
    "airport", "bus", "metro", "metro_station", "park",
    "public_square", "shopping_mall", "street_pedestrian", "street_traffic", "tram",
)


@dataclass
class FeatureSet:
    """Stacked log-mel features with labels and recording-device ids.

    ``x`` is (N, F, T) float32; ``clip_ids`` identify the underlying clean
    clip, so the same clip rendered through several devices shares an id.
    """

    x: np.ndarray
    y: np.ndarray
    devices: np.ndarray
    clip_ids: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.x)
        if not (len(self.y) == len(self.devices) == len(self.clip_ids) == n):
            raise ValueError("FeatureSet fields must have equal length")
        self.y = np.asarray(self.y, dtype=np.int64)
        self.devices = np.asarray(self.devices, dtype=object)
        self.clip_ids = np.asarray(self.clip_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx: Sequence[int]) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.x[idx], self.y[idx], self.devices[idx], self.clip_ids[idx])

    def device_names(self) -> List[str]:
        return sorted(set(self.devices.tolist()))

    @classmethod
    def concat(cls, parts: Iterable["FeatureSet"]) -> "FeatureSet":
        parts = list(parts)
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.devices for p in parts]),
            np.concatenate([p.clip_ids for p in parts]),
        )

    def save_npz(self, path: Union[str, Path]) -> None:
        np.savez(path, x=self.x, y=self.y, devices=self.devices.astype(str), clip_ids=self.clip_ids)

    @classmethod
    def load_npz(cls, path: Union[str, Path]) -> "FeatureSet":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["x"], z["y"], z["devices"].astype(object), z["clip_ids"])


def read_metadata(source: Union[str, Path, io.StringIO]) -> List[Tuple[str, str, str]]:
    """Rows of (filename, scene_label, device_id).

    Accepts comma- or tab-separated files with a header; the official TAU
    metadata uses tabs and names the device column ``source_label``.
    """
    text = source.getvalue() if isinstance(source, io.StringIO) else Path(source).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return []
    delim = "\t" if "\t" in lines[0] else ","
    reader = csv.DictReader(lines, delimiter=delim)
    device_key = "device_id" if "device_id" in reader.fieldnames else "source_label"
    rows = []
    for row in reader:
        rows.append((row["filename"], row["scene_label"], row[device_key]))
    return rows


def write_metadata(rows: Iterable[Tuple[str, str, str]]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["filename", "scene_label", "device_id"])
    for r in rows:
        w.writerow(r)
    return out.getvalue()


def label_index(labels: Sequence[str]) -> Dict[str, int]:
    known = {name: i for i, name in enumerate(SCENE_LABELS)}
    if all(l in known for l in labels):
        return known
    return {name: i for i, name in enumerate(sorted(set(labels)))}
