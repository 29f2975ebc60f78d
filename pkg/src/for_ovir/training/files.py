"""On-disk formats for feature maps, label records and metrics logs."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch

from ..heads import FeatureMap

FEATURE_MAGIC = b"FORF"
FEATURE_VERSION = 1


class FormatError(ValueError):
    pass


def write_features(path, features: Iterable[FeatureMap]) -> None:
    features = list(features)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", FEATURE_VERSION, len(features)))
        for fm in features:
            X = fm.X.detach().cpu().numpy().astype("<f4", copy=False)
            k, c = X.shape
            f.write(struct.pack("<QII", int(fm.image_id), k, c))
            f.write(np.ascontiguousarray(X).tobytes())


def iter_features(path) -> Iterator[FeatureMap]:
    with open(path, "rb") as f:
        if f.read(4) != FEATURE_MAGIC:
            raise FormatError(f"{path}: not a feature-map file (bad magic)")
        head = f.read(8)
        if len(head) != 8:
            raise FormatError(f"{path}: truncated header")
        version, count = struct.unpack("<II", head)
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        for n in range(count):
            rec = f.read(16)
            if len(rec) != 16:
                raise FormatError(f"{path}: truncated at image {n}")
            image_id, k, c = struct.unpack("<QII", rec)
            raw = f.read(4 * k * c)
            if len(raw) != 4 * k * c:
                raise FormatError(f"{path}: truncated payload of image {image_id}")
            X = np.frombuffer(raw, dtype="<f4").reshape(k, c).astype(np.float32)
            yield FeatureMap(image_id, torch.from_numpy(X))


def read_features(path) -> list[FeatureMap]:
    return list(iter_features(path))


@dataclass
class LabelRecord:
    image_id: int
    categories: list[str] = field(default_factory=list)
    neg_categories: list[str] = field(default_factory=list)
    labeled: bool = True

    def __post_init__(self):
        overlap = set(self.categories) & set(self.neg_categories)
        if overlap:
            raise ValueError(f"image {self.image_id}: categories overlap negatives {sorted(overlap)}")
        if not self.labeled and self.categories:
            raise ValueError(f"image {self.image_id}: unlabeled record carries categories")

    def to_json(self) -> dict:
        return {"image_id": int(self.image_id), "categories": list(self.categories),
                "neg_categories": list(self.neg_categories), "labeled": bool(self.labeled)}

    @classmethod
    def from_json(cls, obj) -> "LabelRecord":
        return cls(int(obj["image_id"]), list(obj["categories"]), list(obj.get("neg_categories", [])),
                   bool(obj.get("labeled", True)))


def write_labels(path, records: Iterable[LabelRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json()) + "\n")


def read_labels(path) -> list[LabelRecord]:
    with open(path) as f:
        return [LabelRecord.from_json(json.loads(line)) for line in f if line.strip()]


def write_metrics(path, rows: Iterable[dict]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
