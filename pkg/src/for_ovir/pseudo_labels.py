"""Open-vocabulary pseudo-labels from the frozen Cluster-CLIP branch."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
import torch

from .heads import EmbeddingSet, FeatureMap, cluster_clip_head
from .kmeans import ClusterConfig
from .numerics import ConfigError
from .rng import RngStream

SPLITS = ("base", "novel", "pseudo", "no_object")
VOCAB_SPLITS = ("base", "novel", "pseudo")
DEFAULT_THRESHOLD = 5e-4


class TextTableError(ValueError):
    pass


class PseudoLabelError(RuntimeError):
    pass


@dataclass
class TextEntry:
    name: str
    split: str
    embedding: np.ndarray


class TextTable:
    """Category names (unique) with unit text embeddings and a split tag.

    ``pseudo`` entries are extra vocabulary that is never evaluated; the
    vocabulary used for pseudo-labeling is every base, novel and pseudo entry.
    """

    def __init__(self, entries: Iterable[TextEntry]):
        self.entries = list(entries)
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise TextTableError(f"{e.name}: unknown split {e.split!r}")
            if e.name in seen:
                raise TextTableError(f"duplicate category name {e.name!r}")
            seen.add(e.name)
            e.embedding = np.asarray(e.embedding, dtype=np.float64)
            if abs(np.linalg.norm(e.embedding) - 1.0) > 1e-6:
                raise TextTableError(f"{e.name}: embedding is not unit-norm")
        dims = {e.embedding.shape for e in self.entries}
        if len(dims) > 1:
            raise TextTableError(f"inconsistent embedding shapes {sorted(dims)}")
        if sum(e.split == "no_object" for e in self.entries) > 1:
            raise TextTableError("at most one no_object entry is allowed")

    @property
    def dim(self) -> int:
        return self.entries[0].embedding.shape[0] if self.entries else 0

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, *splits: str) -> "TextTable":
        return TextTable(TextEntry(e.name, e.split, e.embedding) for e in self.entries if e.split in splits)

    def pseudo_vocabulary(self) -> "TextTable":
        return self.split(*VOCAB_SPLITS)

    def names(self, *splits: str) -> list[str]:
        return [e.name for e in self.entries if not splits or e.split in splits]

    def matrix(self, *splits: str) -> np.ndarray:
        rows = [e.embedding for e in self.entries if not splits or e.split in splits]
        return np.stack(rows) if rows else np.zeros((0, self.dim))

    def lookup(self, names: Iterable[str], *splits: str) -> np.ndarray:
        index = {e.name: e.embedding for e in self.entries if not splits or e.split in splits}
        missing = [n for n in names if n not in index]
        if missing:
            raise KeyError(f"categories missing from text table: {missing}")
        return np.stack([index[n] for n in names]) if names else np.zeros((0, self.dim))

    def to_json(self) -> list[dict]:
        return [{"name": e.name, "split": e.split, "embedding": e.embedding.tolist()} for e in self.entries]

    @classmethod
    def from_json(cls, data: list[dict], normalize: bool = True) -> "TextTable":
        entries = []
        for row in data:
            emb = np.asarray(row["embedding"], dtype=np.float64)
            if normalize:
                n = np.linalg.norm(emb)
                if n < 1e-12:
                    raise TextTableError(f"{row['name']}: zero embedding")
                emb = emb / n
            entries.append(TextEntry(str(row["name"]), str(row["split"]), emb))
        return cls(entries)


def save_text_table(table: TextTable, path) -> None:
    Path(path).write_text(json.dumps(table.to_json()))


def load_text_table(path) -> TextTable:
    return TextTable.from_json(json.loads(Path(path).read_text()))


@dataclass
class PseudoLabelRecord:
    image_id: int
    labels: list[tuple[str, float]] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.labels]

    def to_json(self) -> dict:
        return {"image_id": int(self.image_id), "labels": [{"name": n, "score": float(s)} for n, s in self.labels]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "PseudoLabelRecord":
        return cls(int(obj["image_id"]), [(d["name"], float(d["score"])) for d in obj["labels"]])


def score_categories(embeddings, table: TextTable, temperature: float = 1.0) -> np.ndarray:
    """Per-category presence scores for one image.

    Cosine similarities between every category and every representative are
    softmax-normalized over categories (one softmax per representative), and
    each category keeps its best representative.
    """
    if len(table) == 0:
        raise ConfigError("pseudo vocabulary is empty")
    Y = embeddings.Y if isinstance(embeddings, EmbeddingSet) else embeddings
    if isinstance(Y, torch.Tensor):
        Y = Y.detach().double().numpy()
    Y = np.asarray(Y, dtype=np.float64)
    Y = Y / np.linalg.norm(Y, axis=1, keepdims=True)
    E = table.matrix()
    S = (E @ Y.T) / temperature
    S = S - S.max(axis=0, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=0, keepdims=True)
    return P.max(axis=1)


def assign_pseudo_labels(p: np.ndarray, names: list[str], th: float = DEFAULT_THRESHOLD,
                         image_id: int = 0) -> PseudoLabelRecord:
    if not 0.0 < th <= 1.0:
        raise ConfigError(f"threshold must lie in (0, 1], got {th}")
    keep = np.flatnonzero(np.asarray(p) > th)
    return PseudoLabelRecord(image_id, [(names[j], float(p[j])) for j in keep])


def filter_vocabulary(table: TextTable, exclude_novel: bool, novel_names: Iterable[str]) -> TextTable:
    """Drop vocabulary entries whose name matches a novel category (case-insensitive)."""
    if not exclude_novel:
        return table
    drop = {n.lower() for n in novel_names}
    return TextTable(e for e in table.entries if e.name.lower() not in drop)


def pseudo_label_image(fm: FeatureMap, params, cluster_cfg: ClusterConfig, vocab: TextTable,
                       th: float, temperature: float = 1.0) -> PseudoLabelRecord:
    rng = RngStream(cluster_cfg.seed).child("kmeans", fm.image_id).numpy()
    reps = cluster_clip_head(fm, params, cluster_cfg, rng)
    p = score_categories(reps, vocab, temperature)
    return assign_pseudo_labels(p, vocab.names(), th, fm.image_id)


def pseudo_label_dataset(features: Iterable[FeatureMap], params, cluster_cfg: ClusterConfig,
                         table: TextTable, th: float = DEFAULT_THRESHOLD,
                         temperature: float = 1.0) -> Iterator[PseudoLabelRecord]:
    """Pseudo-label every image; records come out in ascending ``image_id`` order.

    ``table`` is the scoring vocabulary (see ``TextTable.pseudo_vocabulary``).
    """
    vocab = table.split(*VOCAB_SPLITS)
    if len(vocab) == 0:
        raise ConfigError("text table has no vocabulary entries")
    out = []
    for fm in features:
        try:
            out.append(pseudo_label_image(fm, params, cluster_cfg, vocab, th, temperature))
        except Exception as exc:  # noqa: BLE001 - re-raised with image context
            raise PseudoLabelError(f"image {fm.image_id}: {exc}") from exc
    out.sort(key=lambda r: r.image_id)
    yield from out


def write_pseudo_labels(records: Iterable[PseudoLabelRecord], path) -> None:
    records = sorted(records, key=lambda r: r.image_id)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json()) + "\n")


def read_pseudo_labels(path) -> list[PseudoLabelRecord]:
    with open(path) as f:
        return [PseudoLabelRecord.from_json(json.loads(line)) for line in f if line.strip()]
