"""Offline embedding, a flat exact index, top-k search and mAP@k evaluation."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .heads import EmbeddingSet, FeatureMap, cluster_clip_head, sum_clip_forward
from .kmeans import ClusterConfig
from .pseudo_labels import TextTable
from .rng import RngStream

log = logging.getLogger(__name__)

EMB_MAGIC = b"FORE"
INDEX_MAGIC = b"FORI"
VERSION = 1
UNIT_TOL = 1e-6


class IndexFormatError(ValueError):
    pass


# ------------------------------------------------------------------ embedding


def embed_sum_clip(features: Sequence[FeatureMap], params, batch_size: int = 64) -> list[EmbeddingSet]:
    """Eval-mode SUM-CLIP over every image, rows L2-normalized."""
    tensors = params.tensors()
    dtype = tensors["queries"].dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(features), batch_size):
            chunk = features[start:start + batch_size]
            X = torch.stack([fm.X for fm in chunk]).to(dtype)
            Y = sum_clip_forward(X, tensors, params.config, training=False)
            Y = Y / Y.norm(dim=-1, keepdim=True)
            out.extend(EmbeddingSet(fm.image_id, y, True) for fm, y in zip(chunk, Y))
    return out


def embed_cluster_clip(features: Sequence[FeatureMap], params: Mapping[str, torch.Tensor],
                       cfg: ClusterConfig) -> list[EmbeddingSet]:
    out = []
    for fm in features:
        rng = RngStream(cfg.seed).child("kmeans", fm.image_id).numpy()
        es = cluster_clip_head(FeatureMap(fm.image_id, fm.X.double()), params, cfg, rng)
        out.append(es.normalize())
    return out


def embed_with(features: Sequence[FeatureMap], head: Callable[[FeatureMap], EmbeddingSet]) -> list[EmbeddingSet]:
    with torch.no_grad():
        return [head(fm).normalize() for fm in features]


def write_embeddings(path, sets: Iterable[EmbeddingSet]) -> None:
    ids, rows = _flatten(sets)
    dim = rows.shape[1] if rows.size else 0
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<IIQ", VERSION, dim, len(ids)))
        f.write(_pack_rows(ids, rows))


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (image_id per row, float32 rows)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMB_MAGIC:
            raise IndexFormatError(f"{path}: not an embeddings file")
        head = f.read(16)
        if len(head) != 16:
            raise IndexFormatError(f"{path}: truncated header")
        version, dim, n = struct.unpack("<IIQ", head)
        if version != VERSION:
            raise IndexFormatError(f"{path}: unsupported version {version}")
        return _unpack_rows(f, dim, n, path)


def _row_dtype(dim):
    return np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])


def _flatten(sets):
    ids, rows = [], []
    for es in sets:
        Y = es.Y.detach().cpu().numpy() if isinstance(es.Y, torch.Tensor) else np.asarray(es.Y)
        rows.append(Y.astype(np.float32))
        ids.append(np.full(len(Y), es.image_id, dtype=np.uint64))
    if not rows:
        return np.zeros(0, np.uint64), np.zeros((0, 0), np.float32)
    return np.concatenate(ids), np.concatenate(rows)


def _pack_rows(ids, rows):
    rec = np.empty(len(ids), dtype=_row_dtype(rows.shape[1] if rows.size else 0))
    rec["id"] = ids
    if len(ids):
        rec["v"] = rows
    return rec.tobytes()


def _unpack_rows(f, dim, n, path):
    dt = _row_dtype(dim)
    raw = f.read(dt.itemsize * n)
    if len(raw) != dt.itemsize * n:
        raise IndexFormatError(f"{path}: truncated rows")
    rec = np.frombuffer(raw, dtype=dt)
    return rec["id"].astype(np.int64), np.ascontiguousarray(rec["v"], dtype=np.float32).reshape(n, dim)


# ------------------------------------------------------------------ index


@dataclass(frozen=True)
class EmbeddingIndex:
    dim: int
    row_ids: np.ndarray     # image id of every row
    rows: np.ndarray        # (R, dim) float32, unit rows
    image_ids: np.ndarray   # ascending unique ids
    starts: np.ndarray      # first row of each image
    counts: np.ndarray      # rows per image

    def __post_init__(self):
        for a in (self.row_ids, self.rows, self.image_ids, self.starts, self.counts):
            a.setflags(write=False)

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    def __len__(self) -> int:
        return len(self.row_ids)

    def block(self, image_id: int) -> np.ndarray:
        k = int(np.searchsorted(self.image_ids, image_id))
        if k >= len(self.image_ids) or self.image_ids[k] != image_id:
            raise KeyError(image_id)
        return self.rows[self.starts[k]:self.starts[k] + self.counts[k]]

    def equals(self, other: "EmbeddingIndex") -> bool:
        return (self.dim == other.dim and np.array_equal(self.row_ids, other.row_ids)
                and np.array_equal(self.rows, other.rows) and np.array_equal(self.starts, other.starts)
                and np.array_equal(self.counts, other.counts) and np.array_equal(self.image_ids, other.image_ids))


def index_build(row_ids, rows, dim: int | None = None) -> EmbeddingIndex:
    """Group rows into per-image blocks (stable sort by image id) after validating unit norms."""
    row_ids = np.asarray(row_ids, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        rows = rows.reshape(len(row_ids), dim or 0)
    dim = rows.shape[1] if dim is None else dim
    if len(row_ids):
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if len(bad):
            raise IndexFormatError(f"row {int(bad[0])} (image {int(row_ids[bad[0]])}) is not unit-norm: {norms[bad[0]]:.9f}")
    order = np.argsort(row_ids, kind="stable")
    row_ids, rows = row_ids[order], rows[order]
    image_ids, starts, counts = np.unique(row_ids, return_index=True, return_counts=True)
    return EmbeddingIndex(dim, row_ids, np.ascontiguousarray(rows), image_ids.astype(np.int64),
                          starts.astype(np.int64), counts.astype(np.int64))


def index_from_sets(sets: Iterable[EmbeddingSet]) -> EmbeddingIndex:
    ids, rows = _flatten(sets)
    return index_build(ids, rows)


def save_index(index: EmbeddingIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<IIQ", VERSION, index.dim, len(index)))
        f.write(_pack_rows(index.row_ids.astype(np.uint64), index.rows))
        f.write(struct.pack("<Q", index.n_images))
        table = np.stack([index.image_ids, index.starts, index.counts], axis=1).astype("<u8")
        f.write(table.tobytes())


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as f:
        if f.read(4) != INDEX_MAGIC:
            raise IndexFormatError(f"{path}: not an index file")
        head = f.read(16)
        if len(head) != 16:
            raise IndexFormatError(f"{path}: truncated header")
        version, dim, n = struct.unpack("<IIQ", head)
        if version != VERSION:
            raise IndexFormatError(f"{path}: unsupported version {version}")
        row_ids, rows = _unpack_rows(f, dim, n, path)
        raw = f.read(8)
        if len(raw) != 8:
            raise IndexFormatError(f"{path}: missing offset table")
        (n_img,) = struct.unpack("<Q", raw)
        raw = f.read(24 * n_img)
        if len(raw) != 24 * n_img:
            raise IndexFormatError(f"{path}: truncated offset table")
        table = np.frombuffer(raw, dtype="<u8").reshape(n_img, 3).astype(np.int64)
    index = EmbeddingIndex(dim, row_ids, rows, table[:, 0].copy(), table[:, 1].copy(), table[:, 2].copy())
    if not index.equals(index_build(row_ids, rows, dim)):
        raise IndexFormatError(f"{path}: offset table inconsistent with rows")
    return index


# ------------------------------------------------------------------ queries


def _query_vector(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(e)
    if abs(n - 1.0) > UNIT_TOL:
        log.warning("query embedding has norm %.6f; normalizing", n)
        e = e / n
    return e


def row_scores(index: EmbeddingIndex, e) -> np.ndarray:
    """Cosine similarity of every row with query ``e``."""
    e = _query_vector(e)
    return (index.rows.astype(np.float64) * e).sum(axis=1)


def image_score(index: EmbeddingIndex, e) -> tuple[np.ndarray, np.ndarray]:
    """(image ids, best row similarity per image)."""
    if len(index) == 0:
        return np.zeros(0, np.int64), np.zeros(0)
    return index.image_ids, np.maximum.reduceat(row_scores(index, e), index.starts)


def rank_images(image_ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Order by descending score, ties by ascending image id."""
    return np.lexsort((image_ids, -scores))


def topk(index: EmbeddingIndex, e, k: int = 50) -> list[tuple[int, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    ids, scores = image_score(index, e)
    order = rank_images(ids, scores)[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def ap_at_k(ranking: Sequence[int], positives, k: int = 50) -> float | None:
    """Average precision over the first ``k`` ranks, normalized by ``min(|positives|, k)``.

    Returns ``None`` when there are no positives.
    """
    positives = set(positives)
    if not positives:
        return None
    hits = 0
    total = 0.0
    for r, image_id in enumerate(ranking[:k], start=1):
        if image_id in positives:
            hits += 1
            total += hits / r
    return total / min(len(positives), k)


@dataclass
class EvalReport:
    per_category: list[dict]
    aggregates: dict[str, float]
    skipped: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"per_category": self.per_category, "aggregates": self.aggregates,
                "skipped": self.skipped, "metadata": self.metadata}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    def summary(self) -> str:
        a = self.aggregates
        return " ".join(f"{s}={a[s]:.2f}" for s in ("base", "novel", "all") if s in a)


def evaluate(index: EmbeddingIndex, table: TextTable, labels, k: int = 50,
             splits: Sequence[str] = ("base", "novel"), metadata: dict | None = None) -> EvalReport:
    """AP@k per base/novel category over all indexed images; split means reported x100.

    ``labels`` is an iterable of records with ``image_id`` and ``categories``.
    """
    names = table.names(*splits)
    split_of = {e.name: e.split for e in table.entries}
    labels = list(labels)
    known = set(table.names())
    unknown = sorted({c for r in labels for c in r.categories if c not in known})
    if unknown:
        raise KeyError(f"label categories missing from text table: {unknown}")
    positives = {n: set() for n in names}
    for r in labels:
        for c in r.categories:
            if c in positives:
                positives[c].add(int(r.image_id))

    E = table.lookup(names)
    if len(index):
        S = index.rows.astype(np.float64) @ E.T
        img = np.maximum.reduceat(S, index.starts, axis=0)
    else:
        img = np.zeros((0, len(names)))
    per_cat, skipped = [], []
    for j, name in enumerate(names):
        order = rank_images(index.image_ids, img[:, j])[:k]
        ap = ap_at_k(index.image_ids[order].tolist(), positives[name], k)
        if ap is None:
            skipped.append(name)
            continue
        per_cat.append({"name": name, "split": split_of[name], "ap": 100.0 * ap,
                        "n_positives": len(positives[name])})
    aggregates = {}
    for s in splits:
        vals = [c["ap"] for c in per_cat if c["split"] == s]
        if vals:
            aggregates[s] = float(np.mean(vals))
    if per_cat:
        aggregates["all"] = float(np.mean([c["ap"] for c in per_cat]))
    meta = {"k": k}
    meta.update(metadata or {})
    return EvalReport(per_cat, aggregates, skipped, meta)
