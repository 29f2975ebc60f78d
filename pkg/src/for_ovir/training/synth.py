"""Synthetic stand-in for a frozen CLIP backbone and text encoder.

Every category owns a unit prototype ``u_c`` in feature space. Object tokens
are ``u_c`` plus Gaussian noise; background tokens come from a few "stuff"
prototypes, by default borrowed from the distractor vocabulary. The reference
linears ``q, k, v, c`` play the role of CLIP's last attention layer and the
text embedding of ``c`` is ``normalize(c(v(u_c)))``, so zero-shot dense
scoring works by construction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..heads import FeatureMap
from ..numerics import ConfigError
from ..pseudo_labels import TextEntry, TextTable, save_text_table
from ..rng import RngStream
from .files import LabelRecord, write_features, write_labels

EVAL_ID_OFFSET = 10_000_000


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 2000
    n_eval_images: int = 500
    n_base: int = 48
    n_novel: int = 17
    n_distractor: int = 200
    n_tokens: int = 64
    feature_dim: int = 64
    query_dim: int = 64
    value_dim: int = 64
    embed_dim: int = 32
    objects_min: int = 1
    objects_max: int = 3
    object_tokens_min: int = 3
    object_tokens_max: int = 10
    noise: float = 0.15
    background_kinds: int = 16
    background_per_image: int = 0  # stuff kinds present per image; 0 = all kinds
    background_scale: float = 1.0
    background_noise: float = 0.3
    background_source: str = "distractor"  # or "random"
    attn_scale: float = 3.0
    bias_scale: float = 0.02
    distractor_prob: float = 0.0
    federated: bool = False
    federated_keep: float = 0.3
    seed: int = 7

    def validate(self) -> None:
        if self.n_base + self.n_novel + self.n_distractor < 2:
            raise ConfigError("n_base + n_novel + n_distractor must be >= 2")
        for name in ("n_tokens", "feature_dim", "query_dim", "value_dim", "embed_dim", "objects_min",
                     "object_tokens_min", "background_kinds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_images < 0 or self.n_eval_images < 0:
            raise ConfigError("n_images must be >= 0")
        if self.objects_max < self.objects_min:
            raise ConfigError("objects_max must be >= objects_min")
        if self.object_tokens_max < self.object_tokens_min:
            raise ConfigError("object_tokens_max must be >= object_tokens_min")
        if self.objects_max * self.object_tokens_max > self.n_tokens:
            raise ConfigError("objects_max * object_tokens_max exceeds n_tokens")
        if self.objects_max > self.n_base + self.n_novel:
            raise ConfigError("objects_max exceeds the number of dataset categories")
        if self.noise < 0 or self.background_noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0 <= self.background_per_image <= self.background_kinds:
            raise ConfigError("background_per_image must lie in [0, background_kinds]")
        if self.background_source not in ("distractor", "random"):
            raise ConfigError("background_source must be 'distractor' or 'random'")
        if self.background_source == "distractor" and self.background_kinds > self.n_distractor:
            raise ConfigError("background_kinds exceeds n_distractor with background_source='distractor'")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ConfigError("distractor_prob must lie in [0, 1]")


@dataclass
class World:
    spec: SynthSpec
    names: list[str]
    splits: list[str]
    prototypes: np.ndarray
    background: np.ndarray
    reference: dict[str, np.ndarray]
    table: TextTable

    def reference_tensors(self, dtype=torch.float64) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v).to(dtype) for k, v in self.reference.items()}


@dataclass
class SynthData:
    world: World
    split: str
    features: list[FeatureMap]
    labels: list[LabelRecord]
    present: dict[int, list[str]] = field(default_factory=dict)  # every object category per image


def category_names(spec: SynthSpec) -> tuple[list[str], list[str]]:
    names = [f"base_{i:03d}" for i in range(spec.n_base)]
    names += [f"novel_{i:03d}" for i in range(spec.n_novel)]
    names += [f"pseudo_{i:03d}" for i in range(spec.n_distractor)]
    splits = ["base"] * spec.n_base + ["novel"] * spec.n_novel + ["pseudo"] * spec.n_distractor
    return names, splits


def _unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def build_world(spec: SynthSpec) -> World:
    spec.validate()
    rng = RngStream(spec.seed).child("world").numpy()
    names, splits = category_names(spec)
    d = spec.feature_dim
    protos = _unit(rng.standard_normal((len(names), d)))
    background = _unit(rng.standard_normal((spec.background_kinds, d)))
    if spec.background_source == "distractor":
        # "stuff" regions are themselves vocabulary concepts
        first = spec.n_base + spec.n_novel
        background = protos[first:first + spec.background_kinds].copy()

    def lin(fan_in, fan_out, gain=1.0):
        return rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))

    def ortho(fan_in, fan_out, gain):
        # well-conditioned query/key maps: a learned query can aim at any token direction
        m = np.linalg.qr(rng.standard_normal((max(fan_in, fan_out), max(fan_in, fan_out))))[0]
        return gain * m[:fan_in, :fan_out]

    ref = {
        "q.weight": ortho(d, spec.query_dim, spec.attn_scale),
        "q.bias": rng.standard_normal(spec.query_dim) * spec.bias_scale,
        "k.weight": ortho(d, spec.query_dim, spec.attn_scale),
        "k.bias": rng.standard_normal(spec.query_dim) * spec.bias_scale,
        "v.weight": lin(d, spec.value_dim),
        "v.bias": rng.standard_normal(spec.value_dim) * spec.bias_scale,
        "c.weight": lin(spec.value_dim, spec.embed_dim),
        "c.bias": rng.standard_normal(spec.embed_dim) * spec.bias_scale,
    }
    text = _unit((protos @ ref["v.weight"] + ref["v.bias"]) @ ref["c.weight"] + ref["c.bias"])
    table = TextTable(TextEntry(n, s, e) for n, s, e in zip(names, splits, text))
    return World(spec, names, splits, protos, background, ref, table)


def generate_split(world: World, split: str = "train") -> SynthData:
    spec = world.spec
    if split not in ("train", "eval"):
        raise ConfigError(f"unknown split {split!r}")
    n_images = spec.n_images if split == "train" else spec.n_eval_images
    offset = 0 if split == "train" else EVAL_ID_OFFSET
    rng = RngStream(spec.seed).child("images", split).numpy()
    base = [i for i, s in enumerate(world.splits) if s == "base"]
    novel = [i for i, s in enumerate(world.splits) if s == "novel"]
    distractors = [i for i, s in enumerate(world.splits) if s == "pseudo"]
    dataset_cats = np.array(base + novel)
    base_names = [world.names[i] for i in base]

    features, labels, present = [], [], {}
    for n in range(n_images):
        image_id = offset + n
        n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))
        cats = [int(c) for c in rng.choice(dataset_cats, size=n_obj, replace=False)]
        if distractors and spec.distractor_prob > 0 and rng.random() < spec.distractor_prob:
            cats.append(int(rng.choice(distractors)))
        order = rng.permutation(spec.n_tokens)
        X = np.empty((spec.n_tokens, spec.feature_dim))
        pos = 0
        for c in cats:
            m = int(rng.integers(spec.object_tokens_min, spec.object_tokens_max + 1))
            m = min(m, spec.n_tokens - pos)
            idx = order[pos:pos + m]
            pos += m
            X[idx] = world.prototypes[c] + spec.noise * rng.standard_normal((m, spec.feature_dim))
        rest = order[pos:]
        if spec.background_per_image:
            pool = rng.choice(spec.background_kinds, size=spec.background_per_image, replace=False)
            kinds = pool[rng.integers(0, len(pool), size=len(rest))]
        else:
            kinds = rng.integers(0, spec.background_kinds, size=len(rest))
        X[rest] = (spec.background_scale * world.background[kinds]
                   + spec.background_noise * rng.standard_normal((len(rest), spec.feature_dim)))
        features.append(FeatureMap(image_id, torch.from_numpy(X.astype(np.float32))))

        names = [world.names[c] for c in cats]
        present[image_id] = names
        if split == "train":
            cat_names = [nm for nm, c in zip(names, cats) if world.splits[c] == "base"]
        else:
            cat_names = [nm for nm, c in zip(names, cats) if world.splits[c] in ("base", "novel")]
        absent = [b for b in base_names if b not in cat_names]
        if spec.federated and split == "train":
            keep = rng.random(len(absent)) < spec.federated_keep
            negs = [b for b, k in zip(absent, keep) if k]
        else:
            negs = absent
        labels.append(LabelRecord(image_id, sorted(cat_names), negs, True))
    return SynthData(world, split, features, labels, present)


def synth_generate(spec: SynthSpec, split: str = "train") -> SynthData:
    return generate_split(build_world(spec), split)


def manifest(data: SynthData) -> dict:
    w = data.world
    return {
        "generator": "for_ovir.synth",
        "split": data.split,
        "spec": asdict(w.spec),
        "n_images": len(data.features),
        "reference_params": {k: v.tolist() for k, v in w.reference.items()},
    }


def write_synth(data: SynthData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "features": out / "features.forf",
        "labels": out / "labels.jsonl",
        "text_table": out / "text_table.json",
        "manifest": out / "manifest.json",
    }
    write_features(paths["features"], data.features)
    write_labels(paths["labels"], data.labels)
    save_text_table(data.world.table, paths["text_table"])
    paths["manifest"].write_text(json.dumps(manifest(data), indent=1))
    return paths


def load_reference_params(manifest_path, dtype=torch.float64) -> dict[str, torch.Tensor]:
    m = json.loads(Path(manifest_path).read_text())
    return {k: torch.tensor(v, dtype=dtype) for k, v in m["reference_params"].items()}
