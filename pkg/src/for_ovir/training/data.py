"""Label bookkeeping for training: semi-supervised splits and negative sampling."""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import replace
from typing import Sequence

import numpy as np

from ..matching_loss import TargetSet
from ..numerics import ConfigError
from .files import LabelRecord


class InsufficientNegativesWarning(UserWarning):
    pass


def category_frequencies(records: Sequence[LabelRecord], names: Sequence[str]) -> np.ndarray:
    """Positive counts per name over labeled records, plus one so unseen names stay drawable."""
    counts = Counter(c for r in records if r.labeled for c in r.categories)
    return np.array([counts.get(n, 0) + 1.0 for n in names])


def sample_federated_negatives(record: LabelRecord, names: Sequence[str], min_total: int,
                               weights: np.ndarray | None, rng: np.random.Generator) -> TargetSet:
    """Top annotated negatives up to ``min_total`` with frequency-weighted draws (no replacement)."""
    if min_total < 0:
        raise ConfigError("min_total must be >= 0")
    negatives = list(record.neg_categories)
    need = min_total - len(negatives)
    if need > 0:
        taken = set(record.categories) | set(negatives)
        pool = [k for k, n in enumerate(names) if n not in taken]
        if len(pool) < need:
            warnings.warn(f"image {record.image_id}: only {len(pool)} candidate negatives for {need} slots",
                          InsufficientNegativesWarning, stacklevel=2)
            need = len(pool)
        if need:
            w = np.ones(len(pool)) if weights is None else np.asarray(weights, dtype=float)[pool]
            picks = rng.choice(len(pool), size=need, replace=False, p=w / w.sum())
            negatives += [names[pool[k]] for k in sorted(picks)]
    return TargetSet(sorted(record.categories), "supervised", negatives)


def sample_pseudo_negatives(positives: Sequence[str], names: Sequence[str], m: int,
                            rng: np.random.Generator) -> list[str]:
    """``m`` uniform draws from ``names`` minus ``positives``, returned in vocabulary order."""
    taken = set(positives)
    pool = [k for k, n in enumerate(names) if n not in taken]
    m = min(m, len(pool))
    if m == 0:
        return []
    picks = np.sort(rng.choice(len(pool), size=m, replace=False))
    return [names[pool[k]] for k in picks]


def labeled_count(n: int, fraction: float) -> int:
    return max(1, math.floor(n * fraction + 1e-9))


def make_semi_split(records: Sequence[LabelRecord], fraction: float,
                    rng: np.random.Generator) -> list[LabelRecord]:
    """Flag a uniform random subset of ``floor(n * fraction)`` (at least one) records as labeled.

    Unlabeled copies lose their categories and annotated negatives.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("labeled fraction must lie in (0, 1]")
    if not records:
        raise ConfigError("no records to split: zero labeled images")
    n = len(records)
    keep = n if fraction == 1.0 else labeled_count(n, fraction)
    chosen = set(rng.permutation(n)[:keep].tolist())
    return [r if k in chosen else replace(r, categories=[], neg_categories=[], labeled=False)
            for k, r in enumerate(records)]
