"""Set-prediction loss: cosine/softmax class probabilities, Hungarian matching, matched cross-entropy."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import numerics as nx
from .numerics import ConfigError, ContractError
from .pseudo_labels import TextTable

NO_OBJECT = "__no_object__"


@dataclass
class TargetSet:
    categories: list[str]
    source: str = "supervised"  # or "pseudo"
    negatives: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.source not in ("supervised", "pseudo"):
            raise ValueError(f"unknown target source {self.source!r}")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("target categories must be unique")
        overlap = set(self.categories) & set(self.negatives)
        if overlap:
            raise ValueError(f"negatives overlap positives: {sorted(overlap)}")

    @property
    def pool(self) -> list[str]:
        """Softmax pool: positives, negatives, then the no-object class."""
        return list(self.categories) + [n for n in self.negatives if n not in self.categories] + [NO_OBJECT]


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (target index, query index)
    cost: float

    def query_of(self) -> dict[int, int]:
        return dict(self.pairs)


@dataclass
class LossConfig:
    gamma_sup: float = 1.0
    gamma_pse: float = 1.0
    no_object_weight: float = 0.1
    temperature: float = 0.01
    pseudo_negatives: int = 64
    full_vocab: bool = False

    def validate(self) -> None:
        if self.gamma_sup < 0 or self.gamma_pse < 0 or self.gamma_sup + self.gamma_pse <= 0:
            raise ConfigError("gamma_sup and gamma_pse must be >= 0 with a positive sum")
        if not 0.0 <= self.no_object_weight <= 1.0:
            raise ConfigError("no_object_weight must lie in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.pseudo_negatives < 0:
            raise ConfigError("pseudo_negatives must be >= 0")


# ------------------------------------------------------------------ probabilities


def _pool_matrix(pool: Sequence[str], table: TextTable, no_object: torch.Tensor | None, dtype):
    names = [n for n in pool if n != NO_OBJECT]
    rows = torch.from_numpy(table.lookup(names)).to(dtype)
    if NO_OBJECT not in pool:
        return rows
    if no_object is None:
        raise KeyError("pool contains the no-object class but no embedding was given")
    e0 = nx.l2_normalize_rows(no_object.reshape(1, -1).to(dtype))
    pos = list(pool).index(NO_OBJECT)
    return torch.cat([rows[:pos], e0, rows[pos:]], dim=0)


def class_logits(Y: torch.Tensor, pool: Sequence[str], table: TextTable, temperature: float,
                 no_object: torch.Tensor | None = None) -> torch.Tensor:
    if not pool:
        raise ValueError("class pool is empty")
    E = _pool_matrix(pool, table, no_object, Y.dtype)
    return nx.l2_normalize_rows(Y) @ E.T / temperature


def class_probabilities(Y: torch.Tensor, pool: Sequence[str], table: TextTable, temperature: float,
                        no_object: torch.Tensor | None = None) -> torch.Tensor:
    """(N, |pool|) softmax over the pool of cosine similarities scaled by ``1/temperature``."""
    return nx.softmax_rows(class_logits(Y, pool, table, temperature, no_object))


# ------------------------------------------------------------------ matching


def build_cost_matrix(probs: torch.Tensor, targets: TargetSet, pool: Sequence[str] | None = None) -> np.ndarray:
    """``C[j, i] = -p_i(c_j)`` for every real target ``j`` and query ``i``."""
    pool = list(pool if pool is not None else targets.pool)
    index = {n: k for k, n in enumerate(pool)}
    missing = [c for c in targets.categories if c not in index]
    if missing:
        raise KeyError(f"targets not in class pool: {missing}")
    p = probs.detach().double().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs, float)
    cols = [index[c] for c in targets.categories]
    return -p[:, cols].T.copy() if cols else np.zeros((0, p.shape[0]))


def _solve(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian algorithm for n <= m; returns (col per row, u, v)."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols, u[1:], v[1:]


def _total(cost, cols) -> float:
    return float(sum(float(cost[j, c]) for j, c in enumerate(cols)))


def hungarian_assign(cost, canonical: bool = True) -> Assignment:
    """Minimum-cost injective map from targets (rows) to queries (columns).

    With ``canonical`` the lexicographically smallest optimal column sequence
    is returned; otherwise any optimum (scipy's solver, much faster, used in
    the training loop where exact ties have probability zero).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError("cost matrix must be 2-D")
    t, n = cost.shape
    if t > n:
        raise ContractError(f"more targets ({t}) than queries ({n})")
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix has non-finite entries")
    if t == 0:
        return Assignment([], 0.0)
    if not canonical:
        _, cols = linear_sum_assignment(cost)
        return Assignment([(j, int(c)) for j, c in enumerate(cols)], _total(cost, cols))
    cols, u, v = _solve(cost)
    best = _total(cost, cols)
    tol = 1e-12 * max(1.0, float(np.abs(cost).max())) * t
    slack = cost - u[:, None] - v[None, :]

    # lexicographic refinement: only edges tight under the optimal duals can appear in an optimum
    for j in range(t):
        taken = set(int(c) for c in cols[:j])
        for i in np.flatnonzero(slack[j] <= tol):
            if i >= cols[j]:
                break
            if i in taken:
                continue
            rest = [c for c in range(n) if c not in taken and c != i]
            sub = cost[j + 1:][:, rest]
            sub_cols = _solve(sub)[0] if sub.shape[0] else np.zeros(0, dtype=np.int64)
            trial = np.concatenate([cols[:j], [i], np.asarray(rest)[sub_cols]]).astype(np.int64)
            if _total(cost, trial) <= best + tol:
                cols = trial
                break
    return Assignment([(j, int(c)) for j, c in enumerate(cols)], _total(cost, cols))


def brute_force_assign(cost) -> tuple[float, tuple[int, ...]]:
    """Exhaustive oracle: (minimal total, lexicographically smallest optimal columns)."""
    cost = np.asarray(cost, dtype=np.float64)
    t, n = cost.shape
    best, arg = math.inf, ()
    for perm in itertools.permutations(range(n), t):
        total = float(sum(float(cost[j, c]) for j, c in enumerate(perm)))
        if total < best:
            best, arg = total, perm
    return (0.0 if t == 0 else best), arg


# ------------------------------------------------------------------ loss


def set_prediction_loss(probs: torch.Tensor, targets: TargetSet, assignment: Assignment,
                        no_object_weight: float, pool: Sequence[str] | None = None,
                        log_probs: torch.Tensor | None = None) -> torch.Tensor | None:
    """Weighted mean of ``-log p`` over matched targets (weight 1) and unmatched queries (``no_object_weight``).

    Returns ``None`` when no term has positive weight. ``log_probs`` replaces
    the guarded ``log(max(p, 1e-12))`` when available.
    """
    pool = list(pool if pool is not None else targets.pool)
    index = {n: k for k, n in enumerate(pool)}
    logp = log_probs if log_probs is not None else torch.log(probs.clamp_min(1e-12))
    n = logp.shape[0]
    rows, cols, weights = [], [], []
    matched = set()
    for j, i in assignment.pairs:
        rows.append(i)
        cols.append(index[targets.categories[j]])
        weights.append(1.0)
        matched.add(i)
    if no_object_weight > 0:
        e = index[NO_OBJECT]
        for i in range(n):
            if i not in matched:
                rows.append(i)
                cols.append(e)
                weights.append(no_object_weight)
    if not weights:
        return None
    w = torch.tensor(weights, dtype=logp.dtype)
    terms = -logp[torch.tensor(rows), torch.tensor(cols)]
    return (w * terms).sum() / w.sum()


def truncate_targets(probs, targets: TargetSet, pool=None, counter: dict | None = None) -> TargetSet:
    """Keep the N targets whose best query probability is highest when T > N."""
    n = probs.shape[0]
    if len(targets.categories) <= n:
        return targets
    cost = build_cost_matrix(probs, targets, pool)
    best = (-cost).max(axis=1)
    keep = sorted(np.argsort(-best, kind="stable")[:n])
    if counter is not None:
        counter["dropped_targets"] = counter.get("dropped_targets", 0) + len(targets.categories) - n
    else:
        warnings.warn(f"{len(targets.categories) - n} targets dropped (more targets than queries)")
    dropped = [c for k, c in enumerate(targets.categories) if k not in set(keep)]
    return TargetSet([targets.categories[k] for k in keep], targets.source,
                     list(targets.negatives) + dropped)


def image_loss(Y: torch.Tensor, targets: TargetSet, table: TextTable, cfg: LossConfig,
               no_object: torch.Tensor | None, counter: dict | None = None) -> torch.Tensor | None:
    """Set-prediction loss of one image's outputs ``Y`` (N, C_o) against ``targets``."""
    pool = targets.pool
    logits = class_logits(Y, pool, table, cfg.temperature, no_object)
    logp = nx.log_softmax_rows(logits)
    probs = torch.exp(logp)
    targets = truncate_targets(probs, targets, pool, counter)
    pool_idx = {n: k for k, n in enumerate(pool)}
    assignment = hungarian_assign(build_cost_matrix(probs, targets, pool))
    # truncation may have moved targets into the negatives; the pool order is unchanged
    return set_prediction_loss(probs, targets, assignment, cfg.no_object_weight,
                               pool=sorted(pool_idx, key=pool_idx.get), log_probs=logp)


# ------------------------------------------------------------------ batched objective


class Vocabulary:
    """Fixed category order for batched logits; the no-object column is last."""

    def __init__(self, table: TextTable):
        self.table = table
        self.names = [e.name for e in table.entries if e.split != "no_object"]
        self.index = {n: k for k, n in enumerate(self.names)}
        self.no_object_index = len(self.names)
        self._E = torch.from_numpy(np.stack([e.embedding for e in table.entries if e.split != "no_object"]))

    def embeddings(self, dtype) -> torch.Tensor:
        return self._E.to(dtype)

    def ids(self, names: Sequence[str]) -> list[int]:
        try:
            return [self.index[n] for n in names]
        except KeyError as exc:
            raise KeyError(f"category {exc.args[0]!r} missing from text table") from None


@dataclass
class LossBreakdown:
    total: torch.Tensor
    loss_sup: torch.Tensor | None
    loss_pse: torch.Tensor | None
    n_sup: int
    n_pse: int
    per_image_sup: dict = field(default_factory=dict)
    per_image_pse: dict = field(default_factory=dict)


def _component(Y, logits_all, items, vocab: Vocabulary, cfg: LossConfig, counter):
    """Mean over images of the per-image set-prediction loss; ``items`` = [(batch idx, image id, TargetSet)]."""
    B, N, V1 = logits_all.shape
    if not items:
        return None, {}
    mask = np.zeros((len(items), V1), dtype=bool)
    target_ids = []
    for r, (b, _, ts) in enumerate(items):
        if cfg.full_vocab:
            mask[r, :] = True
        else:
            mask[r, vocab.ids(ts.categories)] = True
            mask[r, vocab.ids(ts.negatives)] = True
            mask[r, vocab.no_object_index] = True
        target_ids.append(vocab.ids(ts.categories))
    sel = torch.tensor([b for b, _, _ in items])
    logits = logits_all[sel].masked_fill(torch.from_numpy(~mask)[:, None, :], -math.inf)
    logp = nx.log_softmax_rows(logits)
    logp_det = logp.detach()

    rows, qs, cs, ws = [], [], [], []
    contributing = []
    for r, tids in enumerate(target_ids):
        # probabilities of the target columns only: all the matcher needs
        p = torch.exp(logp_det[r][:, tids]).double().numpy() if tids else np.zeros((N, 0))
        if len(tids) > N:
            best = p.max(axis=0)
            keep = sorted(np.argsort(-best, kind="stable")[:N])
            counter["dropped_targets"] = counter.get("dropped_targets", 0) + len(tids) - N
            tids = [tids[k] for k in keep]
            p = p[:, keep]
        cost = -p.T if tids else np.zeros((0, N))
        a = hungarian_assign(cost, canonical=False)
        matched = np.zeros(N, dtype=bool)
        n_terms = []
        for j, i in a.pairs:
            n_terms.append((i, tids[j], 1.0))
            matched[i] = True
        if cfg.no_object_weight > 0:
            n_terms += [(i, vocab.no_object_index, cfg.no_object_weight) for i in np.flatnonzero(~matched)]
        if not n_terms:
            continue
        wsum = sum(w for _, _, w in n_terms)
        for i, c, w in n_terms:
            rows.append(r)
            qs.append(int(i))
            cs.append(int(c))
            ws.append(w / wsum)
        contributing.append(r)
    if not contributing:
        return None, {}
    w = torch.tensor(ws, dtype=logp.dtype)
    r_t = torch.tensor(rows)
    terms = -logp[r_t, torch.tensor(qs), torch.tensor(cs)] * w
    per_image = torch.zeros(len(items), dtype=logp.dtype).index_add(0, r_t, terms)
    loss = per_image[contributing].sum() / len(contributing)
    attribution = {items[r][1]: float(per_image[r].detach()) for r in contributing}
    return loss, attribution


def batch_loss(Y: torch.Tensor, no_object: torch.Tensor, vocab: Vocabulary, image_ids: Sequence[int],
               sup: Sequence[TargetSet | None], pse: Sequence[TargetSet | None], cfg: LossConfig,
               counter: dict | None = None) -> LossBreakdown:
    """``gamma_sup * L_sup + gamma_pse * L_pse`` for a batch of SUM-CLIP outputs ``Y`` (B, N, C_o).

    ``sup[b]`` / ``pse[b]`` are ``None`` for images without that component; a
    component with zero weight is skipped entirely.
    """
    counter = counter if counter is not None else {}
    E = torch.cat([vocab.embeddings(Y.dtype), nx.l2_normalize_rows(no_object.reshape(1, -1).to(Y.dtype))])
    logits = nx.l2_normalize_rows(Y) @ E.T / cfg.temperature
    sup_items = [(b, image_ids[b], t) for b, t in enumerate(sup) if t is not None] if cfg.gamma_sup > 0 else []
    pse_items = [(b, image_ids[b], t) for b, t in enumerate(pse) if t is not None] if cfg.gamma_pse > 0 else []
    l_sup, att_sup = _component(Y, logits, sup_items, vocab, cfg, counter)
    l_pse, att_pse = _component(Y, logits, pse_items, vocab, cfg, counter)
    if l_sup is None and l_pse is None:
        raise ContractError("batch has neither supervised nor pseudo-label terms")
    total = torch.zeros((), dtype=Y.dtype)
    if l_sup is not None:
        total = total + cfg.gamma_sup * l_sup
    if l_pse is not None:
        total = total + cfg.gamma_pse * l_pse
    return LossBreakdown(total, l_sup, l_pse, len(att_sup), len(att_pse), att_sup, att_pse)


def combined_loss(batch, sum_clip_params, table: TextTable, cfg: LossConfig, training: bool = False,
                  generator: torch.Generator | None = None, counter: dict | None = None) -> LossBreakdown:
    """Forward SUM-CLIP on ``batch`` (sequence of ``TrainItem``) and return the weighted objective."""
    from .heads import sum_clip_forward

    cfg.validate()
    tensors = sum_clip_params.tensors()
    X = torch.stack([item.X for item in batch])
    Y = sum_clip_forward(X.to(tensors["queries"].dtype), tensors, sum_clip_params.config, training, generator)
    vocab = Vocabulary(table)
    return batch_loss(Y, tensors["no_object"], vocab, [it.image_id for it in batch],
                      [it.sup for it in batch], [it.pse for it in batch], cfg, counter)


@dataclass
class TrainItem:
    image_id: int
    X: torch.Tensor
    sup: TargetSet | None = None
    pse: TargetSet | None = None
