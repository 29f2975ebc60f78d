"""The epoch loop: seeded shuffling, dual-loss steps, step LR schedule, checkpoints."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch

from .. import numerics as nx
from ..numerics import Parameter
from ..config import RunConfig, config_from_dict
from ..heads import FeatureMap, SumClipParams, init_sum_clip, sum_clip_forward
from ..matching_loss import TargetSet, Vocabulary, batch_loss
from ..pseudo_labels import PseudoLabelRecord, TextTable, filter_vocabulary
from ..rng import RngStream
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import category_frequencies, make_semi_split, sample_federated_negatives, sample_pseudo_negatives
from .files import LabelRecord, write_metrics

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def lr_at(epoch: int, cfg: RunConfig) -> float:
    t = cfg.train
    if not 0 <= epoch < max(t.epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {t.epochs})")
    return t.lr if epoch < t.lr_drop_epoch else t.lr * t.lr_drop_factor


@dataclass
class TrainResult:
    params: SumClipParams
    adam: nx.AdamState
    metrics: list[dict]
    epoch: int
    counters: dict = field(default_factory=dict)
    # image id -> summed supervised loss attribution over the run (only labeled ids can appear)
    sup_attribution: dict = field(default_factory=dict)

    def checkpoint(self, cfg: RunConfig) -> Checkpoint:
        return Checkpoint(cfg.to_dict(), cfg.digest(), {k: p.tensor.detach().clone() for k, p in self.params.params.items()},
                          {k: p.trainable for k, p in self.params.params.items()}, self.adam, self.epoch,
                          cfg.train.seed, list(self.metrics))


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.train.precision == "float64" else torch.float32


def initial_state(cfg: RunConfig, reference: Mapping[str, torch.Tensor]) -> tuple[SumClipParams, nx.AdamState]:
    t = cfg.train
    params = init_sum_clip(cfg.head_config(), reference, RngStream(t.seed), cfg.head.freeze, _dtype(cfg))
    adam = nx.AdamState(t.beta1, t.beta2, t.eps, t.weight_decay)
    return params, adam


def _restore(params: SumClipParams, adam: nx.AdamState, ckpt: Checkpoint) -> None:
    if ckpt.params.keys() != params.params.keys():
        raise ValueError("checkpoint parameter names do not match the configured head")
    with torch.no_grad():
        for k, p in params.params.items():
            p.tensor.copy_(ckpt.params[k])
    adam.t = ckpt.adam.t
    adam.m = {k: v.clone() for k, v in ckpt.adam.m.items()}
    adam.v = {k: v.clone() for k, v in ckpt.adam.v.items()}


def params_from_checkpoint(ckpt: Checkpoint) -> tuple[RunConfig, SumClipParams]:
    """Rebuild the run config and head parameters stored in a checkpoint."""
    cfg = config_from_dict(ckpt.config)
    params = {k: Parameter(k, v, ckpt.trainable.get(k, True)) for k, v in ckpt.params.items()}
    return cfg, SumClipParams(cfg.head_config(), params, cfg.head.freeze)


def _param_norms(params: SumClipParams) -> dict[str, float]:
    return {k: float(p.tensor.detach().norm()) for k, p in params.params.items()}


def _diverged(epoch: int, step: int, what: str, params: SumClipParams):
    raise TrainingDivergedError(f"non-finite {what} at epoch {epoch}, batch {step}; "
                                f"parameter norms={_param_norms(params)}")


def _epoch_targets(cfg: RunConfig, epoch: int, records, pseudo, vocab_names, sup_names, freq):
    """Per-image supervised and pseudo target sets for one epoch (negatives are resampled per epoch)."""
    root = RngStream(cfg.train.seed)
    sup, pse = [], []
    fed_rng = root.child("federated", epoch).numpy()
    neg_rng = root.child("pseudo_negatives", epoch).numpy()
    m = cfg.loss.pseudo_negatives
    for r in records:
        if not r.labeled:
            sup.append(None)
        elif cfg.data.federated:
            sup.append(sample_federated_negatives(r, sup_names, cfg.train.min_negatives, freq, fed_rng))
        else:
            sup.append(TargetSet(sorted(r.categories), "supervised", list(r.neg_categories)))
        pos = pseudo.get(r.image_id)
        if pos is None:
            pse.append(None)
            continue
        negs = [] if cfg.loss.full_vocab else sample_pseudo_negatives(pos, vocab_names, m, neg_rng)
        pse.append(TargetSet(pos, "pseudo", negs))
    return sup, pse


def train_run(cfg: RunConfig, features: Sequence[FeatureMap], labels: Sequence[LabelRecord], table: TextTable,
              pseudo: Sequence[PseudoLabelRecord], reference: Mapping[str, torch.Tensor], out_dir=None,
              resume=None, stop_after: int | None = None,
              on_epoch: Callable[[int, SumClipParams], dict] | None = None) -> TrainResult:
    """Train SUM-CLIP on precomputed feature maps.

    ``resume`` is a checkpoint path; ``stop_after`` ends the run (and writes a
    checkpoint) once that many epochs are complete. ``on_epoch`` may return
    extra metric fields, e.g. validation mAP.
    """
    cfg.validate()
    t = cfg.train
    dtype = _dtype(cfg)
    params, adam = initial_state(cfg, reference)
    metrics: list[dict] = []
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, expect_digest=cfg.digest())
        _restore(params, adam, ckpt)
        start, metrics = ckpt.epoch, list(ckpt.metrics)

    by_id = {fm.image_id: fm for fm in features}
    records = sorted(labels, key=lambda r: r.image_id)
    missing = [r.image_id for r in records if r.image_id not in by_id]
    if missing:
        raise KeyError(f"labels reference images without feature maps: {missing[:5]}")
    records = make_semi_split(records, t.labeled_fraction, RngStream(t.fold_seed).child("semi_split").numpy())

    vocab_table = filter_vocabulary(table.pseudo_vocabulary(), cfg.pseudo.exclude_novel, table.names("novel"))
    vocab_names = vocab_table.names()
    sup_names = table.names("base")
    freq = category_frequencies(records, sup_names)
    allowed = set(vocab_names)
    pseudo_map = {p.image_id: [n for n in p.names if n in allowed] for p in pseudo}
    vocab = Vocabulary(table)
    loss_cfg = cfg.loss_config()

    X_all = torch.stack([by_id[r.image_id].X for r in records]).to(dtype)
    ids = [r.image_id for r in records]
    n = len(records)
    counters: dict = {}
    attribution: dict = {}
    trainable = params.trainable()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    end = t.epochs if stop_after is None else min(t.epochs, stop_after)
    for epoch in range(start, end):
        lr = lr_at(epoch, cfg)
        sup, pse = _epoch_targets(cfg, epoch, records, pseudo_map, vocab_names, sup_names, freq)
        order = RngStream(t.seed).child("shuffle", epoch).numpy().permutation(n)
        sums = {"sup": 0.0, "pse": 0.0, "n_sup": 0, "n_pse": 0}
        for step, s in enumerate(range(0, n, t.batch_size)):
            idx = order[s:s + t.batch_size]
            b_sup = [sup[i] for i in idx]
            b_pse = [pse[i] for i in idx]
            has_sup = loss_cfg.gamma_sup > 0 and any(x is not None for x in b_sup)
            has_pse = loss_cfg.gamma_pse > 0 and any(x is not None for x in b_pse)
            if not (has_sup or has_pse):
                continue
            gen = RngStream(t.seed).child("dropout", epoch, step).torch()
            tensors = params.tensors()
            nx.zero_grad(trainable)
            Y = sum_clip_forward(X_all[torch.from_numpy(idx)], tensors, params.config, True, gen)
            if not torch.isfinite(Y).all():
                _diverged(epoch, step, "head output", params)
            br = batch_loss(Y, tensors["no_object"], vocab, [ids[i] for i in idx], b_sup, b_pse, loss_cfg, counters)
            if not torch.isfinite(br.total):
                _diverged(epoch, step, f"loss {float(br.total.detach())}", params)
            nx.backward(br.total)
            nx.adam_step(trainable, adam, lr)
            if br.loss_sup is not None:
                sums["sup"] += float(br.loss_sup.detach()) * br.n_sup
                sums["n_sup"] += br.n_sup
                for k, v in br.per_image_sup.items():
                    attribution[k] = attribution.get(k, 0.0) + v
            if br.loss_pse is not None:
                sums["pse"] += float(br.loss_pse.detach()) * br.n_pse
                sums["n_pse"] += br.n_pse
        row = {
            "epoch": epoch,
            "loss_sup": sums["sup"] / sums["n_sup"] if sums["n_sup"] else None,
            "loss_pse": sums["pse"] / sums["n_pse"] if sums["n_pse"] else None,
            "lr": lr,
        }
        if on_epoch is not None:
            row.update(on_epoch(epoch, params))
        metrics.append(row)
        log.info("epoch %d: %s", epoch, row)

    result = TrainResult(params, adam, metrics, max(end, start), counters, attribution)
    if out is not None:
        save_checkpoint(result.checkpoint(cfg), out / "checkpoint.forc")
        write_metrics(out / "metrics.jsonl", metrics)
    return result
