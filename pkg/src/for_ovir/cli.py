"""Command-line entry point: one subcommand per pipeline stage.

Exit status is 0 on success, 2 for usage or input problems (missing files,
malformed inputs, bad config) and 1 for anything unexpected. Diagnostics go
to stderr as ``for-ovir: error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, apply_overrides, load_config
from .heads import EmbeddingSet
from .numerics import ConfigError, ShapeError
from .pseudo_labels import (TextTableError, load_text_table, pseudo_label_dataset, read_pseudo_labels,
                            write_pseudo_labels)
from .retrieval import (IndexFormatError, embed_cluster_clip, embed_sum_clip, evaluate, index_build,
                        load_index, read_embeddings, save_index, topk, write_embeddings)
from .training.checkpoint import CheckpointError, load_checkpoint
from .training.files import FormatError, read_features, read_labels
from .training.loop import TrainingDivergedError, params_from_checkpoint, train_run
from .training.synth import build_world, generate_split, load_reference_params, write_synth

PROG = "for-ovir"
log = logging.getLogger(PROG)


class UsageError(Exception):
    pass


_INPUT_ERRORS = (UsageError, ConfigError, FormatError, CheckpointError, IndexFormatError, TextTableError,
                 ShapeError, json.JSONDecodeError)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(2, "no such file", str(p))
    return p


def _config(args) -> RunConfig:
    cfg = load_config(_existing(args.config) if args.config else None)
    if args.set:
        pairs = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        cfg = apply_overrides(cfg, pairs).validate()
    return cfg


# ------------------------------------------------------------------ commands


def cmd_gen_synth(args) -> int:
    cfg = _config(args)
    data = generate_split(build_world(cfg.data), args.split)
    paths = write_synth(data, args.out_dir)
    for p in paths.values():
        print(p)
    return 0


def cmd_pseudo_label(args) -> int:
    cfg = _config(args)
    features = read_features(_existing(args.features))
    table = load_text_table(_existing(args.text_table))
    ref = load_reference_params(_existing(args.manifest))
    overrides = {"cluster.n_clusters": args.clusters, "pseudo.threshold": args.threshold}
    if args.temperature is not None:
        overrides["pseudo.temperature"] = args.temperature
    cfg = apply_overrides(cfg, {k: v for k, v in overrides.items() if v is not None}).validate()
    records = list(pseudo_label_dataset(features, ref, cfg.cluster_config(), table.pseudo_vocabulary(),
                                        cfg.pseudo.threshold, cfg.pseudo.temperature))
    write_pseudo_labels(records, args.out)
    n = sum(len(r.names) for r in records)
    print(f"{len(records)} images, {n} pseudo-labels -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    features = read_features(_existing(args.features))
    labels = read_labels(_existing(args.labels))
    table = load_text_table(_existing(args.text_table))
    pseudo = read_pseudo_labels(_existing(args.pseudo)) if args.pseudo else []
    ref = load_reference_params(_existing(args.manifest), torch.float32)
    resume = _existing(args.resume) if args.resume else None
    result = train_run(cfg, features, labels, table, pseudo, ref, out_dir=args.out_dir,
                       resume=resume, stop_after=args.stop_after)
    last = result.metrics[-1] if result.metrics else {}
    print(f"epoch {result.epoch}/{cfg.train.epochs} {json.dumps(last)}")
    return 0


def cmd_embed(args) -> int:
    features = read_features(_existing(args.features))
    if args.head == "sum":
        if not args.checkpoint:
            raise UsageError("--head sum needs --checkpoint")
        _, params = params_from_checkpoint(load_checkpoint(_existing(args.checkpoint)))
        if features and features[0].X.shape[-1] != params.config.feature_dim:
            raise ShapeError(f"features have width {features[0].X.shape[-1]}, "
                             f"checkpoint expects {params.config.feature_dim}")
        sets = embed_sum_clip(features, params)
    else:
        if not args.manifest:
            raise UsageError("--head cluster needs --manifest")
        cfg = _config(args)
        if args.clusters is not None:
            cfg = apply_overrides(cfg, {"cluster.n_clusters": args.clusters}).validate()
        sets = embed_cluster_clip(features, load_reference_params(_existing(args.manifest)), cfg.cluster_config())
    write_embeddings(args.out, [EmbeddingSet(s.image_id, s.Y.float(), True) for s in sets])
    print(f"{len(sets)} images -> {args.out}")
    return 0


def cmd_build_index(args) -> int:
    ids, rows = read_embeddings(_existing(args.embeddings))
    index = index_build(ids, rows, rows.shape[1])
    save_index(index, args.out)
    print(f"{index.n_images} images, {len(index)} rows -> {args.out}")
    return 0


def cmd_query(args) -> int:
    index = load_index(_existing(args.index))
    table = load_text_table(_existing(args.text_table))
    if args.category not in table.names():
        raise UsageError(f"unknown category {args.category!r}")
    e = table.lookup([args.category])[0]
    for image_id, score in topk(index, e, args.topk):
        print(f"{image_id}\t{score:.6f}")
    return 0


def cmd_eval(args) -> int:
    index = load_index(_existing(args.index))
    table = load_text_table(_existing(args.text_table))
    labels = read_labels(_existing(args.labels))
    meta = {}
    if args.checkpoint:
        meta["checkpoint_digest"] = load_checkpoint(_existing(args.checkpoint)).digest
    try:
        report = evaluate(index, table, labels, args.k, metadata=meta)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    if args.out:
        report.save(args.out)
    print(report.summary())
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description="Open-vocabulary image retrieval pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    def with_config(sp):
        sp.add_argument("--config", help="run config file (section.key = value lines)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")

    sp = add("gen-synth", cmd_gen_synth, "generate a synthetic split")
    with_config(sp)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--split", choices=("train", "eval"), default="train")

    sp = add("pseudo-label", cmd_pseudo_label, "pseudo-label feature maps with the frozen cluster head")
    with_config(sp)
    sp.add_argument("--features", required=True)
    sp.add_argument("--text-table", required=True)
    sp.add_argument("--manifest", required=True, help="generator manifest holding the reference linears")
    sp.add_argument("--threshold", type=float, default=None, help="default: pseudo.threshold (5e-4)")
    sp.add_argument("--clusters", type=int, default=None, help="default: cluster.n_clusters (50)")
    sp.add_argument("--temperature", type=float, default=None)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the multi-embedding head")
    with_config(sp)
    sp.add_argument("--features", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--text-table", required=True)
    sp.add_argument("--pseudo", help="pseudo-label file (omit for supervised-only runs)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--stop-after", type=int, default=None, help="stop once this many epochs are done")

    sp = add("embed", cmd_embed, "embed every image of a feature file")
    with_config(sp)
    sp.add_argument("--features", required=True)
    sp.add_argument("--head", choices=("sum", "cluster"), default="sum")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--clusters", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = add("build-index", cmd_build_index, "build a flat index from an embeddings file")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--out", required=True)

    sp = add("query", cmd_query, "top-k images for one category")
    sp.add_argument("--index", required=True)
    sp.add_argument("--text-table", required=True)
    sp.add_argument("--category", required=True)
    sp.add_argument("--topk", type=int, default=50)

    sp = add("eval", cmd_eval, "mAP@k over base and novel categories")
    sp.add_argument("--index", required=True)
    sp.add_argument("--text-table", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--k", type=int, default=50)
    sp.add_argument("--checkpoint", help="recorded in the report metadata")
    sp.add_argument("--out")
    return p


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"{PROG}: error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s")
    if args.threads < 1:
        return _fail("usage", "--threads must be >= 1", 2)
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc.filename or str(exc), 2)
    except _INPUT_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc), 2)
    except TrainingDivergedError as exc:
        return _fail("diverged", str(exc), 1)
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
