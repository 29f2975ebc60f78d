import os
import warnings

import numpy as np
import pytest
import torch

from conftest import tiny_config
from for_ovir.config import RunConfig, apply_overrides, config_from_dict, load_config, parse_config, reference_profile
from for_ovir.heads import FeatureMap
from for_ovir.numerics import ConfigError
from for_ovir.pseudo_labels import pseudo_label_dataset
from for_ovir.rng import RngStream
from for_ovir.training.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from for_ovir.training.data import (InsufficientNegativesWarning, category_frequencies, make_semi_split,
                                   sample_federated_negatives, sample_pseudo_negatives)
from for_ovir.training.files import (FormatError, LabelRecord, read_features, read_jsonl, read_labels,
                                     write_features, write_labels)
from for_ovir.training.loop import (TrainingDivergedError, initial_state, lr_at, params_from_checkpoint,
                                    train_run)
from for_ovir.training.synth import build_world, generate_split, write_synth
from for_ovir.heads import dense_clip_head


@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_config()
    world = build_world(cfg.data)
    train = generate_split(world, "train")
    pseudo = list(pseudo_label_dataset(train.features, world.reference_tensors(), cfg.cluster_config(),
                                       world.table.pseudo_vocabulary(), cfg.pseudo.threshold, cfg.pseudo.temperature))
    return cfg, world, train, pseudo


def run(tiny, cfg=None, **kw):
    base, world, train, pseudo = tiny
    return train_run(cfg or base, train.features, train.labels, world.table, pseudo,
                     world.reference_tensors(torch.float32), **kw)


# config


def test_defaults_follow_hyperparameter_table():
    c = RunConfig()
    assert (c.train.epochs, c.train.lr, c.train.lr_drop_epoch, c.train.batch_size) == (25, 1e-5, 15, 64)
    assert (c.head.dropout, c.train.weight_decay, c.head.n_queries, c.cluster.n_clusters) == (0.1, 1e-4, 50, 50)
    assert c.pseudo.threshold == 5e-4 and c.loss.no_object_weight == 0.1


def test_config_text_roundtrip_and_digest():
    c = tiny_config()
    back = parse_config(c.to_text())
    assert back == c and back.digest() == c.digest()
    assert config_from_dict(c.to_dict()) == c
    assert c.replace(train__seed=3).digest() != c.digest()


@pytest.mark.parametrize("text, needle", [
    ("train.nope = 1", "unknown key"),
    ("bogus.lr = 1", "unknown section"),
    ("train.lr = abc", "train.lr"),
    ("train.lr = 1\ntrain.lr = 2", "duplicate"),
    ("train.epochs = 5\ntrain.lr_drop_epoch = 9", "lr_drop_epoch"),
    ("cluster.n_clusters = 80", "n_clusters"),
    ("just text", "expected"),
])
def test_config_errors_name_the_field(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_for_seed_env_override(tmp_path, monkeypatch):
    path = tmp_path / "c.cfg"
    path.write_text("train.seed = 4\n")
    monkeypatch.setenv("FOR_SEED", "11")
    assert load_config(path).train.seed == 11
    monkeypatch.delenv("FOR_SEED")
    assert load_config(path).train.seed == 4


def test_reference_profile_loads():
    c = reference_profile()
    assert c.data.seed == 7 and (c.data.n_images, c.data.n_eval_images) == (2000, 500)
    assert (c.data.n_base, c.data.n_novel, c.data.n_distractor) == (48, 17, 200)
    assert c.data.feature_dim == 64


# schedule


def test_lr_schedule():
    c = RunConfig()
    assert lr_at(0, c) == 1e-5
    assert lr_at(14, c) == 1e-5
    assert lr_at(15, c) == pytest.approx(1e-6)
    flat = c.replace(train__lr_drop_factor=1.0)
    assert {lr_at(e, flat) for e in range(25)} == {1e-5}
    with pytest.raises(ValueError):
        lr_at(25, c)


# labels and splits


def _records(n):
    return [LabelRecord(i, [f"b{i % 3}"], [f"b{(i + 1) % 3}"]) for i in range(n)]


def test_semi_split_counts():
    rng = RngStream(0).child("semi_split").numpy()
    assert sum(r.labeled for r in make_semi_split(_records(2000), 0.01, rng)) == 20
    assert all(r.labeled for r in make_semi_split(_records(50), 1.0, rng))
    assert sum(r.labeled for r in make_semi_split(_records(10), 0.01, rng)) == 1


def test_semi_split_unlabeled_are_stripped_and_folds_differ():
    folds = [make_semi_split(_records(200), 0.1, RngStream(s).child("semi_split").numpy()) for s in range(5)]
    subsets = {frozenset(r.image_id for r in f if r.labeled) for f in folds}
    assert len(subsets) == 5
    for r in folds[0]:
        if not r.labeled:
            assert r.categories == [] and r.neg_categories == []


def test_semi_split_errors():
    with pytest.raises(ConfigError):
        make_semi_split(_records(5), 0.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        make_semi_split([], 0.5, np.random.default_rng(0))


def test_federated_negatives():
    names = [f"b{i}" for i in range(60)]
    rec = LabelRecord(0, ["b0", "b1"], ["b2"])
    w = np.arange(1, 61, dtype=float)
    rng = np.random.default_rng(0)
    assert sample_federated_negatives(rec, names, 0, w, rng).negatives == ["b2"]
    ts = sample_federated_negatives(rec, names, 50, w, rng)
    assert len(ts.negatives) == 50 and ts.negatives[0] == "b2"
    for _ in range(10_000):
        ts = sample_federated_negatives(rec, names[:8], 5, None, rng)
        assert not set(ts.negatives) & {"b0", "b1"}
    with pytest.warns(InsufficientNegativesWarning):
        ts = sample_federated_negatives(rec, names[:5], 50, None, rng)
    assert sorted(ts.negatives) == ["b2", "b3", "b4"]
    with pytest.raises(ConfigError):
        sample_federated_negatives(rec, names, -1, None, rng)


def test_federated_deterministic_and_frequency():
    recs = _records(30)
    f = category_frequencies(recs, ["b0", "b1", "b2", "b3"])
    assert f.tolist() == [11, 11, 11, 1]
    a = sample_federated_negatives(recs[0], [f"b{i}" for i in range(20)], 10, None, np.random.default_rng(3))
    b = sample_federated_negatives(recs[0], [f"b{i}" for i in range(20)], 10, None, np.random.default_rng(3))
    assert a == b


def test_pseudo_negatives():
    names = [f"n{i}" for i in range(10)]
    negs = sample_pseudo_negatives(["n1", "n5"], names, 4, np.random.default_rng(0))
    assert len(negs) == 4 and not {"n1", "n5"} & set(negs)
    assert negs == sorted(negs, key=names.index)
    assert len(sample_pseudo_negatives(["n1"], names, 100, np.random.default_rng(0))) == 9


# files


def test_feature_file_roundtrip_and_errors(tmp_path):
    fms = [FeatureMap(7, torch.randn(4, 3)), FeatureMap(2**40, torch.randn(2, 3))]
    write_features(tmp_path / "f.forf", fms)
    back = read_features(tmp_path / "f.forf")
    assert [f.image_id for f in back] == [7, 2**40]
    assert all(torch.equal(a.X, b.X) for a, b in zip(fms, back))
    raw = (tmp_path / "f.forf").read_bytes()
    (tmp_path / "bad.forf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_features(tmp_path / "bad.forf")
    (tmp_path / "short.forf").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        read_features(tmp_path / "short.forf")


def test_label_records(tmp_path):
    recs = [LabelRecord(1, ["a"], ["b"]), LabelRecord(2, [], [], False)]
    write_labels(tmp_path / "l.jsonl", recs)
    assert read_labels(tmp_path / "l.jsonl") == recs
    with pytest.raises(ValueError):
        LabelRecord(3, ["a"], ["a"])
    with pytest.raises(ValueError):
        LabelRecord(3, ["a"], [], False)


# synthetic generator


def test_synth_same_seed_identical_files(tmp_path):
    cfg = tiny_config()
    for d in ("a", "b"):
        write_synth(generate_split(build_world(cfg.data), "train"), tmp_path / d)
    for name in ("features.forf", "labels.jsonl", "text_table.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_noise_free_tokens_match_text_direction():
    cfg = tiny_config(**{"data.noise": 0.0, "data.objects_max": 1})
    world = build_world(cfg.data)
    data = generate_split(world, "train")
    ref = world.reference_tensors()
    fm, rec = data.features[0], data.present[data.features[0].image_id]
    Y = dense_clip_head(FeatureMap(fm.image_id, fm.X.double()), ref).Y
    Y = Y / Y.norm(dim=1, keepdim=True)
    e = torch.from_numpy(world.table.lookup(rec))[0]
    hits = ((Y @ e) > 1 - 1e-5).sum().item()
    assert hits >= cfg.data.object_tokens_min


def test_synth_novel_never_supervised_and_eval_has_novel():
    cfg = tiny_config()
    world = build_world(cfg.data)
    assert all(not c.startswith("novel") for r in generate_split(world, "train").labels for c in r.categories)
    assert any(c.startswith("novel") for r in generate_split(world, "eval").labels for c in r.categories)


# checkpoints


def test_checkpoint_roundtrip_bit_exact(tiny, tmp_path):
    result = run(tiny, tiny[0].replace(train__epochs=1, train__lr_drop_epoch=1))
    ck = result.checkpoint(tiny[0])
    save_checkpoint(ck, tmp_path / "c.forc")
    back = load_checkpoint(tmp_path / "c.forc")
    assert ck.equals(back)
    save_checkpoint(back, tmp_path / "d.forc")
    assert (tmp_path / "c.forc").read_bytes() == (tmp_path / "d.forc").read_bytes()


def test_checkpoint_errors(tiny, tmp_path):
    params, adam = initial_state(tiny[0], tiny[1].reference_tensors(torch.float32))
    ck = Checkpoint(tiny[0].to_dict(), tiny[0].digest(), {k: p.tensor for k, p in params.params.items()},
                    {k: p.trainable for k, p in params.params.items()}, adam, 0, 0)
    path = tmp_path / "c.forc"
    save_checkpoint(ck, path)
    raw = path.read_bytes()
    cases = {
        "magic": b"JUNK" + raw[4:],
        "truncated": raw[: len(raw) // 2],
        "checksum": raw[:100] + bytes([raw[100] ^ 1]) + raw[101:],
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path, expect_digest="0" * 64)


# training loop


def test_zero_epoch_run_equals_initialization(tiny):
    cfg = tiny[0].replace(train__epochs=0, train__lr_drop_epoch=0)
    result = run(tiny, cfg)
    params, _ = initial_state(cfg, tiny[1].reference_tensors(torch.float32))
    assert result.metrics == []
    assert all(torch.equal(result.params.params[k].tensor, p.tensor) for k, p in params.params.items())


def test_resume_is_step_identical(tiny, tmp_path):
    straight = run(tiny, out_dir=tmp_path / "a")
    run(tiny, out_dir=tmp_path / "b", stop_after=1)
    resumed = run(tiny, out_dir=tmp_path / "b", resume=tmp_path / "b" / "checkpoint.forc")
    assert straight.checkpoint(tiny[0]).equals(resumed.checkpoint(tiny[0]))
    for name in ("checkpoint.forc", "metrics.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_jsonl(tmp_path / "a" / "metrics.jsonl")
    assert [r["epoch"] for r in rows] == [0, 1, 2] and set(rows[0]) == {"epoch", "loss_sup", "loss_pse", "lr"}


def test_resume_with_other_config_rejected(tiny, tmp_path):
    run(tiny, out_dir=tmp_path, stop_after=1)
    with pytest.raises(CheckpointError):
        run(tiny, tiny[0].replace(train__lr=2e-3), resume=tmp_path / "checkpoint.forc")


def test_frozen_groups_unchanged_and_params_restorable(tiny, tmp_path):
    result = run(tiny, out_dir=tmp_path)
    init, _ = initial_state(tiny[0], tiny[1].reference_tensors(torch.float32))
    for k in ("q", "k", "v", "c"):
        assert torch.equal(result.params.params[f"{k}.weight"].tensor, init.params[f"{k}.weight"].tensor)
    assert not torch.equal(result.params.params["queries"].tensor, init.params["queries"].tensor)
    cfg, params = params_from_checkpoint(load_checkpoint(tmp_path / "checkpoint.forc"))
    assert cfg == tiny[0]
    assert all(torch.equal(params.params[k].tensor, p.tensor) for k, p in result.params.params.items())


def test_unlabeled_records_never_reach_supervised_loss(tiny):
    cfg = tiny[0].replace(train__labeled_fraction=0.25)
    result = run(tiny, cfg)
    split = make_semi_split(sorted(tiny[2].labels, key=lambda r: r.image_id), 0.25,
                            RngStream(cfg.train.fold_seed).child("semi_split").numpy())
    labeled = {r.image_id for r in split if r.labeled}
    assert result.sup_attribution and set(result.sup_attribution) <= labeled
    assert len(labeled) == 10


def test_sup_only_has_no_pseudo_term(tiny):
    result = run(tiny, tiny[0].replace(loss__gamma_pse=0.0))
    assert all(r["loss_pse"] is None and r["loss_sup"] is not None for r in result.metrics)


def test_nan_features_abort_with_diagnostics(tiny):
    cfg, world, train, pseudo = tiny
    bad = [FeatureMap(f.image_id, torch.full_like(f.X, float("nan"))) for f in train.features]
    with pytest.raises(TrainingDivergedError, match="parameter norms"):
        train_run(cfg, bad, train.labels, world.table, pseudo, world.reference_tensors(torch.float32))


def test_missing_features_rejected(tiny):
    cfg, world, train, pseudo = tiny
    with pytest.raises(KeyError):
        train_run(cfg, train.features[:5], train.labels, world.table, pseudo, world.reference_tensors(torch.float32))
