import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from for_ovir.heads import SumClipConfig, init_sum_clip
from for_ovir.matching_loss import (NO_OBJECT, Assignment, LossConfig, TargetSet, TrainItem, Vocabulary, batch_loss,
                                    brute_force_assign, build_cost_matrix, class_probabilities, combined_loss,
                                    hungarian_assign, image_loss, set_prediction_loss)
from for_ovir.numerics import ConfigError, ContractError
from for_ovir.pseudo_labels import TextEntry, TextTable
from for_ovir.rng import RngStream

D = torch.float64


def table(n_base=3, n_pseudo=3, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n_base + n_pseudo, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return TextTable([TextEntry(f"b{i}", "base", vecs[i]) for i in range(n_base)]
                     + [TextEntry(f"p{i}", "pseudo", vecs[n_base + i]) for i in range(n_pseudo)])


# probabilities


def test_class_probabilities_hand_value():
    t = TextTable([TextEntry("a", "base", np.array([1.0, 0])), TextEntry("b", "base", np.array([0, 1.0]))])
    p = class_probabilities(torch.tensor([[2.0, 0.0]], dtype=D), ["a", "b"], t, 1.0)
    assert torch.allclose(p, torch.tensor([[math.e / (math.e + 1), 1 / (math.e + 1)]], dtype=D), atol=1e-15)
    u = class_probabilities(torch.tensor([[1.0, 1.0]], dtype=D), ["a", "b"], t, 1.0)
    assert torch.allclose(u, torch.full((1, 2), 0.5, dtype=D))


def test_class_probabilities_rows_sum_to_one(rng):
    t = table()
    Y = torch.from_numpy(rng.normal(size=(5, 6)))
    p = class_probabilities(Y, ["b0", "p1", NO_OBJECT], t, 0.1, torch.from_numpy(rng.normal(size=6)))
    assert torch.allclose(p.sum(1), torch.ones(5, dtype=D), atol=1e-9)


def test_missing_category_raises():
    with pytest.raises(KeyError):
        class_probabilities(torch.ones(1, 6, dtype=D), ["nope"], table(), 1.0)


# matching


def test_hungarian_worked_example():
    a = hungarian_assign([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert a.pairs == [(0, 1), (1, 0), (2, 2)] and a.cost == 5


def test_hungarian_simple_cases():
    assert hungarian_assign(np.zeros((0, 4))).pairs == []
    diag = np.ones((3, 3)) - 2 * np.eye(3)
    assert hungarian_assign(diag).pairs == [(0, 0), (1, 1), (2, 2)]
    assert hungarian_assign([[3, 1, 2, 1]]).pairs == [(0, 1)]
    assert hungarian_assign(np.zeros((2, 4))).pairs == [(0, 0), (1, 1)]


def test_hungarian_contract_errors():
    with pytest.raises(ContractError):
        hungarian_assign([[1.0, np.inf]])
    with pytest.raises(ContractError):
        hungarian_assign(np.zeros((3, 2)))


@given(st.integers(0, 5), st.integers(1, 6), st.integers(0, 2**31), st.booleans())
@settings(max_examples=300, deadline=None)
def test_hungarian_matches_brute_force(t, extra, seed, integer):
    n = t + extra - 1 if t else extra
    n = max(n, t)
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 4, size=(t, n)).astype(float) if integer else rng.normal(size=(t, n))
    best, lex = brute_force_assign(cost)
    a = hungarian_assign(cost)
    assert a.cost == best
    assert tuple(i for _, i in a.pairs) == lex
    assert hungarian_assign(cost, canonical=False).cost == pytest.approx(best, abs=1e-12)


def test_monotone_matching_sanity(rng):
    for _ in range(50):
        p = rng.uniform(size=(5, 3))
        base = hungarian_assign(-p.T)
        j, i = base.pairs[0]
        p2 = p.copy()
        p2[i, j] = min(1.0, p2[i, j] + 0.3)
        assert hungarian_assign(-p2.T).cost <= base.cost + 1e-12


# loss


def test_build_cost_matrix_and_single_target():
    probs = torch.tensor([[0.1, 0.9], [0.7, 0.3], [0.2, 0.8]], dtype=D)
    ts = TargetSet(["a"], negatives=[])
    cost = build_cost_matrix(probs, ts, ["a", NO_OBJECT])
    assert cost.shape == (1, 3)
    assert hungarian_assign(cost).pairs == [(0, 1)]
    assert build_cost_matrix(probs, TargetSet([]), [NO_OBJECT, "x"]).shape == (0, 3)


def test_set_prediction_loss_ln2():
    probs = torch.tensor([[0.5, 0.5]], dtype=D)
    ts = TargetSet(["a"])
    loss = set_prediction_loss(probs, ts, Assignment([(0, 0)], -0.5), 0.1, ["a", NO_OBJECT])
    assert abs(loss.item() - math.log(2)) < 1e-9


def test_set_prediction_loss_no_object_weight_zero_ignores_unmatched():
    ts = TargetSet(["a"])
    pool = ["a", NO_OBJECT]
    p1 = torch.tensor([[0.8, 0.2], [0.5, 0.5]], dtype=D)
    p2 = torch.tensor([[0.8, 0.2], [0.9, 0.1]], dtype=D)
    a = Assignment([(0, 0)], 0.0)
    assert set_prediction_loss(p1, ts, a, 0.0, pool).item() == set_prediction_loss(p2, ts, a, 0.0, pool).item()


def test_perfect_predictor_loss_vanishes():
    probs = torch.tensor([[1 - 1e-13, 1e-13], [1e-13, 1 - 1e-13]], dtype=D)
    loss = set_prediction_loss(probs, TargetSet(["a"]), Assignment([(0, 0)], 0.0), 0.1, ["a", NO_OBJECT])
    assert 0 <= loss.item() < 1e-9


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(gamma_sup=0, gamma_pse=0).validate()
    with pytest.raises(ConfigError):
        LossConfig(no_object_weight=2).validate()


def test_target_set_invariants():
    with pytest.raises(ValueError):
        TargetSet(["a", "a"])
    with pytest.raises(ValueError):
        TargetSet(["a"], negatives=["a"])


def _loss_inputs(rng, n=4, tau=1.0):
    t = table()
    Y = torch.from_numpy(rng.normal(size=(n, 6)))
    no_obj = torch.from_numpy(rng.normal(size=6))
    return t, Y, no_obj, LossConfig(temperature=tau)


def test_image_loss_permutation_invariance(rng):
    t, Y, no_obj, cfg = _loss_inputs(rng)
    ts = TargetSet(["b0", "b2"], negatives=["b1", "p0"])
    ref = image_loss(Y, ts, t, cfg, no_obj).item()
    assert image_loss(Y[[3, 1, 0, 2]], ts, t, cfg, no_obj).item() == pytest.approx(ref, abs=1e-12)
    assert image_loss(Y, TargetSet(["b2", "b0"], negatives=["b1", "p0"]), t, cfg, no_obj).item() == pytest.approx(ref, abs=1e-12)
    assert ref >= 0


def test_batched_loss_matches_per_image(rng):
    t, Y, no_obj, cfg = _loss_inputs(rng, tau=0.5)
    Yb = torch.stack([Y, Y.flip(0)])
    sup = [TargetSet(["b0"], negatives=["b1"]), None]
    pse = [TargetSet(["p1", "b2"], "pseudo", ["p0"]), TargetSet(["p2"], "pseudo", ["b0", "p1"])]
    br = batch_loss(Yb, no_obj, Vocabulary(t), [10, 11], sup, pse, cfg)
    l_sup = image_loss(Y, sup[0], t, cfg, no_obj)
    l_pse = (image_loss(Y, pse[0], t, cfg, no_obj) + image_loss(Y.flip(0), pse[1], t, cfg, no_obj)) / 2
    assert br.loss_sup.item() == pytest.approx(l_sup.item(), abs=1e-12)
    assert br.loss_pse.item() == pytest.approx(l_pse.item(), abs=1e-12)
    assert set(br.per_image_sup) == {10} and set(br.per_image_pse) == {10, 11}


def test_batch_without_terms_is_contract_error(rng):
    t, Y, no_obj, cfg = _loss_inputs(rng)
    with pytest.raises(ContractError):
        batch_loss(Y[None], no_obj, Vocabulary(t), [0], [None], [None], cfg)


def test_gamma_zero_drops_component(rng):
    t, Y, no_obj, _ = _loss_inputs(rng)
    sup = [TargetSet(["b0"])]
    pse = [TargetSet(["p0"], "pseudo")]
    br = batch_loss(Y[None], no_obj, Vocabulary(t), [0], sup, pse, LossConfig(gamma_pse=0.0, temperature=1.0))
    assert br.loss_pse is None and br.total.item() == pytest.approx(br.loss_sup.item())
    br = batch_loss(Y[None], no_obj, Vocabulary(t), [0], sup, pse, LossConfig(gamma_sup=0.0, temperature=1.0))
    assert br.loss_sup is None


def test_over_capacity_truncates_with_counter(rng):
    t, Y, no_obj, cfg = _loss_inputs(rng, n=2)
    counter = {}
    br = batch_loss(Y[None], no_obj, Vocabulary(t), [0], [TargetSet(["b0", "b1", "b2"])], [None], cfg, counter)
    assert counter["dropped_targets"] == 1 and torch.isfinite(br.total)


def test_combined_loss_runs_through_head(rng):
    cfg = SumClipConfig(feature_dim=6, query_dim=6, value_dim=6, embed_dim=6, n_queries=3, decoder_layers=1,
                        decoder_heads=2, ffn_hidden=4, dropout=0.0)
    g = torch.Generator().manual_seed(0)
    ref = {f"{n}.weight": torch.randn(6, 6, generator=g, dtype=D) for n in "qkvc"}
    params = init_sum_clip(cfg, ref, RngStream(0))
    batch = [TrainItem(1, torch.from_numpy(rng.normal(size=(5, 6))), TargetSet(["b0"]), None)]
    br = combined_loss(batch, params, table(), LossConfig(temperature=1.0))
    assert br.total.requires_grad and br.n_sup == 1
