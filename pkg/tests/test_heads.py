import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mssosn import autodiff as ad
from mssosn.errors import ContractError, DimensionError
from mssosn.heads import (DiscrepancyDiscriminator, ScaleDiscriminator, dd_loss, dd_predict,
                          discrepancy_class, discrepancy_label, sd_loss, sd_predict)
from mssosn.relation import (PairNet, aggregate_support, episode_loss_pair, relate, relation_grid,
                             relation_loss, stack_pair)
from mssosn.rng import SplitMix64
from mssosn.selector import ScaleSelector, omega, select, weighted_relate


def T(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def feats(seed, n=None):
    shape = (64, 64) if n is None else (n, 64, 64)
    return T(SplitMix64(seed).uniform(shape, -0.9, 0.9))


@pytest.fixture(scope="module")
def net():
    return PairNet(SplitMix64(0), "relation", channels=4)


# relation head -------------------------------------------------------------


def test_relate_in_unit_interval(net):
    s = relate(feats(1), feats(2), net).item()
    assert 0.0 <= s <= 1.0


def test_relate_zero_final_layer_half():
    n = PairNet(SplitMix64(1), "r", channels=4)
    n.fc2.weight.data[:] = 0.0
    assert relate(feats(1), feats(2), n).item() == 0.5


def test_stack_pair_shape():
    assert stack_pair(feats(1), feats(2)).shape == (1, 2, 64, 64)
    with pytest.raises(DimensionError):
        stack_pair(feats(1), T(np.zeros((32, 32))))


def test_grid_matches_stacked(net):
    a, b = feats(3, 2), feats(4, 3)
    grid = relation_grid(a, b, net).data
    for i in range(2):
        for j in range(3):
            assert grid[i, j] == pytest.approx(relate(T(a.data[i]), T(b.data[j]), net).item(), abs=1e-12)


def test_grid_chunked_inference_matches(net, monkeypatch):
    a, b = feats(5, 2), feats(6, 5)
    full = relation_grid(a, b, net).data
    import mssosn.relation as rel
    monkeypatch.setattr(rel, "INFERENCE_PAIRS", 4)
    with ad.no_grad():
        chunked = relation_grid(a, b, net).data
    assert np.allclose(full, chunked, atol=1e-13)


def test_aggregate_support():
    a = feats(7, 1)
    assert aggregate_support(a, 1) is a
    two = T(np.concatenate([a.data, a.data]))
    assert np.allclose(aggregate_support(two, 2).data, a.data, atol=1e-15)
    opp = T(np.concatenate([a.data, -a.data]))
    assert np.array_equal(aggregate_support(opp, 2).data, np.zeros((1, 64, 64)))
    with pytest.raises(ContractError):
        aggregate_support(feats(1, 3), 2)


def test_episode_loss_values():
    labels = np.arange(5)
    assert episode_loss_pair(T(np.eye(5)), labels).item() == 0.0
    # 5 diagonal (0.5-1)^2 + 20 off-diagonal 0.5^2
    assert episode_loss_pair(T(np.full((5, 5), 0.5)), labels).item() == pytest.approx(6.25, abs=1e-12)
    assert episode_loss_pair(T([[0.3]]), [0]).item() == pytest.approx(0.49)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_episode_loss_nonnegative(seed):
    s = SplitMix64(seed).uniform((3, 6))
    assert episode_loss_pair(T(s), np.repeat(np.arange(3), 2)).item() >= 0


def test_relation_loss_modes():
    one = {(1, 1): T(4.0)}
    assert relation_loss(one, 1, "same-scale").item() == relation_loss(one, 1, "crossref").item() == 4.0
    three = {(s, s): T(3.0) for s in (1, 2, 3)}
    assert relation_loss(three, 3, "same-scale").item() == pytest.approx(3.0)
    assert relation_loss(three, 3, "same-scale", "per_term").item() == pytest.approx(3 * (1 + 1 / 2 + 1 / 3))
    grid = {(s, t): T(1.0) for s in (1, 2) for t in (1, 2)}
    expect = 1 / 1 + 2 / math.sqrt(2) + 1 / 2
    assert expect == pytest.approx(2.91421, abs=1e-5)
    assert relation_loss(grid, 2, "crossref").item() == pytest.approx(expect, abs=1e-12)


def test_relation_loss_missing_pair():
    with pytest.raises(ContractError):
        relation_loss({(1, 1): T(1.0)}, 2, "crossref")


def test_prediction_invariant_to_monotone_map():
    s = SplitMix64(9).uniform((5, 10))
    assert np.array_equal(np.argmax(s, axis=0), np.argmax(np.exp(3 * s) - 7, axis=0))


# selector ------------------------------------------------------------------


def test_select_zero_half():
    assert select(T(np.zeros((64, 64))), ScaleSelector(0.0, 0.0)).item() == 0.5


def test_select_constant_pools_to_constant():
    sel = ScaleSelector(gain=1.0, bias=0.0)
    g = select(T(np.full((64, 64), 0.3)), sel).item()
    assert g == pytest.approx(1 / (1 + math.exp(-0.3)), abs=1e-15)


def test_select_batch_and_range():
    g = select(feats(2, 4), ScaleSelector()).data
    assert g.shape == (4,) and np.all((g > 0) & (g < 1))
    with pytest.raises(DimensionError):
        select(T(np.zeros((32, 32))), ScaleSelector())


def test_select_monotone_in_gain():
    psi = T(np.abs(SplitMix64(3).uniform((64, 64))))
    gates = [select(psi, ScaleSelector(gain=g)).item() for g in (0.0, 0.5, 1.0, 2.0)]
    assert gates == sorted(gates) and gates[0] < gates[-1]


def test_weighted_relate_unit_gates(net):
    sel = ScaleSelector(gain=0.0, bias=50.0)  # sigmoid(50) rounds to 1
    a, b = feats(1), feats(2)
    assert weighted_relate(a, b, sel, net).item() == pytest.approx(relate(a, b, net).item(), abs=1e-15)


def test_weighted_relate_zero_gates(net):
    sel = ScaleSelector(gain=0.0, bias=-700.0)
    zero = T(np.zeros((64, 64)))
    assert weighted_relate(feats(1), feats(2), sel, net).item() == pytest.approx(
        relate(zero, zero, net).item(), abs=1e-12)


def test_weighted_relate_gradcheck_selector(net):
    sel = ScaleSelector(gain=0.7, bias=-0.2)
    a, b = feats(3), feats(4)
    for p in (sel.gain, sel.bias):
        assert ad.grad_check(lambda _: weighted_relate(a, b, sel, net), p) <= 1e-4


def test_omega_examples():
    wk, wq = T([[1.0, 0.0, 0.0]]), T([[0.0, 1.0, 0.0]])
    assert omega(wk, wq, [0], [0]).item() == pytest.approx(2.0)
    assert omega(wk, wq, [0], [1]).item() == pytest.approx(-2.0)
    same = T(np.full((3, 3), 0.4))
    assert omega(same, same, [0, 1, 2], [0, 1, 2]).item() == 0.0


def test_omega_moves():
    wk = np.array([[0.2, 0.8]])
    far, near = np.array([[0.9, 0.1]]), np.array([[0.5, 0.5]])
    assert omega(T(wk), T(near), [0], [0]).item() < omega(T(wk), T(far), [0], [0]).item()
    assert omega(T(wk), T(near), [0], [1]).item() > omega(T(wk), T(far), [0], [1]).item()


def test_omega_swap_symmetry():
    rng = SplitMix64(4)
    ws, wq = rng.uniform((3, 3)), rng.uniform((4, 3))
    ls, lq = [0, 0, 1], [0, 1, 0, 1]
    swapped = ws[[1, 0, 2]]
    assert omega(T(ws), T(wq), ls, lq).item() == pytest.approx(omega(T(swapped), T(wq), ls, lq).item(), abs=1e-14)


# self-supervised heads -----------------------------------------------------


def test_sd_uniform_logits():
    sd = ScaleDiscriminator(SplitMix64(0), 3, hidden=(16, 8))
    sd.layers[-1].weight.data[:] = 0.0
    logits = sd_predict(T(np.zeros(4096)), sd)
    assert logits.shape == (3,) and np.all(logits.data == logits.data[0])


def test_sd_loss_values():
    assert sd_loss(T(np.zeros((1, 3))), [2]).item() == pytest.approx(1.098612, abs=1e-6)
    assert sd_loss(T(np.zeros((1, 3))), [2]).item() == pytest.approx(math.log(3), abs=1e-15)
    assert sd_loss(T(np.zeros((2, 3))), [1, 3]).item() == pytest.approx(2.197225, abs=1e-6)
    assert sd_loss(T([[0.0, 800.0, 0.0]]), [2]).item() == pytest.approx(0.0, abs=1e-300)


def test_sd_gradcheck_all_layers():
    sd = ScaleDiscriminator(SplitMix64(1), 3, hidden=(16, 8))
    x = T(SplitMix64(2).uniform((2, 4096), -1, 1))
    for layer in sd.layers:
        layer.bias.data[:] = SplitMix64(3).uniform(layer.bias.shape, 0.05, 0.1)
    rng = SplitMix64(4)
    for p in sd.params().values():
        coords = rng.sample(p.size, min(8, p.size))
        assert ad.grad_check(lambda _: sd_loss(sd(x), [1, 3]), p, coords=coords) <= 1e-4


def test_discrepancy_examples():
    assert (discrepancy_label(2, 2), discrepancy_class(2, 2, 3)) == (1, 2)
    assert (discrepancy_label(3, 1), discrepancy_class(3, 1, 3)) == (3, 4)
    assert (discrepancy_label(1, 3), discrepancy_class(1, 3, 3)) == (-1, 0)
    with pytest.raises(ContractError):
        discrepancy_class(4, 1, 3)


@pytest.mark.parametrize("S", [1, 2, 3, 5])
def test_discrepancy_bijection(S):
    seen = {}
    for s in range(1, S + 1):
        for t in range(1, S + 1):
            c = discrepancy_class(s, t, S)
            assert seen.setdefault(s - t, c) == c
            assert discrepancy_class(t, s, S) == 2 * (S - 1) - c
    assert sorted(set(seen.values())) == list(range(2 * S - 1))


def test_dd_output_and_uniform():
    dd = DiscrepancyDiscriminator(SplitMix64(5), 3, channels=4)
    assert dd_predict(feats(1), feats(2), dd).shape == (5,)
    dd.fc2.weight.data[:] = 0.0
    assert np.all(dd_predict(feats(1), feats(2), dd).data == 0.0)


def test_dd_loss_values():
    assert dd_loss(T(np.zeros((1, 5))), [2]).item() == pytest.approx(1.609438, abs=1e-6)
    assert dd_loss(T(np.zeros((3, 5))), [0, 2, 4]).item() == pytest.approx(4.828314, abs=1e-6)
    assert dd_loss(T([[0, 0, 0, 0, 900.0]]), [4]).item() == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_cross_entropy_nonnegative(seed):
    logits = SplitMix64(seed).uniform((4, 5), -20, 20)
    assert dd_loss(T(logits), [0, 1, 2, 4]).item() >= 0
