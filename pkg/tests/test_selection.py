import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridpim import selection as sel
from hybridpim import sensitivity as sens
from hybridpim.nn import Dense, Network
from hybridpim.selection import ChannelAssignment, SelectionConfig, WeightMask
from hybridpim.variation import NoiseModel


@pytest.fixture(scope="module")
def tiny_sens(tiny_net, tiny_splits):
    return sens.compute(tiny_net, tiny_splits["train"].subset(slice(0, 200)), 5)


def test_protected_fraction_arithmetic(tiny_net):
    assert sel.protected_fraction(ChannelAssignment.all_analog(tiny_net), tiny_net) == 0.0
    assert sel.protected_fraction(ChannelAssignment.all_digital(tiny_net), tiny_net) == 1.0
    net = Network([Dense(10, 3)], [np.ones((10, 3))], (10,))
    assert sel.protected_fraction(ChannelAssignment.all_analog(net).with_channels([(0, 4)]), net) == pytest.approx(0.1)


def test_selection_distribution_population_std():
    a = ChannelAssignment((np.zeros(4, bool), np.ones(4, bool)))
    pct, std = sel.selection_distribution(a)
    assert pct.tolist() == [0.0, 100.0] and std == 50.0
    b = ChannelAssignment((np.array([1, 0], bool), np.array([1, 1, 0, 0], bool)))
    assert sel.selection_distribution(b)[1] == 0.0


def test_tie_break_order():
    s = sens.SensitivityMap([np.zeros(1)], [np.array([1.0, 2.0, 2.0]), np.array([2.0, 0.5])])
    assert [(p, c) for _, p, c in sel.sorted_channels(s)] == [(0, 1), (0, 2), (1, 0), (0, 0), (1, 1)]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=20), min_size=1, max_size=5))
def test_bitset_roundtrip(masks):
    a = ChannelAssignment(tuple(np.array(m, bool) for m in masks))
    back = ChannelAssignment.from_bitset(a.to_bitset(), [len(m) for m in masks])
    for x, y in zip(a.masks, back.masks):
        np.testing.assert_array_equal(x, y)


def test_assignment_file_roundtrip(tmp_path, tiny_net):
    a = ChannelAssignment.all_analog(tiny_net).with_channels([(0, 1), (1, 5)])
    sel.save_assignment(a, tmp_path / "a.hpim")
    b = sel.load_assignment(tmp_path / "a.hpim")
    assert b.digital_counts == a.digital_counts == [1, 1]


def test_target_below_all_analog_enters_no_iteration(tiny_net, tiny_splits, tiny_sens):
    res = sel.select_channels(tiny_net, tiny_sens, tiny_splits["evaluation"],
                              SelectionConfig(acc_desired=0.01, trials=2, validation_trials=0))
    assert res.iterations == 0 and sum(res.assignment.digital_counts) == 0 and res.success


def test_huge_noise_protects_everything(tiny_net, tiny_splits, tiny_sens):
    ev = tiny_splits["evaluation"]
    from hybridpim.nn import accuracy

    cfg = SelectionConfig(acc_desired=accuracy(tiny_net, ev), trials=2, validation_trials=0,
                          noise=NoiseModel(5.0, 0.0), max_fraction=1.0)
    res = sel.select_channels(tiny_net, tiny_sens, ev, cfg)
    assert res.success
    assert res.protected_fraction > 0.8


def test_trace_pop_order_and_superset(tiny_net, tiny_splits, tiny_sens):
    cfg = SelectionConfig(acc_desired=0.0001, target="drop", trials=2, validation_trials=0, max_fraction=1.0)
    res = sel.select_channels(tiny_net, tiny_sens, tiny_splits["evaluation"], cfg)
    order = [(p, c) for _, p, c in sel.sorted_channels(tiny_sens)]
    popped = [(t.layer, t.channel) for t in res.trace[1:]]
    assert popped == order[:len(popped)]
    fracs = [t.protected_fraction for t in res.trace]
    assert fracs == sorted(fracs)


def test_protect_first_last(tiny_net, tiny_splits, tiny_sens):
    cfg = SelectionConfig(acc_desired=0.01, trials=1, validation_trials=0, protect_first_last=True)
    res = sel.select_channels(tiny_net, tiny_sens, tiny_splits["evaluation"], cfg)
    assert all(m.all() for m in res.assignment.masks)


def test_iws_sort_contract_and_fraction(tiny_net, tiny_splits, tiny_sens):
    ev = tiny_splits["evaluation"]
    cfg = SelectionConfig(acc_desired=0.05, target="drop", trials=3, validation_trials=0)
    iws = sel.iws_select(tiny_net, tiny_sens, ev, cfg)
    chan = sel.select_channels(tiny_net, tiny_sens, ev, cfg)
    assert isinstance(iws.assignment, WeightMask)
    s = np.concatenate([x.ravel() for x in tiny_sens.per_param])
    m = np.concatenate([x.ravel() for x in iws.assignment.masks])
    if m.any() and (~m).any():
        assert s[m].min() >= s[~m].max()
    assert iws.protected_fraction <= chan.protected_fraction
    zero = sel.iws_select(tiny_net, tiny_sens, ev, SelectionConfig(acc_desired=0.01, trials=1, validation_trials=0,
                                                                   noise=NoiseModel(0, 0)))
    assert not any(x.any() for x in zero.assignment.masks)


def test_equal_noise_makes_assignment_irrelevant(tiny_net, tiny_splits):
    from hybridpim.variation import noisy_accuracy

    ev = tiny_splits["evaluation"]
    noise = NoiseModel(0.3, 0.3)
    a = noisy_accuracy(tiny_net, ChannelAssignment.all_analog(tiny_net), ev, noise, 200)
    b = noisy_accuracy(tiny_net, ChannelAssignment.all_digital(tiny_net), ev, noise, 200, stream=(9,))
    assert abs(a.mean - b.mean) <= 2 * np.hypot(a.sem, b.sem)


def test_config_validation():
    with pytest.raises(ValueError):
        SelectionConfig(acc_desired=0)
    with pytest.raises(ValueError):
        SelectionConfig(target="relative")
    assert isinstance(SelectionConfig(noise={"sigma_analog": 0.2}).noise, NoiseModel)
