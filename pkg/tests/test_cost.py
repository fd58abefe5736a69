from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridpim import cost
from hybridpim.cost import ComponentCost, ComponentCostTable, DesignSpec, Stage
from hybridpim.selection import ChannelAssignment, WeightMask


def test_empty_design_zero():
    rep = cost.aggregate(DesignSpec("empty", tiles=0, mcus_per_tile=0), cost.synthetic_table())
    assert rep.area == 0 and rep.power == 0 and rep.gops == 0


def test_aggregate_linear_in_table():
    t = cost.synthetic_table()
    for d in cost.preset_designs():
        a, b = cost.aggregate(d, t), cost.aggregate(d, t.scaled(2.0))
        assert b.area == pytest.approx(2 * a.area) and b.power == pytest.approx(2 * a.power)


def test_chip_total_is_sum_of_components():
    t = cost.synthetic_table()
    d = DesignSpec(tiles=3, mcus_per_tile=2, digital_tiles=0, adc_bits=8)
    rep = cost.aggregate(d, t)
    tile_a, tile_p = cost.tile_totals(t, 2)
    assert rep.area == pytest.approx(3 * tile_a + t["link"].area)
    assert rep.power == pytest.approx(3 * tile_p + t["link"].power)
    assert rep.area == pytest.approx(sum(rep.breakdown_area.values()))


def test_synthetic_table_shares():
    a, p = cost.adc_share(cost.synthetic_table(0.3, 0.5))
    assert a == pytest.approx(0.3) and p == pytest.approx(0.5)


def test_fewer_adc_bits_never_costs_more():
    t = cost.synthetic_table()
    areas = [cost.adc_tile_savings(t, b)[0] for b in range(8, 0, -1)]
    powers = [cost.adc_tile_savings(t, b)[1] for b in range(8, 0, -1)]
    assert areas == sorted(areas) and powers == sorted(powers)


def test_missing_entry_named():
    with pytest.raises(KeyError, match="adc"):
        cost.aggregate(DesignSpec(), ComponentCostTable({}))


def test_table_roundtrip_and_validation():
    t = cost.synthetic_table()
    assert ComponentCostTable.from_dict(t.to_dict()).to_dict() == t.to_dict()
    with pytest.raises(ValueError):
        ComponentCost(-1.0, 0.0)
    with pytest.raises(ValueError):
        ComponentCost(1.0, 1.0, source="guess")


def test_load_balance():
    lb = cost.load_balance(2549, 434)
    assert lb.rho == Fraction(2549, 434)
    assert cost.load_balance(7, 7).ideal_fraction == Fraction(1, 2)
    assert lb.stated_fraction == 0.16


def test_data_movement_cases(tiny_net):
    none = ChannelAssignment.all_analog(tiny_net)
    hyb = cost.data_movement(tiny_net, none, "hybridac")
    iws = cost.data_movement(tiny_net, none.to_weight_mask(tiny_net), "iws-1")
    assert hyb.total == iws.total
    c = tiny_net.channel_counts()[1]
    one = none.with_channels([(1, 0), (1, 1)])
    layer = cost.data_movement(tiny_net, one).per_layer[1]
    total = int(np.prod(tiny_net.layer_input_shape(1)))
    assert layer["digital"] == Fraction(2, c) * total


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_data_movement_dominance(tiny_net, seed, p):
    rng = np.random.default_rng(seed)
    masks = tuple(rng.random(c) < p for c in tiny_net.channel_counts())
    a = ChannelAssignment(masks)
    m = a.to_weight_mask(tiny_net)
    for scheme in ("iws-1", "iws-2"):
        h, i = cost.data_movement(tiny_net, a).total, cost.data_movement(tiny_net, m, scheme).total
        assert h <= i
        assert (h == i) == (not any(x.any() for x in masks))


def test_all_layers_touched_iws_doubles_input(tiny_net):
    a = ChannelAssignment(tuple(np.eye(1, c, 0, dtype=bool)[0] for c in tiny_net.channel_counts()))
    iws = cost.data_movement(tiny_net, a.to_weight_mask(tiny_net), "iws-1")
    hyb = cost.data_movement(tiny_net, a)
    assert iws.input_bytes == 2 * hyb.input_bytes


def test_timeline_semantics():
    assert cost.timeline([Stage(100.0)]).makespan_ns == 100.0
    assert cost.timeline([Stage(50.0, 50.0)]).latency_ns == 50.0
    stages = [Stage(100.0, 80.0) for _ in range(4)]
    iws2 = cost.timeline(stages)
    iws1 = cost.timeline([Stage(s.analog_ns, s.digital_ns, rewrite_cells=128 * 16) for s in stages])
    assert iws1.makespan_ns > iws2.makespan_ns
    piped = cost.timeline(stages, inferences=3)
    assert piped.makespan_ns == 4 * 100 + 2 * 100


def test_zero_filler_crossbars(tiny_net):
    empty = WeightMask(tuple(np.zeros(w.shape, bool) for w in tiny_net.weights))
    assert cost.zero_filler_crossbars(tiny_net, empty) == 0


def test_efficiency_table_tags():
    t = cost.synthetic_table()
    rows = cost.efficiency_table([cost.aggregate(d, t) for d in cost.preset_designs()])
    modeled = {r["design"]: r for r in rows if r["source"] == "modeled"}
    assert modeled["ideal-isaac"]["gops_per_mm2"] == 1.0
    assert {r["source"] for r in rows} == {"modeled", "reported"}
    assert cost.table_csv(rows).splitlines()[0] == "design,gops_per_mm2,gops_per_w,source"
    with pytest.raises(ValueError):
        DesignSpec(scheme="bogus")
