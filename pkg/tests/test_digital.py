import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridpim import digital as dg
from hybridpim.digital import DigitalTileConfig, schedule_layer
from hybridpim.selection import ChannelAssignment


def test_zero_channels():
    rep = schedule_layer(0, 8, 3, (4, 4))
    assert rep.compute == 0 and rep.weight_rows == 0 and rep.cycles == 0


def test_one_block_twelve_cycles():
    assert dg.schedule_blocks(1, 1) == 12
    # 4 channels x 2 kernels x 1x3 taps fill one weight row; a 1x4 output row is one segment
    rep = schedule_layer(4, 2, 1, (1, 4))
    assert rep.weight_rows == 1 and rep.compute == 12


def test_doubling_channels_doubles_compute():
    a = schedule_layer(4, 16, 3, (8, 8))
    b = schedule_layer(8, 16, 3, (8, 8))
    assert b.compute == 2 * a.compute


@settings(max_examples=60, deadline=None)
@given(c=st.integers(0, 64), k=st.integers(1, 32), r=st.sampled_from([1, 3, 5]), hw=st.integers(1, 12),
       stride=st.integers(1, 2))
def test_schedule_properties(c, k, r, hw, stride):
    rep = schedule_layer(c, k, r, (hw, hw), stride=stride)
    more = schedule_layer(c + 1, k, r, (hw, hw), stride=stride)
    assert more.cycles >= rep.cycles
    serial = schedule_layer(c, k, r, (hw, hw), stride=stride, cfg=DigitalTileConfig(overlap=False))
    assert rep.cycles <= serial.cycles
    # each weight is loaded at most once: a weight row holds at most one SRAM row worth of weights
    assert rep.weight_reads == c * k * r * r
    assert rep.weight_rows * 24 >= rep.weight_reads


def test_channel_identity_does_not_matter(tiny_net):
    a = ChannelAssignment.all_analog(tiny_net).with_channels([(1, 0), (1, 1)])
    b = ChannelAssignment.all_analog(tiny_net).with_channels([(1, 7), (1, 11)])
    ra, rb = dg.schedule_network(tiny_net, a), dg.schedule_network(tiny_net, b)
    assert [r.cycles for r in ra] == [r.cycles for r in rb]


def test_sram_traffic_ratios():
    rep = schedule_layer(8, 4, 3, (6, 6))
    assert dg.sram_traffic(rep, buffer="54KB") / dg.sram_traffic(rep, buffer="1KB") == pytest.approx(5.2)
    assert dg.sram_traffic(schedule_layer(0, 4, 3, (6, 6))) == 0
    with pytest.raises(KeyError):
        dg.sram_traffic(rep, buffer="2KB")


def test_config_validation_and_exports():
    with pytest.raises(ValueError):
        DigitalTileConfig(psum_rows=8)
    with pytest.raises(ValueError):
        DigitalTileConfig(fill_cycles=0)
    reps = [schedule_layer(4, 4, 3, (4, 4), layer="a"), schedule_layer(8, 4, 3, (4, 4), layer="b")]
    lines = dg.timeline_csv(reps).splitlines()
    assert lines[0].startswith("layer,start") and lines[2].split(",")[1] == str(reps[0].cycles)
    assert '"breakdown"' in reps[0].to_json()


def test_tiles_split_work():
    one = schedule_layer(16, 16, 3, (8, 8))
    four = schedule_layer(16, 16, 3, (8, 8), cfg=DigitalTileConfig(tiles=4))
    assert four.compute == -(-one.compute // 4)
