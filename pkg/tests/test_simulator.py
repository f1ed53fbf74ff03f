import numpy as np
import pytest

from corenet.chip import ChipConfig
from corenet.simulator import (DIRECTION_OUT, SimulationError, Simulator, SpikeEvent, classify,
                               classify_run, frames_to_trace, output_trace, read_trace, run,
                               trace_to_inputs, write_trace)
from corenet.verify import random_frames

from test_compiler import _relay_chain


def test_empty_input_no_spikes():
    cfg = ChipConfig.allocate(3)
    res = run(cfg, [], 50)
    assert res.stats.total_spikes == 0 and not res.outputs.any()


@pytest.mark.parametrize("depth", [1, 2, 5, 9])
def test_relay_chain_latency(depth):
    res = run(_relay_chain(depth), [[SpikeEvent(0, 0, 0)]], depth + 3)
    assert np.flatnonzero(res.outputs[:, 0]).tolist() == [depth]
    assert res.stats.total_spikes == depth


def test_malformed_events_rejected():
    cfg = _relay_chain(2)
    with pytest.raises(SimulationError):
        run(cfg, [[(5, 0)]], 2)
    with pytest.raises(SimulationError):
        run(cfg, [[(0, 256)]], 2)


def test_classify_rules():
    votes = np.array([0, 0, 1, 1, 2, 2])
    assert classify(np.array([0, 0, 0, 0, 1, 1]), votes) == 2
    assert classify(np.zeros(6), votes) == 0
    assert classify(np.array([5, 0, 7, 0, 7, 0]), votes) == 1
    assert classify(np.zeros(6), (None, None, votes), num_classes=3) == 0


def test_pipeline_fill_and_throughput(trained_toys):
    model, res = trained_toys["spatial_pool_nin"]
    cfg = res.config
    for k in (1, 10, 200):
        frames = random_frames(model, k, seed=k)
        out = Simulator(cfg).run_frames(frames)
        assert out.stats.ticks == k + cfg.depth
        assert out.stats.classifications == k
        assert len(classify_run(cfg, out, k)) == k


def test_core_order_does_not_matter(trained_toys, rng):
    model, res = trained_toys["grouped"]
    cfg = res.config
    frames = random_frames(model, 6, seed=4)
    sim = Simulator(cfg)
    dense = sim.run_frames(frames)
    for _ in range(2):
        order = rng.permutation(cfg.num_cores)
        ref = sim.run_frames(frames, core_order=order)
        assert np.array_equal(ref.outputs, dense.outputs)
        assert ref.stats.total_spikes == dense.stats.total_spikes


def test_replay_determinism(trained_toys):
    model, res = trained_toys["two_layer"]
    frames = random_frames(model, 20, seed=1)
    a = Simulator(res.config).run_frames(frames)
    b = Simulator(res.config).run_frames(frames)
    assert np.array_equal(a.outputs, b.outputs) and a.stats.to_dict() == b.stats.to_dict()


def test_trace_round_trip(tmp_path, trained_toys):
    model, res = trained_toys["two_layer"]
    cfg = res.config
    sim = Simulator(cfg)
    frames = random_frames(model, 5, seed=3)
    events = frames_to_trace(sim, frames)
    write_trace(tmp_path / "in.trace", events)
    direction, records = read_trace(tmp_path / "in.trace")
    assert direction == 0 and len(records) == len(events)
    inputs, n = trace_to_inputs(records)
    replay = sim.run(inputs, 5 + cfg.depth, classifications=5)
    direct = sim.run_frames(frames)
    assert np.array_equal(replay.outputs, direct.outputs)
    outs = output_trace(cfg, direct)
    write_trace(tmp_path / "out.trace", outs, DIRECTION_OUT)
    d2, rec2 = read_trace(tmp_path / "out.trace")
    assert d2 == DIRECTION_OUT and len(rec2) == len(outs)


def test_trace_rejects_truncation(tmp_path):
    write_trace(tmp_path / "t", [(0, 0, 1), (1, 0, 2)])
    raw = (tmp_path / "t").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-3])
    with pytest.raises(SimulationError):
        read_trace(tmp_path / "t")
    (tmp_path / "t").write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(SimulationError):
        read_trace(tmp_path / "t")


def test_energy_proxy_and_stats():
    cfg = _relay_chain(3)
    quiet = Simulator(cfg, alpha=2.0, beta=0.5).run([], 10)
    busy = Simulator(cfg, alpha=2.0, beta=0.5).run([[(0, 0)]] * 5, 10)
    assert quiet.stats.energy_proxy == 2.0 * 3 * 10
    assert busy.stats.energy_proxy == 2.0 * 30 + 0.5 * busy.stats.total_spikes
    assert busy.stats.energy_proxy > quiet.stats.energy_proxy
    d = busy.stats.to_dict()
    assert d["core_ticks"] == 30 and d["alpha"] == 2.0
    assert busy.stats.spikes_per_core.sum() == busy.stats.total_spikes


def test_frame_size_checked(trained_toys):
    _, res = trained_toys["two_layer"]
    with pytest.raises(SimulationError):
        Simulator(res.config).frame_events(np.zeros(3))
