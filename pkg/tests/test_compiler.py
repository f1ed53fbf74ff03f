import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corenet.chip import CORE_LINES, NO_TARGET, ChipConfig, config_bytes
from corenet.compiler import (COPY_MODES, CompileError, check_spiking_equivalence, compile_model,
                              compute_leak, encode_trinary, pack_locations, plan_copies,
                              plan_network, vote_counts_per_class)
from corenet.netspec import LayerKind, LayerSpec, builtin_template, parse_network
from corenet.simulator import Simulator
from corenet.trainer import BatchNormStats, init_model
from corenet.verify import random_frames, verify_frames

from oracles import brute_force_packing, leak_oracle


# -- leaks ----------------------------------------------------------------------------

def test_leak_examples():
    assert compute_leak(0.5, 3.2, 1.0).leak == -2
    assert compute_leak(0.0, 0.0, 0.0).leak == 0
    r = compute_leak(0.0, 300.0, 0.0)
    assert r.leak == -255 and r.raw == -300 and r.clamped


def test_leak_clamp_logs(caplog):
    with caplog.at_level("WARNING"):
        compute_leak(0.0, -400.0, 0.0)
    assert "clamped" in caplog.text


@settings(max_examples=300, deadline=None)
@given(st.floats(-5, 5), st.floats(-50, 50), st.floats(0, 20))
def test_leak_matches_oracle(b, mu, sigma):
    assert compute_leak(b, mu, sigma).leak == leak_oracle(b, mu, sigma)


def test_equivalence_check_flags_disagreement():
    bad, integral = check_spiking_equivalence(1, [2.0], [0.0], [0.0], [5], 4)
    assert bad and all(c.neuron_fires and not c.float_fires for c in bad[:1])
    assert integral == [0]
    good, _ = check_spiking_equivalence(1, [2.3], [1.0], [0.1], [compute_leak(0.1, 2.3, 1.0).leak], 9)
    assert good == []


# -- trinary pairs --------------------------------------------------------------------

def test_encode_trinary_pairs():
    types, rows = encode_trinary(np.array([[1], [0], [-1]]))
    assert types.tolist() == [1, 2, 1, 2, 1, 2]
    assert rows[:, 0].tolist() == [True, False, False, False, False, True]


def test_encode_trinary_full_core():
    types, rows = encode_trinary(np.zeros((128, 4), int))
    assert len(types) == CORE_LINES and rows.shape == (256, 4) and not rows.any()
    with pytest.raises(CompileError):
        encode_trinary(np.zeros((129, 1), int))
    with pytest.raises(CompileError):
        encode_trinary(np.array([[2]]))


def test_encoded_pairs_reproduce_weights(rng):
    w = rng.integers(-1, 2, (40, 30))
    types, rows = encode_trinary(w)
    strength = np.where(types == 1, 1, -1)[:, None] * rows
    assert np.array_equal(strength[0::2] + strength[1::2], w)


# -- packing --------------------------------------------------------------------------

def test_pack_spatial_3x3x8():
    p = pack_locations(LayerSpec(LayerKind.SPATIAL, 16, 1, 3, 3, 1, 1), 8, 16)
    assert p.locations == 4 and p.block == (2, 2) and p.region == (4, 4, 8) and p.lines == 256


def test_pack_nin_126():
    p = pack_locations(LayerSpec(LayerKind.NIN, 256), 126, 256)
    assert p.locations == 1 and p.lines == 252 and p.neurons == 256


def test_pack_pool_2x2x32():
    # 2x2x32 inputs already need 256 lines, so only the single location fits
    p = pack_locations(LayerSpec(LayerKind.POOL, 32, 1, 2, 2, 2, 0), 32, 32)
    assert p.locations == 1 == brute_force_packing(2, 2, 32, 32)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 16), st.integers(1, 64))
def test_pack_matches_brute_force(patch, stride, in_f, out_f):
    if 2 * patch * patch * in_f > 256:
        return
    layer = LayerSpec(LayerKind.SPATIAL, out_f, 1, patch, patch, stride, 0)
    assert pack_locations(layer, in_f, out_f).locations == brute_force_packing(patch, stride, in_f, out_f)


# -- copies ---------------------------------------------------------------------------

def test_copy_plans():
    (one,) = plan_copies([1], 10)
    assert one.extra_copies == 0 and one.on_core_pairs == 1 and one.splitter_pairs == 0
    (three,) = plan_copies([3], 2)
    assert (three.on_core_pairs, three.splitter_pairs) == (2, 1)
    plans = plan_copies([2, 2, 2], 5)
    assert [p.on_core_pairs for p in plans] == [2, 2, 1]
    assert sum(p.on_core_pairs + p.splitter_pairs for p in plans) == 6


def _relay_chain(depth):
    cfg = ChipConfig.allocate(depth)
    for c in range(depth):
        cfg.crossbar[c, 0, 0] = True
        if c + 1 < depth:
            cfg.target_core[c, 0] = c + 1
            cfg.target_line[c, 0] = 0
    cfg.input_core = np.array([0], np.uint32)
    cfg.input_line = np.array([0], np.uint16)
    cfg.input_channel = np.array([0], np.uint32)
    cfg.num_input_channels = 1
    cfg.output_core = np.array([depth - 1], np.uint32)
    cfg.output_neuron = np.array([0], np.uint16)
    cfg.output_class = np.array([0], np.int32)
    cfg.num_classes = 1
    cfg.depth = depth
    return cfg


def test_splitter_neuron_relays_exactly():
    sim = Simulator(_relay_chain(1))
    res = sim.run([[(0, 0)], [], [(0, 0)], []], 5)
    assert res.outputs[:, 0].tolist() == [False, True, False, True, False]


def _identity_model():
    net = parse_network("input 1 1 4\nclasses 4\nT-4\nN-4\n")
    model = init_model(net, 0)
    p = model.params[1]
    p.trinary_weights = np.eye(4, dtype=np.int8).reshape(1, 1, 4, 4)
    p.hidden_weights = p.trinary_weights.astype(float)
    p.bias[:] = -0.5
    model.stats = {k: BatchNormStats(np.zeros(4), np.zeros(4)) for k in (0, 1)}
    return model


def test_identity_network_delays_by_one_tick():
    model = _identity_model()
    res = compile_model(model)
    assert res.config.depth == 1 and res.config.num_cores == 1
    frames = np.array([[1, 0, 1, 0], [0, 1, 1, 1], [0, 0, 0, 0]], np.uint8)
    sim = Simulator(res.config)
    probes = res.config.probes
    out = sim.run_frames(frames.reshape(3, 1, 1, 4),
                         probes=np.stack([probes["core"], probes["neuron"]], 1))
    by_feature = out.probes[:, np.argsort(probes["feature"])]
    assert np.array_equal(by_feature[1:4], frames.astype(bool))
    assert not by_feature[0].any()


# -- whole compilation ----------------------------------------------------------------

def test_compile_deterministic(toy_model):
    a = compile_model(toy_model).config
    b = compile_model(toy_model).config
    assert config_bytes(a) == config_bytes(b)


def test_every_line_has_one_driver(trained_toys):
    for model, res in trained_toys.values():
        cfg = res.config
        routed = cfg.target_core != NO_TARGET
        flat = (cfg.target_core[routed].astype(np.int64) * CORE_LINES + cfg.target_line[routed])
        host = cfg.input_core.astype(np.int64) * CORE_LINES + cfg.input_line
        assert len(np.unique(flat)) == len(flat)
        assert len(np.unique(host)) == len(host)
        assert not np.intersect1d(flat, host).size


def test_routing_is_layered(trained_toys):
    for model, res in trained_toys.values():
        cfg = res.config
        src_core, src_n = np.nonzero(cfg.target_core != NO_TARGET)
        dst = cfg.target_core[src_core, src_n]
        assert np.all(cfg.core_stage[dst] == cfg.core_stage[src_core] + 1)
        assert np.all(cfg.core_stage[cfg.input_core.astype(int)] == 1)


def test_vote_map_is_balanced(trained_toys):
    for model, res in trained_toys.values():
        per_class = vote_counts_per_class(res.config)
        assert len(set(per_class.tolist())) == 1


def test_copy_modes_all_exact(trained_toys):
    model, _ = trained_toys["deep_grouped"]
    frames = random_frames(model, 40, seed=2)
    depths = {}
    for mode in COPY_MODES:
        try:
            res = compile_model(model, copy_mode=mode)
        except CompileError:
            continue
        depths[mode] = res.config.depth
        assert verify_frames(model, res.config, frames).verdict == "exact", mode
    assert depths["relay"] > depths.get("direct", 0) or "direct" not in depths


def test_core_budget_enforced(toy_model):
    with pytest.raises(CompileError, match="budget"):
        compile_model(toy_model, max_cores=1)


def test_undeployable_model_rejected():
    with pytest.raises(CompileError):
        compile_model(init_model(parse_network("input 4 4 1\nclasses 2\nT-4\nN-4\n")))


def test_unmappable_template_rejected():
    with pytest.raises(CompileError, match="not mappable"):
        plan_network(builtin_template("half_chip"))


def test_one_chip_template_fits_one_chip():
    plan = plan_network(builtin_template("one_chip"))
    assert plan.total_cores <= 4096
