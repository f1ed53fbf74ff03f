import numpy as np
import pytest

from corenet.compiler import compile_model
from corenet.datasets import synthetic_blobs
from corenet.netspec import parse_network
from corenet.trainer import TrainConfig, finalize_deploy_stats, init_model, train

TOY_TEXT = "input 8 8 1\nclasses 2\nT-8\nS-16\nP-16\nN-16\n"

# small networks with 2 to 4 layers and at most 64 features per layer
TOY_NETS = {
    "spatial_pool_nin": TOY_TEXT,
    "grouped": "input 6 6 1\nclasses 2\nT-8\nS-64(2)\nN-32(4)\nS-16(4)\n",
    "deep_grouped": "input 8 8 1\nclasses 2\nT-16\nS-64(2)\nN-64(8)\nS-16(8)\n",
    "two_layer": "input 5 5 1\nclasses 2\nT-8\nN-8\n",
}


def blobs_for(net, n=240, seed=0):
    r, c, _ = net.shapes()[0]
    return synthetic_blobs(n, r, c, seed)


@pytest.fixture(scope="session")
def trained_toys():
    """Independently trained toy models, one per topology, with their compile results."""
    out = {}
    for i, (name, text) in enumerate(TOY_NETS.items()):
        net = parse_network(text)
        x, y = blobs_for(net, seed=i)
        cfg = TrainConfig(lr=1.0, bias_lr=0.1, epochs=2, batch_size=16, gamma=0.0,
                          weight_decay=0.0, logit_scale=10.0, seed=10 + i)
        model, _ = train(net, x, y, cfg)
        out[name] = (model, compile_model(model))
    return out


@pytest.fixture(scope="session")
def toy_model():
    net = parse_network(TOY_TEXT)
    model = init_model(net, 3)
    x, _ = blobs_for(net, 300)
    finalize_deploy_stats(model, x)
    return model


@pytest.fixture(scope="session")
def toy_compiled(toy_model):
    return compile_model(toy_model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion with the measured value."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in getattr(rep, "nodeid", "") or rep.when != "call":
                continue
            props = dict(rep.user_properties)
            lines.append((props.get("criterion", 0),
                          f"criterion {props.get('criterion', '?'):>2}: "
                          f"{'PASS' if rep.passed else 'FAIL'}  {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
