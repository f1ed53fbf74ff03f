"""Tick-accurate execution of a chip configuration.

Each tick has two phases: spikes emitted during the previous tick (and
external events injected during it) are delivered to their input lines, then
every neuron integrates.  An event injected at tick ``t`` therefore reaches a
stage-``d`` output at tick ``t + d``, and ``k`` pipelined presentations finish
after ``k + depth`` ticks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .chip import CORE_LINES, CORE_NEURONS, NO_TARGET, ChipConfig, CoreState, effective_weights, tick_core


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SpikeEvent:
    tick: int
    core: int
    line: int


@dataclass
class RunStats:
    total_spikes: int = 0
    spikes_per_core: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    cores_used: int = 0
    ticks: int = 0
    classifications: int = 0
    depth: int = 0
    alpha: float = 1.0
    beta: float = 1.0

    @property
    def core_ticks(self) -> int:
        return self.cores_used * self.ticks

    @property
    def energy_proxy(self) -> float:
        return self.alpha * self.core_ticks + self.beta * self.total_spikes

    @property
    def classifications_per_tick(self) -> float:
        return self.classifications / self.ticks if self.ticks else 0.0

    @property
    def spikes_per_core_per_classification(self) -> np.ndarray:
        return self.spikes_per_core / max(self.classifications, 1)

    def to_dict(self) -> dict:
        return {
            "total_spikes": int(self.total_spikes),
            "cores_used": int(self.cores_used),
            "ticks": int(self.ticks),
            "classifications": int(self.classifications),
            "depth": int(self.depth),
            "latency_ticks": int(self.depth),
            "classifications_per_tick": self.classifications_per_tick,
            "core_ticks": int(self.core_ticks),
            "alpha": self.alpha,
            "beta": self.beta,
            "energy_proxy": self.energy_proxy,
            "mean_spikes_per_core_per_classification":
                float(self.spikes_per_core_per_classification.mean())
                if len(self.spikes_per_core) else 0.0,
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)


@dataclass
class RunResult:
    outputs: np.ndarray  # (ticks, output entries) bool
    probes: np.ndarray | None  # (ticks, probed neurons) bool
    stats: RunStats


def _flat_events(cfg: ChipConfig, events) -> np.ndarray:
    """Normalise one tick of external events to flat ``core * 256 + line`` indices."""
    if events is None:
        return np.zeros(0, np.int64)
    if isinstance(events, np.ndarray) and events.ndim == 1:
        flat = events.astype(np.int64)
    else:
        arr = [(e.core, e.line) if isinstance(e, SpikeEvent) else tuple(e) for e in events]
        arr = np.array(arr, np.int64).reshape(-1, 2)
        if len(arr) and (arr[:, 1].min() < 0 or arr[:, 1].max() >= CORE_LINES):
            raise SimulationError("external event on a non-existent line")
        flat = arr[:, 0] * CORE_LINES + arr[:, 1]
    if len(flat) and (flat.min() < 0 or flat.max() >= cfg.num_cores * CORE_LINES):
        raise SimulationError("external event targets a non-existent core or line")
    return flat


class Simulator:
    """Dense per-core evaluation: each tick is one batched 256x256 product per core."""

    def __init__(self, cfg: ChipConfig, alpha: float = 1.0, beta: float = 1.0):
        self.cfg = cfg
        self.alpha = alpha
        self.beta = beta
        c = cfg.num_cores
        self.weights = effective_weights(cfg.input_types, cfg.crossbar, cfg.table).astype(np.float32)
        self.leak = cfg.leak.astype(np.int64)
        self.threshold = cfg.threshold.astype(np.int64)
        self.lower_bound = cfg.lower_bound.astype(np.int64)
        routed = cfg.target_core.reshape(-1) != NO_TARGET
        tgt = cfg.target_core.reshape(-1).astype(np.int64) * CORE_LINES + cfg.target_line.reshape(-1)
        if np.any(routed & ((tgt < 0) | (tgt >= c * CORE_LINES)
                            | (cfg.target_line.reshape(-1) >= CORE_LINES))):
            raise SimulationError("routing target outside the core array")
        self.routed = routed
        self.targets = np.where(routed, tgt, 0)
        self.output_flat = (cfg.output_core.astype(np.int64) * CORE_NEURONS
                            + cfg.output_neuron.astype(np.int64))
        self.input_flat = (cfg.input_core.astype(np.int64) * CORE_LINES
                           + cfg.input_line.astype(np.int64))

    def frame_events(self, channels: np.ndarray) -> np.ndarray:
        """Flat line indices driven by one binary input-channel vector."""
        channels = np.asarray(channels).reshape(-1)
        if len(channels) != self.cfg.num_input_channels:
            raise SimulationError(f"frame has {len(channels)} channels, config expects "
                                  f"{self.cfg.num_input_channels}")
        on = channels[self.cfg.input_channel.astype(np.int64)] != 0
        return self.input_flat[on]

    def run(self, inputs, ticks: int, probes=None, classifications: int = 0,
            core_order=None) -> RunResult:
        """Step ``ticks`` ticks; ``inputs[t]`` are the external events injected at tick ``t``.

        ``inputs`` may be a sequence or a callable of the tick.  ``probes`` is a
        list of (core, neuron) pairs to log.  ``core_order`` switches to the
        per-core reference path, integrating cores in the given order.
        """
        cfg = self.cfg
        c = cfg.num_cores
        V = np.zeros((c, CORE_NEURONS), np.int64)
        pending = np.zeros(c * CORE_LINES, bool)
        outputs = np.zeros((ticks, len(self.output_flat)), bool)
        probe_flat = None
        probe_log = None
        if probes is not None:
            probes = np.asarray(probes, np.int64).reshape(-1, 2)
            probe_flat = probes[:, 0] * CORE_NEURONS + probes[:, 1]
            probe_log = np.zeros((ticks, len(probe_flat)), bool)
        per_core = np.zeros(c, np.int64)
        n_inputs = len(inputs) if not callable(inputs) and inputs is not None else None
        for t in range(ticks):
            active = pending.reshape(c, CORE_LINES)
            if core_order is None:
                drive = np.matmul(active.astype(np.float32)[:, None, :], self.weights)[:, 0, :]
                V = V + drive.astype(np.int64) + self.leak
                fired = V >= self.threshold
                V = np.where(fired, 0, np.maximum(V, self.lower_bound))
            else:
                fired = np.zeros((c, CORE_NEURONS), bool)
                for i in core_order:
                    state = CoreState(V[i].copy(), set(np.flatnonzero(active[i]).tolist()))
                    new, spikes = tick_core(cfg.core(i), state)
                    V[i] = new.V
                    if spikes:
                        fired[i, sorted(spikes)] = True
            flat_fired = fired.reshape(-1)
            per_core += fired.sum(axis=1)
            outputs[t] = flat_fired[self.output_flat]
            if probe_log is not None:
                probe_log[t] = flat_fired[probe_flat]
            pending = np.zeros(c * CORE_LINES, bool)
            pending[self.targets[flat_fired & self.routed]] = True
            if callable(inputs):
                ext = inputs(t)
            elif n_inputs is not None and t < n_inputs:
                ext = inputs[t]
            else:
                ext = None
            pending[_flat_events(cfg, ext)] = True
        stats = RunStats(int(per_core.sum()), per_core, c, ticks, classifications, cfg.depth,
                         self.alpha, self.beta)
        return RunResult(outputs, probe_log, stats)

    def run_frames(self, frames: np.ndarray, probes=None, core_order=None) -> RunResult:
        """Present one binary channel frame per tick and run until the pipeline drains."""
        frames = np.asarray(frames)
        k = len(frames)
        frames = frames.reshape(k, int(np.prod(frames.shape[1:], dtype=np.int64)))
        events = [self.frame_events(f) for f in frames]
        ticks = k + self.cfg.depth if k else 0
        return self.run(events, ticks, probes, classifications=k, core_order=core_order)


def run(config: ChipConfig, inputs, ticks: int, probes=None, alpha: float = 1.0,
        beta: float = 1.0) -> RunResult:
    return Simulator(config, alpha, beta).run(inputs, ticks, probes)


def classify(output_spikes, vote_map, num_classes: int | None = None) -> int:
    """Label with the most spikes among its vote-map entries; ties go to the lowest label.

    ``vote_map`` is the class label of each output entry (or a
    (core, neuron, class) triple, whose last element is used).
    """
    classes = vote_map[2] if isinstance(vote_map, tuple) else vote_map
    classes = np.asarray(classes, np.int64)
    spikes = np.asarray(output_spikes).astype(np.int64).reshape(-1)
    if num_classes is None:
        num_classes = int(classes.max()) + 1 if len(classes) else 1
    counts = np.bincount(classes, weights=spikes, minlength=num_classes)
    return int(np.argmax(counts))


def presentation_outputs(result: RunResult, depth: int, count: int) -> np.ndarray:
    """Output spikes belonging to each presentation: image ``i`` is read at tick ``i + depth``."""
    if count == 0:
        return np.zeros((0, result.outputs.shape[1]), bool)
    return result.outputs[depth:depth + count]


def classify_run(cfg: ChipConfig, result: RunResult, count: int) -> np.ndarray:
    out = presentation_outputs(result, cfg.depth, count)
    return np.array([classify(o, cfg.output_class, cfg.num_classes) for o in out], np.int64)


# -- spike trace files ----------------------------------------------------------------

TRACE_MAGIC = b"NSTR"
TRACE_VERSION = 1
DIRECTION_IN, DIRECTION_OUT = 0, 1
_TRACE_HEADER = struct.Struct("<4sHBI")
TRACE_DTYPE = np.dtype([("tick", "<u4"), ("core", "<u4"), ("index", "<u2")])


def write_trace(path, events, direction: int = DIRECTION_IN) -> None:
    """Write (tick, core, line-or-neuron) records."""
    arr = np.zeros(len(events), TRACE_DTYPE)
    if len(events):
        ev = np.array([(e.tick, e.core, e.line) if isinstance(e, SpikeEvent) else tuple(e)
                       for e in events], np.int64)
        arr["tick"], arr["core"], arr["index"] = ev[:, 0], ev[:, 1], ev[:, 2]
    with open(path, "wb") as fh:
        fh.write(_TRACE_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, direction, len(arr)))
        fh.write(arr.tobytes())


def read_trace(path) -> tuple[int, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.read(_TRACE_HEADER.size)
        if len(head) != _TRACE_HEADER.size:
            raise SimulationError("truncated trace header")
        magic, version, direction, count = _TRACE_HEADER.unpack(head)
        if magic != TRACE_MAGIC or version != TRACE_VERSION:
            raise SimulationError("not a spike trace file")
        body = fh.read()
    if len(body) != count * TRACE_DTYPE.itemsize:
        raise SimulationError("trace record count does not match file size")
    return direction, np.frombuffer(body, TRACE_DTYPE)


def trace_to_inputs(records: np.ndarray) -> tuple[list[np.ndarray], int]:
    """Group input trace records into per-tick (core, line) arrays."""
    if len(records) == 0:
        return [], 0
    last = int(records["tick"].max())
    per_tick = [[] for _ in range(last + 1)]
    for r in records:
        per_tick[int(r["tick"])].append((int(r["core"]), int(r["index"])))
    return [np.array(p, np.int64).reshape(-1, 2) for p in per_tick], last + 1


def frames_to_trace(sim: Simulator, frames: np.ndarray) -> list[tuple[int, int, int]]:
    out = []
    for t, f in enumerate(np.asarray(frames).reshape(len(frames), -1)):
        for flat in sim.frame_events(f):
            out.append((t, int(flat) // CORE_LINES, int(flat) % CORE_LINES))
    return out


def output_trace(cfg: ChipConfig, result: RunResult) -> list[tuple[int, int, int]]:
    ticks, ents = np.nonzero(result.outputs)
    return [(int(t), int(cfg.output_core[e]), int(cfg.output_neuron[e]))
            for t, e in zip(ticks, ents)]
