"""Neurosynaptic core data model, single-tick neuron dynamics and the config file format.

A core has 256 input lines, 256 neurons and a 256x256 binary crossbar.  A
synapse's strength comes from the target neuron's 4-entry table, indexed by
the input type (1-4) of the source line.  Neurons integrate, leak, fire at
threshold, reset to zero and snap to their lower bound.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

CORE_LINES = 256
CORE_NEURONS = 256
CORES_PER_CHIP = 4096
LEAK_MIN, LEAK_MAX = -255, 255
NO_TARGET = -1
SPLITTER = 0xFFFF  # layer tag of splitter / relay cores

DEFAULT_TABLE = (1, -1, 0, 0)


class ChipConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NeuronConfig:
    threshold: int = 1
    leak: int = 0
    lower_bound: int = 0
    table: tuple[int, int, int, int] = DEFAULT_TABLE
    reset: str = "to_zero"

    def __post_init__(self):
        if self.threshold < 1:
            raise ChipConfigError("threshold must be >= 1")
        if not LEAK_MIN <= self.leak <= LEAK_MAX:
            raise ChipConfigError(f"leak {self.leak} outside [{LEAK_MIN}, {LEAK_MAX}]")
        if len(self.table) != 4 or any(not LEAK_MIN <= v <= LEAK_MAX for v in self.table):
            raise ChipConfigError("synapse table needs 4 entries in [-255, 255]")
        if self.reset != "to_zero":
            raise ChipConfigError("only reset-to-zero is modelled")


@dataclass
class Core:
    """One core's configuration as dense arrays (a view into a ChipConfig)."""

    input_types: np.ndarray  # (256,) values 1..4
    crossbar: np.ndarray  # (256 lines, 256 neurons) bool
    threshold: np.ndarray
    leak: np.ndarray
    lower_bound: np.ndarray
    table: np.ndarray  # (256, 4)
    target_core: np.ndarray
    target_line: np.ndarray

    @classmethod
    def empty(cls) -> "Core":
        return cls(
            np.ones(CORE_LINES, np.uint8),
            np.zeros((CORE_LINES, CORE_NEURONS), bool),
            np.ones(CORE_NEURONS, np.int16),
            np.zeros(CORE_NEURONS, np.int16),
            np.zeros(CORE_NEURONS, np.int16),
            np.tile(np.array(DEFAULT_TABLE, np.int16), (CORE_NEURONS, 1)),
            np.full(CORE_NEURONS, NO_TARGET, np.int32),
            np.full(CORE_NEURONS, NO_TARGET, np.int32),
        )

    def neuron(self, i: int) -> NeuronConfig:
        return NeuronConfig(int(self.threshold[i]), int(self.leak[i]), int(self.lower_bound[i]),
                            tuple(int(v) for v in self.table[i]))

    def set_neuron(self, i: int, cfg: NeuronConfig) -> None:
        self.threshold[i] = cfg.threshold
        self.leak[i] = cfg.leak
        self.lower_bound[i] = cfg.lower_bound
        self.table[i] = cfg.table

    def weight_matrix(self) -> np.ndarray:
        """Signed strength of every (line, neuron) synapse."""
        return effective_weights(self.input_types[None], self.crossbar[None], self.table[None])[0]


def effective_weights(input_types, crossbar, table) -> np.ndarray:
    """Batched (cores, lines, neurons) signed weights from types, crossbar and tables."""
    types = np.asarray(input_types, np.int64) - 1
    # strength[c, l, n] = table[c, n, types[c, l]]
    strength = np.take_along_axis(table[:, None, :, :].astype(np.int32),
                                  types[:, :, None, None].repeat(table.shape[1], axis=2),
                                  axis=3)[..., 0]
    return np.where(crossbar, strength, 0).astype(np.int32)


def synapse_weight(core: Core, line: int, neuron: int) -> int:
    if not (0 <= line < CORE_LINES and 0 <= neuron < CORE_NEURONS):
        raise IndexError(f"line {line} / neuron {neuron} out of range")
    if not core.crossbar[line, neuron]:
        return 0
    return int(core.table[neuron, int(core.input_types[line]) - 1])


@dataclass
class CoreState:
    V: np.ndarray = field(default_factory=lambda: np.zeros(CORE_NEURONS, np.int64))
    pending_spikes: set[int] = field(default_factory=set)

    def copy(self) -> "CoreState":
        return CoreState(self.V.copy(), set(self.pending_spikes))


def integrate(V, drive, leak, threshold, lower_bound):
    """Apply one tick of the neuron update; returns (new V, spike mask)."""
    V = V + drive + leak
    fired = V >= threshold
    V = np.where(fired, 0, np.maximum(V, lower_bound))
    return V, fired


def tick_core(core: Core, state: CoreState) -> tuple[CoreState, set[int]]:
    active = np.zeros(CORE_LINES, bool)
    if state.pending_spikes:
        lines = np.fromiter(state.pending_spikes, dtype=np.int64)
        if lines.min() < 0 or lines.max() >= CORE_LINES:
            raise IndexError("pending spike on a non-existent line")
        active[lines] = True
    drive = active.astype(np.int64) @ core.weight_matrix()
    V, fired = integrate(state.V, drive, core.leak.astype(np.int64),
                         core.threshold.astype(np.int64), core.lower_bound.astype(np.int64))
    return CoreState(V, set()), set(np.flatnonzero(fired).tolist())


# -- whole-chip configuration ---------------------------------------------------------


@dataclass
class ChipConfig:
    input_types: np.ndarray  # (C, 256) uint8
    crossbar: np.ndarray  # (C, 256, 256) bool
    threshold: np.ndarray  # (C, 256) int16
    leak: np.ndarray
    lower_bound: np.ndarray
    table: np.ndarray  # (C, 256, 4) int16
    target_core: np.ndarray  # (C, 256) int32, -1 = none
    target_line: np.ndarray
    core_layer: np.ndarray  # (C,) uint16 network layer index, SPLITTER for relays
    core_stage: np.ndarray  # (C,) int32 tick stage at which the core's neurons fire
    # external input channel -> (core, line); one channel may feed many lines
    input_channel: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    input_core: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    input_line: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    num_input_channels: int = 0
    # readout: (core, neuron) -> class
    output_core: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    output_neuron: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    output_class: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    num_classes: int = 0
    # per-layer probes: (layer, row, col, feature) -> (core, neuron) firing at `stage`
    probes: np.ndarray = field(default_factory=lambda: np.zeros(0, PROBE_DTYPE))
    depth: int = 0
    chip_grid: tuple[int, int] = (1, 1)
    host_stage: bytes = b""  # serialized off-chip transduction parameters

    @classmethod
    def allocate(cls, n_cores: int) -> "ChipConfig":
        c = n_cores
        return cls(
            input_types=np.ones((c, CORE_LINES), np.uint8),
            crossbar=np.zeros((c, CORE_LINES, CORE_NEURONS), bool),
            threshold=np.ones((c, CORE_NEURONS), np.int16),
            leak=np.zeros((c, CORE_NEURONS), np.int16),
            lower_bound=np.zeros((c, CORE_NEURONS), np.int16),
            table=np.tile(np.array(DEFAULT_TABLE, np.int16), (c, CORE_NEURONS, 1)),
            target_core=np.full((c, CORE_NEURONS), NO_TARGET, np.int32),
            target_line=np.full((c, CORE_NEURONS), NO_TARGET, np.int32),
            core_layer=np.zeros(c, np.uint16),
            core_stage=np.zeros(c, np.int32),
        )

    @property
    def num_cores(self) -> int:
        return int(self.input_types.shape[0])

    def core(self, i: int) -> Core:
        return Core(self.input_types[i], self.crossbar[i], self.threshold[i], self.leak[i],
                    self.lower_bound[i], self.table[i], self.target_core[i], self.target_line[i])

    def copy(self) -> "ChipConfig":
        kw = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            kw[name] = val.copy() if isinstance(val, np.ndarray) else val
        return ChipConfig(**kw)

    def validate(self) -> None:
        c = self.num_cores
        if np.any((self.input_types < 1) | (self.input_types > 4)):
            raise ChipConfigError("input types must lie in 1..4")
        if np.any(self.threshold < 1):
            raise ChipConfigError("thresholds must be >= 1")
        for name in ("leak", "table"):
            arr = getattr(self, name)
            if np.any((arr < LEAK_MIN) | (arr > LEAK_MAX)):
                raise ChipConfigError(f"{name} outside [{LEAK_MIN}, {LEAK_MAX}]")
        routed = self.target_core != NO_TARGET
        if np.any(routed & ((self.target_core >= c) | (self.target_line < 0)
                            | (self.target_line >= CORE_LINES))):
            raise ChipConfigError("routing target outside the core array")
        if len(self.input_core) and (self.input_core.max() >= c):
            raise ChipConfigError("input map references a missing core")
        if len(self.output_core) and (self.output_core.max() >= c):
            raise ChipConfigError("output map references a missing core")
        if len(self.output_neuron) and self.output_neuron.max() >= CORE_NEURONS:
            raise ChipConfigError("output map references a missing neuron")

    def tick_counts(self) -> dict[int, int]:
        stages, counts = np.unique(self.core_stage, return_counts=True)
        return dict(zip(stages.tolist(), counts.tolist()))


PROBE_DTYPE = np.dtype([("layer", "<u2"), ("row", "<u2"), ("col", "<u2"), ("feature", "<u4"),
                        ("core", "<u4"), ("neuron", "<u2"), ("stage", "<u4")])
_INPUT_DTYPE = np.dtype([("channel", "<u4"), ("core", "<u4"), ("line", "<u2")])
_OUTPUT_DTYPE = np.dtype([("core", "<u4"), ("neuron", "<u2"), ("cls", "<i4")])

MAGIC = b"NSCF"
VERSION = 1
_HEADER = struct.Struct("<4sHHIHHIII")


def _pack_types(types: np.ndarray) -> bytes:
    codes = (types.astype(np.uint8) - 1).reshape(-1, 4)
    packed = codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def _unpack_types(raw: bytes) -> np.ndarray:
    b = np.frombuffer(raw, np.uint8)
    out = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    return (out + 1).astype(np.uint8)


def write_config(cfg: ChipConfig, f) -> None:
    """Serialize ``cfg`` to a binary stream (or path)."""
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        with open(f, "wb") as fh:
            return write_config(cfg, fh)
    c = cfg.num_cores
    f.write(_HEADER.pack(MAGIC, VERSION, 0, c, cfg.chip_grid[0], cfg.chip_grid[1], cfg.depth,
                         cfg.num_input_channels, cfg.num_classes))
    for i in range(c):
        f.write(_pack_types(cfg.input_types[i]))
        f.write(np.packbits(cfg.crossbar[i].reshape(-1), bitorder="little").tobytes())
        for arr in (cfg.threshold[i], cfg.leak[i], cfg.lower_bound[i]):
            f.write(arr.astype("<i2").tobytes())
        f.write(cfg.table[i].astype("<i2").tobytes())
        f.write(cfg.target_core[i].astype("<i4").tobytes())
        f.write(cfg.target_line[i].astype("<i2").tobytes())
        f.write(struct.pack("<HI", int(cfg.core_layer[i]), int(cfg.core_stage[i])))
    inp = np.zeros(len(cfg.input_core), _INPUT_DTYPE)
    inp["channel"], inp["core"], inp["line"] = cfg.input_channel, cfg.input_core, cfg.input_line
    out = np.zeros(len(cfg.output_core), _OUTPUT_DTYPE)
    out["core"], out["neuron"], out["cls"] = cfg.output_core, cfg.output_neuron, cfg.output_class
    for table in (inp, out, cfg.probes.astype(PROBE_DTYPE)):
        f.write(struct.pack("<I", len(table)))
        f.write(table.tobytes())
    f.write(struct.pack("<I", len(cfg.host_stage)))
    f.write(cfg.host_stage)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ChipConfigError("truncated chip config file")
    return data


def read_config(f) -> ChipConfig:
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        with open(f, "rb") as fh:
            return read_config(fh)
    magic, version, _flags, c, gr, gc, depth, n_in, n_cls = _HEADER.unpack(
        _read_exact(f, _HEADER.size))
    if magic != MAGIC:
        raise ChipConfigError("not a chip config file")
    if version != VERSION:
        raise ChipConfigError(f"unsupported config version {version}")
    cfg = ChipConfig.allocate(c)
    n = CORE_NEURONS
    for i in range(c):
        cfg.input_types[i] = _unpack_types(_read_exact(f, CORE_LINES // 4))
        bits = np.frombuffer(_read_exact(f, CORE_LINES * n // 8), np.uint8)
        cfg.crossbar[i] = np.unpackbits(bits, bitorder="little").reshape(CORE_LINES, n).astype(bool)
        cfg.threshold[i] = np.frombuffer(_read_exact(f, 2 * n), "<i2")
        cfg.leak[i] = np.frombuffer(_read_exact(f, 2 * n), "<i2")
        cfg.lower_bound[i] = np.frombuffer(_read_exact(f, 2 * n), "<i2")
        cfg.table[i] = np.frombuffer(_read_exact(f, 8 * n), "<i2").reshape(n, 4)
        cfg.target_core[i] = np.frombuffer(_read_exact(f, 4 * n), "<i4")
        cfg.target_line[i] = np.frombuffer(_read_exact(f, 2 * n), "<i2")
        cfg.core_layer[i], cfg.core_stage[i] = struct.unpack("<HI", _read_exact(f, 6))
    tables = []
    for dtype in (_INPUT_DTYPE, _OUTPUT_DTYPE, PROBE_DTYPE):
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tables.append(np.frombuffer(_read_exact(f, count * dtype.itemsize), dtype).copy())
    inp, out, probes = tables
    cfg.input_channel = inp["channel"].copy()
    cfg.input_core = inp["core"].copy()
    cfg.input_line = inp["line"].copy()
    cfg.output_core = out["core"].copy()
    cfg.output_neuron = out["neuron"].copy()
    cfg.output_class = out["cls"].copy()
    cfg.probes = probes
    (hlen,) = struct.unpack("<I", _read_exact(f, 4))
    cfg.host_stage = _read_exact(f, hlen)
    cfg.depth = depth
    cfg.chip_grid = (gr, gc)
    cfg.num_input_channels = n_in
    cfg.num_classes = n_cls
    return cfg


def config_bytes(cfg: ChipConfig) -> bytes:
    buf = io.BytesIO()
    write_config(cfg, buf)
    return buf.getvalue()


def write_vote_map(cfg: ChipConfig, path) -> None:
    """Plain-text readout map: one ``core neuron class`` triple per line."""
    with open(path, "w") as fh:
        fh.write("# core neuron class\n")
        for c, n, k in zip(cfg.output_core, cfg.output_neuron, cfg.output_class):
            fh.write(f"{int(c)} {int(n)} {int(k)}\n")


def read_vote_map(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([int(t) for t in line.split()])
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]
