"""Map a trained network onto neurosynaptic cores.

Every on-chip layer is split by group and by rectangular blocks of output
locations; each (group, block) becomes one core whose input lines carry the
block's receptive field, two lines per input (types 1 and 2, read as +1 and
-1).  Outputs needed by several consumer cores are duplicated: either as
extra neurons on the producing core (direct boundary) or through splitter
cores of single-input relay neurons (relayed boundary, one extra tick).  A
boundary is relayed as a whole so that every consumer sees its inputs in
the same tick.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import chip as chipmod
from .chip import CORE_LINES, CORE_NEURONS, LEAK_MAX, LEAK_MIN, SPLITTER, ChipConfig
from .netspec import LayerSpec, NetworkSpec, validate_structure
from .trainer import EPS, TrainedModel, batch_norm, readout_classes

log = logging.getLogger(__name__)

PAIRS_PER_CORE = CORE_NEURONS // 2


class CompileError(ValueError):
    """Raised when a network cannot be placed on cores."""


# -- neuron parameters ----------------------------------------------------------------


@dataclass
class LeakResult:
    leak: int
    raw: int
    clamped: bool


def compute_leak(b: float, mu: float, sigma: float, eps: float = EPS) -> LeakResult:
    """Integer leak whose threshold-1 firing rule reproduces ``r >= 0``."""
    raw = math.ceil(b * (sigma + eps) - mu)
    leak = min(max(raw, LEAK_MIN), LEAK_MAX)
    if leak != raw:
        log.warning("leak %d clamped to %d", raw, leak)
    return LeakResult(leak, raw, leak != raw)


@dataclass
class Coincidence:
    layer: int
    feature: int
    s: int
    # decision of the normalised unit and of the integer neuron at this s
    float_fires: bool
    neuron_fires: bool


def check_spiking_equivalence(layer: int, mu, sigma, bias, leaks, filter_size: int,
                              eps: float = EPS) -> tuple[list[Coincidence], list[int]]:
    """Compare both firing rules for every integer ``s`` in ``[-filter_size, filter_size]``.

    Returns the disagreements and the features whose ``mu - b(sigma + eps)`` is
    an exact integer (where the two rules may part ways).
    """
    s = np.arange(-filter_size, filter_size + 1, dtype=np.float64)[:, None]
    mu = np.asarray(mu, np.float64)
    sigma = np.asarray(sigma, np.float64)
    bias = np.asarray(bias, np.float64)
    leaks = np.asarray(leaks, np.int64)
    float_fire = batch_norm(s, mu, sigma, bias, eps) >= 0
    neuron_fire = s.astype(np.int64) + leaks >= 1
    bad = np.argwhere(float_fire != neuron_fire)
    out = [Coincidence(layer, int(f), int(s[i, 0]), bool(float_fire[i, f]),
                       bool(neuron_fire[i, f])) for i, f in bad]
    m = mu - bias * (sigma + eps)
    integral = np.flatnonzero(m == np.round(m)).tolist()
    return out, integral


# -- trinary synapse pairs ------------------------------------------------------------


def encode_trinary(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pair-encode trinary weights of shape ``(inputs, neurons)``.

    Returns input types for the ``2 * inputs`` lines (1, 2, 1, 2, ...) and the
    matching crossbar rows: +1 sets only the type-1 synapse, -1 only the type-2.
    """
    w = np.asarray(weights)
    if w.ndim == 1:
        w = w[:, None]
    if 2 * w.shape[0] > CORE_LINES:
        raise CompileError(f"{w.shape[0]} inputs need {2 * w.shape[0]} lines, core has "
                           f"{CORE_LINES}")
    if w.shape[1] > CORE_NEURONS:
        raise CompileError(f"{w.shape[1]} neurons exceed the core's {CORE_NEURONS}")
    if not np.all(np.isin(w, (-1, 0, 1))):
        raise CompileError("weights must be trinary")
    types = np.tile(np.array([1, 2], np.uint8), w.shape[0])
    rows = np.zeros((2 * w.shape[0], w.shape[1]), bool)
    rows[0::2] = w == 1
    rows[1::2] = w == -1
    return types, rows


# -- location packing -----------------------------------------------------------------


@dataclass(frozen=True)
class Packing:
    locations: int
    block: tuple[int, int]
    region: tuple[int, int, int]
    lines: int
    neurons: int


def _region_extent(n: int, stride: int, patch: int) -> int:
    return (n - 1) * stride + patch


def pack_locations(layer: LayerSpec, group_in_features: int, group_out_features: int | None = None,
                   copy_neurons: int = 0) -> Packing:
    """Most output locations one core can host for ``layer`` (ignoring image borders).

    ``copy_neurons`` are extra neurons needed per hosted location.
    """
    out_g = layer.features // layer.groups if group_out_features is None else group_out_features
    per_loc = out_g + copy_neurons
    best = None
    for a in range(1, CORE_LINES + 1):
        ra = _region_extent(a, layer.stride, layer.patch_rows)
        if 2 * ra * layer.patch_cols * group_in_features > CORE_LINES:
            break
        for b in range(1, CORE_LINES + 1):
            rb = _region_extent(b, layer.stride, layer.patch_cols)
            lines = 2 * ra * rb * group_in_features
            neurons = a * b * per_loc
            if lines > CORE_LINES or neurons > CORE_NEURONS:
                break
            key = (a * b, -abs(a - b), a)
            if best is None or key > best[0]:
                best = (key, Packing(a * b, (a, b), (ra, rb, group_in_features), lines, neurons))
    if best is None:
        raise CompileError("a single output location does not fit on one core")
    return best[1]


# -- copies ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CopyPlan:
    fanout: int
    on_core_pairs: int
    splitter_pairs: int

    @property
    def extra_copies(self) -> int:
        return max(self.fanout - 1, 0)


def plan_copies(fanouts, free_pairs: int) -> list[CopyPlan]:
    """Greedy pair allocation: on-core pairs first, splitter pairs for the rest.

    ``free_pairs`` counts neuron pairs available on the producing core,
    including the slot of each output's own pair.
    """
    plans = []
    for n in fanouts:
        n = int(n)
        local = min(n, free_pairs)
        free_pairs -= local
        plans.append(CopyPlan(n, local, n - local))
    return plans


# -- network plan ---------------------------------------------------------------------


@dataclass
class CoreBlock:
    group: int
    rows: tuple[int, int]  # output rows [r0, r1)
    cols: tuple[int, int]
    in_rows: tuple[int, int]  # clipped input region
    in_cols: tuple[int, int]

    @property
    def num_inputs_cells(self) -> int:
        return (self.in_rows[1] - self.in_rows[0]) * (self.in_cols[1] - self.in_cols[0])


@dataclass
class LayerPlan:
    layer: int
    spec: LayerSpec
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    block: tuple[int, int]
    relayed: bool
    fanout: np.ndarray  # consumer cores per output, shape out_shape
    blocks: list[CoreBlock]
    splitter_cores: int = 0
    stage: int = 0

    @property
    def in_g(self) -> int:
        return self.in_shape[2] // self.spec.groups

    @property
    def out_g(self) -> int:
        return self.spec.features // self.spec.groups

    @property
    def filter_size(self) -> int:
        return self.spec.patch_rows * self.spec.patch_cols * self.in_g

    @property
    def num_cores(self) -> int:
        return len(self.blocks) + self.splitter_cores


@dataclass
class NetworkPlan:
    net: NetworkSpec
    layers: list[LayerPlan]

    @property
    def total_cores(self) -> int:
        return sum(p.num_cores for p in self.layers)

    @property
    def depth(self) -> int:
        return self.layers[-1].stage if self.layers else 0


def _spans(n: int, size: int) -> list[tuple[int, int]]:
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _in_span(span, stride, pad, patch, limit):
    lo = span[0] * stride - pad
    hi = (span[1] - 1) * stride - pad + patch
    return max(lo, 0), min(hi, limit)


def _neuron_need(fanout: np.ndarray, relayed: bool, final: bool) -> np.ndarray:
    if final:
        return np.ones_like(fanout)
    if relayed:
        return np.maximum(1, -(-2 * fanout // CORE_NEURONS))
    return np.maximum(1, 2 * fanout)


def _splitter_items(fanout: np.ndarray) -> list[int]:
    """Neuron demand of each splitter line in output order (chunks of 128 consumers)."""
    items = []
    for n in fanout.reshape(-1):
        n = int(n)
        while n > 0:
            take = min(n, PAIRS_PER_CORE)
            items.append(2 * take)
            n -= take
    return items


def _first_fit(items: list[int]) -> list[tuple[int, int]]:
    """Assign each demand to a splitter core; returns (core, line) per item."""
    lines_used: list[int] = []
    neurons_used: list[int] = []
    out = []
    for d in items:
        for c in range(len(lines_used)):
            if lines_used[c] < CORE_LINES and neurons_used[c] + d <= CORE_NEURONS:
                break
        else:
            lines_used.append(0)
            neurons_used.append(0)
            c = len(lines_used) - 1
        out.append((c, lines_used[c]))
        lines_used[c] += 1
        neurons_used[c] += d
    return out


def _choose_block(spec: LayerSpec, in_shape, out_shape, need: np.ndarray):
    """Smallest-core-count block shape; ``need`` is neurons per output location/feature."""
    h, w, _ = in_shape
    ho, wo, _ = out_shape
    groups = spec.groups
    in_g = in_shape[2] // groups
    out_g = spec.features // groups
    # per-group neuron need per location with 2-D prefix sums
    per_group = need.reshape(ho, wo, groups, out_g).sum(axis=3)
    pref = np.zeros((ho + 1, wo + 1, groups), np.int64)
    pref[1:, 1:] = per_group.cumsum(0).cumsum(1)
    best = None
    for a in range(1, ho + 1):
        rspans = _spans(ho, a)
        rin = [_in_span(s, spec.stride, spec.pad, spec.patch_rows, h) for s in rspans]
        if 2 * max(r1 - r0 for r0, r1 in rin) * min(spec.patch_cols, w) * in_g > CORE_LINES:
            break
        for b in range(1, wo + 1):
            cspans = _spans(wo, b)
            cin = [_in_span(s, spec.stride, spec.pad, spec.patch_cols, w) for s in cspans]
            lines = 2 * max(r1 - r0 for r0, r1 in rin) * max(c1 - c0 for c0, c1 in cin) * in_g
            if lines > CORE_LINES:
                break
            r_idx = np.array([s for s in rspans])
            c_idx = np.array([s for s in cspans])
            sums = (pref[r_idx[:, 1]][:, c_idx[:, 1]] - pref[r_idx[:, 0]][:, c_idx[:, 1]]
                    - pref[r_idx[:, 1]][:, c_idx[:, 0]] + pref[r_idx[:, 0]][:, c_idx[:, 0]])
            if sums.max() > CORE_NEURONS:
                continue
            cores = len(rspans) * len(cspans) * groups
            key = (cores, abs(a - b), -a)
            if best is None or key < best[0]:
                best = (key, (a, b))
    if best is None:
        return None, None
    a, b = best[1]
    blocks = []
    for g in range(groups):
        for rs in _spans(ho, a):
            for cs in _spans(wo, b):
                blocks.append(CoreBlock(g, rs, cs,
                                        _in_span(rs, spec.stride, spec.pad, spec.patch_rows, h),
                                        _in_span(cs, spec.stride, spec.pad, spec.patch_cols, w)))
    return (a, b), blocks


def _input_fanout(plan: LayerPlan) -> np.ndarray:
    fan = np.zeros(plan.in_shape, np.int64)
    g_in = plan.in_g
    for blk in plan.blocks:
        fan[blk.in_rows[0]:blk.in_rows[1], blk.in_cols[0]:blk.in_cols[1],
            blk.group * g_in:(blk.group + 1) * g_in] += 1
    return fan


COPY_MODES = ("auto", "direct", "relay")


def plan_network(net: NetworkSpec, structural_check: bool = True,
                 copy_mode: str = "auto") -> NetworkPlan:
    """Decide blocks, copy strategy and pipeline stages without touching weights.

    ``copy_mode`` "auto" picks, per boundary, whichever of on-core copies or
    splitter cores needs fewer cores; "direct" and "relay" force one of them
    wherever it fits.
    """
    if copy_mode not in COPY_MODES:
        raise ValueError(f"copy_mode must be one of {COPY_MODES}")
    if structural_check:
        report = validate_structure(net)
        if not report.mappable:
            raise CompileError("network is not mappable: "
                               + "; ".join(str(v) for v in report.violations))
    shapes = net.shapes()
    chip = net.chip_layers()
    if not chip:
        raise CompileError("network has no on-chip layers")
    plans: list[LayerPlan] = []
    fanout = None
    for idx in reversed(range(len(chip))):
        k = chip[idx]
        spec = net.layers[k]
        in_shape, out_shape = shapes[k], shapes[k + 1]
        final = fanout is None
        if final:
            fanout = np.zeros(out_shape, np.int64)
        options = []
        modes = {"auto": (False, True), "direct": (False,), "relay": (True,)}[copy_mode]
        for relayed in ((False,) if final else modes):
            need = _neuron_need(fanout, relayed, final)
            block, blocks = _choose_block(spec, in_shape, out_shape, need)
            if block is None:
                continue
            splitters = 0
            if relayed:
                placed = _first_fit(_splitter_items(fanout))
                splitters = 1 + max(c for c, _ in placed) if placed else 0
            options.append((len(blocks) + splitters, relayed, block, blocks, splitters))
        if not options and copy_mode == "direct" and not final:
            raise CompileError(f"layer {k}: outputs need more copies than a core holds")
        if not options:
            raise CompileError(f"layer {k}: no block shape fits a core")
        _, relayed, block, blocks, splitters = min(options, key=lambda o: (o[0], o[1]))
        plan = LayerPlan(k, spec, in_shape, out_shape, block, relayed, fanout, blocks, splitters)
        plans.append(plan)
        fanout = _input_fanout(plan)
    plans.reverse()
    stage = 1
    for p in plans:
        p.stage = stage
        stage += 1 + int(p.relayed)
    return NetworkPlan(net, plans)


# -- compile --------------------------------------------------------------------------


@dataclass
class CompileReport:
    cores_by_layer: dict[int, int] = field(default_factory=dict)
    splitter_cores: dict[int, int] = field(default_factory=dict)
    copies: dict[int, int] = field(default_factory=dict)
    max_copies: dict[int, int] = field(default_factory=dict)
    blocks: dict[int, tuple[int, int]] = field(default_factory=dict)
    relayed: dict[int, bool] = field(default_factory=dict)
    stages: dict[int, int] = field(default_factory=dict)
    depth: int = 0
    clamps: list[tuple[int, int, int]] = field(default_factory=list)  # layer, feature, raw leak
    coincidences: list[Coincidence] = field(default_factory=list)
    integral_thresholds: list[tuple[int, int]] = field(default_factory=list)

    @property
    def total_cores(self) -> int:
        return sum(self.cores_by_layer.values()) + sum(self.splitter_cores.values())

    @property
    def total_copies(self) -> int:
        return sum(self.copies.values())

    @property
    def warnings(self) -> int:
        return len(self.clamps) + len(self.coincidences)

    @property
    def chips(self) -> int:
        return max(1, -(-self.total_cores // chipmod.CORES_PER_CHIP))

    def records(self) -> list[dict]:
        out = []
        for k in sorted(self.cores_by_layer):
            out.append({"layer": k, "cores": self.cores_by_layer[k],
                        "splitter_cores": self.splitter_cores.get(k, 0),
                        "copies": self.copies.get(k, 0), "max_copies": self.max_copies.get(k, 0),
                        "block": f"{self.blocks[k][0]}x{self.blocks[k][1]}",
                        "relayed": self.relayed[k], "stage": self.stages[k]})
        return out

    def summary(self) -> dict:
        return {"total_cores": self.total_cores, "total_copies": self.total_copies,
                "depth": self.depth, "chips": self.chips, "warnings": self.warnings,
                "leak_clamps": len(self.clamps), "coincidences": len(self.coincidences),
                "integral_thresholds": len(self.integral_thresholds)}

    def to_text(self) -> str:
        lines = ["layer  cores  splitters  copies  max  block  relayed  stage"]
        for r in self.records():
            lines.append(f"{r['layer']:>5}  {r['cores']:>5}  {r['splitter_cores']:>9}  "
                         f"{r['copies']:>6}  {r['max_copies']:>3}  {r['block']:>5}  "
                         f"{str(r['relayed']):>7}  {r['stage']:>5}")
        for key, val in self.summary().items():
            lines.append(f"{key}={val}")
        for layer, feat, raw in self.clamps:
            lines.append(f"warning: layer {layer} feature {feat} leak {raw} clamped")
        for c in self.coincidences:
            lines.append(f"warning: layer {c.layer} feature {c.feature} rules differ at s={c.s}")
        return "\n".join(lines)


@dataclass
class CompileResult:
    config: ChipConfig
    report: CompileReport
    plan: NetworkPlan

    @property
    def vote_map(self):
        return self.config.output_core, self.config.output_neuron, self.config.output_class


def _block_inputs(plan: LayerPlan, blk: CoreBlock) -> list[tuple[int, int, int]]:
    g0 = blk.group * plan.in_g
    return [(r, c, g0 + f)
            for r in range(*blk.in_rows)
            for c in range(*blk.in_cols)
            for f in range(plan.in_g)]


def _block_outputs(plan: LayerPlan, blk: CoreBlock) -> list[tuple[int, int, int]]:
    g0 = blk.group * plan.out_g
    return [(r, c, g0 + f)
            for r in range(*blk.rows)
            for c in range(*blk.cols)
            for f in range(plan.out_g)]


def _core_weights(plan: LayerPlan, blk: CoreBlock, w: np.ndarray) -> np.ndarray:
    """Trinary (inputs, outputs) matrix for one core, inputs in ``_block_inputs`` order."""
    spec = plan.spec
    nr = blk.in_rows[1] - blk.in_rows[0]
    nc = blk.in_cols[1] - blk.in_cols[0]
    in_g, out_g = plan.in_g, plan.out_g
    g = blk.group
    wg = w[..., g * out_g:(g + 1) * out_g]
    outs = [(r, c) for r in range(*blk.rows) for c in range(*blk.cols)]
    m = np.zeros((nr, nc, in_g, len(outs), out_g), np.int8)
    for j, (r, c) in enumerate(outs):
        for i in range(spec.patch_rows):
            rr = r * spec.stride - spec.pad + i - blk.in_rows[0]
            if not 0 <= rr < nr:
                continue
            for jj in range(spec.patch_cols):
                cc = c * spec.stride - spec.pad + jj - blk.in_cols[0]
                if 0 <= cc < nc:
                    m[rr, cc, :, j, :] = wg[i, jj]
    return m.reshape(nr * nc * in_g, len(outs) * out_g)


def compile_model(model: TrainedModel, max_cores: int | None = None,
                  copy_mode: str = "auto") -> CompileResult:
    """Build the chip configuration for every on-chip layer of ``model``."""
    from .modelfile import host_stage_bytes

    net = model.net
    if not model.deployable:
        raise CompileError("model has no deploy-mode statistics")
    plan = plan_network(net, copy_mode=copy_mode)
    if max_cores is not None and plan.total_cores > max_cores:
        raise CompileError(f"needs {plan.total_cores} cores, budget is {max_cores}")
    cfg = ChipConfig.allocate(plan.total_cores)
    report = CompileReport(depth=plan.depth)

    # core ids, layer by layer in forward order, splitters after their layer
    base, split_base = [], []
    nxt = 0
    for p in plan.layers:
        base.append(nxt)
        nxt += len(p.blocks)
        split_base.append(nxt)
        nxt += p.splitter_cores

    # consumers of each layer's outputs: (core id, local input index)
    consumers: list[dict] = [None] * len(plan.layers)
    local_inputs: list[list] = []
    for li, p in enumerate(plan.layers):
        ins = [_block_inputs(p, blk) for blk in p.blocks]
        local_inputs.append(ins)
        if li > 0:
            table: dict = {}
            for ci, inputs in enumerate(ins):
                for i, key in enumerate(inputs):
                    table.setdefault(key, []).append((base[li] + ci, i))
            consumers[li - 1] = table

    probes = []
    in_ch, in_core, in_line = [], [], []
    first = plan.layers[0]
    tr, tc, tf = first.in_shape
    for ci, inputs in enumerate(local_inputs[0]):
        core_id = base[0] + ci
        for i, (r, c, f) in enumerate(inputs):
            ch = (r * tc + c) * tf + f
            in_ch += [ch, ch]
            in_core += [core_id, core_id]
            in_line += [2 * i, 2 * i + 1]
    cfg.input_channel = np.array(in_ch, np.uint32)
    cfg.input_core = np.array(in_core, np.uint32)
    cfg.input_line = np.array(in_line, np.uint16)
    cfg.num_input_channels = tr * tc * tf

    final_cells: dict = {}
    for li, p in enumerate(plan.layers):
        k = p.layer
        params = model.params[k]
        st = model.stats[k]
        w = params.weights
        leaks = np.zeros(p.spec.features, np.int64)
        for f in range(p.spec.features):
            res = compute_leak(float(params.bias[f]), float(st.mu[f]), float(st.sigma[f]), st.eps)
            leaks[f] = res.leak
            if res.clamped:
                report.clamps.append((k, f, res.raw))
        bad, integral = check_spiking_equivalence(k, st.mu, st.sigma, params.bias, leaks,
                                                  p.filter_size, st.eps)
        report.coincidences.extend(bad)
        report.integral_thresholds.extend((k, f) for f in integral)
        final = li == len(plan.layers) - 1
        table = consumers[li] if not final else {}
        split_items = []  # (source core, source neuron, key, consumer chunk)
        copies = 0
        max_copies = 0
        for ci, blk in enumerate(p.blocks):
            core_id = base[li] + ci
            cfg.core_layer[core_id] = k
            cfg.core_stage[core_id] = p.stage
            n_in = len(local_inputs[li][ci])
            types, _ = encode_trinary(np.zeros((n_in, 1), np.int8))
            cfg.input_types[core_id, :2 * n_in] = types
            m = _core_weights(p, blk, w)
            n = 0
            for j, key in enumerate(_block_outputs(p, blk)):
                cons = table.get(key, [])
                fan = len(cons)
                copies += max(fan - 1, 0)
                max_copies = max(max_copies, fan - 1)
                if final or (fan == 0):
                    count = 1
                elif p.relayed:
                    count = -(-fan // PAIRS_PER_CORE)
                else:
                    count = 2 * fan
                col = m[:, j]
                cfg.crossbar[core_id, 0:2 * n_in:2, n:n + count] = (col == 1)[:, None]
                cfg.crossbar[core_id, 1:2 * n_in:2, n:n + count] = (col == -1)[:, None]
                cfg.leak[core_id, n:n + count] = leaks[key[2]]
                for q in range(count):
                    probes.append((k, key[0], key[1], key[2], core_id, n + q, p.stage))
                if final:
                    final_cells[key] = (core_id, n)
                elif p.relayed:
                    for q in range(count):
                        chunk = cons[q * PAIRS_PER_CORE:(q + 1) * PAIRS_PER_CORE]
                        split_items.append((core_id, n + q, key, chunk))
                else:
                    for q, (cc, i) in enumerate(cons):
                        cfg.target_core[core_id, n + 2 * q] = cc
                        cfg.target_line[core_id, n + 2 * q] = 2 * i
                        cfg.target_core[core_id, n + 2 * q + 1] = cc
                        cfg.target_line[core_id, n + 2 * q + 1] = 2 * i + 1
                n += count
            if n > CORE_NEURONS:
                raise CompileError(f"layer {k}: core {core_id} needs {n} neurons")
        if p.relayed:
            placed = _first_fit([2 * len(it[3]) for it in split_items])
            used = np.zeros(p.splitter_cores, np.int64)
            for (src_core, src_neuron, key, chunk), (sc, line) in zip(split_items, placed):
                core_id = split_base[li] + sc
                cfg.core_layer[core_id] = SPLITTER
                cfg.core_stage[core_id] = p.stage + 1
                cfg.target_core[src_core, src_neuron] = core_id
                cfg.target_line[src_core, src_neuron] = line
                n = int(used[sc])
                for q, (cc, i) in enumerate(chunk):
                    for half in (0, 1):
                        nn = n + 2 * q + half
                        cfg.crossbar[core_id, line, nn] = True
                        cfg.target_core[core_id, nn] = cc
                        cfg.target_line[core_id, nn] = 2 * i + half
                        probes.append((k, key[0], key[1], key[2], core_id, nn, p.stage + 1))
                used[sc] = n + 2 * len(chunk)
        report.cores_by_layer[k] = len(p.blocks)
        report.splitter_cores[k] = p.splitter_cores
        report.copies[k] = copies
        report.max_copies[k] = max(max_copies, 0)
        report.blocks[k] = p.block
        report.relayed[k] = p.relayed
        report.stages[k] = p.stage

    last = plan.layers[-1]
    ho, wo, fo = last.out_shape
    oc, on, ok = [], [], []
    for j, label in enumerate(readout_classes(net).tolist()):
        if label < 0:
            continue
        r, rem = divmod(j, wo * fo)
        c, f = divmod(rem, fo)
        core_id, neuron = final_cells[(r, c, f)]
        oc.append(core_id)
        on.append(neuron)
        ok.append(label)
    cfg.output_core = np.array(oc, np.uint32)
    cfg.output_neuron = np.array(on, np.uint16)
    cfg.output_class = np.array(ok, np.int32)
    cfg.num_classes = net.num_classes
    probes.sort(key=lambda t: (t[0], t[1], t[2], t[3], t[6], t[4], t[5]))
    cfg.probes = np.array(probes, dtype=chipmod.PROBE_DTYPE)
    cfg.depth = plan.depth
    cfg.chip_grid = (1, report.chips)
    cfg.host_stage = host_stage_bytes(model)
    cfg.validate()
    return CompileResult(cfg, report, plan)


def vote_counts_per_class(cfg: ChipConfig) -> np.ndarray:
    return np.bincount(cfg.output_class, minlength=cfg.num_classes)
