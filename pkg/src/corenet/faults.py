"""Single-bit fault injection and static analysis of undetected faults.

Faults are drawn from live elements only: crossbar bits between a driven
line and a neuron that carries a network value, leak bits of such neurons,
and routing bits of neurons that send spikes.  A fault the verifier misses
is then checked for being provably harmless (dead) by interval reasoning
over the faulty configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trainer import forward
from .chip import CORE_LINES, CORE_NEURONS, NO_TARGET, ChipConfig, effective_weights

LEAK_BITS = 9  # two's-complement leak field in [-256, 255]
KINDS = ("crossbar", "leak", "routing")


@dataclass(frozen=True)
class Fault:
    kind: str
    core: int
    neuron: int
    line: int = -1  # crossbar faults
    bit: int = 0  # leak / routing faults
    target_field: str = ""  # routing faults: "core" or "line"

    def __str__(self):
        if self.kind == "crossbar":
            return f"crossbar core {self.core} line {self.line} neuron {self.neuron}"
        if self.kind == "leak":
            return f"leak core {self.core} neuron {self.neuron} bit {self.bit}"
        return f"routing core {self.core} neuron {self.neuron} {self.target_field} bit {self.bit}"


def _flip_signed(value: int, bit: int, width: int) -> int:
    v = (value & ((1 << width) - 1)) ^ (1 << bit)
    return v - (1 << width) if v >= 1 << (width - 1) else v


def apply_fault(cfg: ChipConfig, fault: Fault) -> ChipConfig:
    out = cfg.copy()
    c, n = fault.core, fault.neuron
    if fault.kind == "crossbar":
        out.crossbar[c, fault.line, n] = ~out.crossbar[c, fault.line, n]
    elif fault.kind == "leak":
        out.leak[c, n] = _flip_signed(int(out.leak[c, n]), fault.bit, LEAK_BITS)
    elif fault.kind == "routing":
        if fault.target_field == "line":
            out.target_line[c, n] = int(out.target_line[c, n]) ^ (1 << fault.bit)
        else:
            out.target_core[c, n] = int(out.target_core[c, n]) ^ (1 << fault.bit)
    else:
        raise ValueError(f"unknown fault kind {fault.kind!r}")
    return out


@dataclass
class LiveSites:
    neurons: np.ndarray  # (C, 256) bool: carries a network value
    lines: np.ndarray  # (C, 256) bool: driven by the host or a live neuron

    @classmethod
    def of(cls, cfg: ChipConfig) -> "LiveSites":
        neurons = np.zeros((cfg.num_cores, CORE_NEURONS), bool)
        neurons[cfg.probes["core"].astype(int), cfg.probes["neuron"].astype(int)] = True
        lines = np.zeros((cfg.num_cores, CORE_LINES), bool)
        lines[cfg.input_core.astype(int), cfg.input_line.astype(int)] = True
        routed = neurons & (cfg.target_core != NO_TARGET)
        lines[cfg.target_core[routed], cfg.target_line[routed]] = True
        return cls(neurons, lines)


def sample_faults(cfg: ChipConfig, count: int, seed: int = 0) -> list[Fault]:
    rng = np.random.default_rng(seed)
    live = LiveSites.of(cfg)
    neurons = np.argwhere(live.neurons)
    senders = np.argwhere(live.neurons & (cfg.target_core != NO_TARGET))
    core_bits = max(int(cfg.num_cores - 1).bit_length(), 0)
    faults = []
    while len(faults) < count:
        kind = KINDS[int(rng.integers(3))]
        if kind == "crossbar":
            c, n = neurons[rng.integers(len(neurons))]
            lines = np.flatnonzero(live.lines[c])
            if len(lines) == 0:
                continue
            faults.append(Fault("crossbar", int(c), int(n), line=int(rng.choice(lines))))
        elif kind == "leak":
            c, n = neurons[rng.integers(len(neurons))]
            faults.append(Fault("leak", int(c), int(n), bit=int(rng.integers(LEAK_BITS))))
        else:
            if len(senders) == 0:
                continue
            c, n = senders[rng.integers(len(senders))]
            fields = ["line"] + (["core"] if core_bits else [])
            fld = fields[int(rng.integers(len(fields)))]
            bit = int(rng.integers(8 if fld == "line" else core_bits))
            faults.append(Fault("routing", int(c), int(n), bit=bit, target_field=fld))
    return faults


# -- static analysis ------------------------------------------------------------------


@dataclass
class Reach:
    may_fire: np.ndarray  # (C, 256)
    may_rest: np.ndarray  # (C, 256): can stay silent
    may_active: np.ndarray  # (C, 256) lines that can ever carry a spike
    relevant: np.ndarray  # (C, 256) neurons with a path to the readout


def analyse(cfg: ChipConfig) -> Reach:
    """Interval bounds on every neuron's input sum, assuming V starts each tick at 0.

    Host lines may take either value.  Bounds are propagated until stable.
    """
    c = cfg.num_cores
    w = effective_weights(cfg.input_types, cfg.crossbar, cfg.table).astype(np.int64)
    pos = np.clip(w, 0, None)
    neg = np.clip(w, None, 0)
    leak = cfg.leak.astype(np.int64)
    thr = cfg.threshold.astype(np.int64)
    host = np.zeros((c, CORE_LINES), bool)
    host[cfg.input_core.astype(int), cfg.input_line.astype(int)] = True
    routed = cfg.target_core != NO_TARGET
    valid = routed & (cfg.target_core < c) & (cfg.target_line >= 0) & (cfg.target_line < CORE_LINES)
    may_active = host.copy()
    may_fire = np.zeros((c, CORE_NEURONS), bool)
    for _ in range(c + 2):
        act = may_active.astype(np.int64)
        smax = np.einsum("cl,cln->cn", act, pos)
        fire = smax + leak >= thr
        nxt = host.copy()
        send = fire & valid
        nxt[cfg.target_core[send], cfg.target_line[send]] = True
        if np.array_equal(fire, may_fire) and np.array_equal(nxt, may_active):
            break
        may_fire, may_active = fire, nxt
    smin = np.einsum("cl,cln->cn", may_active.astype(np.int64), neg)
    may_rest = smin + leak < thr
    # backwards: a neuron matters if it is read out or feeds a line a relevant neuron listens to
    relevant = np.zeros((c, CORE_NEURONS), bool)
    relevant[cfg.output_core.astype(int), cfg.output_neuron.astype(int)] = True
    for _ in range(c + 2):
        listened = np.einsum("cln,cn->cl", (w != 0).astype(np.int64),
                             relevant.astype(np.int64)) > 0
        tc = np.where(valid, cfg.target_core, 0)
        tl = np.where(valid, cfg.target_line, 0)
        feeds = valid & listened[tc, tl]
        nxt = relevant | feeds
        if np.array_equal(nxt, relevant):
            break
        relevant = nxt
    return Reach(may_fire, may_rest, may_active, relevant)


def explain_miss(cfg: ChipConfig, fault: Fault) -> tuple[bool, str]:
    """Is the faulty element provably unable to affect any output?"""
    bad = apply_fault(cfg, fault)
    try:
        ref, flt = analyse(cfg), analyse(bad)
    except IndexError:
        return False, "fault produces an invalid routing target"
    c, n = fault.core, fault.neuron
    if not (ref.relevant[c, n] or flt.relevant[c, n]):
        return True, "neuron has no path to the readout"
    if fault.kind == "crossbar":
        if not (ref.may_active[c, fault.line] or flt.may_active[c, fault.line]):
            return True, "line never carries a spike"
    if fault.kind in ("crossbar", "leak"):
        never = not ref.may_fire[c, n] and not flt.may_fire[c, n]
        always = not ref.may_rest[c, n] and not flt.may_rest[c, n]
        if never:
            return True, "neuron can never fire with or without the fault"
        if always:
            return True, "neuron fires on every tick with or without the fault"
    if fault.kind == "routing" and not ref.may_fire[c, n]:
        return True, "neuron never fires, so its route carries nothing"
    return False, "live element not excited by the sample"


@dataclass
class CampaignResult:
    trials: int = 0
    detected: int = 0
    detected_dynamic: int = 0  # caught by simulation alone
    misses: list[tuple[Fault, bool, str]] = field(default_factory=list)  # missed by simulation
    undetected: list[tuple[Fault, bool, str]] = field(default_factory=list)  # missed by both
    by_kind: dict[str, list[int]] = field(default_factory=dict)  # kind -> [trials, detected]

    @property
    def detection_rate(self) -> float:
        return self.detected / self.trials if self.trials else 1.0

    @property
    def dynamic_rate(self) -> float:
        return self.detected_dynamic / self.trials if self.trials else 1.0

    @property
    def live_misses(self) -> int:
        return sum(1 for _, dead, _ in self.misses if not dead)

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "detected": self.detected,
            "detection_rate": self.detection_rate,
            "detected_dynamic": self.detected_dynamic,
            "dynamic_rate": self.dynamic_rate,
            "misses": [{"fault": str(f), "dead": d, "reason": r} for f, d, r in self.misses],
            "live_misses": self.live_misses,
            "undetected": [{"fault": str(f), "dead": d, "reason": r} for f, d, r in self.undetected],
            "by_kind": self.by_kind,
        }


def run_campaign(model, cfg: ChipConfig, frames: np.ndarray, trials: int = 1000,
                 seed: int = 0, progress=None, audit: bool = True) -> CampaignResult:
    """Inject ``trials`` independent single-bit faults and verify each on ``frames``.

    Misses are classified against the simulation-only verdict, so the dead-element
    analysis covers exactly the faults the dynamic comparison cannot see.
    """
    from .verify import reference_configs, verify_frames

    result = CampaignResult()
    start = model.net.chip_layers()[0]
    fwd = forward(model, np.asarray(frames, np.uint8), "deploy", start=start)
    refs = reference_configs(model) if audit else None
    reference = verify_frames(model, cfg, frames, reference=fwd, audit=audit, references=refs)
    if reference.verdict != "exact":
        raise ValueError("fault-free configuration does not verify; campaign is meaningless")
    for i, fault in enumerate(sample_faults(cfg, trials, seed)):
        bad = apply_fault(cfg, fault)
        rep = verify_frames(model, bad, frames, reference=fwd, static_checks=False,
                            audit=audit, references=refs)
        hit = rep.verdict != "exact"
        dyn = rep.dynamic_verdict != "exact"
        stats = result.by_kind.setdefault(fault.kind, [0, 0])
        stats[0] += 1
        stats[1] += int(hit)
        result.trials += 1
        result.detected += int(hit)
        result.detected_dynamic += int(dyn)
        if not dyn:
            dead, why = explain_miss(cfg, fault)
            result.misses.append((fault, dead, why))
            if not hit:
                result.undetected.append((fault, dead, why))
        if progress:
            progress(i, fault, hit)
    return result
