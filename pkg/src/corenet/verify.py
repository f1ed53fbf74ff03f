"""Neuron-by-neuron comparison of the trained network against the simulated chip.

Every neuron that carries a network value (layer outputs, their copies and
splitter relays) is probed and compared with the trainer's deploy-mode
activation at the tick its stage implies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .chip import ChipConfig, config_bytes
from .compiler import check_spiking_equivalence, compute_leak
from .modelfile import host_stage_model, transduce
from .simulator import SimulationError, Simulator, classify_run
from .trainer import TrainedModel, forward


@dataclass
class Divergence:
    image: int
    layer: int
    row: int
    col: int
    feature: int
    core: int
    neuron: int
    stage: int
    expected: int
    observed: int

    def __str__(self):
        return (f"image {self.image} layer {self.layer} location ({self.row}, {self.col}) "
                f"feature {self.feature}: expected {self.expected}, chip core {self.core} "
                f"neuron {self.neuron} gave {self.observed}")


@dataclass
class EquivalenceReport:
    images: int = 0
    mismatches: dict[int, int] = field(default_factory=dict)
    first: Divergence | None = None
    prediction_mismatches: int = 0
    trainer_accuracy: float | None = None
    chip_accuracy: float | None = None
    coincidences: int = 0
    warnings: list[str] = field(default_factory=list)
    error: str | None = None
    config_diffs: list[str] | None = None  # None: audit not run

    @property
    def dynamic_verdict(self) -> str:
        exact = self.error is None and self.total_mismatches == 0 and not self.prediction_mismatches
        return "exact" if exact else "mismatched"

    @property
    def total_mismatches(self) -> int:
        return sum(self.mismatches.values())

    @property
    def verdict(self) -> str:
        if self.config_diffs:
            return "mismatched"
        return self.dynamic_verdict

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "images": self.images,
            "mismatches_by_layer": {str(k): v for k, v in sorted(self.mismatches.items())},
            "total_mismatches": self.total_mismatches,
            "prediction_mismatches": self.prediction_mismatches,
            "first_divergence": None if self.first is None else self.first.__dict__,
            "trainer_accuracy": self.trainer_accuracy,
            "chip_accuracy": self.chip_accuracy,
            "coincidences": self.coincidences,
            "warnings": self.warnings,
            "error": self.error,
            "dynamic_verdict": self.dynamic_verdict,
            "config_diffs": self.config_diffs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"verdict: {self.verdict}", f"images: {self.images}"]
        for k, v in sorted(self.mismatches.items()):
            lines.append(f"layer {k}: {v} mismatches")
        if self.first is not None:
            lines.append(f"first divergence: {self.first}")
        if self.prediction_mismatches:
            lines.append(f"prediction mismatches: {self.prediction_mismatches}")
        if self.trainer_accuracy is not None:
            lines.append(f"trainer accuracy: {self.trainer_accuracy:.4f}")
            lines.append(f"chip accuracy: {self.chip_accuracy:.4f}")
        lines.extend(f"warning: {w}" for w in self.warnings)
        if self.config_diffs is not None:
            lines.append(f"config audit: {len(self.config_diffs)} differences")
            lines.extend(f"  {d}" for d in self.config_diffs[:10])
        if self.error:
            lines.append(f"error: {self.error}")
        return "\n".join(lines)


def _static_warnings(model: TrainedModel, cfg: ChipConfig) -> tuple[int, list[str]]:
    """Forward the compiler's firing-rule checks, recomputed from the model."""
    count = 0
    out = []
    shapes = model.net.shapes()
    for k in model.net.chip_layers():
        p, st = model.params[k], model.stats[k]
        layer = model.net.layers[k]
        fsize = layer.patch_rows * layer.patch_cols * shapes[k][2] // layer.groups
        leaks = [compute_leak(float(b), float(m), float(s), st.eps).leak
                 for b, m, s in zip(p.bias, st.mu, st.sigma)]
        bad, integral = check_spiking_equivalence(k, st.mu, st.sigma, p.bias, leaks, fsize, st.eps)
        count += len(bad)
        for c in bad:
            out.append(f"layer {k} feature {c.feature}: firing rules differ at s={c.s}")
        for f in integral:
            out.append(f"layer {k} feature {f}: threshold falls on an integer")
    return count, out


# -- static audit ---------------------------------------------------------------------

_PER_NEURON = ("threshold", "leak", "lower_bound", "target_core", "target_line")
_TABLES = ("input_channel", "input_core", "input_line", "output_core", "output_neuron",
           "output_class", "probes", "core_layer", "core_stage")


def reference_configs(model: TrainedModel) -> list[ChipConfig]:
    """Recompile ``model`` under every copy mode; the compiler is deterministic."""
    from .compiler import COPY_MODES, compile_model

    out, seen = [], set()
    for mode in COPY_MODES:
        cfg = compile_model(model, copy_mode=mode).config
        key = config_bytes(cfg)
        if key not in seen:
            seen.add(key)
            out.append(cfg)
    return out


def config_diff(ref: ChipConfig, cfg: ChipConfig, limit: int = 50) -> list[str]:
    """Human-readable differences between two configs, located by core and neuron."""
    if ref.num_cores != cfg.num_cores:
        return [f"core count {cfg.num_cores}, recompiled model needs {ref.num_cores}"]
    out = []
    for name in ("depth", "num_input_channels", "num_classes", "chip_grid", "host_stage"):
        if getattr(ref, name) != getattr(cfg, name):
            out.append(f"{name} differs")
    for name in _TABLES:
        a, b = getattr(ref, name), getattr(cfg, name)
        if a.shape != b.shape or not np.array_equal(a, b):
            out.append(f"{name} table differs")
    for c, line in np.argwhere(ref.input_types != cfg.input_types)[:limit]:
        out.append(f"core {c} line {line}: input type {cfg.input_types[c, line]}, "
                   f"expected {ref.input_types[c, line]}")
    for c, line, n in np.argwhere(ref.crossbar != cfg.crossbar)[:limit]:
        out.append(f"core {c} line {line} neuron {n}: crossbar bit {int(cfg.crossbar[c, line, n])}, "
                   f"expected {int(ref.crossbar[c, line, n])}")
    for name in _PER_NEURON:
        a, b = getattr(ref, name), getattr(cfg, name)
        for c, n in np.argwhere(a != b)[:limit]:
            out.append(f"core {c} neuron {n}: {name} {b[c, n]}, expected {a[c, n]}")
    for c, n in np.argwhere(np.any(ref.table != cfg.table, axis=2))[:limit]:
        out.append(f"core {c} neuron {n}: weight table differs")
    return out[:limit]


def audit_config(model: TrainedModel, cfg: ChipConfig,
                 references: list[ChipConfig] | None = None) -> list[str]:
    """Differences against the closest recompilation; empty means bit-identical."""
    refs = references if references is not None else reference_configs(model)
    best = None
    for ref in refs:
        diff = config_diff(ref, cfg)
        if best is None or len(diff) < len(best):
            best = diff
        if not diff:
            break
    return best or []


def verify_frames(model: TrainedModel, cfg: ChipConfig, frames: np.ndarray,
                  labels: np.ndarray | None = None, core_order=None, reference=None,
                  static_checks: bool = True, audit: bool = False,
                  references: list[ChipConfig] | None = None) -> EquivalenceReport:
    """Compare on binary chip-input frames (the transduction output or random bits).

    ``reference`` may carry a precomputed deploy-mode forward pass of ``frames``.
    With ``audit`` the config is also diffed against a recompilation of the model.
    """
    frames = np.asarray(frames, np.uint8)
    report = EquivalenceReport(images=len(frames))
    if static_checks:
        report.coincidences, report.warnings = _static_warnings(model, cfg)
    if audit:
        report.config_diffs = audit_config(model, cfg, references)
    if len(frames) == 0:
        report.warnings.append("no images: verdict is vacuous")
        return report
    start = model.net.chip_layers()[0]
    fwd = reference if reference is not None else forward(model, frames, "deploy", start=start)
    probes = cfg.probes
    try:
        sim = Simulator(cfg)
        result = sim.run_frames(frames, probes=np.stack([probes["core"], probes["neuron"]], 1),
                                core_order=core_order)
    except (SimulationError, IndexError, ValueError) as exc:
        report.error = f"simulation failed: {exc}"
        return report
    n = len(frames)
    firsts = []
    for layer in np.unique(probes["layer"]):
        sel = np.flatnonzero(probes["layer"] == layer)
        p = probes[sel]
        act = fwd.activations[int(layer)]
        expected = act[:, p["row"].astype(int), p["col"].astype(int),
                       p["feature"].astype(int)].astype(bool)  # (n, probes)
        ticks = np.arange(n)[:, None] + p["stage"].astype(int)[None, :]
        observed = result.probes[ticks, sel[None, :]]
        diff = expected != observed
        report.mismatches[int(layer)] = int(diff.sum())
        if diff.any():
            img, j = np.argwhere(diff)[0]
            q = p[j]
            firsts.append(Divergence(int(img), int(layer), int(q["row"]), int(q["col"]),
                                     int(q["feature"]), int(q["core"]), int(q["neuron"]),
                                     int(q["stage"]), int(expected[img, j]),
                                     int(observed[img, j])))
    if firsts:
        report.first = min(firsts, key=lambda d: (d.image, d.layer, d.row, d.col, d.feature))
    chip_pred = classify_run(cfg, result, n)
    report.prediction_mismatches = int((chip_pred != fwd.predictions).sum())
    if labels is not None and len(labels):
        labels = np.asarray(labels)
        report.trainer_accuracy = float(np.mean(fwd.predictions == labels))
        report.chip_accuracy = float(np.mean(chip_pred == labels))
    return report


def verify_images(model: TrainedModel, cfg: ChipConfig, images: np.ndarray,
                  labels: np.ndarray | None = None, audit: bool = False) -> EquivalenceReport:
    """Images go through the model's own off-chip stage for the reference and the
    config's embedded host stage for the chip; the two must agree too."""
    ref_frames = transduce(model, images)
    host = host_stage_model(cfg.host_stage) if cfg.host_stage else model
    chip_frames = transduce(host, images)
    if not np.array_equal(ref_frames, chip_frames):
        report = verify_frames(model, cfg, chip_frames, labels, audit=audit)
        report.error = "host transduction stage differs from the model"
        return report
    return verify_frames(model, cfg, ref_frames, labels, audit=audit)


def random_frames(model: TrainedModel, n: int, seed: int = 0, density: float = 0.5) -> np.ndarray:
    start = model.net.chip_layers()[0]
    shape = model.net.shapes()[start]
    rng = np.random.default_rng(seed)
    return (rng.random((n, *shape)) < density).astype(np.uint8)
