"""Network description grammar, built-in templates and structural validation.

A network file is line oriented::

    # comment
    input 32 32 3
    classes 10
    features_per_class 6528      # optional
    T-12
    P4-128(4)
    D rate=0.5
    S-256(16) pad=1

Each layer line is ``KIND-FEATURES(GROUPS)`` followed by optional ``key=value``
overrides (``pad``, ``stride``, ``patch``, ``rate``).  ``T`` is the off-chip
transduction convolution and must come first.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace


class NetSpecError(ValueError):
    """Raised for malformed network descriptions."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LayerKind(str, enum.Enum):
    TRANSDUCTION = "T"
    SPATIAL = "S"
    NIN = "N"
    POOL = "P"
    POOL4 = "P4"
    DROPOUT = "D"


# kind -> (patch, stride, default pad)
_GEOMETRY = {
    LayerKind.TRANSDUCTION: (3, 1, 1),
    LayerKind.SPATIAL: (3, 1, 1),
    LayerKind.NIN: (1, 1, 0),
    LayerKind.POOL: (2, 2, 0),
    LayerKind.POOL4: (4, 2, 1),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    features: int
    groups: int = 1
    patch_rows: int = 1
    patch_cols: int = 1
    stride: int = 1
    pad: int = 0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.features <= 0 or self.groups <= 0:
            raise NetSpecError("features and groups must be positive")
        if self.features % self.groups:
            raise NetSpecError(
                f"{self.features} features not divisible by {self.groups} groups"
            )
        if min(self.patch_rows, self.patch_cols, self.stride) <= 0 or self.pad < 0:
            raise NetSpecError("patch and stride must be positive, pad non-negative")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise NetSpecError("dropout rate must lie in [0, 1]")

    @classmethod
    def make(cls, kind: LayerKind, features: int, groups: int = 1, **overrides) -> "LayerSpec":
        """Build a layer with the template geometry for ``kind``."""
        if kind is LayerKind.DROPOUT:
            return cls(kind, features, 1, 1, 1, 1, 0, overrides.get("dropout_rate", 0.5))
        patch, stride, pad = _GEOMETRY[kind]
        args = dict(patch_rows=patch, patch_cols=patch, stride=stride, pad=pad)
        args.update(overrides)
        return cls(kind, features, groups, **args)

    @property
    def is_template(self) -> bool:
        """True when the geometry matches the Table-1 type letter."""
        if self.kind is LayerKind.DROPOUT:
            return True
        patch, stride, _ = _GEOMETRY[self.kind]
        return (self.patch_rows, self.patch_cols, self.stride) == (patch, patch, stride)

    @property
    def on_chip(self) -> bool:
        return self.kind not in (LayerKind.TRANSDUCTION, LayerKind.DROPOUT)

    def output_size(self, rows: int, cols: int) -> tuple[int, int]:
        if self.kind is LayerKind.DROPOUT:
            return rows, cols
        out_r = (rows + 2 * self.pad - self.patch_rows) // self.stride + 1
        out_c = (cols + 2 * self.pad - self.patch_cols) // self.stride + 1
        return out_r, out_c

    def token(self) -> str:
        if self.kind is LayerKind.DROPOUT:
            return "D"
        tok = f"{self.kind.value}-{self.features}"
        if self.groups != 1:
            tok += f"({self.groups})"
        return tok


@dataclass(frozen=True)
class NetworkSpec:
    input_rows: int
    input_cols: int
    input_channels: int
    layers: tuple[LayerSpec, ...]
    num_classes: int
    features_per_class: int

    def __post_init__(self):
        if min(self.input_rows, self.input_cols, self.input_channels) <= 0:
            raise NetSpecError("input dimensions must be positive")
        if not self.layers or self.layers[0].kind is not LayerKind.TRANSDUCTION:
            raise NetSpecError("first layer must be a transduction layer")
        if any(l.kind is LayerKind.TRANSDUCTION for l in self.layers[1:]):
            raise NetSpecError("only the first layer may be a transduction layer")
        if self.num_classes <= 0 or self.features_per_class <= 0:
            raise NetSpecError("classes and features per class must be positive")
        shapes = self.shapes()
        for k, layer in enumerate(self.layers):
            if layer.kind is LayerKind.DROPOUT:
                continue
            in_shape = shapes[k]
            if in_shape[2] % layer.groups:
                raise NetSpecError(
                    f"layer {k}: {in_shape[2]} input features not divisible by "
                    f"{layer.groups} groups"
                )
            out = shapes[k + 1]
            if out[0] <= 0 or out[1] <= 0:
                raise NetSpecError(f"layer {k}: output grid collapses to {out[:2]}")
        cap = self.readout_capacity
        if self.features_per_class > cap:
            raise NetSpecError(
                f"{self.features_per_class} features/class exceeds the {cap} final-layer "
                f"outputs available to each of {self.num_classes} classes"
            )

    def shapes(self) -> list[tuple[int, int, int]]:
        """Activation shapes: entry k is the input of layer k, the last is the output."""
        shape = (self.input_rows, self.input_cols, self.input_channels)
        out = [shape]
        for layer in self.layers:
            rows, cols = layer.output_size(shape[0], shape[1])
            feats = shape[2] if layer.kind is LayerKind.DROPOUT else layer.features
            shape = (rows, cols, feats)
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.shapes()[-1]

    @property
    def num_outputs(self) -> int:
        r, c, f = self.output_shape
        return r * c * f

    @property
    def readout_capacity(self) -> int:
        """Most voting outputs every class can get under the readout rule."""
        r, c, f = self.output_shape
        if f >= self.num_classes:
            return (f // self.num_classes) * r * c
        return self.num_outputs // self.num_classes

    def readout_labels(self) -> list[int]:
        """Class of each flattened (row, col, feature) final output, -1 if it does not vote.

        With at least as many features as classes, feature ``f`` votes for class
        ``f mod C`` at every location (features beyond the last full set of C
        are left out so classes stay balanced).  Otherwise flattened output
        ``j`` votes for ``j mod C``.  Each class keeps its first
        ``features_per_class`` outputs in flattened order.
        """
        r, c, f = self.output_shape
        ncls = self.num_classes
        labels = []
        for j in range(r * c * f):
            feat = j % f
            if f >= ncls:
                labels.append(feat % ncls if feat < ncls * (f // ncls) else -1)
            else:
                labels.append(j % ncls)
        taken = [0] * ncls
        for j, lab in enumerate(labels):
            if lab < 0:
                continue
            if taken[lab] >= self.features_per_class:
                labels[j] = -1
            else:
                taken[lab] += 1
        return labels

    def compute_layers(self) -> list[int]:
        """Indices of layers that carry parameters (everything but dropout)."""
        return [k for k, l in enumerate(self.layers) if l.kind is not LayerKind.DROPOUT]

    def chip_layers(self) -> list[int]:
        return [k for k, l in enumerate(self.layers) if l.on_chip]

    def with_overrides(self, **kw) -> "NetworkSpec":
        return replace(self, **kw)


_LAYER_RE = re.compile(r"^(P4|[TSNPD])(?:-(\d+)(?:\((\d+)\))?)?$")


def _parse_layer(tokens: list[str], prev_features: int | None, lineno: int,
                 index: int = 0) -> LayerSpec:
    m = _LAYER_RE.match(tokens[0])
    if not m:
        raise NetSpecError(f"unknown layer token {tokens[0]!r}", lineno)
    kind = LayerKind(m.group(1))
    overrides: dict = {}
    for tok in tokens[1:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise NetSpecError(f"malformed field {tok!r}", lineno)
        try:
            if key == "pad":
                overrides["pad"] = int(val)
            elif key == "stride":
                overrides["stride"] = int(val)
            elif key == "patch":
                rows, _, cols = val.partition("x")
                overrides["patch_rows"] = int(rows)
                overrides["patch_cols"] = int(cols or rows)
            elif key == "rate":
                overrides["dropout_rate"] = float(val)
            else:
                raise NetSpecError(f"unknown field {key!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, NetSpecError):
                raise
            raise NetSpecError(f"malformed value in {tok!r}", lineno) from None

    if kind is LayerKind.DROPOUT:
        if prev_features is None:
            raise NetSpecError("dropout cannot be the first layer", lineno)
        return LayerSpec.make(kind, prev_features, **overrides)
    if m.group(2) is None:
        raise NetSpecError(f"layer {tokens[0]!r} is missing a feature count", lineno)
    features = int(m.group(2))
    groups = int(m.group(3) or 1)
    try:
        return LayerSpec.make(kind, features, groups, **overrides)
    except NetSpecError as exc:
        raise NetSpecError(f"layer {index}: {exc}", lineno) from None


def parse_network(text: str) -> NetworkSpec:
    """Parse a network description into a validated NetworkSpec."""
    header: dict[str, tuple[int, ...]] = {}
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[0]
        if key in ("input", "classes", "features_per_class"):
            try:
                header[key] = tuple(int(t) for t in tokens[1:])
            except ValueError:
                raise NetSpecError(f"malformed {key} header", lineno) from None
            want = 3 if key == "input" else 1
            if len(header[key]) != want:
                raise NetSpecError(f"{key} expects {want} integer(s)", lineno)
            continue
        prev = layers[-1].features if layers else None
        layers.append(_parse_layer(tokens, prev, lineno, len(layers)))

    if "input" not in header:
        raise NetSpecError("missing 'input ROWS COLS CHANNELS' header")
    if "classes" not in header:
        raise NetSpecError("missing 'classes N' header")
    rows, cols, chans = header["input"]
    classes = header["classes"][0]
    fpc = header.get("features_per_class", (None,))[0]
    return build_network(rows, cols, chans, layers, classes, fpc)


def build_network(rows, cols, channels, layers, num_classes, features_per_class=None) -> NetworkSpec:
    """Assemble a NetworkSpec, deriving features/class from the output size if absent."""
    layers = tuple(layers)
    if features_per_class is None:
        probe = NetworkSpec(rows, cols, channels, layers, num_classes, 1)
        features_per_class = max(1, probe.readout_capacity)
    return NetworkSpec(rows, cols, channels, layers, num_classes, features_per_class)


def format_network(net: NetworkSpec) -> str:
    """Render ``net`` in the description grammar; parse_network round-trips it."""
    lines = [
        f"input {net.input_rows} {net.input_cols} {net.input_channels}",
        f"classes {net.num_classes}",
        f"features_per_class {net.features_per_class}",
    ]
    for layer in net.layers:
        parts = [layer.token()]
        if layer.kind is LayerKind.DROPOUT:
            parts.append(f"rate={layer.dropout_rate!r}")
        else:
            patch, stride, pad = _GEOMETRY[layer.kind]
            if (layer.patch_rows, layer.patch_cols) != (patch, patch):
                parts.append(f"patch={layer.patch_rows}x{layer.patch_cols}")
            if layer.stride != stride:
                parts.append(f"stride={layer.stride}")
            if layer.pad != pad:
                parts.append(f"pad={layer.pad}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


_TEMPLATES = {
    "half_chip": ["T-12", "P4-128(4)", "D", "S-256(16)", "N-256(2)", "P-512(16)", "S-1020(4)"],
    "one_chip": [
        "T-16", "P4-252(2)", "N-256(2)", "P-256(8)", "S-512(32)", "N-512(4)", "N-512(4)",
        "N-512(4)", "P-512(16)", "S-1024(64)", "N-1024(8)", "P-1024(32)", "N-1024(8)",
        "N-1024(8)", "N-2040(8)",
    ],
    "two_chip": [
        "T-32", "S-128(4)", "N-128(1)", "P-128(4)", "S-256(16)", "N-256(2)", "P-256(8)",
        "S-512(32)", "N-512(4)", "P-512(16)", "S-2048(64)", "N-2048(16)", "N-2048(16)",
        "N-2048(16)", "N-4096(16)",
    ],
    "four_chip": [
        "T-64", "S-256(8)", "N-256(2)", "P-256(8)", "S-512(32)", "N-512(4)", "P-512(16)",
        "S-1024(64)", "N-1024(8)", "P-1024(32)", "S-2048(128)", "N-2048(16)", "N-2048(16)",
        "N-2048(16)", "N-4096(16)",
    ],
}

TEMPLATE_NAMES = ("half_chip", "one_chip", "two_chip", "four_chip", "eight_chip")
# desk-scale network used for the quick learning checks; not one of the chip templates
_TEMPLATES["toy"] = ["T-8", "S-16", "P-16", "N-16"]


def builtin_template(name: str, rows: int = 32, cols: int = 32, channels: int = 3,
                     num_classes: int = 10, dropout_rate: float = 0.0) -> NetworkSpec:
    """Return one of the five chip-sized templates on a CIFAR-shaped input.

    ``eight_chip`` doubles every layer's features of ``four_chip``; group counts
    double too so each group keeps the same filter size.
    """
    if name not in TEMPLATE_NAMES and name not in _TEMPLATES:
        raise NetSpecError(f"unknown template {name!r}; choose from {TEMPLATE_NAMES}")
    doubled = name == "eight_chip"
    tokens = _TEMPLATES["four_chip" if doubled else name]
    layers: list[LayerSpec] = []
    for tok in tokens:
        layer = _parse_layer([tok], layers[-1].features if layers else None, 0)
        if layer.kind is LayerKind.DROPOUT:
            layer = replace(layer, dropout_rate=dropout_rate)
        elif doubled:
            groups = layer.groups * 2 if layer.on_chip else layer.groups
            layer = replace(layer, features=layer.features * 2, groups=groups)
        layers.append(layer)
    # dropout carries the feature count of its predecessor
    for k, layer in enumerate(layers):
        if layer.kind is LayerKind.DROPOUT:
            layers[k] = replace(layer, features=layers[k - 1].features)
    return build_network(rows, cols, channels, layers, num_classes)


# -- structural validation -----------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    layer: int
    rule: str
    measured: int
    limit: int

    def __str__(self):
        return f"layer {self.layer}: {self.rule} = {self.measured} exceeds {self.limit}"


@dataclass
class StructuralReport:
    group_filter_size: dict[int, int] = field(default_factory=dict)
    group_out_features: dict[int, int] = field(default_factory=dict)
    violations: list[Violation] = field(default_factory=list)
    non_template: list[int] = field(default_factory=list)

    @property
    def mappable(self) -> bool:
        return not self.violations

    def records(self) -> list[dict]:
        """Machine-readable key/value records, one per checked layer."""
        out = []
        for k in sorted(self.group_filter_size):
            out.append({
                "layer": k,
                "group_filter_size": self.group_filter_size[k],
                "group_out_features": self.group_out_features[k],
                "template": k not in self.non_template,
                "ok": not any(v.layer == k for v in self.violations),
            })
        return out

    def to_text(self) -> str:
        lines = ["layer  filter  out  status"]
        for rec in self.records():
            status = "ok" if rec["ok"] else "VIOLATION"
            if not rec["template"]:
                status += " (non-template)"
            lines.append(f"{rec['layer']:>5}  {rec['group_filter_size']:>6}  "
                         f"{rec['group_out_features']:>3}  {status}")
        lines.extend(str(v) for v in self.violations)
        lines.append(f"mappable={self.mappable}")
        return "\n".join(lines)


def validate_structure(net: NetworkSpec, core_inputs: int = 256, core_neurons: int = 256,
                       trinary_limit: int = 128) -> StructuralReport:
    """Check every on-chip layer's per-group filter against core capacity."""
    report = StructuralReport()
    shapes = net.shapes()
    filter_limit = min(trinary_limit, core_inputs)
    for k, layer in enumerate(net.layers):
        if not layer.on_chip:
            continue
        in_feats = shapes[k][2] // layer.groups
        fsize = layer.patch_rows * layer.patch_cols * in_feats
        out = layer.features // layer.groups
        report.group_filter_size[k] = fsize
        report.group_out_features[k] = out
        if not layer.is_template:
            report.non_template.append(k)
        if fsize > filter_limit:
            report.violations.append(Violation(k, "group_filter_size", fsize, filter_limit))
        if out > core_neurons:
            report.violations.append(Violation(k, "group_out_features", out, core_neurons))
    return report
