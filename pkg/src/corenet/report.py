"""Experiment summaries: run statistics to an aligned table, TSV/JSON records and figures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MISSING = "—"

# (key in the stats record, column header, format)
COLUMNS = [
    ("accuracy", "accuracy", "{:.4f}"),
    ("cores_used", "cores", "{:d}"),
    ("classifications", "images", "{:d}"),
    ("ticks", "ticks", "{:d}"),
    ("classifications_per_tick", "class/tick", "{:.4f}"),
    ("total_spikes", "spikes", "{:d}"),
    ("spikes_per_classification", "spikes/class", "{:.1f}"),
    ("energy_proxy", "energy proxy", "{:.4g}"),
    ("depth", "latency", "{:d}"),
]


def load_stats(path) -> dict:
    rec = json.loads(Path(path).read_text())
    if not isinstance(rec, dict):
        raise ValueError(f"{path}: stats file must hold one JSON object")
    rec.setdefault("name", Path(path).stem)
    if "spikes_per_classification" not in rec and rec.get("classifications"):
        if "total_spikes" in rec:
            rec["spikes_per_classification"] = rec["total_spikes"] / rec["classifications"]
    return rec


@dataclass
class Summary:
    rows: list[dict]
    cells: list[list[str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def of(cls, records: list[dict]) -> "Summary":
        out = cls(records)
        for rec in records:
            row = [str(rec.get("name", ""))]
            for key, _, fmt in COLUMNS:
                val = rec.get(key)
                if val is None:
                    row.append(MISSING)
                    out.warnings.append(f"{rec.get('name')}: missing {key}")
                    continue
                try:
                    row.append(fmt.format(int(val) if fmt == "{:d}" else float(val)))
                except (TypeError, ValueError):
                    row.append(MISSING)
                    out.warnings.append(f"{rec.get('name')}: unreadable {key}")
            out.cells.append(row)
        return out

    @property
    def header(self) -> list[str]:
        return ["run"] + [h for _, h, _ in COLUMNS]

    def to_text(self) -> str:
        table = [self.header] + self.cells
        widths = [max(len(r[i]) for r in table) for i in range(len(self.header))]
        lines = []
        for j, r in enumerate(table):
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(r, widths))))
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines.append(f"warnings: {len(self.warnings)}")
        return "\n".join(lines)

    def to_tsv(self) -> str:
        return "\n".join("\t".join(r) for r in [self.header] + self.cells) + "\n"

    def to_json(self) -> str:
        recs = [{k: r.get(k) for k in ["name"] + [c for c, _, _ in COLUMNS]} for r in self.rows]
        return json.dumps({"runs": recs, "warnings": self.warnings}, indent=2)


def _numeric(records, key):
    return np.array([np.nan if r.get(key) is None else float(r[key]) for r in records])


def plot_summary(records: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [str(r.get("name", i)) for i, r in enumerate(records)]
    x = np.arange(len(records))
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, (key, label) in zip(axes, [("accuracy", "test accuracy"),
                                       ("spikes_per_classification", "spikes per image"),
                                       ("energy_proxy", "energy proxy")]):
        ax.bar(x, np.nan_to_num(_numeric(records, key)), color="tab:blue")
        ax.set_xticks(x, names, rotation=30, ha="right", fontsize=8)
        ax.set_title(label)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(log: list[dict], path) -> None:
    """Per-epoch training accuracy and mean spike rate from a ``train`` log."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ep = [r["epoch"] for r in log]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(ep, [r["accuracy"] for r in log], marker="o", label="train")
    test = [(r["epoch"], r["test_accuracy"]) for r in log if r.get("test_accuracy") is not None]
    if test:
        a.plot(*zip(*test), "s", label="test")
    a.set_xlabel("epoch")
    a.set_ylabel("accuracy")
    a.legend()
    b.plot(ep, [r["spike_rate"] for r in log], marker="o", color="tab:red")
    b.set_xlabel("epoch")
    b.set_ylabel("mean spike rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(stats_paths, out_dir, train_logs=()) -> Summary:
    """Write ``summary.txt``, ``summary.tsv``, ``summary.json`` and PNG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = Summary.of([load_stats(p) for p in stats_paths])
    (out / "summary.txt").write_text(summary.to_text() + "\n")
    (out / "summary.tsv").write_text(summary.to_tsv())
    (out / "summary.json").write_text(summary.to_json())
    if summary.rows:
        plot_summary(summary.rows, out / "summary.png")
    for p in train_logs:
        log = [json.loads(line) for line in Path(p).read_text().splitlines() if line.strip()]
        if log:
            plot_training(log, out / f"{Path(p).stem}_training.png")
    return summary
