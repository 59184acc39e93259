"""Post-hoc reports: capsule activation profiles and run comparisons."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .charts import bar_chart, circle_grid
from .data import Dataset, batches
from .network import Model


@dataclass
class ActivationProfile:
    """Mean activation of each capsule per class over a test split."""

    matrix: np.ndarray        # [classes, capsules]
    layer: str
    per_class_counts: np.ndarray

    def csv_text(self):
        caps = self.matrix.shape[1]
        lines = ["class," + ",".join(f"cap{j}" for j in range(caps))]
        for c, row in enumerate(self.matrix):
            lines.append(f"{c}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def svg_text(self):
        return circle_grid(self.matrix.tolist(),
                           row_labels=[f"class {c}" for c in
                                       range(len(self.matrix))],
                           title=f"mean activations, layer {self.layer}")


def activation_profile(model: Model, dataset: Dataset, layer=None,
                       batch_size=256) -> ActivationProfile:
    """Average each capsule's activation over the test samples of each class.

    ``layer`` defaults to the last hidden routing layer; the class-capsule
    layer is excluded by default because its winning capsule is trivially
    the predicted class. Sample order does not matter.
    """
    names = [name for name, _, _ in model.routing_layers]
    if layer is None:
        hidden = [n for n in names if n != "class"]
        if not hidden:
            raise ValueError("model has no hidden routing layer to profile")
        layer = hidden[-1]
    if layer not in names and layer != "primary":
        raise ValueError(f"unknown layer {layer!r}; have "
                         f"{['primary'] + names}")
    classes = dataset.num_classes
    sums = None
    counts = np.zeros(classes, dtype=np.int64)
    with T.no_grad():
        for images, labels in batches(dataset, batch_size):
            _, states = model.forward_states(
                Tensor(images.astype(model.dtype)))
            acts = dict(states)[layer].activations.data
            if sums is None:
                sums = np.zeros((classes, acts.shape[-1]))
            np.add.at(sums, labels, acts)
            np.add.at(counts, labels, 1)
    matrix = sums / np.maximum(counts, 1)[:, None]
    return ActivationProfile(matrix, layer, counts)


# ---------------------------------------------------------------------------
# Run comparison reports
# ---------------------------------------------------------------------------

def read_run(run_dir):
    """Load one training run's metrics and metadata."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "run.json"
    metrics_path = run_dir / "metrics.csv"
    missing = [str(p) for p in (meta_path, metrics_path) if not p.exists()]
    if missing:
        raise FileNotFoundError(f"run {run_dir} is missing: "
                                f"{', '.join(missing)}")
    meta = json.loads(meta_path.read_text())
    with open(metrics_path) as f:
        rows = list(csv.DictReader(f))
    final_acc = None
    for row in rows:
        if row.get("test_acc"):
            final_acc = float(row["test_acc"])
    return {"name": run_dir.name, "dir": run_dir, "meta": meta,
            "rows": rows, "final_test_acc": final_acc}


def ablation_report(run_dirs, baseline=None):
    """Align final accuracies and FLOP totals across runs.

    All runs must carry the same dataset tag; deltas are against the named
    baseline run (default: the first).
    """
    if len(run_dirs) < 2:
        raise ValueError("ablation report needs at least 2 runs")
    runs = [read_run(d) for d in run_dirs]
    tags = {r["meta"].get("dataset_tag") for r in runs}
    if len(tags) > 1:
        raise ValueError(f"runs mix dataset tags: {sorted(map(str, tags))}")
    base_name = baseline or runs[0]["name"]
    base = next((r for r in runs if r["name"] == base_name), None)
    if base is None:
        raise ValueError(f"baseline run {base_name!r} not among runs")
    table = []
    for r in runs:
        acc = r["final_test_acc"]
        table.append({
            "run": r["name"],
            "variant": r["meta"].get("variant", ""),
            "test_acc": acc,
            "delta_vs_baseline": None if acc is None or
            base["final_test_acc"] is None
            else acc - base["final_test_acc"],
            "flops": r["meta"].get("flops_total"),
            "macs": r["meta"].get("macs_total"),
        })
    return table


def ablation_csv(table):
    cols = ["run", "variant", "test_acc", "delta_vs_baseline", "flops",
            "macs"]
    lines = [",".join(cols)]
    for row in table:
        lines.append(",".join(
            "" if row[c] is None else
            (repr(float(row[c])) if isinstance(row[c], float) else
             str(row[c])) for c in cols))
    return "\n".join(lines) + "\n"


def ablation_svg(table):
    labels = [row["run"] for row in table]
    values = [row["test_acc"] or 0.0 for row in table]
    return bar_chart(labels, values, title="final test accuracy by run",
                     y_label="test accuracy")
