"""Experiment bookkeeping and reporting: an append-only JSONL metrics store,
plain-text table rendering with cell-level provenance, few-shot curve plots,
and the published benchmark rows used for side-by-side comparison."""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError, DegenerateInputError, StoreError

KIND_FINETUNE = "finetune"
KIND_LINEAR = "linear_eval"

SOURCE_COMPUTED = "computed"
SOURCE_REFERENCE = "reference"

MISSING_CELL = "—"

_LAYOUTS = {
    "transfer": ("UCM", "EuroSAT", "Resisc45"),
    "linear": ("AID", "EuroSAT", "UCM"),
    "fewshot": ("AID", "EuroSAT", "UCM"),
}


@dataclass(frozen=True)
class MetricsRecord:
    """One aggregated experiment outcome (or one published number).

    `shots` is only meaningful for linear evaluation; reference rows must say
    where they come from via `citation`.
    """

    experiment_id: str
    kind: str
    method: str  # row label: pre-training strategy or source dataset
    dataset: str  # downstream dataset the accuracy is measured on
    mean_accuracy: float  # percent
    std_accuracy: float = 0.0
    n_runs: int = 1
    shots: int | None = None
    source: str = SOURCE_COMPUTED
    citation: str = ""
    config_hash: str = ""
    checkpoint_hash: str = ""

    def __post_init__(self):
        if not self.experiment_id:
            raise ConfigurationError("experiment_id must be non-empty")
        if self.kind not in (KIND_FINETUNE, KIND_LINEAR):
            raise ConfigurationError(f"unknown kind {self.kind!r}")
        if self.shots is not None and self.kind != KIND_LINEAR:
            raise ConfigurationError("shots only applies to linear evaluation")
        if self.shots is not None and self.shots < 1:
            raise ConfigurationError("shots must be >= 1")
        if self.source not in (SOURCE_COMPUTED, SOURCE_REFERENCE):
            raise ConfigurationError(f"unknown source {self.source!r}")
        if self.source == SOURCE_REFERENCE and not self.citation:
            raise ConfigurationError("reference records must carry a citation")
        if not (0.0 <= self.mean_accuracy <= 100.0):
            raise ConfigurationError("mean_accuracy must be a percentage in [0, 100]")
        if self.std_accuracy < 0:
            raise ConfigurationError("std_accuracy must be >= 0")
        if self.n_runs < 1:
            raise ConfigurationError("n_runs must be >= 1")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        raw = json.loads(line)
        try:
            return cls(**raw)
        except TypeError as e:
            raise StoreError(f"malformed record: {e}") from e


class MetricsStore:
    """Append-only JSONL store keyed by experiment_id. Appends hit disk
    immediately; duplicate ids are rejected rather than overwritten."""

    def __init__(self, path):
        self.path = Path(path)
        self._records: dict[str, MetricsRecord] = {}
        if self.path.exists():
            with open(self.path) as f:
                for lineno, line in enumerate(f, 1):
                    line = line.strip()
                    if not line:
                        continue
                    rec = MetricsRecord.from_json(line)
                    if rec.experiment_id in self._records:
                        raise StoreError(
                            f"{self.path}:{lineno}: duplicate experiment_id "
                            f"{rec.experiment_id!r}"
                        )
                    self._records[rec.experiment_id] = rec

    def __len__(self):
        return len(self._records)

    def __contains__(self, experiment_id):
        return experiment_id in self._records

    def append(self, record: MetricsRecord):
        if record.experiment_id in self._records:
            raise StoreError(f"duplicate experiment_id {record.experiment_id!r}")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as f:
            f.write(record.to_json() + "\n")
        self._records[record.experiment_id] = record

    def get(self, experiment_id: str) -> MetricsRecord:
        if experiment_id not in self._records:
            raise StoreError(f"no record with experiment_id {experiment_id!r}")
        return self._records[experiment_id]

    def records(self) -> list[MetricsRecord]:
        return list(self._records.values())


# --- tables -----------------------------------------------------------------


def _layout_filter(records, layout, dataset):
    if layout == "transfer":
        keep = [r for r in records if r.kind == KIND_FINETUNE]
    elif layout == "linear":
        keep = [r for r in records if r.kind == KIND_LINEAR and r.shots is None]
    elif layout == "fewshot":
        keep = [r for r in records if r.kind == KIND_LINEAR and r.shots is not None]
        if dataset is not None:
            keep = [r for r in keep if r.dataset == dataset]
    else:
        raise ConfigurationError(f"unknown table layout {layout!r}")
    return keep


def table_cells(records, layout: str, dataset: str | None = None):
    """(row label, column key) -> MetricsRecord for a layout; the same lookup
    the renderer uses, so every printed cell can be traced to its record.
    Later records win when two claim one cell."""
    keep = _layout_filter(records, layout, dataset)
    cells: dict[tuple[str, object], MetricsRecord] = {}
    for r in keep:
        col = r.shots if layout == "fewshot" and dataset is not None else (
            (r.dataset, r.shots) if layout == "fewshot" else r.dataset
        )
        cells[(r.method, col)] = r
    return cells


def _columns(records, layout, dataset):
    if layout == "fewshot":
        shot_values = sorted({r.shots for r in records})
        if dataset is not None:
            return shot_values
        datasets = [d for d in _LAYOUTS[layout] if any(r.dataset == d for r in records)]
        for r in records:
            if r.dataset not in datasets:
                datasets.append(r.dataset)
        return [(d, s) for d in datasets for s in shot_values]
    cols = [d for d in _LAYOUTS[layout] if any(r.dataset == d for r in records)]
    for r in records:
        if r.dataset not in cols:
            cols.append(r.dataset)
    return cols


def render_table(records, layout: str, dataset: str | None = None) -> str:
    """Fixed-width text table. Rows are methods in first-appearance order,
    columns are downstream datasets (or shot counts for a single-dataset
    few-shot table). Accuracies print with two decimals; missing cells show
    '—'; rows taken from published numbers are marked [ref]. Output is a pure
    function of the records, so re-rendering is byte-identical."""
    keep = _layout_filter(records, layout, dataset)
    if not keep:
        raise DegenerateInputError(f"no records for layout {layout!r}")
    cols = _columns(keep, layout, dataset)
    cells = table_cells(records, layout, dataset)

    methods: list[str] = []
    for r in keep:
        if r.method not in methods:
            methods.append(r.method)

    def col_name(c):
        if isinstance(c, tuple):
            return f"{c[0]}@{c[1]}"
        if layout == "fewshot" and dataset is not None:
            return f"n={c}"
        return str(c)

    rows = []
    for m in methods:
        marked = any(
            cells.get((m, c)) is not None and cells[(m, c)].source == SOURCE_REFERENCE
            for c in cols
        )
        label = f"{m} [ref]" if marked else m
        values = []
        for c in cols:
            rec = cells.get((m, c))
            values.append(MISSING_CELL if rec is None else f"{rec.mean_accuracy:.2f}")
        rows.append((label, values))

    header = [""] + [col_name(c) for c in cols]
    widths = [max(len(header[0]), *(len(lbl) for lbl, _ in rows))]
    for j in range(len(cols)):
        widths.append(max(len(header[j + 1]), *(len(vals[j]) for _, vals in rows)))

    def fmt(items):
        first = items[0].ljust(widths[0])
        rest = [items[j + 1].rjust(widths[j + 1]) for j in range(len(items) - 1)]
        return "  ".join([first] + rest).rstrip()

    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt([lbl] + vals) for lbl, vals in rows)
    return "\n".join(lines) + "\n"


# --- plots ------------------------------------------------------------------


def emit_plot(records, png_path, dataset: str | None = None) -> Path:
    """Few-shot accuracy curves (accuracy vs shots, one line per method and
    dataset). Writes the PNG plus a JSON sidecar holding the exact plotted
    values; the sidecar is the citable artifact, the PNG is for looking at."""
    keep = _layout_filter(records, "fewshot", dataset)
    if not keep:
        raise DegenerateInputError("no few-shot linear evaluation records to plot")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)

    series: dict[tuple[str, str], list[MetricsRecord]] = {}
    for r in keep:
        series.setdefault((r.method, r.dataset), []).append(r)

    fig, ax = plt.subplots(figsize=(6, 4))
    sidecar = []
    for (method, ds), recs in sorted(series.items()):
        recs = sorted(recs, key=lambda r: r.shots)
        xs = [r.shots for r in recs]
        ys = [r.mean_accuracy for r in recs]
        label = method if dataset is not None else f"{method} ({ds})"
        ax.plot(xs, ys, marker="o", label=label)
        sidecar.extend(
            {
                "method": r.method,
                "dataset": r.dataset,
                "shots": r.shots,
                "mean_accuracy": r.mean_accuracy,
                "std_accuracy": r.std_accuracy,
                "experiment_id": r.experiment_id,
            }
            for r in recs
        )
    ax.set_xlabel("labeled samples per class")
    ax.set_ylabel("accuracy (%)")
    if dataset is not None:
        ax.set_title(dataset)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)

    sidecar_path = png_path.with_suffix(".json")
    with open(sidecar_path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return png_path


# --- published comparison rows ------------------------------------------------


_CITE_TRANSFER = "published benchmark: fine-tuning comparison"
_CITE_LINEAR = "published benchmark: linear evaluation"
_CITE_FEWSHOT = "published benchmark: few-shot linear evaluation"

_REF_TRANSFER = {
    # method -> {downstream: accuracy}
    "Scratch": {"UCM": 95.7, "EuroSAT": 98.5, "Resisc45": 95.5},
    "ImageNet": {"UCM": 99.2, "EuroSAT": 99.1, "Resisc45": 96.6},
    "In-domain supervised": {"UCM": 99.6, "EuroSAT": 99.2, "Resisc45": 96.8},
    "In-domain self-supervised": {"UCM": 99.9, "EuroSAT": 99.3, "Resisc45": 97.2},
}

_REF_LINEAR = {
    # pre-training dataset -> accuracies on (AID, EuroSAT, UCM)
    "Resisc45": (97.62, 97.75, 98.24),
    "MLRSNet": (97.78, 98.45, 98.85),
    "PatternNet": (97.83, 99.26, 99.90),
}

_REF_FEWSHOT = {
    # pre-training source -> {downstream: accuracies at 5/10/20/50 shots}
    "ImageNet": {
        "AID": (45.45, 52.36, 63.14, 70.17),
        "EuroSAT": (39.36, 46.45, 51.22, 59.71),
        "UCM": (40.43, 50.33, 56.72, 63.21),
    },
    "Resisc45": {
        "AID": (72.32, 75.44, 81.74, 86.56),
        "EuroSAT": (77.50, 80.12, 85.16, 90.93),
        "UCM": (77.89, 82.11, 87.95, 92.15),
    },
    "MLRSNet": {
        "AID": (73.34, 77.10, 82.52, 89.52),
        "EuroSAT": (79.31, 83.27, 88.87, 92.58),
        "UCM": (80.92, 84.60, 90.37, 94.85),
    },
    "PatternNet": {
        "AID": (73.89, 78.25, 85.13, 89.33),
        "EuroSAT": (80.02, 84.19, 89.55, 92.31),
        "UCM": (81.65, 85.87, 91.70, 94.66),
    },
}

_SHOTS = (5, 10, 20, 50)


def reference_records() -> list[MetricsRecord]:
    """Published comparison numbers as store records, for rendering alongside
    computed results."""
    out = []
    for method, row in _REF_TRANSFER.items():
        for ds, acc in row.items():
            out.append(
                MetricsRecord(
                    experiment_id=f"ref-transfer-{method.lower().replace(' ', '-')}-{ds.lower()}",
                    kind=KIND_FINETUNE,
                    method=method,
                    dataset=ds,
                    mean_accuracy=acc,
                    source=SOURCE_REFERENCE,
                    citation=_CITE_TRANSFER,
                )
            )
    for method, row in _REF_LINEAR.items():
        for ds, acc in zip(("AID", "EuroSAT", "UCM"), row):
            out.append(
                MetricsRecord(
                    experiment_id=f"ref-linear-{method.lower()}-{ds.lower()}",
                    kind=KIND_LINEAR,
                    method=method,
                    dataset=ds,
                    mean_accuracy=acc,
                    source=SOURCE_REFERENCE,
                    citation=_CITE_LINEAR,
                )
            )
    for method, by_ds in _REF_FEWSHOT.items():
        for ds, accs in by_ds.items():
            for shots, acc in zip(_SHOTS, accs):
                out.append(
                    MetricsRecord(
                        experiment_id=f"ref-fewshot-{method.lower()}-{ds.lower()}-{shots}",
                        kind=KIND_LINEAR,
                        method=method,
                        dataset=ds,
                        shots=shots,
                        mean_accuracy=acc,
                        source=SOURCE_REFERENCE,
                        citation=_CITE_FEWSHOT,
                    )
                )
    return out
