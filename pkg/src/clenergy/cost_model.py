"""Labeling energy, total training cost, break-even and Pareto analysis.

Energies are carried in joules internally and converted to kWh only at the
record boundary (``*_kwh`` fields).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import InvalidArgumentError, RecordParseError
from .power_meter import JOULES_PER_KWH


class Method(str, Enum):
    BASELINE = "Baseline"
    SIMCLR = "SimCLR"
    SUPCON = "SupCon"
    SEMI = "SemiSupervised"


#: label fraction every method implies unless it is semi-supervised
FIXED_LABEL_FRACTION = {Method.BASELINE: 1.0, Method.SUPCON: 1.0, Method.SIMCLR: 0.0}


@dataclass(frozen=True)
class LabelingCostModel:
    power_watts: float = 30.0
    seconds_per_label: float = 10.0

    def __post_init__(self) -> None:
        if not (self.power_watts > 0 and self.seconds_per_label > 0):
            raise InvalidArgumentError(
                f"labeling power and time must be > 0, got {self.power_watts} W, "
                f"{self.seconds_per_label} s"
            )
        if math.isinf(self.power_watts) or math.isinf(self.seconds_per_label):
            raise InvalidArgumentError("labeling parameters must be finite")

    @property
    def joules_per_label(self) -> float:
        return self.power_watts * self.seconds_per_label


DEFAULT_LABELING = LabelingCostModel()


@dataclass
class RegimeRecord:
    """One (method, data fraction, label fraction) outcome.

    ``component_kwh`` optionally splits ``train_energy_kwh`` by hardware
    component; ``status`` is ``"ok"`` or an error description for grid cells
    that failed.
    """

    method: Method
    dataset_size_k: int
    data_fraction: float
    label_fraction: float
    accuracy_pct: float
    train_energy_kwh: float
    labeling_energy_kwh: float = 0.0
    dataset: str = ""
    seed: int | None = None
    component_kwh: dict[str, float] | None = None
    status: str = "ok"

    def __post_init__(self) -> None:
        self.method = Method(self.method)
        for name in ("data_fraction", "label_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {v}")
        fixed = FIXED_LABEL_FRACTION.get(self.method)
        if fixed is not None and self.label_fraction != fixed:
            raise InvalidArgumentError(
                f"{self.method.value} records must have label_fraction {fixed}, "
                f"got {self.label_fraction}"
            )
        if self.dataset_size_k < 0:
            raise InvalidArgumentError("dataset_size_k must be >= 0")
        if not (self.train_energy_kwh >= 0 and self.labeling_energy_kwh >= 0):
            raise InvalidArgumentError("energies must be >= 0")
        if self.status == "ok" and not 0.0 <= self.accuracy_pct <= 100.0:
            raise InvalidArgumentError(f"accuracy must be in [0, 100], got {self.accuracy_pct}")

    @property
    def labeled_count(self) -> int:
        # round half up
        return int(math.floor(self.dataset_size_k * self.data_fraction * self.label_fraction + 0.5))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RegimeRecord:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgumentError(f"unknown record fields: {sorted(unknown)}")
        return cls(**d)


def labeling_energy_joules(model: LabelingCostModel, labeled_count: int) -> float:
    if labeled_count < 0:
        raise InvalidArgumentError(f"labeled count must be >= 0, got {labeled_count}")
    return model.power_watts * labeled_count * model.seconds_per_label


def labeling_energy(model: LabelingCostModel, labeled_count: int) -> float:
    """Energy in kWh to annotate ``labeled_count`` samples at the desk."""
    return labeling_energy_joules(model, labeled_count) / JOULES_PER_KWH


def total_energy(record: RegimeRecord, model: LabelingCostModel) -> float:
    """Training plus labeling energy in kWh.

    The labeling term is also stored on ``record.labeling_energy_kwh``.
    """
    record.labeling_energy_kwh = labeling_energy(model, record.labeled_count)
    return record.train_energy_kwh + record.labeling_energy_kwh


def _total_no_write(record: RegimeRecord, model: LabelingCostModel) -> float:
    return record.train_energy_kwh + labeling_energy(model, record.labeled_count)


def breakeven_label_seconds(
    labeled_rec: RegimeRecord, unlabeled_rec: RegimeRecord, power_watts: float
) -> float | None:
    """Seconds per label at which both records cost the same total energy.

    Returns None when the labeled method's training alone already costs more
    than the unlabeled method.
    """
    n = labeled_rec.labeled_count
    if n <= 0:
        raise InvalidArgumentError("labeled record has no labeled samples")
    if unlabeled_rec.labeled_count != 0:
        raise InvalidArgumentError("unlabeled record carries labeling cost")
    if not power_watts > 0:
        raise InvalidArgumentError(f"labeling power must be > 0, got {power_watts}")
    gap_j = (unlabeled_rec.train_energy_kwh - labeled_rec.train_energy_kwh) * JOULES_PER_KWH
    if gap_j < 0:
        return None
    return gap_j / (power_watts * n)


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """Weak Pareto dominance on (accuracy, total energy)."""
    return a[0] >= b[0] and a[1] <= b[1] and (a[0] > b[0] or a[1] < b[1])


def pareto_frontier(
    records: Sequence[RegimeRecord], model: LabelingCostModel
) -> list[RegimeRecord]:
    """Non-dominated records ordered by ascending total energy.

    Sweeps records by (energy asc, accuracy desc) keeping those that beat the
    best accuracy seen so far; exact duplicates are all kept.
    """
    if not records:
        raise InvalidArgumentError("pareto_frontier needs at least one record")
    keyed = [(_total_no_write(r, model), r.accuracy_pct, i) for i, r in enumerate(records)]
    keyed.sort(key=lambda k: (k[0], -k[1], k[2]))
    out: list[RegimeRecord] = []
    best_acc = -math.inf
    last: tuple[float, float] | None = None
    for energy, acc, i in keyed:
        if acc > best_acc or (energy, acc) == last:
            out.append(records[i])
            best_acc = max(best_acc, acc)
            last = (energy, acc)
    return out


# --------------------------------------------------------------------------- reference data

CIFAR10_TRAIN = 50_000
# 27,000 images minus a 5,000-image test split; the train/validation split is unreported
EUROSAT_TRAIN = 22_000

# (method, fraction, cifar acc, cifar kWh, eurosat acc, eurosat kWh)
_TABLE_ROWS = [
    (Method.BASELINE, 0.2, 84.00, 0.26, 73.24, 0.41),
    (Method.BASELINE, 0.5, 90.08, 0.63, 93.40, 1.03),
    (Method.BASELINE, 1.0, 93.40, 1.26, 94.59, 2.05),
    (Method.SIMCLR, 0.2, 78.24, 0.56, 91.26, 0.25),
    (Method.SIMCLR, 0.5, 82.36, 1.26, 94.84, 0.61),
    (Method.SIMCLR, 1.0, 90.36, 2.67, 97.06, 1.14),
    (Method.SUPCON, 0.2, 85.54, 0.53, 93.69, 0.24),
    (Method.SUPCON, 0.5, 92.15, 1.25, 96.71, 0.61),
    (Method.SUPCON, 1.0, 94.37, 2.51, 97.92, 1.14),
    (Method.SEMI, 0.2, 85.48, 0.45, 94.37, 0.46),
    (Method.SEMI, 0.5, 91.41, 1.08, 96.50, 1.10),
    (Method.SEMI, 1.0, 94.36, 2.14, 97.85, 2.18),
]


def reference_table() -> list[RegimeRecord]:
    """Published accuracy/energy results for CIFAR-10 then EuroSAT (24 rows)."""
    rows = []
    for dataset, size, acc_col in (("CIFAR-10", CIFAR10_TRAIN, 2), ("EuroSAT", EUROSAT_TRAIN, 4)):
        for row in _TABLE_ROWS:
            method, frac = row[0], row[1]
            rows.append(
                RegimeRecord(
                    method=method,
                    dataset_size_k=size,
                    data_fraction=frac,
                    label_fraction=FIXED_LABEL_FRACTION.get(method, 0.5),
                    accuracy_pct=row[acc_col],
                    train_energy_kwh=row[acc_col + 1],
                    dataset=dataset,
                )
            )
    return rows


def reference_table_csv() -> str:
    """Reference table laid out like the published table, one row per method/fraction."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "data_pct", "cifar10_acc_pct", "cifar10_kwh", "eurosat_acc_pct", "eurosat_kwh"])
    for method, frac, ca, ce, ea, ee in _TABLE_ROWS:
        name = "CCSSL(50)" if method is Method.SEMI else method.value
        w.writerow([name, int(round(frac * 100)), f"{ca:.2f}", f"{ce:.2f}", f"{ea:.2f}", f"{ee:.2f}"])
    return buf.getvalue()


# --------------------------------------------------------------------------- JSON Lines I/O


def dumps_records(records: Iterable[RegimeRecord]) -> str:
    return "".join(json.dumps(r.to_dict()) + "\n" for r in records)


def write_records(path: str | Path, records: Iterable[RegimeRecord]) -> None:
    Path(path).write_text(dumps_records(records), encoding="utf-8")


def parse_records(text: str) -> list[RegimeRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordParseError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(d, dict):
            raise RecordParseError(lineno, "expected a JSON object")
        try:
            out.append(RegimeRecord.from_dict(d))
        except (TypeError, ValueError) as exc:
            raise RecordParseError(lineno, str(exc)) from None
    return out


def read_records(path: str | Path) -> list[RegimeRecord]:
    return parse_records(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class BreakdownRow:
    """Energy of one record split into CPU, GPU, RAM and labeling joules.

    Hardware columns are None when the record carries no component split;
    ``train_j`` always holds the full training energy.
    """

    method: str
    cpu_j: float | None
    gpu_j: float | None
    ram_j: float | None
    labeling_j: float
    train_j: float = field(default=0.0)


def breakdown(record: RegimeRecord, model: LabelingCostModel) -> BreakdownRow:
    label = record.method.value
    if record.method is Method.SEMI:
        label = f"{label}({round(record.label_fraction * 100)})"
    if record.dataset:
        label = f"{label} {record.dataset} {round(record.data_fraction * 100)}%"
    parts = record.component_kwh or {}
    def j(name: str) -> float | None:
        return parts[name] * JOULES_PER_KWH if name in parts else None
    return BreakdownRow(
        method=label,
        cpu_j=j("cpu"),
        gpu_j=j("gpu"),
        ram_j=j("ram"),
        labeling_j=labeling_energy_joules(model, record.labeled_count),
        train_j=record.train_energy_kwh * JOULES_PER_KWH,
    )
