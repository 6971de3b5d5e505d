"""Desk-scale instrumented training on synthetic Gaussian blobs.

A two-layer tanh perceptron stands in for the image backbone. Every method
trains it by mini-batch gradient descent with momentum and a step learning
rate schedule, then gets scored by kNN accuracy on its normalized outputs.
Energy comes from a :class:`~clenergy.power_meter.MeterSession` that runs
alongside training.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
from collections.abc import Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from ._kernels import backend as _k
from .cost_model import (
    DEFAULT_LABELING,
    FIXED_LABEL_FRACTION,
    LabelingCostModel,
    Method,
    RegimeRecord,
    dumps_records,
    total_energy,
)
from .errors import DivergenceError, InvalidArgumentError
from .knn import DEFAULT_K, DEFAULT_TAU, LabeledEmbeddingSet, knn_accuracy
from .power_meter import (
    Component,
    CpuCounter,
    GpuPoller,
    MeterSession,
    MemoryEstimator,
    PowerSource,
    Synthetic,
    TraceReplay,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = {
    Method.SIMCLR: 0.1,
    Method.SEMI: 0.1,
    Method.SUPCON: 0.5,
    Method.BASELINE: 0.1,
}
DEFAULT_SEMI_LABEL_FRACTION = 0.5
DESK_INTERVAL_S = 0.1


# --------------------------------------------------------------------------- data


@dataclass(frozen=True)
class DatasetParams:
    n_classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    dim: int = 16
    radius: float = 1.0
    noise: float = 0.35
    seed: int = 0


@dataclass(frozen=True)
class SyntheticDataset:
    """Train blobs plus an independent held-out draw from the same centers."""

    points: np.ndarray
    labels: np.ndarray
    test_points: np.ndarray
    test_labels: np.ndarray
    centers: np.ndarray
    params: DatasetParams

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def make_dataset(params: DatasetParams = DatasetParams()) -> SyntheticDataset:
    if params.n_classes < 2:
        raise InvalidArgumentError("need at least two classes")
    if params.per_class <= 0 or params.test_per_class < 0:
        raise InvalidArgumentError("per-class counts must be positive")
    if params.noise < 0 or params.radius <= 0 or params.dim < 1:
        raise InvalidArgumentError("noise must be >= 0, radius > 0 and dim >= 1")
    rng = np.random.default_rng(params.seed)
    centers = rng.standard_normal((params.n_classes, params.dim))
    centers *= params.radius / np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(params.n_classes), per_class)
        noise = rng.standard_normal((labels.size, params.dim)) * params.noise
        return centers[labels] + noise, labels

    points, labels = draw(params.per_class)
    test_points, test_labels = draw(params.test_per_class)
    return SyntheticDataset(points, labels, test_points, test_labels, centers, params)


def augment(point: np.ndarray, seed: int | np.random.SeedSequence, sigma: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Two independently jittered views of ``point``."""
    rng = np.random.default_rng(seed)
    point = np.asarray(point, dtype=np.float64)
    noise = rng.standard_normal((2,) + point.shape) * sigma
    return point + noise[0], point + noise[1]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def subsample_regime(
    dataset: SyntheticDataset, data_fraction: float, label_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Class-stratified subset indices and a stratified labeled mask over them.

    Returns ``(indices, labeled)`` with ``indices`` in a seed-permuted order.
    """
    if not 0.0 < data_fraction <= 1.0:
        raise InvalidArgumentError(f"data_fraction must be in (0, 1], got {data_fraction}")
    if not 0.0 <= label_fraction <= 1.0:
        raise InvalidArgumentError(f"label_fraction must be in [0, 1], got {label_fraction}")
    rng = np.random.default_rng(seed)
    chosen, labeled = [], []
    for c in np.unique(dataset.labels):
        members = rng.permutation(np.flatnonzero(dataset.labels == c))
        k = _round_half_up(members.size * data_fraction)
        if k == 0:
            raise InvalidArgumentError(f"data_fraction {data_fraction} leaves class {c} empty")
        take = members[:k]
        chosen.append(take)
        labeled.append(np.arange(k) < _round_half_up(k * label_fraction))
    idx = np.concatenate(chosen)
    mask = np.concatenate(labeled)
    order = rng.permutation(idx.size)
    return idx[order], mask[order]


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class MeterSpec:
    """How a training cell is metered.

    ``kind`` is ``synthetic`` (constant watts per component), ``trace``
    (looped replay of a trace CSV) or ``live`` (RAPL, NVML and process RSS,
    whichever are available). Synthetic and trace meters run on the work
    clock.
    """

    kind: str = "synthetic"
    interval_s: float = DESK_INTERVAL_S
    cpu_watts: float = 15.0
    gpu_watts: float = 60.0
    ram_gb: float = 6.0
    trace: str | None = None

    def sources(self) -> list[PowerSource]:
        if self.kind == "synthetic":
            return [
                Synthetic(Component.CPU, self.cpu_watts),
                Synthetic(Component.GPU, self.gpu_watts),
                MemoryEstimator(self.ram_gb),
            ]
        if self.kind == "trace":
            if self.trace is None:
                raise InvalidArgumentError("trace meter needs a trace path")
            return [TraceReplay(resolve_resource(self.trace), loop=True)]
        if self.kind == "live":
            found: list[PowerSource] = [MemoryEstimator()]
            for cls in (CpuCounter, GpuPoller):
                try:
                    found.append(cls())
                except Exception as exc:  # noqa: BLE001
                    logger.info("live source %s unavailable: %s", cls.__name__, exc)
            return found
        raise InvalidArgumentError(f"unknown meter kind {self.kind!r}")

    def session(self, run_id: str) -> MeterSession:
        clock = "wall" if self.kind == "live" else "work"
        return MeterSession(self.sources(), interval_s=self.interval_s, run_id=run_id, clock=clock)


@dataclass(frozen=True)
class WorkModel:
    """Seconds of compute charged to the work clock per training step."""

    seconds_per_view: float = 2e-5
    seconds_per_pair: float = 2e-9

    def step_seconds(self, views: int, pairs: int) -> float:
        return self.seconds_per_view * views + self.seconds_per_pair * pairs


@dataclass(frozen=True)
class ExperimentConfig:
    method: Method
    data_fraction: float = 1.0
    label_fraction: float | None = None
    epochs: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    milestones: tuple[float, ...] = (0.7, 0.8, 0.9)
    batch_size: int = 32
    temperature: float | None = None
    pseudo_threshold: float = 0.9
    aug_sigma: float = 0.1
    hidden_dim: int = 32
    embed_dim: int = 8
    knn_k: int = DEFAULT_K
    knn_tau: float = DEFAULT_TAU
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    meter: MeterSpec = field(default_factory=MeterSpec)
    labeling: LabelingCostModel = DEFAULT_LABELING
    work: WorkModel = field(default_factory=WorkModel)

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.label_fraction is None:
            lf = FIXED_LABEL_FRACTION.get(self.method, DEFAULT_SEMI_LABEL_FRACTION)
            object.__setattr__(self, "label_fraction", lf)
        if self.temperature is None:
            object.__setattr__(self, "temperature", DEFAULT_TEMPERATURE[self.method])
        if not 0.0 < self.data_fraction <= 1.0:
            raise InvalidArgumentError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        fixed = FIXED_LABEL_FRACTION.get(self.method)
        if fixed is not None and self.label_fraction != fixed:
            raise InvalidArgumentError(f"{self.method.value} implies label_fraction {fixed}")
        if self.method is Method.SEMI and not 0.0 < self.label_fraction <= 1.0:
            raise InvalidArgumentError("semi-supervised label_fraction must be in (0, 1]")
        if list(self.milestones) != sorted(self.milestones) or any(not 0 < m < 1 for m in self.milestones):
            raise InvalidArgumentError("milestones must be sorted fractions in (0, 1)")
        if self.epochs < 0 or self.batch_size < 2 or self.lr <= 0 or not self.temperature > 0:
            raise InvalidArgumentError("epochs >= 0, batch_size >= 2, lr > 0 and temperature > 0 required")
        if not self.seeds:
            raise InvalidArgumentError("at least one seed is required")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for ``epoch``: x0.1 at every milestone already passed."""
        passed = sum(epoch >= _round_half_up(m * self.epochs) for m in self.milestones)
        return self.lr * 0.1**passed


# --------------------------------------------------------------------------- model


@dataclass
class Encoder:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None
    losses: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, d_in: int, hidden: int, d_out: int, rng: np.random.Generator, n_classes: int | None = None) -> Encoder:
        enc = cls(
            w1=rng.standard_normal((d_in, hidden)) / math.sqrt(d_in),
            b1=np.zeros(hidden),
            w2=rng.standard_normal((hidden, d_out)) / math.sqrt(hidden),
            b2=np.zeros(d_out),
        )
        if n_classes is not None:
            enc.head_w = rng.standard_normal((d_out, n_classes)) / math.sqrt(d_out)
            enc.head_b = np.zeros(n_classes)
        return enc

    def params(self) -> list[np.ndarray]:
        ps = [self.w1, self.b1, self.w2, self.b2]
        if self.head_w is not None:
            ps += [self.head_w, self.head_b]
        return ps

    def forward(self, x: np.ndarray) -> np.ndarray:
        _, e = _k.mlp_forward(np.ascontiguousarray(x, dtype=np.float64), self.w1, self.b1, self.w2, self.b2)
        return e

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Unit-norm encoder outputs."""
        e = self.forward(x)
        norms = np.linalg.norm(e, axis=1, keepdims=True)
        return e / np.where(norms == 0, 1.0, norms)


def contrastive_batch_groups(method: Method, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Groups and segments for a ``[view_a; view_b]`` batch of ``labels.size`` samples."""
    b = labels.size
    if method is Method.SUPCON:
        g = labels
    else:
        g = np.arange(b)
    return np.concatenate([g, g]).astype(np.int64), np.zeros(2 * b, dtype=np.int64)


def _step(method: Method, enc: Encoder, x: np.ndarray, y: np.ndarray, cfg: ExperimentConfig) -> tuple[float, list[np.ndarray], int, int]:
    """One forward/backward pass. Returns (summed loss, grads, views, pairs)."""
    b = y.size
    if method is Method.BASELINE:
        out = _k.ce_step(x, y, enc.w1, enc.b1, enc.w2, enc.b2, enc.head_w, enc.head_b)
        return out[0], list(out[1:]), b, b * enc.head_w.shape[1]
    if method is Method.SEMI:
        out = _k.semi_step(x, enc.w1, enc.b1, enc.w2, enc.b2, y, cfg.temperature, cfg.pseudo_threshold)
        n_lab = int(np.count_nonzero(y >= 0))
        pairs = (2 * b) ** 2 + n_lab * (b - n_lab)
    else:
        groups, segments = contrastive_batch_groups(method, y)
        out = _k.contrastive_step(x, enc.w1, enc.b1, enc.w2, enc.b2, groups, segments, cfg.temperature)
        pairs = (2 * b) ** 2
    return out[0], list(out[1:]), 2 * b, pairs


def _batch_labels(method: Method, labels: np.ndarray, labeled: np.ndarray) -> np.ndarray:
    if method is Method.SIMCLR:
        return np.full(labels.size, -1, dtype=np.int64)
    if method is Method.SEMI:
        return np.where(labeled, labels, -1).astype(np.int64)
    return labels.astype(np.int64)


def train_encoder(
    config: ExperimentConfig,
    dataset: SyntheticDataset,
    session: MeterSession,
    seed: int | None = None,
) -> tuple[Encoder, RegimeRecord]:
    """Train one cell, metering it with ``session``, and score it by kNN.

    The session is started here and stopped before evaluation.
    """
    seed = config.seeds[0] if seed is None else seed
    method = config.method
    sub_seed, init_seed, data_seed = np.random.SeedSequence(seed).spawn(3)
    idx, labeled = subsample_regime(dataset, config.data_fraction, config.label_fraction, sub_seed)
    x_all = dataset.points[idx]
    y_all = dataset.labels[idx]
    y_train = _batch_labels(method, y_all, labeled)
    n, d_in = x_all.shape
    rng = np.random.default_rng(data_seed)
    enc = Encoder.init(
        d_in,
        config.hidden_dim,
        config.embed_dim,
        np.random.default_rng(init_seed),
        n_classes=dataset.params.n_classes if method is Method.BASELINE else None,
    )
    velocity = [np.zeros_like(p) for p in enc.params()]
    bs = min(config.batch_size, n)

    session.start()
    try:
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            perm = rng.permutation(n)
            noise = rng.standard_normal((2, n, d_in)) * config.aug_sigma
            epoch_loss = 0.0
            for lo in range(0, n, bs):
                b_idx = perm[lo : lo + bs]
                if b_idx.size < 2:
                    continue
                xa = x_all[b_idx] + noise[0, lo : lo + b_idx.size]
                y = y_train[b_idx]
                if method is Method.BASELINE:
                    x = np.ascontiguousarray(xa)
                else:
                    x = np.concatenate([xa, x_all[b_idx] + noise[1, lo : lo + b_idx.size]])
                value, grads, views, pairs = _step(method, enc, x, y, config)
                # optimize the per-anchor mean; the reported value stays a sum
                scale = 1.0 / views
                for p, v, g in zip(enc.params(), velocity, grads):
                    v *= config.momentum
                    v += g * scale
                    p -= lr * v
                epoch_loss += value / views
                session.advance(config.work.step_seconds(views, pairs))
            if not math.isfinite(epoch_loss):
                raise DivergenceError(epoch, epoch_loss)
            enc.losses.append(epoch_loss)
    finally:
        ledger = session.stop()

    train_set = LabeledEmbeddingSet(enc.embed(x_all), y_all)
    test_set = LabeledEmbeddingSet(enc.embed(dataset.test_points), dataset.test_labels)
    acc = knn_accuracy(train_set, test_set, k=min(config.knn_k, n), tau=config.knn_tau)
    record = RegimeRecord(
        method=method,
        dataset_size_k=dataset.size,
        data_fraction=config.data_fraction,
        label_fraction=config.label_fraction,
        accuracy_pct=acc,
        train_energy_kwh=ledger.kwh(),
        dataset="blobs",
        seed=seed,
        component_kwh={c.value: ledger.kwh(c) for c in Component},
    )
    total_energy(record, config.labeling)
    return enc, record


def raw_knn_accuracy(dataset: SyntheticDataset, k: int = DEFAULT_K, tau: float = DEFAULT_TAU) -> float:
    """kNN accuracy on the normalized raw inputs, as an encoder-free reference."""
    train = LabeledEmbeddingSet.from_raw(dataset.points, dataset.labels)
    test = LabeledEmbeddingSet.from_raw(dataset.test_points, dataset.test_labels)
    return knn_accuracy(train, test, k=k, tau=tau)


# --------------------------------------------------------------------------- grids


@dataclass(frozen=True)
class AggregateRow:
    method: str
    data_fraction: float
    label_fraction: float
    acc_mean: float
    acc_std: float
    train_kwh_mean: float
    label_kwh: float
    total_kwh: float
    train_kwh_std: float
    n_ok: int


AGGREGATE_COLUMNS = [f.name for f in dataclasses.fields(AggregateRow)]


@dataclass
class GridResult:
    records: list[RegimeRecord]
    aggregates: list[AggregateRow]

    def jsonl(self) -> str:
        return dumps_records(self.records)

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for row in self.aggregates:
            w.writerow([getattr(row, c) for c in AGGREGATE_COLUMNS])
        return buf.getvalue()

    def aggregate(self, method: Method | str, data_fraction: float, label_fraction: float | None = None) -> AggregateRow:
        method = Method(method).value
        for row in self.aggregates:
            if row.method == method and row.data_fraction == data_fraction and (
                label_fraction is None or row.label_fraction == label_fraction
            ):
                return row
        raise KeyError((method, data_fraction, label_fraction))


def _std(xs: Sequence[float]) -> float:
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def _aggregate(config: ExperimentConfig, records: Sequence[RegimeRecord]) -> AggregateRow:
    ok = [r for r in records if r.status == "ok"]
    acc = [r.accuracy_pct for r in ok]
    train = [r.train_energy_kwh for r in ok]
    label = records[0].labeling_energy_kwh if records else 0.0
    train_mean = statistics.fmean(train) if train else math.nan
    return AggregateRow(
        method=config.method.value,
        data_fraction=config.data_fraction,
        label_fraction=config.label_fraction,
        acc_mean=statistics.fmean(acc) if acc else math.nan,
        acc_std=_std(acc),
        train_kwh_mean=train_mean,
        label_kwh=label,
        total_kwh=train_mean + label,
        train_kwh_std=_std(train),
        n_ok=len(ok),
    )


def run_id_for(config: ExperimentConfig, seed: int) -> str:
    return f"{config.method.value}-d{config.data_fraction:g}-l{config.label_fraction:g}-s{seed}"


def run_grid(configs: Sequence[ExperimentConfig], dataset: SyntheticDataset) -> GridResult:
    """Train every (config, seed) cell; a diverging cell is recorded, not raised."""
    if not configs:
        raise InvalidArgumentError("run_grid needs at least one config")
    records: list[RegimeRecord] = []
    aggregates: list[AggregateRow] = []
    for cfg in configs:
        cell_records = []
        for seed in cfg.seeds:
            session = cfg.meter.session(run_id_for(cfg, seed))
            try:
                _, rec = train_encoder(cfg, dataset, session, seed)
            except DivergenceError as exc:
                logger.warning("cell %s diverged: %s", run_id_for(cfg, seed), exc)
                ledger = session.stop()
                rec = RegimeRecord(
                    method=cfg.method,
                    dataset_size_k=dataset.size,
                    data_fraction=cfg.data_fraction,
                    label_fraction=cfg.label_fraction,
                    accuracy_pct=0.0,
                    train_energy_kwh=ledger.kwh(),
                    dataset="blobs",
                    seed=seed,
                    component_kwh={c.value: ledger.kwh(c) for c in Component},
                    status=f"diverged at epoch {exc.epoch}",
                )
                total_energy(rec, cfg.labeling)
            cell_records.append(rec)
        records.extend(cell_records)
        aggregates.append(_aggregate(cfg, cell_records))
    return GridResult(records, aggregates)


# --------------------------------------------------------------------------- config files

BUNDLED_PREFIX = "bundled:"


def resolve_resource(path: str) -> Path:
    """Paths prefixed ``bundled:`` point into the package's ``configs`` directory."""
    if path.startswith(BUNDLED_PREFIX):
        return Path(str(resources.files("clenergy") / "configs" / path[len(BUNDLED_PREFIX) :]))
    return Path(path)


def _build(cls: type, data: dict[str, Any], where: str) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidArgumentError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"{where}: {exc}") from None


def configs_from_dict(spec: dict[str, Any], base_dir: Path | None = None) -> tuple[DatasetParams, list[ExperimentConfig]]:
    """Expand an experiment file into dataset parameters and cell configs.

    Cells come from ``"cells"`` (explicit list) and/or ``"grid"``
    (``methods`` x ``data_fractions``). ``"defaults"`` apply to every cell.
    """
    known = {"dataset", "defaults", "meter", "labeling", "work", "seeds", "grid", "cells", "description"}
    unknown = set(spec) - known
    if unknown:
        raise InvalidArgumentError(f"unknown top-level keys {sorted(unknown)}")
    dataset = _build(DatasetParams, spec.get("dataset", {}), "dataset")
    meter_d = dict(spec.get("meter", {}))
    trace = meter_d.get("trace")
    if trace and base_dir is not None and not trace.startswith(BUNDLED_PREFIX) and not Path(trace).is_absolute():
        meter_d["trace"] = str(base_dir / trace)
    shared: dict[str, Any] = dict(spec.get("defaults", {}))
    shared["meter"] = _build(MeterSpec, meter_d, "meter")
    shared["labeling"] = _build(LabelingCostModel, spec.get("labeling", {}), "labeling")
    shared["work"] = _build(WorkModel, spec.get("work", {}), "work")
    if "seeds" in spec:
        shared["seeds"] = tuple(spec["seeds"])
    cells: list[dict[str, Any]] = list(spec.get("cells", []))
    grid = spec.get("grid")
    if grid:
        try:
            methods = [Method(m) for m in grid["methods"]]
            fractions = list(grid["data_fractions"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"grid: {exc}") from None
        for m in methods:
            for f in fractions:
                cell = {"method": m, "data_fraction": f}
                if m is Method.SEMI and "semi_label_fraction" in grid:
                    cell["label_fraction"] = grid["semi_label_fraction"]
                cells.append(cell)
    if not cells:
        raise InvalidArgumentError("experiment file defines no cells")
    configs = [_build(ExperimentConfig, {**shared, **c}, f"cell {i}") for i, c in enumerate(cells)]
    return dataset, configs


def load_experiment(path: str | Path) -> tuple[DatasetParams, list[ExperimentConfig]]:
    p = resolve_resource(str(path))
    spec = json.loads(p.read_text(encoding="utf-8"))
    return configs_from_dict(spec, base_dir=p.parent)


def run_experiment_file(path: str | Path) -> GridResult:
    params, configs = load_experiment(path)
    return run_grid(configs, make_dataset(params))


def write_outputs(result: GridResult, out_dir: str | Path, stem: str = "results") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonl = out / f"{stem}.jsonl"
    agg = out / f"{stem}_aggregate.csv"
    jsonl.write_text(result.jsonl(), encoding="utf-8")
    agg.write_text(result.aggregate_csv(), encoding="utf-8")
    return jsonl, agg
