"""``clenergy`` command line.

Exit codes: 0 success, 1 domain error, 2 usage or platform error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import contrastive
from ._kernels import BACKEND_NAME
from .cost_model import (
    LabelingCostModel,
    Method,
    RegimeRecord,
    breakdown,
    breakeven_label_seconds,
    dumps_records,
    labeling_energy_joules,
    pareto_frontier,
    read_records,
    reference_table,
    reference_table_csv,
    total_energy,
)
from .errors import ClEnergyError, InvalidArgumentError, PlatformUnavailableError
from .harness import run_experiment_file, write_outputs
from .power_meter import (
    DEFAULT_INTERVAL_S,
    JOULES_PER_KWH,
    CpuCounter,
    GpuPoller,
    MemoryEstimator,
    PowerSource,
    Synthetic,
    TraceReplay,
    record_session,
)

log = logging.getLogger("clenergy")


class UsageError(Exception):
    pass


def parse_source(spec: str) -> PowerSource:
    """Build a power source from ``kind[:args]``.

    ``synthetic:<cpu|gpu|ram>:<watts>``, ``trace:<path>``, ``memory[:<GB>]``,
    ``rapl`` and ``nvml``.
    """
    kind, _, rest = spec.partition(":")
    try:
        if kind == "synthetic":
            comp, _, watts = rest.partition(":")
            return Synthetic(comp, float(watts))
        if kind == "trace" and rest:
            return TraceReplay(rest)
        if kind == "memory":
            return MemoryEstimator(float(rest) if rest else None)
        if kind == "rapl" and not rest:
            return CpuCounter()
        if kind == "nvml" and not rest:
            return GpuPoller()
    except ValueError as exc:
        raise UsageError(f"bad source spec {spec!r}: {exc}") from None
    raise UsageError(f"unknown source spec {spec!r}")


def cmd_meter(args: argparse.Namespace) -> int:
    sources = [parse_source(s) for s in args.source]
    live = any(s.live for s in sources)
    clock = args.clock if args.clock != "auto" else ("wall" if live else "work")
    stop: int | None = args.ticks
    if stop is None and args.duration is not None:
        stop = max(1, math.ceil(args.duration / args.interval - 1e-9))
    if stop is None and not all(isinstance(s, TraceReplay) for s in sources):
        raise UsageError("--ticks or --duration is required unless every source is a trace")
    ledger = record_session(sources, args.interval, stop, clock=clock, run_id=args.run_id)
    print(json.dumps(ledger.to_dict(), indent=2))
    return 0


def cmd_label_cost(args: argparse.Namespace) -> int:
    model = LabelingCostModel(args.watts, args.seconds)
    joules = labeling_energy_joules(model, args.count)
    out = {
        "count": args.count,
        "power_watts": args.watts,
        "seconds_per_label": args.seconds,
        "joules": joules,
        "kwh": joules / JOULES_PER_KWH,
        "joules_per_label": model.joules_per_label,
    }
    print(json.dumps(out, indent=2))
    return 0


def _emit(rows: list[dict], fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(rows, indent=2))
        return
    if not rows:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if v is None else v for k, v in r.items()})
    sys.stdout.write(buf.getvalue())


def _total_row(r: RegimeRecord, model: LabelingCostModel) -> dict:
    total = total_energy(r, model)
    return {
        "method": r.method.value,
        "dataset": r.dataset,
        "data_fraction": r.data_fraction,
        "label_fraction": r.label_fraction,
        "accuracy_pct": r.accuracy_pct,
        "train_kwh": r.train_energy_kwh,
        "labeling_kwh": r.labeling_energy_kwh,
        "total_kwh": total,
    }


def _select(records: Sequence[RegimeRecord], args: argparse.Namespace) -> list[RegimeRecord]:
    out = list(records)
    if args.dataset:
        out = [r for r in out if r.dataset == args.dataset]
    if args.fraction is not None:
        out = [r for r in out if math.isclose(r.data_fraction, args.fraction)]
    return out


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.records:
        records = read_records(args.records)
    else:
        records = reference_table()
    records = _select(records, args)
    if not records:
        raise InvalidArgumentError("no records match the given filters")
    model = LabelingCostModel(args.watts, args.seconds)
    if args.mode == "totals":
        rows = [_total_row(r, model) for r in records]
    elif args.mode == "pareto":
        rows = [_total_row(r, model) for r in pareto_frontier(records, model)]
    elif args.mode == "breakdown":
        rows = [dataclasses.asdict(breakdown(r, model)) for r in records]
    else:
        rows = _breakeven_rows(records, args)
    _emit(rows, args.format)
    return 0


def _breakeven_rows(records: Sequence[RegimeRecord], args: argparse.Namespace) -> list[dict]:
    labeled_m = Method(args.labeled_method)
    unlabeled_m = Method(args.unlabeled_method)
    rows = []
    for lab in records:
        if lab.method is not labeled_m or lab.labeled_count == 0:
            continue
        for unl in records:
            if (
                unl.method is unlabeled_m
                and unl.labeled_count == 0
                and unl.dataset == lab.dataset
                and math.isclose(unl.data_fraction, lab.data_fraction)
            ):
                t = breakeven_label_seconds(lab, unl, args.watts)
                rows.append(
                    {
                        "dataset": lab.dataset,
                        "data_fraction": lab.data_fraction,
                        "labeled": lab.method.value,
                        "label_fraction": lab.label_fraction,
                        "unlabeled": unl.method.value,
                        "labeled_count": lab.labeled_count,
                        "power_watts": args.watts,
                        "breakeven_s_per_label": t,
                    }
                )
    if not rows:
        raise InvalidArgumentError(f"no {labeled_m.value}/{unlabeled_m.value} record pairs to compare")
    return rows


def cmd_experiment(args: argparse.Namespace) -> int:
    result = run_experiment_file(args.config)
    jsonl, agg = write_outputs(result, args.out, args.stem)
    sys.stdout.write(result.aggregate_csv())
    log.info("wrote %s and %s", jsonl, agg)
    bad = [r for r in result.records if r.status != "ok"]
    if bad:
        log.warning("%d cell(s) failed", len(bad))
    return 0


def cmd_reference_table(args: argparse.Namespace) -> int:
    if args.format == "jsonl":
        sys.stdout.write(dumps_records(reference_table()))
    else:
        sys.stdout.write(reference_table_csv())
    return 0


def _load_batch(d: dict) -> contrastive.MultiviewBatch:
    emb = np.asarray(d["embeddings"], dtype=np.float64)
    m = emb.shape[0]
    tau = float(d.get("tau", 0.1))
    labels = d.get("labels")
    if labels is not None:
        labels = [contrastive.UNLABELED if v is None else v for v in labels]
    if "pairing" not in d:
        n = m // 2
        return contrastive.MultiviewBatch.from_views(emb[:n], emb[n:], labels, tau)
    pairing = np.asarray(d["pairing"], dtype=np.int64)
    if pairing.shape != (m,):
        raise InvalidArgumentError("pairing must list one partner per embedding")
    first = np.minimum(np.arange(m), pairing)
    _, origin = np.unique(first, return_inverse=True)
    return contrastive.MultiviewBatch(emb, pairing, origin, labels, tau)


def cmd_loss_debug(args: argparse.Namespace) -> int:
    text = Path(args.batch).read_text() if args.batch != "-" else sys.stdin.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"batch is not valid JSON: {exc.msg}") from None
    try:
        batch = _load_batch(d)
    except (KeyError, TypeError, IndexError) as exc:
        raise InvalidArgumentError(f"malformed batch: {exc!r}") from None
    if not args.no_normalize:
        batch = contrastive.normalize(batch)
    if args.loss == "infonce":
        res = contrastive.info_nce_loss(batch)
    elif args.loss == "supcon":
        res = contrastive.supcon_loss(batch)
    else:
        res = contrastive.semi_supervised_loss(batch, args.threshold)
    print(json.dumps({"value": res.value, "gradient": res.gradient.tolist()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(
        prog="clenergy",
        description="Energy accounting for contrastive representation learning.",
        formatter_class=fmt,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("meter", help="sample power sources and print an energy ledger", formatter_class=fmt)
    m.add_argument(
        "--source",
        action="append",
        required=True,
        help="synthetic:<cpu|gpu|ram>:<W>, trace:<csv>, memory[:<GB>], rapl or nvml; repeatable",
    )
    m.add_argument("--interval", type=float, default=DEFAULT_INTERVAL_S, help="sampling interval in seconds")
    m.add_argument("--ticks", type=int, default=None, help="stop after this many polls")
    m.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    m.add_argument(
        "--clock",
        choices=["auto", "work", "wall"],
        default="auto",
        help="wall sleeps between polls; work polls back to back on the nominal grid; "
        "auto picks wall only for live sources",
    )
    m.add_argument("--run-id", default="meter", help="identifier stored in the ledger")
    m.set_defaults(func=cmd_meter)

    lc = sub.add_parser("label-cost", help="energy to annotate a number of samples", formatter_class=fmt)
    lc.add_argument("--watts", type=float, default=30.0, help="annotation workstation power in W")
    lc.add_argument("--seconds", type=float, default=10.0, help="annotation time per sample in s")
    lc.add_argument("--count", type=int, required=True, help="number of samples to label")
    lc.set_defaults(func=cmd_label_cost)

    an = sub.add_parser("analyze", help="totals, break-even, Pareto or breakdown reports", formatter_class=fmt)
    an.add_argument("--records", default=None, help="JSONL records file; the embedded reference table if omitted")
    an.add_argument("--mode", choices=["totals", "breakeven", "pareto", "breakdown"], default="totals")
    an.add_argument("--watts", type=float, default=30.0, help="annotation workstation power in W")
    an.add_argument("--seconds", type=float, default=10.0, help="annotation time per sample in s")
    an.add_argument("--dataset", default=None, help="keep only records of this dataset")
    an.add_argument("--fraction", type=float, default=None, help="keep only records with this data fraction")
    an.add_argument("--labeled-method", default="SupCon", choices=[x.value for x in Method], help="breakeven: labeled side")
    an.add_argument("--unlabeled-method", default="SimCLR", choices=[x.value for x in Method], help="breakeven: unlabeled side")
    an.add_argument("--format", choices=["csv", "json"], default="csv")
    an.set_defaults(func=cmd_analyze)

    ex = sub.add_parser("experiment", help="run a training grid from a JSON config", formatter_class=fmt)
    ex.add_argument("config", help="config path, or bundled:smoke.json / bundled:desk_grid.json / bundled:desk_grid_trace.json")
    ex.add_argument("--out", default="results", help="output directory")
    ex.add_argument("--stem", default="results", help="output file stem")
    ex.set_defaults(func=cmd_experiment)

    rt = sub.add_parser("reference-table", help="print the embedded published results", formatter_class=fmt)
    rt.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    rt.set_defaults(func=cmd_reference_table)

    ld = sub.add_parser("loss-debug", help="evaluate a loss and gradient on a JSON batch", formatter_class=fmt)
    ld.add_argument("batch", help="JSON file with embeddings, pairing, labels, tau ('-' for stdin)")
    ld.add_argument("--loss", choices=["infonce", "supcon", "semi"], default="infonce")
    ld.add_argument("--threshold", type=float, default=0.9, help="pseudo-label confidence threshold (semi)")
    ld.add_argument("--no-normalize", action="store_true", help="use embeddings as given")
    ld.set_defaults(func=cmd_loss_debug)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    log.debug("kernel backend: %s", BACKEND_NAME)
    try:
        return args.func(args)
    except (UsageError, PlatformUnavailableError) as exc:
        print(f"clenergy: error: {exc}", file=sys.stderr)
        return 2
    except ClEnergyError as exc:
        print(f"clenergy: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"clenergy: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
