import json
import math

import numpy as np
import pytest

from clenergy import harness
from clenergy.cost_model import Method, RegimeRecord
from clenergy.errors import DivergenceError, InvalidArgumentError
from clenergy.harness import (
    DatasetParams,
    ExperimentConfig,
    MeterSpec,
    augment,
    configs_from_dict,
    load_experiment,
    make_dataset,
    raw_knn_accuracy,
    run_grid,
    subsample_regime,
    train_encoder,
    write_outputs,
)
from clenergy.knn import LabeledEmbeddingSet, knn_accuracy
from oracles import central_difference, max_rel_error

SMALL = DatasetParams(n_classes=3, per_class=30, test_per_class=20, dim=6, noise=0.3, seed=1)


def quick(method, **kw):
    kw.setdefault("epochs", 5)
    kw.setdefault("seeds", (0,))
    return ExperimentConfig(method, **kw)


def test_make_dataset_zero_noise_sits_on_centers():
    ds = make_dataset(DatasetParams(noise=0.0, per_class=4))
    assert np.array_equal(ds.points, ds.centers[ds.labels])
    assert np.allclose(np.linalg.norm(ds.centers, axis=1), 1.0)


def test_make_dataset_deterministic_and_counts():
    a, b = make_dataset(SMALL), make_dataset(SMALL)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.test_points, b.test_points)
    assert np.array_equal(np.bincount(a.labels), [30, 30, 30])
    assert a.points.shape == (90, 6)


def test_make_dataset_well_separated_is_easy():
    ds = make_dataset(DatasetParams(n_classes=10, per_class=100, noise=0.1, radius=1.0))
    assert raw_knn_accuracy(ds) >= 99.0


@pytest.mark.parametrize("bad", [dict(n_classes=1), dict(per_class=0), dict(noise=-1.0)])
def test_make_dataset_rejects(bad):
    with pytest.raises(InvalidArgumentError):
        make_dataset(DatasetParams(**bad))


def test_augment_examples():
    p = np.arange(4.0)
    a, b = augment(p, 3, sigma=0.0)
    assert np.array_equal(a, p) and np.array_equal(b, p)
    x1, y1 = augment(p, 7)
    x2, y2 = augment(p, 7)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2) and not np.array_equal(x1, y1)


def test_augment_half_normal_mean():
    p = np.zeros(1)
    devs = [abs(augment(p, s, sigma=0.05)[0][0]) for s in range(10_000)]
    expect = math.sqrt(2 / math.pi) * 0.05
    assert abs(np.mean(devs) - expect) < 0.002


def test_subsample_counts():
    ds = make_dataset(DatasetParams(per_class=100))
    idx, mask = subsample_regime(ds, 1.0, 1.0, 0)
    assert sorted(idx) == list(range(1000)) and not np.array_equal(idx, np.arange(1000))
    idx, _ = subsample_regime(ds, 0.2, 1.0, 0)
    assert np.array_equal(np.bincount(ds.labels[idx]), [20] * 10)
    idx, mask = subsample_regime(ds, 0.5, 0.2, 0)
    assert np.array_equal(np.bincount(ds.labels[idx]), [50] * 10)
    assert np.array_equal(np.bincount(ds.labels[idx[mask]], minlength=10), [10] * 10)


@pytest.mark.parametrize("per_class,frac", [(7, 0.3), (13, 0.55), (3, 1.0)])
def test_subsample_stratification(per_class, frac):
    ds = make_dataset(DatasetParams(n_classes=4, per_class=per_class))
    idx, _ = subsample_regime(ds, frac, 0.5, 11)
    counts = np.bincount(ds.labels[idx])
    assert np.all(np.abs(counts - per_class * frac) <= 1)


def test_subsample_empty_class():
    with pytest.raises(InvalidArgumentError):
        subsample_regime(make_dataset(DatasetParams(per_class=2)), 0.1, 1.0, 0)


def test_config_defaults_and_validation():
    assert ExperimentConfig("SupCon").temperature == 0.5
    assert ExperimentConfig("SimCLR").temperature == 0.1
    assert ExperimentConfig("SemiSupervised").label_fraction == 0.5
    cfg = ExperimentConfig("SimCLR", epochs=10)
    assert [cfg.lr_at(e) for e in (0, 6, 7, 8, 9)] == pytest.approx([0.05, 0.05, 0.005, 0.0005, 0.00005])
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig("SimCLR", label_fraction=0.5)
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig("SimCLR", milestones=(0.9, 0.7))
    with pytest.raises(InvalidArgumentError):
        ExperimentConfig("SimCLR", data_fraction=0.0)


def test_epochs_zero_is_untrained_overhead_only():
    ds = make_dataset(SMALL)
    cfg = quick("SimCLR", epochs=0)
    enc, rec = train_encoder(cfg, ds, cfg.meter.session("z"))
    assert enc.losses == []
    # only the opening sample is charged, for one interval
    watts = 15.0 + 60.0 + 6.0 * 0.375
    assert rec.train_energy_kwh == pytest.approx(watts * 0.1 / 3.6e6, rel=1e-12)
    again = harness.Encoder.init(6, cfg.hidden_dim, cfg.embed_dim, np.random.default_rng(np.random.SeedSequence(0).spawn(3)[1]))
    expect = knn_accuracy(LabeledEmbeddingSet(again.embed(ds.points), ds.labels),
                          LabeledEmbeddingSet(again.embed(ds.test_points), ds.test_labels), k=15)
    assert rec.accuracy_pct == expect


def test_supcon_learns_separable_blobs():
    ds = make_dataset(SMALL)
    cfg = quick("SupCon", epochs=200)
    enc, rec = train_encoder(cfg, ds, cfg.meter.session("s"))
    assert enc.losses[-1] < enc.losses[0]
    assert rec.accuracy_pct >= raw_knn_accuracy(ds) - 5
    assert rec.dataset == "blobs" and rec.seed == 0
    assert rec.labeling_energy_kwh == pytest.approx(90 * 300 / 3.6e6)


@pytest.mark.parametrize("method", list(Method))
def test_every_method_trains(method):
    ds = make_dataset(SMALL)
    cfg = quick(method, epochs=10)
    enc, rec = train_encoder(cfg, ds, cfg.meter.session("m"))
    assert len(enc.losses) == 10 and all(math.isfinite(v) for v in enc.losses)
    assert 0 <= rec.accuracy_pct <= 100 and rec.train_energy_kwh > 0
    assert sum(rec.component_kwh.values()) == pytest.approx(rec.train_energy_kwh, rel=1e-12)


def test_trace_meter_is_deterministic():
    ds = make_dataset(SMALL)
    meter = MeterSpec(kind="trace", trace="bundled:desk_trace.csv")
    cfg = quick("SemiSupervised", epochs=8, meter=meter)
    records = [train_encoder(cfg, ds, cfg.meter.session("t"))[1] for _ in range(2)]
    assert records[0] == records[1]
    assert records[0].train_energy_kwh > 0


def test_doubling_epochs_doubles_energy():
    ds = make_dataset(SMALL)
    e = [train_encoder(c, ds, c.meter.session("e"))[1].train_energy_kwh
         for c in (quick("SimCLR", epochs=20), quick("SimCLR", epochs=40))]
    assert abs(e[1] / e[0] - 2) < 0.2


def test_run_grid_counts_and_low_energy_spread():
    ds = make_dataset(SMALL)
    result = run_grid([quick("SimCLR", seeds=(0, 1, 2, 3, 4))], ds)
    assert len(result.records) == 5 and len(result.aggregates) == 1
    row = result.aggregates[0]
    assert row.n_ok == 5
    assert row.train_kwh_std < 0.01 * row.train_kwh_mean
    assert row.total_kwh == row.train_kwh_mean


def test_run_grid_twelve_rows():
    ds = make_dataset(SMALL)
    configs = [quick(m, epochs=1, data_fraction=f) for m in Method for f in (0.2, 0.5, 1.0)]
    result = run_grid(configs, ds)
    assert len(result.aggregates) == 12
    lines = result.aggregate_csv().splitlines()
    assert lines[0].startswith("method,data_fraction,label_fraction,acc_mean,acc_std,train_kwh_mean,label_kwh,total_kwh")
    assert len(lines) == 13


def test_run_grid_records_divergence(monkeypatch):
    real = harness._step

    def exploding(method, enc, x, y, cfg):
        value, grads, views, pairs = real(method, enc, x, y, cfg)
        return (math.nan if len(enc.losses) == 2 else value), grads, views, pairs

    monkeypatch.setattr(harness, "_step", exploding)
    ds = make_dataset(SMALL)
    with pytest.raises(DivergenceError) as exc:
        cfg = quick("SimCLR")
        train_encoder(cfg, ds, cfg.meter.session("d"))
    assert exc.value.epoch == 2
    result = run_grid([quick("SimCLR", seeds=(0, 1))], ds)
    assert [r.status for r in result.records] == ["diverged at epoch 2"] * 2
    assert result.aggregates[0].n_ok == 0


def test_baseline_head_gradient_matches_finite_differences(rng):
    enc = harness.Encoder.init(6, 8, 4, rng, n_classes=3)
    x = rng.standard_normal((10, 6))
    y = rng.integers(0, 3, 10).astype(np.int64)
    cfg = quick("Baseline")
    _, grads, _, _ = harness._step(Method.BASELINE, enc, x, y, cfg)
    for i, p in enumerate(enc.params()):
        def f(val, i=i):
            saved = enc.params()[i].copy()
            enc.params()[i][...] = val
            out = harness._step(Method.BASELINE, enc, x, y, cfg)[0]
            enc.params()[i][...] = saved
            return out

        assert max_rel_error(grads[i], central_difference(f, p.copy())) < 1e-4


def test_configs_from_dict_grid_and_cells(tmp_path):
    spec = {
        "dataset": {"n_classes": 3},
        "defaults": {"epochs": 7},
        "seeds": [4, 5],
        "meter": {"kind": "trace", "trace": "trace.csv"},
        "grid": {"methods": ["SimCLR", "SemiSupervised"], "data_fractions": [0.5, 1.0], "semi_label_fraction": 0.2},
        "cells": [{"method": "SupCon", "data_fraction": 0.2}],
    }
    params, configs = configs_from_dict(spec, base_dir=tmp_path)
    assert params.n_classes == 3
    assert len(configs) == 5
    assert all(c.epochs == 7 and c.seeds == (4, 5) for c in configs)
    assert configs[0].method is Method.SUPCON
    assert [c.label_fraction for c in configs if c.method is Method.SEMI] == [0.2, 0.2]
    assert configs[1].meter.trace == str(tmp_path / "trace.csv")
    with pytest.raises(InvalidArgumentError):
        configs_from_dict({"grid": spec["grid"], "bogus": 1})
    with pytest.raises(InvalidArgumentError):
        configs_from_dict({"cells": [{"method": "SimCLR", "epoch": 3}]})
    with pytest.raises(InvalidArgumentError):
        configs_from_dict({})


def test_bundled_configs_load():
    _, smoke = load_experiment("bundled:smoke.json")
    assert len(smoke) == 1 and smoke[0].epochs == 20
    _, grid = load_experiment("bundled:desk_grid.json")
    assert len(grid) == 12 and all(len(c.seeds) == 5 for c in grid)
    _, traced = load_experiment("bundled:desk_grid_trace.json")
    assert all(c.meter.kind == "trace" for c in traced)


def test_write_outputs(tmp_path):
    ds = make_dataset(SMALL)
    result = run_grid([quick("SimCLR", epochs=2)], ds)
    jsonl, agg = write_outputs(result, tmp_path / "out", "cell")
    rows = [json.loads(line) for line in jsonl.read_text().splitlines()]
    assert len(rows) == 1 and RegimeRecord.from_dict(rows[0]) == result.records[0]
    assert agg.read_text() == result.aggregate_csv()
