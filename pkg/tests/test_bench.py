import csv
import json

import pytest

import ckge.bench as bench
from ckge.bench import ComparisonTable, ExperimentPlan, aggregate, emit_plots, run_plan, time_saving

TINY = {"synthetic": {"num_entities": 40, "num_relations": 3, "num_triples": 160, "seed": 0},
        "name": "tiny"}
BASE = {"dim": 8, "r_base": 2, "relation_rank": 1, "num_layers": 2, "max_epochs": 2,
        "batch_size": 64, "scorer": "transe_l2", "learning_rate": 0.01}


def plan(**kw):
    args = dict(datasets=[TINY], modes=["fastkge"], seeds=[0], base=BASE)
    args.update(kw)
    return ExperimentPlan(**args)


def test_time_saving_example():
    assert time_saving(405, 819) == pytest.approx(0.5055, abs=1e-4)


def test_plan_requires_mode_and_seed():
    with pytest.raises(ValueError):
        plan(modes=[])
    with pytest.raises(ValueError):
        plan(seeds=[])
    with pytest.raises(ValueError):
        plan(modes=["replay"])


def test_extended_values_flagged():
    p = plan(grid={"r_base": [10, 7], "num_layers": [2]})
    assert p.extended == {"r_base": [7]}


def test_single_cell_row_equals_its_summary(tmp_path):
    table = run_plan(plan(), tmp_path)
    assert len(table.rows) == 1 and len(table.cells) == 1
    row, summary = table.rows[0], table.cells[0]["summary"]
    for k, v in summary.items():
        assert row[k] == v
    assert (tmp_path / "table.json").exists() and (tmp_path / "table.csv").exists()


def test_two_seed_mean(tmp_path):
    table = run_plan(plan(seeds=[0, 1]), tmp_path)
    mrrs = [c["summary"]["mrr"] for c in table.cells]
    assert table.rows[0]["mrr"] == pytest.approx(sum(mrrs) / 2, abs=1e-15)
    assert table.rows[0]["seeds"] == 2


def test_comparisons_between_modes(tmp_path):
    table = run_plan(plan(modes=["fastkge", "no_inclora"]), tmp_path)
    (cmp,) = table.comparisons
    fast, base = (next(r for r in table.rows if r["mode"] == m) for m in ("fastkge", "no_inclora"))
    assert cmp["baseline"] == "no_inclora"
    assert cmp["time_saving"] == pytest.approx(time_saving(fast["total_train_seconds"], base["total_train_seconds"]))
    assert cmp["mrr_delta"] == pytest.approx(fast["mrr"] - base["mrr"])


def test_cached_cells_resume(tmp_path, monkeypatch):
    first = run_plan(plan(), tmp_path)

    def boom(*a, **k):
        raise AssertionError("cell should have come from the cache")

    monkeypatch.setattr(bench, "run_continual", boom)
    second = run_plan(plan(), tmp_path)
    assert json.dumps(first.rows, sort_keys=True) == json.dumps(second.rows, sort_keys=True)


def test_reaggregation_is_identical(tmp_path):
    table = run_plan(plan(seeds=[0, 1]), tmp_path)
    again = aggregate(table.cells, table.sweeps)
    assert json.dumps(again.to_dict(), sort_keys=True) == json.dumps(table.to_dict(), sort_keys=True)


def test_failed_cell_is_recorded(tmp_path):
    p = plan(grid={"dim": [7, 8]}, base={**BASE, "scorer": "complex"})
    p.base.pop("dim")
    table = run_plan(p, tmp_path)
    failed = [c for c in table.cells if c.get("error")]
    assert len(failed) == 1 and failed[0]["config"] == {"dim": 7}
    ok = [r for r in table.rows if r["config"] == {"dim": 8}]
    assert ok[0]["seeds"] == 1


def fake_row(mode, **config):
    return {"dataset": "d", "mode": mode, "config": config, "mrr": 0.1 * len(config),
            "incremental_params": 10, "total_train_seconds": 1.0}


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_plot_series(tmp_path):
    ranks, layers = [10, 50, 100, 150, 200], [2, 5, 10, 20]
    rows = [fake_row("fastkge", r_base=r) for r in ranks] + [fake_row("fastkge", num_layers=n) for n in layers]
    table = ComparisonTable(rows, [], [], {"r_base": ranks, "num_layers": layers})
    emit_plots(table, tmp_path)
    r = read_csv(tmp_path / "mrr_vs_r_base.csv")
    n = read_csv(tmp_path / "mrr_vs_num_layers.csv")
    assert [int(x[2]) for x in r[1:]] == ranks
    assert [int(x[2]) for x in n[1:]] == layers
    assert read_csv(tmp_path / "mrr_vs_scorer.csv") == [r[0]]
