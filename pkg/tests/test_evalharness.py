import json
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iflf import evalharness as eh
from iflf.adapt import AdaptConfig
from iflf.evalharness import (
    EvalReport, ExperimentPlan, ProgressLedger, aggregate, cell_id, compute_metrics, export_embeddings,
    export_head_histograms, feature_silhouette, raw_view, regroup, run_plan, standard_error,
)
from iflf.ingest import DomainId, SyntheticSpec, generate_synthetic
from iflf.metatrain import BaselineConfig, TrainConfig
from iflf.model import ExtractorSpec, build, head_weight_stats
from iflf.sigproc import WindowSet, preprocess_all

TINY = ExtractorSpec(in_channels=6, window_len=50, conv_channels=8, hidden_size=12, fc_sizes=(16, 10))


def tiny_plan(**kw):
    base = dict(
        dataset="synthetic", modes=("stl", "ptm", "bmtl", "tmtl"), shots=(1,), repeats=1, seeds=(0,),
        extractor=TINY, train=TrainConfig(max_epochs=2, m=20, n=4, batch_size=50, mu=0.0),
        baseline=BaselineConfig(max_iters=5), adapt=AdaptConfig(epochs=3),
    )
    return ExperimentPlan(**{**base, **kw})


@pytest.fixture(scope="module")
def domains():
    spec = SyntheticSpec.default(num_domains=3, num_classes=3, seed=1, duration_s=15)
    return preprocess_all(generate_synthetic(spec, seed=1))


# --- plan --------------------------------------------------------------------------


def test_plan_validation():
    with pytest.raises(ValueError):
        tiny_plan(repeats=0)
    with pytest.raises(ValueError):
        tiny_plan(modes=("tmtl", "maml"))
    with pytest.raises(ValueError):
        tiny_plan(domain_axis="session")
    with pytest.raises(ValueError):
        tiny_plan(shots=(0, 1))


def test_plan_defaults_and_hash():
    plan = ExperimentPlan("x")
    assert plan.shots == (1, 2, 5, 10, 20, 50, 100) and plan.repeats == 5
    back = ExperimentPlan.from_dict(plan.to_dict())
    assert back.plan_hash() == plan.plan_hash()
    assert tiny_plan().plan_hash() != tiny_plan(repeats=2).plan_hash()


def test_unknown_target_rejected(domains, tmp_path):
    with pytest.raises(KeyError):
        run_plan(tiny_plan(targets=["nobody@nowhere"]), domains, tmp_path)


# --- metrics -----------------------------------------------------------------------


def test_metrics_all_correct():
    y = np.array([0, 1, 2, 2, 1])
    m = compute_metrics(y, y, [0, 1, 2])
    assert m["accuracy"] == 1.0
    assert all(v == 1.0 for v in m["recall"].values())
    assert np.array_equal(m["confusion"], np.diag([1, 2, 2]))


def test_metrics_all_predicted_zero():
    y = np.array([0, 1, 2, 0])
    m = compute_metrics(np.zeros(4, int), y, [0, 1, 2])
    assert m["recall"] == {0: 1.0, 1: 0.0, 2: 0.0}
    assert m["accuracy"] == 0.5


def test_metrics_errors():
    with pytest.raises(ValueError):
        compute_metrics([], [], [0])
    with pytest.raises(ValueError):
        compute_metrics([0], [0, 1], [0, 1])
    with pytest.raises(ValueError):
        compute_metrics([1], [1], [0])


def test_metrics_mask_and_outside_predictions():
    m = compute_metrics([0, 3, 1, 1], [0, 0, 1, 2], [0, 1])
    # class 2 windows are ignored; the prediction 3 is outside the mask
    assert m["n_test"] == 3 and m["outside"] == [1, 0]
    assert m["accuracy"] == pytest.approx(2 / 3)
    assert m["recall"] == {0: 0.5, 1: 1.0}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(2, 6))
def test_metrics_match_counting_oracle(seed, n, c):
    rng = np.random.default_rng(seed)
    truth, pred = rng.integers(0, c, n), rng.integers(0, c, n)
    m = compute_metrics(pred, truth, range(c))
    tally = [[0] * c for _ in range(c)]
    for t, p in zip(truth.tolist(), pred.tolist()):
        tally[t][p] += 1
    assert m["confusion"] == tally
    assert m["accuracy"] == sum(tally[i][i] for i in range(c)) / n
    for i in range(c):
        row = sum(tally[i])
        assert row == int(np.sum(truth == i))
        expected = None if row == 0 else tally[i][i] / row
        assert m["recall"][i] == expected


# --- aggregation ---------------------------------------------------------------------


def test_standard_error():
    assert standard_error([0.7]) == 0.0
    vals = [0.5, 0.7, 0.8, 0.65]
    assert standard_error(vals) == pytest.approx(statistics.stdev(vals) / 2, abs=1e-15)


def _record(rep, acc, mode="tmtl", status="ok"):
    n = 20
    correct = int(round(acc * n))
    return {
        "cell": cell_id(mode, "t", 0, 5, rep), "mode": mode, "target": "t", "seed": 0, "shots": 5, "repeat": rep,
        "status": status, "accuracy": correct / n, "classes": [0, 1],
        "confusion": [[correct // 2, 10 - correct // 2], [n - correct - (10 - correct // 2), correct - correct // 2]],
        "recall": {"0": (correct // 2) / 10, "1": (correct - correct // 2) / 10}, "n_test": n,
    }


def test_perfect_stub_gives_one_and_zero_error():
    recs = [_record(r, 1.0) for r in range(5)]
    row = aggregate(recs, {"repeats": 5, "seeds": [0]})[0]
    assert row["mean_accuracy"] == 1.0 and row["standard_error"] == 0.0 and row["complete"]


def test_standard_error_recomputed_from_raw():
    recs = [_record(r, a) for r, a in enumerate([0.5, 0.6, 0.9, 0.75, 0.8])]
    report = EvalReport.from_results({"repeats": 5, "seeds": [0]}, recs)
    row = report.cell("tmtl", "t", 5)
    raw = [r["accuracy"] for r in report.results]
    assert row["standard_error"] == pytest.approx(statistics.stdev(raw) / np.sqrt(5), abs=1e-15)
    assert row["mean_accuracy"] == pytest.approx(statistics.mean(raw), abs=1e-15)
    assert np.sum(row["confusion"]) == 100


def test_failed_cells_mark_incomplete_and_retries_supersede():
    recs = [_record(0, 0.5), _record(1, 0.0, status="failed")]
    row = aggregate(recs, {"repeats": 2, "seeds": [0]})[0]
    assert row["n"] == 1 and row["failed"] == 1 and not row["complete"]
    row = aggregate(recs + [_record(1, 0.7)], {"repeats": 2, "seeds": [0]})[0]
    assert row["n"] == 2 and row["failed"] == 0 and row["complete"]


def test_ledger_skips_truncated_lines(tmp_path):
    ledger = ProgressLedger(tmp_path / "p.jsonl")
    ledger.append(_record(0, 0.5))
    with open(ledger.path, "a") as fh:
        fh.write('{"cell": "tmtl|t|0|5|1", "sta')
    assert [r["repeat"] for r in ledger.records()] == [0]
    assert ledger.done() == {cell_id("tmtl", "t", 0, 5, 0)}


# --- driver --------------------------------------------------------------------------


def test_run_plan_one_cell_per_model_and_target(domains, tmp_path):
    plan = tiny_plan()
    report = run_plan(plan, domains, tmp_path)
    assert len(report.summary) == 4 * len(domains)
    assert {(r["mode"], r["target"]) for r in report.summary} == {(m, t) for m in plan.modes for t in domains}
    assert all(r["complete"] and r["failed"] == 0 for r in report.summary)
    # one fixed test set per target: all models see the same test windows
    for t in domains:
        sizes = {r["n_test"] for r in report.results if r["target"] == t}
        assert len(sizes) == 1

    run_dir = tmp_path / plan.plan_hash()
    for name in ("plan.json", "report.json", "curves.csv", "progress.jsonl"):
        assert (run_dir / name).exists()
    assert len(list((run_dir / "embeddings").glob("*.tsv"))) == 3 * len(domains)
    assert len(list((run_dir / "confusion").glob("*.csv"))) == 4 * len(domains)

    # resuming a finished plan trains nothing and appends nothing
    lines = (run_dir / "progress.jsonl").read_text().count("\n")
    again = run_plan(plan, domains, tmp_path)
    assert (run_dir / "progress.jsonl").read_text().count("\n") == lines
    assert again.summary == report.summary

    # the summary is a pure function of the stored raw records
    back = EvalReport.load(run_dir / "report.json")
    assert aggregate(back.results, back.plan) == back.summary


def test_support_and_test_disjoint(domains, tmp_path, monkeypatch):
    seen = []
    original = eh.select_shots

    def spy(ws, shots, seed, exclude=()):
        support = original(ws, shots, seed, exclude)
        seen.append((set(int(i) for i in exclude), {i for _, i, _ in support.provenance}))
        return support

    monkeypatch.setattr(eh, "select_shots", spy)
    run_plan(tiny_plan(modes=("stl",), shots=(1, 5), repeats=2), domains, tmp_path)
    assert len(seen) == 4 * len(domains)
    assert all(test.isdisjoint(support) for test, support in seen)


def test_cell_failure_recorded_and_plan_continues(domains, tmp_path, monkeypatch):
    original = eh.fast_adapt

    def flaky(model, support, config):
        if config.shots == 2:
            raise RuntimeError("boom")
        return original(model, support, config)

    monkeypatch.setattr(eh, "fast_adapt", flaky)
    target = sorted(domains)[0]
    report = run_plan(tiny_plan(modes=("ptm",), shots=(1, 2), targets=[target]), domains, tmp_path)
    ok, bad = report.cell("ptm", target, 1), report.cell("ptm", target, 2)
    assert ok["complete"] and ok["n"] == 1
    assert not bad["complete"] and bad["failed"] == 1 and bad["mean_accuracy"] is None
    failed = [r for r in report.results if r["status"] == "failed"]
    assert "boom" in failed[0]["error"]

    # a rerun retries only the failed cell
    monkeypatch.setattr(eh, "fast_adapt", original)
    report = run_plan(tiny_plan(modes=("ptm",), shots=(1, 2), targets=[target]), domains, tmp_path)
    assert report.cell("ptm", target, 2)["complete"]
    assert sum(r["shots"] == 1 for r in report.results) == 1


def test_perfect_classifier_stub_through_driver(tmp_path, monkeypatch):
    # class c is encoded as a spike at sample c of channel 0; z-scoring keeps the argmax
    def domain(key, seed):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(3), 12)
        x = rng.normal(scale=0.1, size=(36, 6, 50)).astype(np.float32)
        x[np.arange(36), 0, labels] = 50.0
        return WindowSet(x, labels, DomainId(key), 25.0, [f"c{i}" for i in range(6)], ["a", "b", "c"])

    class Oracle:
        def predict(self, model, windows):
            return np.asarray(windows)[:, 0, :].argmax(1)

    monkeypatch.setattr(eh, "fast_adapt", lambda model, support, config: Oracle())
    sets = {k: domain(k, i) for i, k in enumerate(("a@x", "b@x"))}
    plan = tiny_plan(modes=("tmtl",), shots=(2,), repeats=3, export_diagnostics=False)
    report = run_plan(plan, sets, tmp_path)
    for row in report.summary:
        assert row["mean_accuracy"] == 1.0 and row["standard_error"] == 0.0


def test_parallel_workers_match_sequential(domains, tmp_path):
    plan = tiny_plan(modes=("stl",), shots=(1, 2))
    seq = run_plan(plan, domains, tmp_path / "seq")
    par = run_plan(plan, domains, tmp_path / "par", workers=2)
    assert seq.summary == par.summary


# --- domain handling -----------------------------------------------------------------


def _ws(key, n=4, value=0.0):
    return WindowSet(np.full((n, 6, 50), value, np.float32), np.arange(n) % 2, DomainId.from_key(key), 25.0,
                     [f"c{i}" for i in range(6)], ["a", "b"])


def test_regroup_by_axis():
    sets = {k: _ws(k) for k in ("s1@phone", "s1@watch", "s2@phone")}
    assert set(regroup(sets, "subject")) == {"s1", "s2"}
    by_device = regroup(sets, "device")
    assert set(by_device) == {"phone", "watch"}
    assert len(by_device["phone"]) == 8
    # merged origins stay unique
    assert len({tuple(o) for o in by_device["phone"].origin}) == 8
    assert regroup(sets, "subject×device") == sets


def test_raw_view_inverts_normalization():
    from iflf.sigproc import NormStats

    ws = _ws("s@d", value=3.0)
    stats = NormStats(np.arange(6.0), np.full(6, 2.0))
    normed = ws.normalized(stats)
    assert np.allclose(raw_view(normed).windows, ws.windows, atol=1e-5)
    assert raw_view(normed).normalization_stats is None and raw_view(ws) is ws


# --- diagnostic exports --------------------------------------------------------------


@pytest.fixture
def small_model():
    return build(TINY, [("a", [0, 1, 2]), ("b", [0, 1])], seed=2)


def test_embedding_export(small_model, domains, tmp_path):
    ws = next(iter(domains.values()))
    path = export_embeddings(small_model, ws, tmp_path / "e.tsv")
    rows = [line.split("\t") for line in path.read_text().splitlines()]
    assert len(rows) == len(ws)
    assert {len(r) for r in rows} == {TINY.feature_dim + 2}
    assert [int(r[-2]) for r in rows] == ws.labels.tolist()
    assert rows[0][-1] == ws.domain.key
    assert export_embeddings(small_model, ws, tmp_path / "f.tsv").read_text() == path.read_text()


def test_head_histogram_export(small_model, tmp_path):
    path = export_head_histograms(small_model, tmp_path / "h.csv", bins=20)
    import csv

    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 * 20
    for k in range(2):
        mine = [r for r in rows if int(r["head"]) == k]
        assert sum(float(r["occurrence"]) for r in mine) == pytest.approx(1.0)
        lo, hi = float(rows[0]["bin_left"]), float(rows[19]["bin_right"])
        ref = head_weight_stats(small_model, k, bins=20, value_range=(lo, hi))
        assert [float(r["occurrence"]) for r in mine] == pytest.approx(ref["histogram"])
        assert float(mine[0]["variance"]) == pytest.approx(ref["variance"])


def test_silhouette(small_model, domains):
    ws = next(iter(domains.values()))
    value = feature_silhouette(small_model, ws)
    assert -1.0 <= value <= 1.0
    with pytest.raises(ValueError):
        feature_silhouette(small_model, ws.subset(np.flatnonzero(ws.labels == ws.labels[0])))


def test_report_json_round_trip(tmp_path):
    recs = [_record(r, a) for r, a in enumerate([0.5, 0.6])]
    report = EvalReport.from_results({"repeats": 2, "seeds": [0]}, recs, {"x": {"silhouette": 0.1}})
    path = report.save(tmp_path)
    back = EvalReport.load(path)
    assert back.summary == json.loads(json.dumps(report.summary))
    assert back.diagnostics == {"x": {"silhouette": 0.1}}
