import numpy as np
import pytest

from emgadapt import datagen as D
from emgadapt import harness as H
from emgadapt.metrics import evaluate_testsuite
from emgadapt.model import Model, ModelConfig, NormStats, init_params, load_checkpoint

FAST = {"learning_rate": 1e-3, "epochs": 1, "stride": 200}


@pytest.fixture(scope="module")
def bench():
    return D.build_benchmark(7, n_healthy=0, n_retention=1)


@pytest.fixture(scope="module")
def subject(bench):
    return bench.stroke["S3"]


@pytest.fixture(scope="module")
def healthy(subject):
    cfg = ModelConfig()
    return Model(init_params(cfg, 1), cfg, NormStats.fit([r.samples for r in subject.train]))


def test_grid_enumeration():
    g = H.GridSpec({"learning_rate": [1, 2], "epochs": [3, 4, 5]})
    cfgs = g.configs()
    assert len(cfgs) == 6
    assert cfgs[0] == {"learning_rate": 1, "epochs": 3} and cfgs[1] == {"learning_rate": 1, "epochs": 4}
    assert g.configs() == cfgs
    with pytest.raises(ValueError):
        H.GridSpec({})
    with pytest.raises(ValueError):
        H.GridSpec({"learning_rate": []})
    with pytest.raises(ValueError, match="momentum"):
        H.GridSpec({"momentum": [0.9]})
    assert len(H.GridSpec.default("full").configs()) == 12
    assert len(H.GridSpec.default("lora").configs()) == 36


def test_hyper_from():
    hyper, rank = H.hyper_from({"learning_rate": 0.1, "lora_rank": 8, "epochs": 2}, {"seed": 4})
    assert hyper.lr == 0.1 and hyper.epochs == 2 and hyper.seed == 4 and rank == 8


@pytest.mark.parametrize("n", [1, 2, 4, 5, 8, 12])
def test_budget_draws_without_replacement(n):
    plan = H.BudgetPlan()
    draws = plan.draws(n, 42)
    assert len(draws) == 12
    for d in draws:
        assert len(d) == n == len(set(d)) and all(0 <= i < 12 for i in d)
    assert draws == plan.draws(n, 42)


def test_budget_draws_n1_covers_pool():
    draws = H.BudgetPlan().draws(1, 3)
    assert sorted(d[0] for d in draws) == list(range(12))


def test_budget_special_cases():
    plan = H.BudgetPlan()
    assert plan.draws(0, 0) == [[]]
    assert plan.draws(H.ALL, 0) == [list(range(12))]
    with pytest.raises(ValueError):
        H.BudgetPlan(budgets=(13,))
    with pytest.raises(ValueError):
        H.BudgetPlan(repeats=0)


def test_pairs(subject):
    rec = subject.train[0]
    pairs = H.make_pairs(rec)
    assert len(pairs) == 3
    # the 10 s relax run where the sequences meet is split between O3 and C1
    assert [len(o[1]) for o, _ in pairs] == [2200, 2200, 2700]
    assert [len(c[1]) for _, c in pairs] == [2700, 2200, 2200]
    for (xo, yo), (xc, yc) in pairs:
        assert np.array_equal(np.unique(yo), [0, 1]) and np.array_equal(np.unique(yc), [0, 2])
        assert yo[0] == yo[-1] == yc[0] == yc[-1] == 0
        assert np.count_nonzero(yo) == np.count_nonzero(yc) == 1200
        assert xo.shape == (len(yo), 8)
    # chunks tile the set except the outer halves of the first and last relax segments
    chunks = [c for p in pairs for c in p]
    assert sum(len(c[1]) for c in chunks) == len(rec) - 1000
    assert np.array_equal(pairs[0][0][0], rec.samples[500:2700])
    assert len(H.pair_pool(subject.train)) == 12
    with pytest.raises(H.DataError):
        H.make_pairs(subject.test[-1])     # closing-only set has no open attempts


def test_cv_requires_four_sets(subject, healthy):
    with pytest.raises(H.DataError):
        H.cv_select("full", {"epochs": [1]}, subject.train[:3], healthy=healthy)


def test_cv_single_config(subject, healthy):
    res = H.cv_select("head_only", {"learning_rate": [1e-3]}, subject.train, 0, healthy, base={"epochs": 1,
                                                                                          "stride": 200})
    assert res.best == {"learning_rate": 1e-3} and res.best_index == 0
    folds = res.table[0]["folds"]
    assert sorted(f["fold"] for f in folds) == [0, 1, 2, 3]
    assert res.table[0]["mean_raw"] == pytest.approx(np.mean([f["raw"] for f in folds]))


def test_cv_duplicate_configs_first_wins(subject, healthy):
    res = H.cv_select("head_only", {"learning_rate": [2e-3, 2e-3]}, subject.train, 0, healthy,
                      base={"epochs": 1, "stride": 200})
    assert res.table[0]["mean_raw"] == res.table[1]["mean_raw"]
    assert res.best_index == 0


def test_cv_is_reproducible_and_thread_independent(subject, healthy, monkeypatch):
    grid = {"learning_rate": [1e-3, 1e-2]}
    kw = dict(seed=5, healthy=healthy, base={"epochs": 1, "stride": 200})
    a = H.cv_select("full", grid, subject.train, **kw)
    monkeypatch.setenv("EMGADAPT_THREADS", "2")
    b = H.cv_select("full", grid, subject.train, **kw)
    assert a.best == b.best and a.table == b.table


def test_final_zero_shot_is_frozen_eval(subject, healthy):
    res = H.final_train_eval("zero-shot", {}, subject.train, subject.test, 0, healthy)
    direct = evaluate_testsuite(healthy, subject.test)
    assert res.mean_transition == direct.mean_transition and res.mean_raw == direct.mean_raw
    assert [r.set_kind for r in res.reports] == list(D.TEST_KINDS)
    row = res.summary_row()
    assert row["variant"] == "zero_shot" and "test_device" in row
    with pytest.raises(H.DataError):
        H.final_train_eval("full", FAST, subject.train, [], 0, healthy)


def test_summary_table():
    r = H.FinalResult("full", {}, [], 0.5, 0.25)
    s = H.FinalResult("full", {}, [], 0.7, 0.75)
    table = H.summary_table({"S1": {"full": r}, "S2": {"full": s}})
    assert table["average"]["full"] == {"raw": pytest.approx(0.6), "transition": pytest.approx(0.5)}


def test_budget_degenerate_rows(subject, healthy):
    plan = H.BudgetPlan(budgets=(0, H.ALL), repeats=2)
    res = H.budget_sweep("full", FAST, subject.train, subject.test, plan, 3, healthy)
    zs = evaluate_testsuite(healthy, subject.test)
    assert res.rows[0] == [{"pairs": [], "raw": zs.mean_raw, "transition": zs.mean_transition}]
    final = H.final_train_eval("full", FAST, subject.train, subject.test, 3, healthy)
    assert res.means[H.ALL] == final.mean_transition
    assert set(res.to_dict()["mean_transition"]) == {"0", "all"}


def test_budget_pool_mismatch(subject, healthy):
    with pytest.raises(H.DataError):
        H.budget_sweep("full", FAST, subject.train[:2], subject.test, H.BudgetPlan(), 0, healthy)


def test_convergence_rows_and_checkpoints(bench, subject, healthy, tmp_path):
    ret = bench.retention_recordings()
    res = H.convergence_run(["head_only", "lora"], {"learning_rate": 1e-3, "stride": 200}, subject.train,
                            subject.test[:2], ret, healthy, seed=1, epochs=4, every=2,
                            checkpoint_dir=str(tmp_path))
    for v in ("head_only", "lora"):
        assert [r["epoch"] for r in res.curves[v]] == [2, 4]
        assert len(res.checkpoints[v]) == 2
    assert res.healthy_zero_shot == evaluate_testsuite(healthy, ret).mean_transition
    # a written checkpoint reproduces its recorded metrics exactly
    row = res.curves["lora"][-1]
    again = load_checkpoint(res.checkpoints["lora"][-1])
    s = evaluate_testsuite(again, subject.test[:2])
    r = evaluate_testsuite(again, ret)
    assert s.mean_transition == row["stroke_transition"] and r.mean_raw == row["retention_raw"]
    assert res.to_dict()["reference"]["stroke_zero_shot"] == res.stroke_zero_shot


def test_convergence_needs_retention(subject, healthy):
    with pytest.raises(H.DataError):
        H.convergence_run(["full"], FAST, subject.train, subject.test, [], healthy)


def test_experiment_record_timing_optional():
    rec = H.ExperimentRecord("eval", "full", {"lr": 1}, 42, wall_time_s=3.2)
    assert "wall_time_s" not in rec.to_dict()
    assert rec.to_dict(timing=True)["wall_time_s"] == 3.2
