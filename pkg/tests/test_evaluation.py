import math

import pytest
from hypothesis import given, settings, strategies as st

from david.evaluation import (Experiment, ExperimentConfig, MetricsReport, anls, chance_accuracy,
                              evaluate_predictions, levenshtein, micro_f1, per_category_accuracy, pivot,
                              plot_ratio_curves, ratio_sweep, retrieval_accuracy, robustness_sweep, size_sweep,
                              write_csv)
from david.docmodel import LabelSpace
from david.neural import EncoderConfig
from david.synthgen import gold_label_space
from david.workflow import AdaptationPlan
from oracles import edit_distance, normal_two_sided_tail

SPACE = LabelSpace("gold", ("O", "a", "b"))


def test_micro_f1_examples():
    assert micro_f1([1, 2, 0], [1, 2, 0]) == 1.0
    assert micro_f1([0, 0, 0], [1, 0, 2]) == 0.0
    # gold has 3 non-outside, prediction has 2 non-outside, 1 correct: P=1/2, R=1/3
    assert micro_f1([1, 2, 0, 0], [1, 1, 2, 0]) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        micro_f1([1], [1, 2])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=10))
def test_micro_f1_against_counting_oracle(pairs):
    preds, golds = [p for p, _ in pairs], [g for _, g in pairs]
    tp = sum(1 for p, g in pairs if p == g != 0)
    fp = sum(1 for p, g in pairs if p != 0 and p != g)
    fn = sum(1 for p, g in pairs if g != 0 and p != g)
    expected = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    assert micro_f1(preds, golds) == pytest.approx(expected)


def test_anls_examples():
    assert anls("Total", "total") == 1.0
    assert anls("abcd", "wxyz") == 0.0
    # one substitution over five characters
    assert anls("12.50", "12.5O") == pytest.approx(0.8)
    assert anls(["12.50", "x"], ["12.5O", "y"]) == pytest.approx(0.4)


@settings(max_examples=100)
@given(st.text("abc1", max_size=7), st.text("abc1", max_size=7))
def test_levenshtein_against_recursive_oracle(a, b):
    assert levenshtein(a, b) == edit_distance(a, b)


def test_retrieval_and_category_accuracy():
    assert retrieval_accuracy([0, 2, 1], [0, 2, 2]) == pytest.approx(2 / 3)
    assert per_category_accuracy([0, 1, 1, 2], [0, 1, 2, 2], SPACE) == {"O": 1.0, "a": 1.0, "b": 0.5}


def test_report_validation_and_evaluation():
    with pytest.raises(ValueError):
        MetricsReport(micro_f1=1.5)
    records = [{"kind": "token", "gold": 1, "pred": 1}, {"kind": "token", "gold": 0, "pred": 2},
               {"kind": "query", "gold": 0, "pred": 0, "gold_text": "x", "pred_text": "x", "n_candidates": 4},
               {"kind": "query", "gold": 1, "pred": 0, "gold_text": "yy", "pred_text": "x", "n_candidates": 2}]
    rep = evaluate_predictions(records, SPACE)
    assert rep.n_samples == 4 and rep.retrieval_accuracy == 0.5
    assert rep.micro_f1 == pytest.approx(2 / 3)
    assert set(rep.per_category) <= set(SPACE.categories)
    assert chance_accuracy(records) == pytest.approx((0.25 + 0.5) / 2)


def test_pivot_medians():
    rows = [{"config": "a", "ratio": 0.1, "score": s} for s in (0.2, 0.9, 0.5)]
    assert pivot(rows, "ratio") == [{"config": "a", "10%": 0.5}]
    rows = [{"config": "a", "lam": 1.5, "score": 0.3}]
    assert pivot(rows, "lam") == [{"config": "a", "P_1.5": 0.3}]


SMALL = EncoderConfig(hidden_dim=16, n_layers=1, n_heads=2, ffn_dim=24, decoder_layers=1, conv_channels=(4, 6))


@pytest.fixture(scope="module")
def experiment(tiny_split):
    ft = AdaptationPlan(finetune_epochs=1, finetune_min_steps=0)
    return Experiment(tiny_split, gold_label_space("form"), "fine", SMALL, ft)


def test_ratio_sweep_shape_and_provenance(experiment, tmp_path):
    configs = [ExperimentConfig("baseline"), ExperimentConfig("sds", AdaptationPlan(sds_epochs=1, sst_epochs=0,
                                                                                   sit_epochs=0))]
    rows, table = ratio_sweep(experiment, configs, ratios=(0.5, 1.0), seeds=(0, 1))
    assert len(rows) == 2 * 2 * 3
    assert [r["config"] for r in table] == ["baseline", "sds"]
    assert set(table[0]) == {"config", "0%", "50%", "100%"}
    for r in rows:
        assert r["corpus_hash"] and r["plan_hash"] and r["config_fingerprint"] and "seed" in r
        assert 0.0 <= r["score"] <= 1.0
    assert {r["stage"] for r in rows if r["ratio"] == 0} == {"init", "F_n"}
    write_csv(table, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().startswith("config,0%,50%,100%")
    plot_ratio_curves(table, tmp_path / "t.png")
    assert (tmp_path / "t.png").stat().st_size > 0
    with pytest.raises(ValueError):
        ratio_sweep(experiment, configs, ratios=(0.0,))


def test_reports_deterministic(experiment):
    c = ExperimentConfig("baseline")
    a, b = experiment.cell(c, 1.0, 0), experiment.cell(c, 1.0, 0)
    a.pop("wall_time_seconds"), b.pop("wall_time_seconds")
    assert a == b


def test_robustness_sweep_columns_and_fractions(experiment):
    rows, tables = robustness_sweep(experiment, [ExperimentConfig("baseline")], lambdas=(2.0, 1.0),
                                    modes=("incorrect",), seeds=(0,))
    assert set(tables["incorrect"][0]) == {"config", "P_inf", "P_2", "P_1"}
    clean = [r for r in rows if r["lam"] == math.inf][0]
    for r in rows:
        if r["lam"] == math.inf:
            continue
        p, n = normal_two_sided_tail(r["lam"]), r["n_labeled"]
        assert abs(r["corrupted_fraction"] - p) <= 3 * math.sqrt(p * (1 - p) / n)
    assert clean["score"] == experiment.cell(ExperimentConfig("baseline"), 1.0, 0)["score"]
    coarse = Experiment(experiment.split, experiment.gold_space, "coarse", SMALL)
    with pytest.raises(ValueError):
        robustness_sweep(coarse, [ExperimentConfig("baseline")])


def test_size_sweep_rows(experiment):
    cfg = ExperimentConfig("SDS", AdaptationPlan(sds_epochs=1, sst_epochs=0, sit_epochs=0))
    rows, table = size_sweep(experiment, [cfg], fractions=(0.5, 1.0), seeds=(0,))
    assert [r["config"] for r in table] == ["No DW", "0.5x SDS", "SDS"]
    assert rows[0]["stage"] == "F_t"
    with pytest.raises(ValueError):
        size_sweep(experiment, [cfg], fractions=(1.5,))
    with pytest.raises(ValueError):
        size_sweep(experiment, [ExperimentConfig("x")])
