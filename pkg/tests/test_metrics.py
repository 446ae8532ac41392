import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afdmil.data import Bag
from afdmil.errors import ConfigError, UndefinedMetricError
from afdmil.metrics import (
    SCORE_TABLE_HEADER,
    auc,
    classify_metrics,
    distill_precision,
    export_instance_scores,
    mean_distill_precision,
    metrics_csv,
)
from afdmil.model import ForwardTrace
from oracles import trapezoid_auc


# -- classify_metrics ----------------------------------------------------------


def test_perfect_classification():
    rep = classify_metrics([0.9, 0.1], [1, 0], 0.5)
    assert (rep.acc, rep.recall, rep.precision) == (1.0, 1.0, 1.0)
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (1, 0, 1, 0)


def test_one_false_positive():
    rep = classify_metrics([0.9, 0.9], [1, 0], 0.5)
    assert rep.acc == 0.5
    assert rep.precision == 0.5
    assert rep.recall == 1.0


def test_all_negative_labels_flag_degenerate_recall():
    rep = classify_metrics([0.1, 0.2], [0, 0], 0.5)
    assert rep.recall == 0.0
    assert rep.recall_degenerate
    assert rep.auc is None  # single-class input has no defined AUC


def test_prediction_uses_geq_threshold():
    rep = classify_metrics([0.5], [1], 0.5)
    assert rep.tp == 1


def test_confusion_counts_sum_to_input_length():
    rng = np.random.default_rng(0)
    probs = rng.uniform(size=37)
    labels = rng.integers(0, 2, size=37)
    rep = classify_metrics(probs, labels, 0.3)
    assert rep.total == 37


def test_empty_input_rejected():
    with pytest.raises(ConfigError):
        classify_metrics([], [], 0.5)


def test_metrics_csv_round_trip_fields():
    rep = classify_metrics([0.9, 0.1], [1, 0], 0.5)
    text = metrics_csv(rep)
    header, row = text.strip().split("\n")
    assert header.startswith("acc,auc,recall,precision")
    assert row.split(",")[0] == "1.0"


# -- auc ------------------------------------------------------------------------


def test_auc_perfect_separation():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0


def test_auc_all_ties():
    assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_auc_hand_case():
    assert auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75


def test_auc_single_class_rejected():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.9], [1, 1])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), size=st.integers(2, 50), tie_prob=st.floats(0, 0.8))
def test_auc_matches_trapezoid_oracle(seed, size, tie_prob):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=size)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = rng.uniform(size=size)
    ties = rng.uniform(size=size) < tie_prob
    scores[ties] = np.round(scores[ties], 1)  # induce repeated values
    assert auc(scores, labels) == pytest.approx(trapezoid_auc(scores, labels), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_auc_complement_and_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    labels = np.array([1, 0] * 5 + [rng.integers(0, 2)])
    scores = rng.normal(size=labels.size)
    a = auc(scores, labels)
    assert auc(-scores, labels) == pytest.approx(1.0 - a, abs=1e-12)
    assert auc(np.exp(2.0 * scores), labels) == pytest.approx(a, abs=1e-12)


# -- distillation precision ------------------------------------------------------


def test_distill_precision_set_overlap():
    assert distill_precision([1, 2], [0, 0, 1, 0, 0, 1], witness_label=1) == 0.5


def test_distill_precision_perfect():
    assert distill_precision([2, 5], [0, 0, 1, 0, 0, 1]) == 1.0


def test_distill_precision_bounded_by_witness_count():
    latent = np.array([1, 1, 0, 0, 0, 0, 0, 0])
    assert distill_precision(list(range(8)), latent) <= 2 / 8


def test_distill_precision_without_latents_is_not_applicable():
    with pytest.raises(UndefinedMetricError):
        distill_precision([0], None)
    assert mean_distill_precision([([0, 1], None)]) is None


# -- instance score export -------------------------------------------------------


def _trace_for(bag, sel1, sel2):
    K = bag.n_instances
    probs = np.linspace(0.0, 1.0, K)
    alpha = np.full(K, 1.0 / K)
    return ForwardTrace(
        instance_probs=probs,
        attention_weights=alpha,
        channel1_indices=sel1,
        channel2_indices=sel2,
        attention_branch_prob=0.5,
        final_prob=0.5,
        loss1=0.0,
        loss2=0.0,
        loss3=0.0,
        total_loss=0.0,
    )


def test_export_row_count_and_header(tmp_path):
    bag = Bag(id="b", label=1, features=np.zeros((2, 3)), coords=[[0, 0], [1, 0]])
    table, raster = export_instance_scores(_trace_for(bag, [0], [1]), bag, tmp_path / "scores.csv")
    lines = table.read_text().strip().split("\n")
    assert lines[0] == SCORE_TABLE_HEADER
    assert len(lines) == 3
    assert raster is not None


def test_export_flags_match_trace_selections(tmp_path):
    bag = Bag(id="b", label=1, features=np.zeros((4, 2)))
    trace = _trace_for(bag, [1, 3], [0])
    table, raster = export_instance_scores(trace, bag, tmp_path / "scores.csv")
    assert raster is None  # no coords, table only
    rows = table.read_text().strip().split("\n")[1:]
    flags = [tuple(r.split(",")[-2:]) for r in rows]
    assert flags == [("0", "1"), ("1", "0"), ("0", "0"), ("1", "0")]


def test_export_raster_gray_levels(tmp_path):
    bag = Bag(id="b", label=1, features=np.zeros((2, 1)), coords=[[0, 0], [1, 0]])
    trace = _trace_for(bag, [], [])
    trace.instance_probs = np.array([1.0, 0.0])
    _, raster = export_instance_scores(trace, bag, tmp_path / "scores.csv")
    content = raster.read_text().split()
    assert content[:4] == ["P2", "2", "1", "255"]
    assert content[4:] == ["255", "0"]


def test_export_skips_raster_for_non_integer_grid(tmp_path, caplog):
    bag = Bag(id="b", label=1, features=np.zeros((2, 1)), coords=[[0.25, 0], [1, 0]])
    with caplog.at_level("WARNING"):
        table, raster = export_instance_scores(_trace_for(bag, [], []), bag, tmp_path / "s.csv")
    assert raster is None
    assert table.is_file()
    assert "integer grid" in caplog.text


def test_export_skips_raster_for_duplicate_cells(tmp_path):
    bag = Bag(id="b", label=1, features=np.zeros((2, 1)), coords=[[0, 0], [0, 0]])
    _, raster = export_instance_scores(_trace_for(bag, [], []), bag, tmp_path / "s.csv")
    assert raster is None
