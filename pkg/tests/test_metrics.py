from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.errors import RejectedInputError
from src.metrics import (
    REPORT_COLUMNS,
    accuracy,
    confusion,
    macro_average,
    metrics_report,
    metrics_row,
    precision_recall_f1,
    write_report_csv,
)
from src.models import ConfusionCounts, MetricsRow

# per-target rows of the edge model's published evaluation
EDGE_TABLE = [
    ("heater_1", 0.9946, 0.9835, 0.9952, 0.9893),
    ("heater_2", 0.9942, 0.9693, 0.9879, 0.9781),
    ("air_purifier_A", 0.8136, 0.6914, 0.7084, 0.6773),
    ("air_purifier_B", 0.8454, 0.6933, 0.7275, 0.6974),
    ("fan_1", 0.8992, 0.6101, 0.5444, 0.5570),
    ("fan_2", 0.8255, 0.5589, 0.5085, 0.4548),
    ("fan_3", 0.9251, 0.6378, 0.7656, 0.6624),
    ("fan_4", 0.9181, 0.3870, 0.5426, 0.4425),
    ("light_bulb_1", 0.9795, 0.7833, 0.9557, 0.8363),
    ("light_bulb_2", 0.9873, 0.9156, 0.9206, 0.9097),
    ("air_compressor", 0.9993, 0.9649, 0.9512, 0.9506),
]


def _counts(**kw) -> ConfusionCounts:
    return ConfusionCounts(**{"tp": 0, "tn": 0, "fp": 0, "fn": 0, **kw})


def test_confusion_hand_counted() -> None:
    assert confusion([1, 1, 0, 0], [1, 0, 0, 1]) == _counts(tp=1, fp=1, tn=1, fn=1)
    assert confusion([1, 0, 1], [1, 0, 1]) == _counts(tp=2, tn=1)
    assert confusion([0, 0], [1, 1]) == _counts(fn=2)


def test_confusion_rejects_bad_input() -> None:
    with pytest.raises(RejectedInputError):
        confusion([1, 0], [1])
    with pytest.raises(RejectedInputError):
        confusion([], [])
    with pytest.raises(RejectedInputError):
        confusion([2, 0], [1, 0])


def test_confusion_matches_brute_force() -> None:
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(1, 101))
        pred = rng.integers(0, 2, n).tolist()
        truth = rng.integers(0, 2, n).tolist()
        c = confusion(pred, truth)
        tally = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
        for p, t in zip(pred, truth):
            key = ("t" if p == t else "f") + ("p" if p else "n")
            tally[key] += 1
        assert c.model_dump() == tally
        assert c.total == n

        precision, recall, f1 = precision_recall_f1(c)
        tp, fp, fn = tally["tp"], tally["fp"], tally["fn"]
        exp_p = tp / (tp + fp) if tp + fp else 0.0
        exp_r = tp / (tp + fn) if tp + fn else 0.0
        exp_f = 2 * exp_p * exp_r / (exp_p + exp_r) if exp_p + exp_r else 0.0
        assert (precision, recall, f1) == (exp_p, exp_r, exp_f)
        assert accuracy(c) == (tally["tp"] + tally["tn"]) / n


def test_precision_recall_f1_examples() -> None:
    assert precision_recall_f1(_counts(tp=3, fp=1, fn=1)) == (0.75, 0.75, 0.75)
    assert precision_recall_f1(_counts(tp=5)) == (1.0, 1.0, 1.0)
    assert precision_recall_f1(_counts()) == (0.0, 0.0, 0.0)


def test_f1_is_harmonic_mean() -> None:
    p, r, f1 = precision_recall_f1(_counts(tp=4, fp=2, fn=6))
    assert f1 == pytest.approx(2 / (1 / p + 1 / r))


def test_accuracy_examples() -> None:
    assert accuracy(_counts(tp=1, tn=1, fp=1, fn=1)) == 0.5
    assert accuracy(_counts(tp=2, tn=3)) == 1.0
    assert accuracy(_counts(fp=1, fn=4)) == 0.0
    with pytest.raises(RejectedInputError):
        accuracy(_counts())


def test_metrics_are_permutation_invariant() -> None:
    rng = np.random.default_rng(7)
    pred = rng.integers(0, 2, 50)
    truth = rng.integers(0, 2, 50)
    order = rng.permutation(50)
    assert metrics_row("x", pred, truth) == metrics_row("x", pred[order], truth[order])


def test_macro_average() -> None:
    rows = [
        MetricsRow(appliance="a", accuracy=1.0, recall=1.0, precision=1.0, f1=1.0),
        MetricsRow(appliance="b", accuracy=0.8, recall=0.5, precision=0.5, f1=0.5),
    ]
    avg = macro_average(rows)
    assert avg.appliance == "average"
    assert avg.accuracy == pytest.approx(0.9)
    assert macro_average(rows[:1]).model_dump(exclude={"appliance"}) == rows[0].model_dump(
        exclude={"appliance"}
    )
    with pytest.raises(RejectedInputError):
        macro_average([])


def test_macro_average_reproduces_published_edge_average() -> None:
    rows = [
        MetricsRow(appliance=a, accuracy=acc, recall=r, precision=p, f1=f)
        for a, acc, r, p, f in EDGE_TABLE
    ]
    avg = macro_average(rows)
    assert avg.accuracy == pytest.approx(0.9256, abs=1e-4)
    assert avg.recall == pytest.approx(0.7450, abs=1e-4)
    assert avg.precision == pytest.approx(0.7825, abs=1e-4)
    assert avg.f1 == pytest.approx(0.7414, abs=1e-4)


def test_metrics_report_and_csv(tmp_path: Path) -> None:
    truth = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    report = metrics_report(truth.copy(), truth, ["lamp", "fan_1"])
    assert [r.appliance for r in report.rows] == ["lamp", "fan_1"]
    assert report.average.f1 == 1.0

    path = write_report_csv(report, tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[1] == "lamp,1.0000,1.0000,1.0000,1.0000"
    assert lines[-1].startswith("average,")
    assert len(pd.read_csv(path)) == 3


def test_metrics_report_shape_checks() -> None:
    with pytest.raises(RejectedInputError):
        metrics_report(np.zeros((3, 2), int), np.zeros((3, 1), int), ["a", "b"])
    with pytest.raises(RejectedInputError):
        metrics_report(np.zeros((3, 2), int), np.zeros((3, 2), int), ["a"])
