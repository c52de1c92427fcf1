"""Metric tests: worked examples, permutation invariance, aggregation
semantics, and table round-trips."""

import numpy as np
import pytest

from advseg.metrics import (
    MetricReport,
    confusion_matrix,
    emit_table,
    iou_from_confusion,
    mean_iou,
    parse_results_csv,
    pixel_accuracy,
    results_csv_text,
)


def test_worked_two_class_example():
    # pred differs from truth in one corner: IoU_0 = 1/2, IoU_1 = 2/3
    pred = np.array([[0, 0], [1, 1]])
    true = np.array([[0, 1], [1, 1]])
    miou, per_class = mean_iou(pred, true, 2)
    assert per_class[0] == pytest.approx(0.5)
    assert per_class[1] == pytest.approx(2.0 / 3.0)
    assert miou == pytest.approx(7.0 / 12.0)
    assert pixel_accuracy(pred, true) == pytest.approx(0.75)


def test_perfect_prediction_scores_one():
    labels = np.random.default_rng(0).integers(0, 10, size=(4, 8, 8))
    miou, per_class = mean_iou(labels, labels, 10)
    assert miou == 1.0
    assert pixel_accuracy(labels, labels) == 1.0


def test_miou_invariant_under_label_permutation():
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 5, size=(2, 16, 16))
    true = rng.integers(0, 5, size=(2, 16, 16))
    base, _ = mean_iou(pred, true, 5)
    perm = rng.permutation(5)
    permuted, _ = mean_iou(perm[pred], perm[true], 5)
    assert permuted == pytest.approx(base, rel=1e-12)


def test_absent_class_excluded_by_default():
    pred = np.array([[0, 0], [1, 1]])
    true = np.array([[0, 0], [1, 1]])
    miou, per_class = mean_iou(pred, true, 3)
    assert np.isnan(per_class[2])
    assert miou == 1.0
    zeroed, _ = mean_iou(pred, true, 3, count_empty_as_zero=True)
    assert zeroed == pytest.approx(2.0 / 3.0)


def test_false_positive_only_class_counts_in_union():
    # class 2 never occurs in truth but is predicted once: IoU_2 = 0/1 = 0
    pred = np.array([[2, 0], [1, 1]])
    true = np.array([[0, 0], [1, 1]])
    _, per_class = mean_iou(pred, true, 3)
    assert per_class[2] == 0.0


def test_confusion_matrix_accumulates_like_global_scoring():
    rng = np.random.default_rng(2)
    preds = rng.integers(0, 4, size=(6, 8, 8))
    trues = rng.integers(0, 4, size=(6, 8, 8))
    total = sum(confusion_matrix(preds[i], trues[i], 4) for i in range(6))
    direct = confusion_matrix(preds, trues, 4)
    np.testing.assert_array_equal(total, direct)
    batch_miou, _ = iou_from_confusion(total)
    global_miou, _ = mean_iou(preds, trues, 4)
    assert batch_miou == pytest.approx(global_miou, rel=1e-12)


def test_metric_inputs_validated():
    with pytest.raises(ValueError):
        mean_iou(np.zeros((2, 2)), np.zeros((3, 3)), 2)
    with pytest.raises(ValueError):
        mean_iou(np.array([]), np.array([]), 2)
    with pytest.raises(ValueError):
        mean_iou(np.array([[5]]), np.array([[0]]), 2)
    with pytest.raises(ValueError):
        pixel_accuracy(np.zeros((2, 2)), np.zeros((3, 3)))


def _rows():
    return [
        {"stage": "standard", "model": "unet", "attack": "clean", "split": "train",
         "miou": 0.731, "pixel_acc": 0.91, "loss": 0.214},
        {"stage": "standard", "model": "unet", "attack": "clean", "split": "val",
         "miou": 0.688, "pixel_acc": 0.90, "loss": 0.298},
        {"stage": "standard", "model": "linknet", "attack": "clean", "split": "train",
         "miou": 0.702, "pixel_acc": 0.89, "loss": 0.233},
    ]


def test_emit_table_generic_markdown_two_decimals():
    text = emit_table(_rows(), layout="generic", fmt="markdown")
    lines = text.strip().splitlines()
    assert lines[0].startswith("| stage")
    assert "0.73" in text and "0.21" in text
    assert "0.731" not in text


def test_emit_table_split_metrics_layout():
    text = emit_table(_rows(), layout="split_metrics", fmt="csv")
    lines = text.strip().splitlines()
    assert lines[0] == "metric,linknet,unet"
    assert lines[1].startswith("Train IoU,0.70,0.73")
    labels = [ln.split(",")[0] for ln in lines[1:]]
    assert labels == ["Train IoU", "Train Loss", "Val IoU", "Val Loss"]


def test_emit_table_attack_tag_in_row_label():
    rows = [{"stage": "attacked", "model": "unet", "attack": "pgd-linf",
             "split": "test", "miou": 0.39, "pixel_acc": 0.6, "loss": 1.9}]
    text = emit_table(rows, layout="split_metrics", fmt="csv")
    assert "Test IoU (pgd-linf)" in text


def test_emit_table_rejects_unknown_layout_and_empty():
    with pytest.raises(ValueError):
        emit_table(_rows(), layout="pivot")
    with pytest.raises(ValueError):
        emit_table([])


def test_results_csv_round_trip():
    rows = [MetricReport(0.6251, np.array([0.5, 0.75]), 0.8123, 0.4567,
                         attack_tag="pgd-l2").as_row("attacked", "unet", "test")]
    text = results_csv_text(rows)
    parsed = parse_results_csv(text)
    assert parsed[0]["miou"] == pytest.approx(0.6251, abs=1e-6)
    assert parsed[0]["attack"] == "pgd-l2"
    assert results_csv_text(parsed) == text


def test_results_csv_rejects_wrong_header():
    with pytest.raises(ValueError):
        parse_results_csv("a,b,c\n1,2,3\n")
