"""Training-loop tests: the log-loss metric, early stopping, planted-task
learnability, cross-validation bookkeeping, and prediction export."""

import io
import math

import numpy as np
import pytest

from planted import make_planted_dataset
from msnet.embed_store import EmbeddingSet
from msnet.errors import ConfigError, TrainingDiverged, ValidationError
from msnet.model import ExampleInput, MsnetConfig, forward, init_params
from msnet.train_eval import (
    CvReport,
    LabeledExample,
    TrainConfig,
    assemble_examples,
    cross_validate,
    ensemble_probs,
    labeled_dataset,
    log_loss,
    predict_csv,
    predict_probs,
    split_eval,
    train_fold,
)

LN3 = 1.0986122886681098

PLANT_CFG = MsnetConfig(
    layers=2, s_dim=8, d_h=16, span_method="meanpool",
    dropout_sim=0.0, dropout_score=0.0, dropout_attn_tokens=0.0,
)


def plant_train_config(**kwargs):
    merged = dict(lr=0.03, batch_size=32, max_epochs=30, patience=30, seed=0)
    merged.update(kwargs)
    return TrainConfig(**merged)


# --- log_loss -------------------------------------------------------------------


def test_log_loss_perfect_prediction_is_zero():
    loss = log_loss([[1.0, 0.0, 0.0]], [0])
    assert abs(loss) < 1e-12  # clipping leaves -ln(1 - 1e-15)


def test_log_loss_uniform_is_ln3():
    probs = np.full((7, 3), 1.0 / 3.0)
    assert abs(log_loss(probs, [0, 1, 2, 0, 1, 2, 0]) - LN3) < 1e-9


def test_log_loss_frozen_value():
    assert abs(log_loss([[0.7, 0.2, 0.1]], [0]) - 0.35667494393873245) < 1e-12
    assert abs(log_loss([[0.7, 0.2, 0.1]], [0]) - 0.356675) < 1e-6


def test_log_loss_clipping_bounds_confident_mistakes():
    loss = log_loss([[1.0, 0.0, 0.0]], [1])
    assert abs(loss - (-math.log(1e-15))) < 1e-9


def test_log_loss_validation():
    with pytest.raises(ValidationError):
        log_loss([[0.5, 0.4, 0.0]], [0])  # rows must sum to 1
    with pytest.raises(ValidationError):
        log_loss([[0.5, 0.5, 0.0]], [0, 1])  # length mismatch
    with pytest.raises(ValidationError):
        log_loss(np.zeros((0, 3)), [])
    with pytest.raises(ValidationError):
        log_loss([[1.0, 0.0, 0.0]], [3])


# --- config and helpers ------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1e-4)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(eval_fraction=1.0)
    TrainConfig(lr=0.0)  # allowed: freezes params, exercised below


def test_labeled_example_validates_label():
    ex = make_planted_dataset(3)[0]
    with pytest.raises(ValidationError):
        LabeledExample(id="x", input=ex.input, label=5)


def test_split_eval_is_a_deterministic_partition():
    data = make_planted_dataset(30)
    train, val = split_eval(data, 0.2, seed=3)
    train2, val2 = split_eval(data, 0.2, seed=3)
    assert [ex.id for ex in train] == [ex.id for ex in train2]
    assert [ex.id for ex in val] == [ex.id for ex in val2]
    assert len(val) == 6 and len(train) == 24
    assert {ex.id for ex in train} | {ex.id for ex in val} == {ex.id for ex in data}
    assert not ({ex.id for ex in train} & {ex.id for ex in val})
    other = split_eval(data, 0.2, seed=4)
    assert {ex.id for ex in other[1]} != {ex.id for ex in val}


def test_assemble_examples_reports_missing_embeddings():
    data = make_planted_dataset(3)

    class Doc:
        def __init__(self, doc_id):
            self.doc_id = doc_id
            self.tokens = []

    with pytest.raises(ValidationError, match="ghost"):
        assemble_examples([Doc("ghost")], {})


# --- train_fold ----------------------------------------------------------------------


def test_planted_task_reaches_low_val_loss():
    data = make_planted_dataset(750)
    train, val = split_eval(data, 0.2, seed=0)
    params, history = train_fold(train, val, PLANT_CFG, plant_train_config())
    assert history.best_val_loss < 0.05
    assert history.best_epoch <= 30
    # reported best is the minimum of the epoch curve
    assert history.best_val_loss == min(e.val_loss for e in history.epochs)
    assert history.best_val_loss <= history.epochs[-1].val_loss


def test_zero_lr_patience_one_stops_after_two_epochs():
    data = make_planted_dataset(60)
    train, val = split_eval(data, 0.25, seed=1)
    initial = init_params(PLANT_CFG)
    initial.w_score.value[...] = 0.0
    initial.b_score.value[...] = 0.0
    params, history = train_fold(
        train, val, PLANT_CFG,
        plant_train_config(lr=0.0, patience=1, max_epochs=30),
        initial=initial,
    )
    assert [e.epoch for e in history.epochs] == [1, 2]
    assert history.best_epoch == 1
    for stats in history.epochs:
        assert abs(stats.val_loss - LN3) < 1e-9
    # learnable tensors never moved (running bn stats are state, not weights)
    for (name, p), (_, q) in zip(params.named_parameters(), initial.named_parameters()):
        np.testing.assert_array_equal(p.value, q.value, err_msg=name)


def test_train_fold_is_bit_deterministic():
    data = make_planted_dataset(120, seed=5)
    train, val = split_eval(data, 0.2, seed=5)
    tc = plant_train_config(max_epochs=4, seed=11)
    params1, hist1 = train_fold(train, val, PLANT_CFG, tc)
    params2, hist2 = train_fold(train, val, PLANT_CFG, tc)
    for (name, p), (_, q) in zip(params1.named_parameters(), params2.named_parameters()):
        np.testing.assert_array_equal(p.value, q.value, err_msg=name)
    np.testing.assert_array_equal(params1.bn.running_mean, params2.bn.running_mean)
    np.testing.assert_array_equal(params1.bn.running_var, params2.bn.running_var)
    assert [e.val_loss for e in hist1.epochs] == [e.val_loss for e in hist2.epochs]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_train_fold_divergence_reports_history():
    data = make_planted_dataset(60, seed=2)
    train, val = split_eval(data, 0.25, seed=2)
    with pytest.raises(TrainingDiverged) as exc_info:
        train_fold(train, val, PLANT_CFG, plant_train_config(lr=1e200, max_epochs=5))
    assert isinstance(exc_info.value.history, list)


def test_train_fold_validates_inputs():
    data = make_planted_dataset(9)
    with pytest.raises(ValidationError):
        train_fold(data[:1], data[1:3], PLANT_CFG, plant_train_config())
    with pytest.raises(ValidationError):
        train_fold(data[:6], [], PLANT_CFG, plant_train_config())


# --- cross_validate ---------------------------------------------------------------------


def test_cross_validate_partitions_and_scores():
    data = make_planted_dataset(120, seed=7)
    result = cross_validate(data, PLANT_CFG, plant_train_config(max_epochs=3), k=3)
    assert len(result.fold_params) == 3
    assert len(result.report.fold_losses) == 3
    sizes = [0, 0, 0]
    for ex in data:
        sizes[result.assignment[ex.id]] += 1
    assert max(sizes) - min(sizes) <= 1
    assert result.report.mean == pytest.approx(np.mean(result.report.fold_losses))
    assert result.report.std == pytest.approx(np.std(result.report.fold_losses, ddof=1))
    assert result.report.test_loss is None and result.test_probs is None
    assert result.report.seconds > 0


def test_cross_validate_two_folds_four_examples():
    data = make_planted_dataset(4)
    result = cross_validate(
        data, PLANT_CFG,
        plant_train_config(batch_size=2, max_epochs=2), k=2,
    )
    assert sorted(result.assignment.values()) == [0, 0, 1, 1]
    assert len(result.fold_params) == 2


def test_cross_validate_scores_test_ensemble():
    data = make_planted_dataset(150, seed=9)
    test = make_planted_dataset(30, seed=10)
    result = cross_validate(
        data, PLANT_CFG, plant_train_config(max_epochs=6), k=3, test=test
    )
    assert result.test_probs.shape == (30, 3)
    np.testing.assert_allclose(result.test_probs.sum(axis=1), 1.0, atol=1e-9)
    assert result.report.test_loss == pytest.approx(
        log_loss(result.test_probs, [ex.label for ex in test])
    )


def test_cross_validate_reports_are_bit_identical():
    data = make_planted_dataset(90, seed=12)
    r1 = cross_validate(data, PLANT_CFG, plant_train_config(max_epochs=3), k=3)
    r2 = cross_validate(data, PLANT_CFG, plant_train_config(max_epochs=3), k=3)
    assert r1.report.canonical_json() == r2.report.canonical_json()
    assert "seconds" not in r1.report.canonical_json()


def test_cv_report_arithmetic():
    report = CvReport.from_losses((0.1, 0.2, 0.3, 0.4, 0.5), seconds=1.5)
    assert abs(report.mean - 0.3) < 1e-12
    assert abs(report.std - 0.15811388300841897) < 1e-12
    assert report.seconds == 1.5
    with pytest.raises(ValidationError):
        CvReport.from_losses((0.1,))


# --- prediction export --------------------------------------------------------------------


def test_ensemble_probs_average_and_renormalize():
    out = ensemble_probs([[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]])
    np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]], atol=1e-15)
    out = ensemble_probs([[[0.4, 0.4, 0.1]]])
    np.testing.assert_allclose(out, [[4 / 9, 4 / 9, 1 / 9]], atol=1e-15)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-15)


def test_predict_csv_uniform_model():
    data = make_planted_dataset(5)
    params = init_params(PLANT_CFG)
    params.w_score.value[...] = 0.0
    params.b_score.value[...] = 0.0
    buf = io.StringIO()
    probs = predict_csv(
        [params], PLANT_CFG, [(ex.id, ex.input) for ex in data], buf
    )
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == "ID,A,B,NEITHER"
    assert len(lines) == 6
    first = lines[1].split(",")
    assert first[0] == data[0].id
    assert [float(v) for v in first[1:]] == [1.0 / 3.0] * 3
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    # round trip: parsed rows equal returned probabilities exactly
    parsed = np.array([[float(v) for v in line.split(",")[1:]] for line in lines[1:]])
    np.testing.assert_array_equal(parsed, probs)


def test_predict_csv_requires_models():
    data = make_planted_dataset(3)
    with pytest.raises(ValidationError):
        predict_csv([], PLANT_CFG, [(ex.id, ex.input) for ex in data], io.StringIO())


def test_predict_probs_batching_is_seamless():
    data = make_planted_dataset(7)
    params = init_params(PLANT_CFG)
    inputs = [ex.input for ex in data]
    whole = predict_probs(inputs, params, PLANT_CFG, batch_size=256)
    chunked = predict_probs(inputs, params, PLANT_CFG, batch_size=2)
    np.testing.assert_allclose(whole, chunked, atol=1e-12)


def test_labeled_dataset_pairs_records_with_examples():
    from msnet.gap_data import GapRecord

    data = make_planted_dataset(3)
    records = [
        GapRecord(
            id=data[0].id, text="t", pronoun="he", pronoun_offset=0,
            a_text="A", a_offset=0, a_coref=True,
            b_text="B", b_offset=0, b_coref=False, url="",
        )
    ]
    out = labeled_dataset(records, {ex.id: ex.input for ex in data})
    assert out[0].label == 0 and out[0].id == data[0].id
    with pytest.raises(ValidationError, match="missing-id"):
        labeled_dataset(
            [GapRecord(id="missing-id", text="t", pronoun="he", pronoun_offset=0,
                       a_text="A", a_offset=0, a_coref=False,
                       b_text="B", b_offset=0, b_coref=True, url="")],
            {},
        )
