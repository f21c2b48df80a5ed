import math
from dataclasses import replace

import numpy as np
import pytest

from mcaer.checkpoint import load_checkpoint
from mcaer.dataset import Dataset, load_dataset
from mcaer.errors import ConfigError, DatasetError, TrainingAborted
from mcaer.model import build_model
from mcaer.optim import RmsPropState
from mcaer.selftest import small_model_config
from mcaer.train import (
    EpochRecord,
    EvalReport,
    TrainConfig,
    evaluate,
    format_history_line,
    load_batch,
    predict,
    read_history,
    train,
    train_step,
    write_history,
)


@pytest.fixture
def samples_32(synthetic_8):
    dataset = load_dataset(synthetic_8)
    return Dataset(dataset.spec, dataset.samples[:32])


def test_one_epoch_is_one_step(model, samples_32, prep):
    history = train(model, samples_32, None, TrainConfig(epochs=1, batch_size=32), prep)
    assert history.steps == 1
    assert len(history.records) == 1
    assert math.isnan(history.records[0].val_acc)
    assert history.best_epoch == 0
    assert model.mode == "eval"


def test_repeated_steps_lower_the_loss(model, synthetic, prep):
    dataset = load_dataset(synthetic)
    batch = load_batch(dataset, list(range(len(dataset))), prep, model)
    state = RmsPropState(lr=1e-3)
    model.train()
    losses = [train_step(model, batch, state) for _ in range(15)]
    assert losses[-1] < losses[0]
    assert state.steps == 15
    assert all(param.grad is None or not param.grad.any() for param in model.params.values())


def test_first_steps_strictly_lower_the_loss(model_config, synthetic, prep):
    dataset = load_dataset(synthetic)
    decreasing = []
    for seed in range(3):
        model = build_model(model_config, seed=seed).train()
        batch = load_batch(dataset, list(range(len(dataset))), prep, model)
        state = RmsPropState(lr=1e-3)
        losses = [train_step(model, batch, state) for _ in range(6)]
        decreasing.append(all(later < earlier for earlier, later in zip(losses, losses[1:])))
        if decreasing[-1]:
            break
    assert any(decreasing), losses


def test_training_is_deterministic(model_config, synthetic, prep, tmp_path):
    dataset = load_dataset(synthetic)
    config = TrainConfig(epochs=2, batch_size=5, seed=3)
    runs = []
    for _ in range(2):
        model = build_model(model_config, seed=1)
        history = train(model, dataset, dataset, config, prep)
        runs.append((history.losses(), model.params["fusion.classifier.fc2.weight"].data.copy()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_non_finite_loss_aborts(model, synthetic, prep):
    model.params["fusion.classifier.fc2.bias"].data[...] = np.nan
    with pytest.raises(TrainingAborted) as error:
        train(model, load_dataset(synthetic), None, TrainConfig(epochs=1, batch_size=4), prep)
    assert (error.value.epoch, error.value.batch) == (0, 0)


def test_checkpoint_and_history_files(model, synthetic, prep, tmp_path):
    dataset = load_dataset(synthetic)
    checkpoint, log = tmp_path / "model.ckpt", tmp_path / "history.txt"
    history = train(model, dataset, dataset, TrainConfig(epochs=2, batch_size=7), prep, checkpoint, log)
    assert checkpoint.exists()
    assert read_history(log) == history.records
    assert 0.0 <= history.best_val_acc <= 1.0
    assert [record.lr for record in history.records] == [4e-3, 4e-3]


def test_zero_epochs_saves_initial_weights(model, synthetic, prep, tmp_path):
    history = train(model, load_dataset(synthetic), None, TrainConfig(epochs=0), prep, tmp_path / "init.ckpt")
    assert history.records == []
    assert (tmp_path / "init.ckpt").exists()


def test_train_checks_prep_and_data(model, synthetic, prep):
    dataset = load_dataset(synthetic)
    with pytest.raises(DatasetError):
        train(model, Dataset(dataset.spec, []), None, TrainConfig(epochs=1), prep)
    with pytest.raises(ConfigError):
        train(model, dataset, None, TrainConfig(epochs=1), replace(prep, face_size=48))


def test_predict_and_evaluate(model, synthetic, prep):
    dataset = load_dataset(synthetic)
    probabilities = predict(model, dataset, prep, batch_size=4)
    assert probabilities.shape == (14, 7)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, atol=1e-9)
    report = evaluate(model, dataset, prep, batch_size=4)
    assert report.count == 14
    assert report.accuracy == pytest.approx(np.mean(probabilities.argmax(axis=1) == dataset.labels))


def test_report_of_perfect_and_constant_predictors():
    labels = np.repeat(np.arange(7), 2)
    perfect = EvalReport.from_predictions(labels, labels)
    assert perfect.accuracy == 1.0
    np.testing.assert_array_equal(perfect.confusion, 2 * np.eye(7, dtype=np.int64))

    constant = EvalReport.from_predictions(labels, np.zeros_like(labels))
    assert constant.accuracy == pytest.approx(1 / 7)
    assert constant.per_class.tolist() == [1.0] + [0.0] * 6
    assert "accuracy 14.29% over 14 samples" in constant.format()
    with pytest.raises(DatasetError):
        EvalReport.from_predictions([], [])


def test_history_lines_round_trip(tmp_path):
    records = [EpochRecord(0, 1.9459101090932196, 0.25, 0.004), EpochRecord(1, 1.5, 0.5, 0.004)]
    assert format_history_line(records[0]) == "0 1.9459101090932196 0.25 0.004"
    write_history(records, tmp_path / "history.txt")
    assert read_history(tmp_path / "history.txt") == records


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(precision="float16")
    config = TrainConfig()
    assert (config.lr(0), config.lr(40)) == (pytest.approx(4e-3), pytest.approx(1.6e-3))


@pytest.mark.slow
@pytest.mark.parametrize("streams", [("face", "context"), ("face", "context", "body")])
def test_overfits_eight_scenes_per_class(synthetic_8, prep, tmp_path, streams):
    dataset = load_dataset(synthetic_8)
    assert len(dataset) == 56
    config = small_model_config(streams=streams)
    accuracies = []
    for seed in range(3):
        model = build_model(config, seed=seed)
        checkpoint = tmp_path / f"seed{seed}.ckpt"
        # validating on the training scenes makes best_val_acc the best train accuracy of the run
        history = train(model, dataset, dataset, TrainConfig(epochs=200, batch_size=32, seed=seed), prep, checkpoint)
        accuracies.append(history.best_val_acc)
        if sum(accuracy >= 0.95 for accuracy in accuracies) >= 2:
            break
    assert sum(accuracy >= 0.95 for accuracy in accuracies) >= 2, accuracies

    # the kept checkpoint reproduces the accuracy it was kept for
    reloaded = load_checkpoint(checkpoint, dtype=np.float64)
    assert evaluate(reloaded, dataset, prep).accuracy == pytest.approx(accuracies[-1], abs=1 / 56 + 1e-9)
