from pathlib import Path

import pytest

from src import datagen, gbdt, seq2point, training
from src.errors import FormatError, RejectedInputError
from src.model_finder import ModelFileFinder
from src.models import (
    ApplianceCatalog,
    ApplianceEntry,
    ApplianceProfile,
    GbdtTrainParams,
    S2PDims,
    S2PTrainConfig,
    ScenarioConfig,
)

TINY = S2PDims(kernel=3, channels=2, conv_layers=1, d_model=4, heads=2, ffn_hidden=4)
FAST_GBDT = GbdtTrainParams(n_trees=5, max_depth=3)


@pytest.fixture
def dataset(tmp_path: Path, scenario_frame) -> Path:
    frame, _ = datagen.inject_dirty(scenario_frame, 0.05, seed=2)
    return datagen.write_csv(frame, tmp_path / "dataset.csv")


def test_load_dataset_cleans(dataset: Path) -> None:
    frame = training.load_dataset(dataset)
    assert len(frame) == 570
    assert datagen.label_columns(frame) == ["lamp", "fan_1", "fan_2"]


def test_load_dataset_needs_labels(tmp_path: Path, scenario_frame) -> None:
    unlabeled = scenario_frame.drop(columns=["lamp", "fan_1", "fan_2"])
    path = datagen.write_csv(unlabeled, tmp_path / "plain.csv")
    with pytest.raises(RejectedInputError):
        training.load_dataset(path)


def test_train_and_evaluate_gbdt(tmp_path: Path, dataset: Path) -> None:
    out = tmp_path / "run"
    outcome = training.train_and_evaluate("gbdt", dataset, out, window=5, gbdt_params=FAST_GBDT)
    assert (outcome.train_rows, outcome.test_rows) == (456, 114)
    assert outcome.model_path == ModelFileFinder(out).find_latest("gbdt")
    assert [r.appliance for r in outcome.report.rows] == ["lamp", "fan_1", "fan_2"]
    assert outcome.model.schema.norm is not None

    loaded = training.load_model(outcome.model_path)
    assert isinstance(loaded, gbdt.GbdtModel)
    assert loaded.version == outcome.model.version
    frame = training.load_dataset(dataset)
    assert training.evaluate(loaded, frame) == training.evaluate(outcome.model, frame)


def test_second_save_gets_suffix(tmp_path: Path, dataset: Path) -> None:
    paths = {
        training.train_and_evaluate(
            "gbdt", dataset, tmp_path, window=5, gbdt_params=FAST_GBDT
        ).model_path
        for _ in range(2)
    }
    assert len(paths) == 2


def test_s2p_fit_and_kind_detection(tmp_path: Path, dataset: Path) -> None:
    frame = training.load_dataset(dataset)
    cfg = S2PTrainConfig(epochs=1, batch_size=64, window=5)
    model = training.fit("s2p", frame, window=5, s2p_config=cfg, s2p_dims=TINY)
    assert isinstance(model, seq2point.S2PModel)
    assert training.model_window(model) == 5
    assert training.model_targets(model) == ["lamp", "fan_1", "fan_2"]

    plain = training.save_model(model, tmp_path / "my-model.json")
    assert training.model_kind(plain) == "s2p"
    assert isinstance(training.load_model(plain), seq2point.S2PModel)
    assert len(training.evaluate(model, frame).rows) == 3


def test_model_kind_rejects_non_models(tmp_path: Path) -> None:
    path = tmp_path / "junk.json"
    path.write_text("not json")
    with pytest.raises(FormatError):
        training.model_kind(path)
    path.write_text("[1]")
    with pytest.raises(FormatError):
        training.model_kind(path)


def test_rejections(tmp_path: Path, dataset: Path, scenario_frame) -> None:
    frame = training.load_dataset(dataset)
    with pytest.raises(RejectedInputError):
        training.fit("svm", frame, window=5)
    with pytest.raises(RejectedInputError):
        training.train_and_evaluate("svm", dataset, tmp_path, window=5)
    with pytest.raises(RejectedInputError):
        training.fit("gbdt", frame.head(3), window=5)

    model = training.fit("gbdt", frame, window=5, gbdt_params=FAST_GBDT)
    with pytest.raises(RejectedInputError):
        training.evaluate(model, frame.drop(columns=["lamp"]))


@pytest.fixture
def overlapping_pair(tmp_path: Path) -> Path:
    """
    A resistive heater and a motor drawing the same active power. Whether the
    heater is on depends on P and Q together, which no single threshold sees.
    """
    catalog = ApplianceCatalog(
        entries=[
            ApplianceEntry(
                appliance_id="heater",
                display_name="Heater",
                level_count=1,
                active_power=[100.0],
                reactive_power=[0.0],
            ),
            ApplianceEntry(
                appliance_id="motor",
                display_name="Motor",
                level_count=1,
                active_power=[100.0],
                reactive_power=[100.0],
            ),
        ]
    )
    profiles = [
        ApplianceProfile(appliance_id="heater", mean_on_s=90, mean_off_s=90),
        ApplianceProfile(appliance_id="motor", mean_on_s=90, mean_off_s=90),
    ]
    frame = datagen.generate_scenario(
        ScenarioConfig(
            catalog=catalog, profiles=profiles, duration_s=3000.0, sample_period_s=2.0, seed=11
        )
    )
    return datagen.write_csv(frame, tmp_path / "pair.csv")


@pytest.mark.slow
def test_seq2point_beats_edge_sized_gbdt(tmp_path: Path, overlapping_pair: Path) -> None:
    # two stumps cannot tell heater alone from heater plus motor
    edge_budget = GbdtTrainParams(n_trees=2, max_depth=1)
    dims = S2PDims(kernel=3, channels=4, conv_layers=1, d_model=8, heads=2, ffn_hidden=16)
    cfg = S2PTrainConfig(epochs=60, batch_size=32, learning_rate=0.02, seed=0, window=7)

    gbdt_run = training.train_and_evaluate(
        "gbdt", overlapping_pair, tmp_path / "gbdt", window=7, seed=0, gbdt_params=edge_budget
    )
    s2p_run = training.train_and_evaluate(
        "s2p", overlapping_pair, tmp_path / "s2p", window=7, seed=0, s2p_config=cfg, s2p_dims=dims
    )
    assert [r.appliance for r in s2p_run.report.rows] == ["heater", "motor"]
    assert s2p_run.report.average.f1 > gbdt_run.report.average.f1
