import os
from pathlib import Path

import pytest

from src.errors import RejectedInputError
from src.models import ResultRecord, TargetPrediction
from src.result_store import ResultStore


def record(ts: int, producer: str = "cloud", household: str = "house-1", prob: float = 0.9):
    return ResultRecord(
        household_id=household,
        ts_ms=ts,
        targets=[TargetPrediction(id="heater_1", prob=prob, state=int(prob > 0.5))],
        producer=producer,
        model_version="v1",
    )


def test_persist_and_query_in_time_order(tmp_path: Path) -> None:
    store = ResultStore(tmp_path)
    assert store.persist([record(3000), record(1000), record(2000, "edge")]) == 3
    got = store.query_results("house-1")
    assert [(r.ts_ms, r.producer) for r in got] == [(1000, "cloud"), (2000, "edge"), (3000, "cloud")]
    assert [r.ts_ms for r in store.query_results("house-1", 1500, 3000)] == [2000, 3000]
    assert [r.ts_ms for r in store.query_results("house-1", producer="cloud")] == [1000, 3000]
    assert store.query_results("house-2") == []


def test_duplicates_are_skipped(tmp_path: Path) -> None:
    store = ResultStore(tmp_path)
    assert store.persist_result(record(1000))
    assert not store.persist_result(record(1000, prob=0.1))
    # same timestamp from the other producer is a distinct record
    assert store.persist_result(record(1000, "edge"))
    assert store.count() == 2
    lines = (tmp_path / "house-1.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_latest_edge(tmp_path: Path) -> None:
    store = ResultStore(tmp_path)
    assert store.latest_edge("house-1") is None
    store.persist([record(5000, "edge"), record(9000, "cloud"), record(4000, "edge")])
    assert store.latest_edge("house-1").ts_ms == 5000


def test_second_instance_sees_records_and_dedups(tmp_path: Path) -> None:
    writer = ResultStore(tmp_path)
    reader = ResultStore(tmp_path)
    writer.persist([record(1000), record(2000)])
    assert [r.ts_ms for r in reader.query_results("house-1")] == [1000, 2000]
    assert reader.persist([record(2000), record(3000)]) == 1
    assert writer.count(producer="cloud") == 3


def test_corrupt_line_is_skipped(tmp_path: Path) -> None:
    path = tmp_path / "house-1.jsonl"
    path.write_text(record(1000).model_dump_json() + "\n{broken\n" + record(2000).model_dump_json() + "\n")
    assert [r.ts_ms for r in ResultStore(tmp_path).query_results("house-1")] == [1000, 2000]


def test_partial_trailing_line_waits_for_newline(tmp_path: Path) -> None:
    path = tmp_path / "house-1.jsonl"
    line = record(1000).model_dump_json()
    path.write_text(line[:20])
    store = ResultStore(tmp_path)
    assert store.query_results("house-1") == []
    path.write_text(line + "\n")
    assert len(store.query_results("house-1")) == 1


def test_household_id_is_validated(tmp_path: Path) -> None:
    store = ResultStore(tmp_path)
    with pytest.raises(RejectedInputError):
        store.path_for("../escape")
    with pytest.raises(RejectedInputError):
        store.persist([record(1, household="a/b")])


def test_failed_append_leaves_records_writable(tmp_path: Path, monkeypatch) -> None:
    store = ResultStore(tmp_path)
    real_open = Path.open

    def no_append(self, mode="r", *args, **kwargs):
        if "a" in mode:
            raise OSError(28, "No space left on device")
        return real_open(self, mode, *args, **kwargs)

    monkeypatch.setattr(Path, "open", no_append)
    with pytest.raises(OSError):
        store.persist([record(1000)])
    assert store.count() == 0

    monkeypatch.setattr(Path, "open", real_open)
    assert store.persist([record(1000)]) == 1
    assert store.count() == 1
    assert len((tmp_path / "house-1.jsonl").read_text().splitlines()) == 1


def test_failed_fsync_truncates_partial_batch(tmp_path: Path, monkeypatch) -> None:
    store = ResultStore(tmp_path)
    store.persist([record(1000)])
    size = (tmp_path / "house-1.jsonl").stat().st_size
    real_fsync = os.fsync

    def broken_fsync(fd):
        raise OSError(5, "Input/output error")

    monkeypatch.setattr(os, "fsync", broken_fsync)
    with pytest.raises(OSError):
        store.persist([record(2000), record(3000)])
    assert (tmp_path / "house-1.jsonl").stat().st_size == size

    monkeypatch.setattr(os, "fsync", real_fsync)
    assert store.persist([record(2000), record(3000)]) == 2
    assert [r.ts_ms for r in ResultStore(tmp_path).query_results("house-1")] == [1000, 2000, 3000]
