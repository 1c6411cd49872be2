from pathlib import Path
from typing import List

import numpy as np
import pytest

from src import seq2point
from src.broker_client import BrokerClient, Delivery
from src.cloud_consumer import CloudConsumer, dead_letter_queue
from src.errors import QueueOverflowError
from src.models import CloudConfig, S2PDims
from src.result_store import ResultStore
from src.worker import InferenceService

TINY = S2PDims(kernel=3, channels=2, conv_layers=1, d_model=4, heads=2, ffn_hidden=4)
T0 = 1_700_000_000_000


class FakeClient:
    def __init__(self, store: ResultStore):
        self.store = store
        self.acked: List[int] = []
        self.nacked: List[int] = []
        self.published: List[tuple] = []
        # cloud results on disk at the moment of each ack
        self.persisted_at_ack: List[int] = []

    def ack(self, tag: int) -> None:
        self.acked.append(tag)
        self.persisted_at_ack.append(self.store.count(producer="cloud"))

    def nack(self, tag: int) -> None:
        self.nacked.append(tag)

    def publish(self, queue: str, envelope) -> None:
        self.published.append((queue, envelope))


def _envelopes(n_samples: int, size: int, household: str = "house-1") -> List[dict]:
    rng = np.random.default_rng(0)
    out = []
    for seq, start in enumerate(range(0, n_samples, size)):
        samples = [
            {"ts": T0 + i * 2000, "p": float(rng.uniform(0, 500)), "q": float(rng.uniform(0, 50))}
            for i in range(start, min(start + size, n_samples))
        ]
        out.append({"household_id": household, "seq": seq, "sent_at_ms": T0, "samples": samples})
    return out


@pytest.fixture
def consumer(tmp_path: Path):
    def make(batch_threshold: int, client=None) -> CloudConsumer:
        cfg = CloudConfig(
            s2p_model_path=tmp_path / "unused.json",
            results_dir=tmp_path / "results",
            batch_threshold=batch_threshold,
            consume=False,
        )
        store = ResultStore(cfg.results_dir)
        model = seq2point.init_model(7, ["heater_1", "fan_1"], TINY, seed=0)
        service = InferenceService(cfg, store, model)
        return CloudConsumer(cfg, service, store, client=client or FakeClient(store))

    return make


def test_batches_every_threshold_windows(consumer) -> None:
    c = consumer(4)
    # 106 samples with W=7 give exactly 100 windows
    for tag, env in enumerate(_envelopes(106, 10), 1):
        c.handle(Delivery(tag=tag, envelope=env))
    assert c.batches_run == 25
    assert c.results_written == 100
    records = c.store.query_results("house-1", producer="cloud")
    assert [r.ts_ms for r in records] == [T0 + (i + 3) * 2000 for i in range(100)]
    assert all(len(r.targets) == 2 for r in records)
    # the last envelope's samples could still join a future window
    assert c.client.acked == list(range(1, 11))


def test_results_persist_before_ack(consumer) -> None:
    c = consumer(1000)
    envelopes = _envelopes(50, 10)
    for tag, env in enumerate(envelopes, 1):
        c.handle(Delivery(tag=tag, envelope=env))
    assert c.client.acked == []
    assert c.has_pending()

    c.flush_all()
    assert c.batches_run == 1
    assert c.client.acked == [1, 2, 3, 4]
    assert all(n == 44 for n in c.client.persisted_at_ack)


def test_redelivered_envelope_is_acked_once_more_without_new_results(consumer) -> None:
    c = consumer(4)
    envelopes = _envelopes(30, 10)
    for tag, env in enumerate(envelopes, 1):
        c.handle(Delivery(tag=tag, envelope=env))
    written = c.results_written
    c.handle(Delivery(tag=99, envelope=envelopes[0]))
    assert c.duplicates == 1
    assert c.results_written == written
    assert 99 in c.client.acked


def test_malformed_envelope_is_dead_lettered(consumer) -> None:
    c = consumer(4)
    bad = {"household_id": "house-1", "seq": 0, "samples": []}
    c.handle(Delivery(tag=5, envelope=bad))
    [(queue, body)] = c.client.published
    assert queue == dead_letter_queue(c.cfg.queue)
    assert body["envelope"] == bad
    assert body["reason"].startswith("invalid envelope")
    assert c.client.acked == [5]
    assert c.dead_lettered == 1


def test_edge_results_are_stored(consumer) -> None:
    c = consumer(4)
    env = _envelopes(3, 3)[0]
    env["edge_results"] = [
        {
            "ts_ms": T0 + 2000,
            "targets": [{"id": "heater_1", "prob": 0.9, "state": 1}],
            "model_version": "gbdt-x",
        }
    ]
    c.handle(Delivery(tag=1, envelope=env))
    latest = c.store.latest_edge("house-1")
    assert latest.ts_ms == T0 + 2000
    assert latest.model_version == "gbdt-x"


def test_households_have_separate_windows(consumer) -> None:
    c = consumer(1000)
    for tag, env in enumerate(_envelopes(8, 4, "a") + _envelopes(6, 3, "b"), 1):
        c.handle(Delivery(tag=tag, envelope=env))
    c.flush_all()
    assert len(c.store.query_results("a")) == 2
    assert c.store.query_results("b") == []


def test_unusable_household_id_is_dead_lettered_not_raised(consumer) -> None:
    c = consumer(4)
    poison = _envelopes(3, 3)[0]
    poison["household_id"] = "house 1"
    c.handle(Delivery(tag=1, envelope=poison))
    good = _envelopes(10, 10)[0]
    c.handle(Delivery(tag=2, envelope=good))

    [(queue, body)] = c.client.published
    assert queue == "nilm.samples.dead"
    assert body["envelope"]["household_id"] == "house 1"
    assert c.client.acked[0] == 1
    assert c.dead_lettered == 1
    assert list(c.households) == ["house-1"]
    assert not any(c.store.results_dir.glob("house 1*"))


def test_full_dead_letter_queue_nacks_instead_of_dropping(consumer) -> None:
    c = consumer(4)

    def refuse(queue, envelope):
        raise QueueOverflowError(f"queue {queue} is full")

    c.client.publish = refuse
    c.handle(Delivery(tag=3, envelope={"household_id": "house-1"}))
    assert c.client.nacked == [3]
    assert c.client.acked == []
    assert c.dead_lettered == 0


def test_dead_letters_are_accepted_by_the_broker(consumer, broker_server) -> None:
    with BrokerClient(broker_server.address, connect_tries=1, timeout=5.0) as client:
        c = consumer(4, client=client)
        client.declare(c.cfg.queue)
        client.declare(dead_letter_queue(c.cfg.queue))
        client.publish(c.cfg.queue, _envelopes(3, 3)[0])
        client.subscribe(c.cfg.queue, prefetch=10)
        delivery = client.next_delivery(timeout=5)
        # a body the consumer cannot use, past broker validation
        broken = {**delivery.envelope, "samples": "none"}
        c.handle(Delivery(tag=delivery.tag, envelope=broken))
        assert c.dead_lettered == 1

    with BrokerClient(broker_server.address, connect_tries=1, timeout=5.0) as reader:
        reader.subscribe(dead_letter_queue(c.cfg.queue))
        parked = reader.next_delivery(timeout=5)
        assert parked.envelope["envelope"] == broken
        assert parked.envelope["reason"].startswith("invalid envelope")
        reader.ack(parked.tag)
