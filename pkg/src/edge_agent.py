"""
Edge agent: cleans each incoming sample, keeps the household's sliding
window, optionally runs the GBDT on every complete window, and publishes
cleaned samples to the broker in sequenced envelopes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Iterator, List, Optional

import backoff

from . import datagen, gbdt
from .broker_client import BrokerClient
from .errors import QueueOverflowError, RejectedInputError
from .models import (
    EdgeAgentConfig,
    EdgeResult,
    MessageEnvelope,
    PowerSample,
    ResultRecord,
    SampleRecord,
    TargetPrediction,
)
from .preprocess import SlidingWindowQueue, sample_is_valid
from .result_store import ResultStore

log = logging.getLogger(__name__)

PUBLISH_MAX_TIME = 60


@dataclass
class EdgeRunStats:
    samples_in: int = 0
    rejected: int = 0
    published: int = 0
    envelopes: int = 0
    windows: int = 0
    local_results: int = 0


def now_ms() -> int:
    return int(time.time() * 1000)


class EdgeAgent:
    def __init__(
        self,
        cfg: EdgeAgentConfig,
        client: Optional[BrokerClient] = None,
        model: Optional[gbdt.GbdtModel] = None,
        store: Optional[ResultStore] = None,
    ):
        self.cfg = cfg
        self.client = client or BrokerClient(cfg.broker_address, cfg.connect_tries)
        self.model = model
        if cfg.mode == "edge-infer":
            self.model = model or gbdt.load(cfg.gbdt_model_path)
            if self.model.schema.window != cfg.window:
                raise RejectedInputError(
                    f"GBDT model window {self.model.schema.window} != agent window {cfg.window}"
                )
            self.store = store or ResultStore(cfg.results_dir)
        else:
            self.store = store
        self.queue = SlidingWindowQueue(cfg.window, household_id=cfg.household_id)
        self.stats = EdgeRunStats()
        self._seq = 0
        self._samples: List[SampleRecord] = []
        self._edge_results: List[EdgeResult] = []

    def samples(self) -> Iterator[PowerSample]:
        if self.cfg.source == "file":
            yield from datagen.frame_to_samples(datagen.read_csv(self.cfg.input_path))
        else:
            yield from datagen.live_samples(self.cfg.scenario)

    # ------------------------------------------------------------ pipeline

    def process(self, sample: PowerSample) -> None:
        self.stats.samples_in += 1
        if not sample_is_valid(sample):
            self.stats.rejected += 1
            return
        window = self.queue.push(sample.ts_ms, [sample.active_power, sample.reactive_power])
        if window is not None:
            self.stats.windows += 1
            if self.model is not None:
                self._infer(window)
        self._samples.append(sample.record())
        if len(self._samples) >= self.cfg.envelope_size:
            self.flush()

    def _infer(self, window) -> None:
        probs = gbdt.predict_proba(self.model, window)
        targets = [
            TargetPrediction(id=tid, prob=float(p), state=int(p > 0.5))
            for tid, p in zip(self.model.target_ids, probs)
        ]
        record = ResultRecord(
            household_id=self.cfg.household_id,
            ts_ms=window.mid_ts_ms,
            targets=targets,
            producer="edge",
            model_version=self.model.version,
        )
        self.stats.local_results += self.store.persist([record])
        self._edge_results.append(
            EdgeResult(ts_ms=record.ts_ms, targets=targets, model_version=record.model_version)
        )

    def flush(self) -> None:
        if not self._samples:
            return
        envelope = MessageEnvelope(
            household_id=self.cfg.household_id,
            seq=self._seq,
            sent_at_ms=now_ms(),
            samples=self._samples,
            edge_results=self._edge_results or None,
        )
        self._publish(envelope)
        self._seq += 1
        self.stats.envelopes += 1
        self.stats.published += len(self._samples)
        self._samples = []
        self._edge_results = []

    @backoff.on_exception(backoff.expo, QueueOverflowError, max_time=PUBLISH_MAX_TIME, max_value=1)
    def _publish(self, envelope: MessageEnvelope) -> None:
        self.client.publish(self.cfg.queue, envelope)

    def run(self) -> EdgeRunStats:
        """Process the whole source; raises if the broker stays unreachable."""
        self.client.connect()
        try:
            self.client.declare(self.cfg.queue)
            last_ts = None
            for sample in self.samples():
                if self.cfg.realtime and last_ts is not None and sample.ts_ms is not None:
                    time.sleep(max(0.0, (sample.ts_ms - last_ts) / 1000.0))
                if sample.ts_ms is not None:
                    last_ts = sample.ts_ms
                self.process(sample)
            self.flush()
        finally:
            self.client.close()
        s = self.stats
        log.info(
            f"Edge agent {self.cfg.household_id}: {s.samples_in} samples, {s.rejected} rejected, "
            f"{s.published} published in {s.envelopes} envelopes, {s.local_results} local results"
        )
        return s
