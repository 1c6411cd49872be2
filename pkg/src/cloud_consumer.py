"""
Cloud consume loop: rebuilds each household's sample stream from delivered
envelopes, batches complete windows per household and runs Seq2Point once
``batch_threshold`` windows are pending (or after ``flush_after_s`` of
silence), persists the results and only then acknowledges envelopes.

An envelope is acked once none of its samples can still contribute to a
window that has not been persisted.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Deque, Dict, List, Optional, Set

from pydantic import ValidationError

from .broker_client import BrokerClient, Delivery
from .errors import NilmError, RejectedInputError
from .models import CloudConfig, MessageEnvelope, ResultRecord, dead_letter_queue
from .preprocess import SlidingWindowQueue, WindowBatch
from .result_store import ResultStore

if TYPE_CHECKING:
    from .worker import InferenceService

log = logging.getLogger(__name__)


@dataclass
class _Span:
    tag: int
    last_index: int


@dataclass
class HouseholdState:
    window: SlidingWindowQueue
    seen_seqs: Set[int] = field(default_factory=set)
    pending: List[WindowBatch] = field(default_factory=list)
    # pushed-sample index at which each pending window starts
    pending_starts: List[int] = field(default_factory=list)
    spans: Deque[_Span] = field(default_factory=deque)


class CloudConsumer:
    def __init__(
        self,
        cfg: CloudConfig,
        service: "InferenceService",
        store: ResultStore,
        client: Optional[BrokerClient] = None,
    ):
        self.cfg = cfg
        self.service = service
        self.store = store
        self.client = client
        self.window = service.model.window
        self.households: Dict[str, HouseholdState] = {}
        self.batches_run = 0
        self.results_written = 0
        self.duplicates = 0
        self.dead_lettered = 0

    def _state(self, household_id: str) -> HouseholdState:
        state = self.households.get(household_id)
        if state is None:
            state = self.households[household_id] = HouseholdState(
                window=SlidingWindowQueue(self.window, household_id=household_id)
            )
        return state

    # ------------------------------------------------------------ deliveries

    def handle(self, delivery: Delivery) -> None:
        try:
            envelope = MessageEnvelope.model_validate(delivery.envelope)
            self.store.path_for(envelope.household_id)
        except ValidationError as e:
            self._dead_letter(delivery, f"invalid envelope: {e.error_count()} errors")
            return
        except RejectedInputError as e:
            self._dead_letter(delivery, str(e))
            return

        state = self._state(envelope.household_id)
        if envelope.seq in state.seen_seqs:
            log.debug(f"Duplicate envelope {envelope.household_id}#{envelope.seq}")
            self.duplicates += 1
            self.client.ack(delivery.tag)
            return
        state.seen_seqs.add(envelope.seq)

        if envelope.edge_results:
            self.results_written += self.store.persist(
                ResultRecord(
                    household_id=envelope.household_id,
                    ts_ms=r.ts_ms,
                    targets=r.targets,
                    producer="edge",
                    model_version=r.model_version,
                )
                for r in envelope.edge_results
            )

        for sample in envelope.samples:
            window = state.window.push(sample.ts, [sample.p, sample.q])
            if window is not None:
                state.pending.append(window)
                state.pending_starts.append(state.window.pushed - self.window)
                if len(state.pending) >= self.cfg.batch_threshold:
                    self._flush(envelope.household_id, state)
        state.spans.append(_Span(tag=delivery.tag, last_index=state.window.pushed - 1))
        self._ack_settled(state)

    def _dead_letter(self, delivery: Delivery, reason: str) -> None:
        """Park an unprocessable delivery on ``<queue>.dead`` and ack it."""
        log.warning(f"Dead-lettering delivery {delivery.tag}: {reason}")
        try:
            self.client.publish(
                dead_letter_queue(self.cfg.queue),
                {"reason": reason, "envelope": delivery.envelope},
            )
        except NilmError as e:
            log.error(f"Dead-letter queue refused delivery {delivery.tag}: {e}")
            self.client.nack(delivery.tag)
            return
        self.client.ack(delivery.tag)
        self.dead_lettered += 1

    def _flush(self, household_id: str, state: HouseholdState) -> None:
        if not state.pending:
            return
        records = self.service.cloud_records(state.pending, household_id)
        self.batches_run += 1
        self.results_written += self.store.persist(records)
        log.debug(f"{household_id}: inferred a batch of {len(records)} windows")
        state.pending.clear()
        state.pending_starts.clear()
        self._ack_settled(state)

    def flush_all(self) -> None:
        for household_id, state in self.households.items():
            self._flush(household_id, state)

    def _ack_settled(self, state: HouseholdState) -> None:
        # next window to form starts at pushed - W + 1
        horizon = state.window.pushed - self.window + 1
        if state.pending_starts:
            horizon = min(horizon, state.pending_starts[0])
        while state.spans and state.spans[0].last_index < horizon:
            self.client.ack(state.spans.popleft().tag)

    def has_pending(self) -> bool:
        return any(s.pending for s in self.households.values())

    # ------------------------------------------------------------ loop

    def run(self, stop: threading.Event) -> None:
        if self.client is None:
            self.client = BrokerClient(self.cfg.broker_address)
        self.client.connect()
        self.client.declare(self.cfg.queue)
        self.client.declare(dead_letter_queue(self.cfg.queue))
        self.client.subscribe(self.cfg.queue, prefetch=self.cfg.prefetch)
        log.info(
            f"Consuming {self.cfg.queue} (batch threshold {self.cfg.batch_threshold}, "
            f"window {self.window})"
        )
        last_delivery = time.monotonic()
        poll = min(self.cfg.flush_after_s, 0.1)
        try:
            while not stop.is_set():
                delivery = self.client.next_delivery(timeout=poll)
                if delivery is not None:
                    self.handle(delivery)
                    last_delivery = time.monotonic()
                elif self.has_pending() and time.monotonic() - last_delivery >= self.cfg.flush_after_s:
                    self.flush_all()
        finally:
            self.client.close()
            log.info(
                f"Consumer stopped: {self.batches_run} batches, {self.results_written} results"
            )
