"""
Minimal message broker: named bounded FIFO queues behind a direct exchange,
acknowledged at-least-once delivery over length-prefixed JSON frames.

A message lives in exactly one place: a queue's buffer, its in-flight map,
or nowhere once acked. Messages in flight on a connection that closes go
back to the head of the buffer in delivery order.
"""

from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

from pydantic import ValidationError

from config import settings

from .errors import (
    BadFrameError,
    DeclarationError,
    ProtocolError,
    QueueOverflowError,
    RoutingError,
)
from .framing import error_body, recv_frame, send_frame
from .models import MessageEnvelope, is_dead_letter, parse_address

log = logging.getLogger(__name__)

DEFAULT_PREFETCH = 1000
CONFIRM = {"op": "ACK"}


class Session:
    """One client connection; sends are serialized."""

    _ids = itertools.count(1)

    def __init__(self, sock: socket.socket, peer: str = ""):
        self.id = next(self._ids)
        self.sock = sock
        self.peer = peer
        self.closed = False
        self._send_lock = threading.Lock()
        self.subscriptions: List["Subscription"] = []

    def send(self, body: dict) -> None:
        with self._send_lock:
            send_frame(self.sock, body)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass


@dataclass
class Subscription:
    queue: str
    session: Session
    prefetch: int
    in_flight: int = 0


@dataclass
class Delivery:
    envelope: dict
    subscription: Subscription


@dataclass
class QueueState:
    name: str
    capacity: int
    buffer: Deque[Tuple[int, dict]] = field(default_factory=deque)
    in_flight: Dict[int, Delivery] = field(default_factory=dict)


class Broker:
    """Queue state, linearizable under one condition variable."""

    def __init__(self, default_capacity: int = settings.broker_capacity):
        self.default_capacity = default_capacity
        self.queues: Dict[str, QueueState] = {}
        self._cond = threading.Condition()
        self._tags = itertools.count(1)
        self._sessions: Dict[int, Session] = {}

    # ------------------------------------------------------------ queue ops

    def declare_queue(self, name: str, capacity: Optional[int] = None) -> QueueState:
        if not isinstance(name, str) or not name:
            raise DeclarationError("queue name must be a non-empty string")
        capacity = self.default_capacity if capacity is None else capacity
        if not isinstance(capacity, int) or capacity < 1:
            raise DeclarationError(f"capacity must be a positive integer, got {capacity!r}")
        with self._cond:
            queue = self.queues.get(name)
            if queue is None:
                queue = self.queues[name] = QueueState(name, capacity)
                log.info(f"Declared queue {name} (capacity {capacity})")
            elif queue.capacity != capacity:
                raise DeclarationError(
                    f"queue {name} exists with capacity {queue.capacity}, not {capacity}"
                )
            return queue

    def _queue(self, name) -> QueueState:
        queue = self.queues.get(name)
        if queue is None:
            raise RoutingError(f"no queue named {name!r}")
        return queue

    def publish(self, name: str, envelope: dict) -> int:
        """Append to the buffer tail; the message is dropped on overflow."""
        with self._cond:
            queue = self._queue(name)
            if len(queue.buffer) >= queue.capacity:
                raise QueueOverflowError(f"queue {name} is full ({queue.capacity})")
            tag = next(self._tags)
            queue.buffer.append((tag, envelope))
            self._cond.notify_all()
            return tag

    def ack(self, session: Session, tag) -> None:
        with self._cond:
            queue, delivery = self._owned(session, tag)
            del queue.in_flight[tag]
            delivery.subscription.in_flight -= 1
            self._cond.notify_all()

    def nack(self, session: Session, tag) -> None:
        with self._cond:
            queue, delivery = self._owned(session, tag)
            del queue.in_flight[tag]
            delivery.subscription.in_flight -= 1
            queue.buffer.append((tag, delivery.envelope))
            self._cond.notify_all()

    def _owned(self, session: Session, tag) -> Tuple[QueueState, Delivery]:
        if not isinstance(tag, int):
            raise ProtocolError(f"delivery tag must be an integer, got {tag!r}")
        for queue in self.queues.values():
            delivery = queue.in_flight.get(tag)
            if delivery is not None and delivery.subscription.session is session:
                return queue, delivery
        raise ProtocolError(f"delivery tag {tag!r} is not in flight on this connection")

    def depth(self, name: str) -> Tuple[int, int]:
        """(buffered, in flight) message counts."""
        with self._cond:
            queue = self._queue(name)
            return len(queue.buffer), len(queue.in_flight)

    # ------------------------------------------------------------ sessions

    def attach(self, session: Session) -> None:
        with self._cond:
            self._sessions[session.id] = session

    def subscribe(self, session: Session, name: str, prefetch: int) -> Subscription:
        if not isinstance(prefetch, int) or prefetch < 1:
            raise ProtocolError(f"prefetch must be a positive integer, got {prefetch!r}")
        with self._cond:
            self._queue(name)
            sub = Subscription(queue=name, session=session, prefetch=prefetch)
            session.subscriptions.append(sub)
        return sub

    def start_dispatch(self, sub: Subscription) -> threading.Thread:
        t = threading.Thread(
            target=self._dispatch, args=(sub,), name=f"dispatch-{sub.queue}", daemon=True
        )
        t.start()
        return t

    def _dispatch(self, sub: Subscription) -> None:
        session = sub.session
        while True:
            with self._cond:
                queue = self.queues[sub.queue]
                while not session.closed and not (
                    queue.buffer and sub.in_flight < sub.prefetch
                ):
                    self._cond.wait(timeout=0.5)
                if session.closed:
                    return
                tag, envelope = queue.buffer.popleft()
                queue.in_flight[tag] = Delivery(envelope, sub)
                sub.in_flight += 1
            try:
                session.send({"op": "DELIVER", "tag": tag, "envelope": envelope})
            except OSError as e:
                log.warning(f"Delivery to session {session.id} failed: {e}")
                session.close()
                return

    def detach(self, session: Session) -> int:
        """Drop a closed session; its in-flight messages return to buffer heads."""
        requeued = 0
        with self._cond:
            session.closed = True
            self._sessions.pop(session.id, None)
            for queue in self.queues.values():
                mine = sorted(
                    tag
                    for tag, d in queue.in_flight.items()
                    if d.subscription.session is session
                )
                for tag in reversed(mine):
                    delivery = queue.in_flight.pop(tag)
                    delivery.subscription.in_flight -= 1
                    queue.buffer.appendleft((tag, delivery.envelope))
                requeued += len(mine)
            self._cond.notify_all()
        if requeued:
            log.info(f"Session {session.id} closed, requeued {requeued} unacked messages")
        return requeued

    def close_all(self) -> None:
        with self._cond:
            sessions = list(self._sessions.values())
        for s in sessions:
            s.close()

    # ------------------------------------------------------------ frames

    def handle(self, session: Session, frame: dict) -> None:
        op = frame.get("op")
        if op == "DECLARE":
            self.declare_queue(frame.get("queue"), frame.get("capacity"))
            session.send(CONFIRM)
        elif op == "PUBLISH":
            body = frame.get("envelope")
            if is_dead_letter(frame.get("queue")):
                if not isinstance(body, dict):
                    raise ProtocolError("dead letter must be a JSON object")
            else:
                try:
                    MessageEnvelope.model_validate(body)
                except ValidationError as e:
                    raise ProtocolError(f"invalid envelope: {e.error_count()} errors")
            self.publish(frame.get("queue"), body)
            session.send(CONFIRM)
        elif op == "SUBSCRIBE":
            sub = self.subscribe(
                session, frame.get("queue"), frame.get("prefetch", DEFAULT_PREFETCH)
            )
            session.send(CONFIRM)
            self.start_dispatch(sub)
        elif op == "ACK":
            self.ack(session, frame.get("tag"))
        elif op == "NACK":
            self.nack(session, frame.get("tag"))
        else:
            raise ProtocolError(f"unexpected op {op!r}")


# ---------------------------------------------------------------- server


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        broker: Broker = self.server.broker
        session = Session(self.request, peer=f"{self.client_address[0]}:{self.client_address[1]}")
        broker.attach(session)
        log.debug(f"Session {session.id} opened from {session.peer}")
        try:
            while not session.closed:
                try:
                    frame = recv_frame(self.request)
                except BadFrameError as e:
                    session.send(error_body(e.code, str(e)))
                    if e.fatal:
                        break
                    continue
                if frame is None:
                    break
                try:
                    broker.handle(session, frame)
                except ProtocolError as e:
                    session.send(error_body(e.code, str(e)))
        except OSError:
            pass
        finally:
            broker.detach(session)
            log.debug(f"Session {session.id} closed")


class BrokerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, listen: str, broker: Optional[Broker] = None):
        self.broker = broker or Broker()
        super().__init__(parse_address(listen), _ConnectionHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="broker", daemon=True)
        t.start()
        log.info(f"Broker listening on {self.address}")
        return t

    def stop(self) -> None:
        self.shutdown()
        self.broker.close_all()
        self.server_close()


def serve(listen: str, default_capacity: int = settings.broker_capacity) -> None:
    server = BrokerServer(listen, Broker(default_capacity))
    log.info(f"Broker listening on {server.address} (default capacity {default_capacity})")
    try:
        server.serve_forever()
    finally:
        server.broker.close_all()
        server.server_close()
