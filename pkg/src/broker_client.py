"""
Synchronous broker client shared by the edge agent (publisher) and the cloud
consumer. Connecting retries with exponential backoff; everything else is
one request, one reply on a single socket.
"""

from __future__ import annotations

import logging
import select
import socket
from collections import deque
from typing import Deque, NamedTuple, Optional, Union

import backoff

from config import settings

from .errors import ERROR_CODES, ProtocolError
from .framing import recv_frame, send_frame
from .models import MessageEnvelope, parse_address

log = logging.getLogger(__name__)


class Delivery(NamedTuple):
    """A delivered message; ``envelope`` is the raw JSON object."""

    tag: int
    envelope: dict


def _raise_error(frame: dict) -> None:
    cls = ERROR_CODES.get(frame.get("code"), ProtocolError)
    raise cls(frame.get("detail", ""))


class BrokerClient:
    def __init__(
        self,
        address: str = settings.broker_address,
        connect_tries: int = settings.connect_tries,
        timeout: Optional[float] = settings.request_timeout,
    ):
        self.address = address
        self.connect_tries = connect_tries
        self.timeout = timeout
        self.sock: Optional[socket.socket] = None
        # deliveries read while waiting for a confirm
        self._pending: Deque[dict] = deque()

    def __enter__(self) -> "BrokerClient":
        self.connect()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def connect(self) -> "BrokerClient":
        @backoff.on_exception(
            backoff.expo,
            OSError,
            max_tries=self.connect_tries,
            max_value=2,
            on_backoff=lambda d: log.warning(
                f"Broker {self.address} unreachable, retry {d['tries']}/{self.connect_tries}"
            ),
        )
        def _open() -> socket.socket:
            return socket.create_connection(parse_address(self.address), timeout=self.timeout)

        self.sock = _open()
        self.sock.settimeout(None)
        log.info(f"Connected to broker {self.address}")
        return self

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    # ------------------------------------------------------------ requests

    def _require(self) -> socket.socket:
        if self.sock is None:
            raise ConnectionError("broker client is not connected")
        return self.sock

    def _read(self) -> dict:
        frame = recv_frame(self._require())
        if frame is None:
            raise ConnectionError("broker closed the connection")
        return frame

    def _request(self, body: dict) -> dict:
        sock = self._require()
        send_frame(sock, body)
        if self.timeout is not None:
            ready, _, _ = select.select([sock], [], [], self.timeout)
            if not ready:
                raise TimeoutError(f"broker did not answer {body['op']} in {self.timeout}s")
        while True:
            frame = self._read()
            op = frame.get("op")
            if op == "DELIVER":
                self._pending.append(frame)
            elif op == "ERROR":
                _raise_error(frame)
            else:
                return frame

    def declare(self, queue: str, capacity: Optional[int] = None) -> None:
        body = {"op": "DECLARE", "queue": queue}
        if capacity is not None:
            body["capacity"] = capacity
        self._request(body)

    def publish(self, queue: str, envelope: Union[MessageEnvelope, dict]) -> None:
        """Raises QueueOverflowError when the queue buffer is full."""
        if isinstance(envelope, MessageEnvelope):
            envelope = envelope.wire()
        self._request({"op": "PUBLISH", "queue": queue, "envelope": envelope})

    def subscribe(self, queue: str, prefetch: int = 1000) -> None:
        self._request({"op": "SUBSCRIBE", "queue": queue, "prefetch": prefetch})

    def ack(self, tag: int) -> None:
        send_frame(self._require(), {"op": "ACK", "tag": tag})

    def nack(self, tag: int) -> None:
        send_frame(self._require(), {"op": "NACK", "tag": tag})

    def next_delivery(self, timeout: Optional[float] = None) -> Optional[Delivery]:
        """
        Next delivered message, or None if nothing arrives within ``timeout``
        seconds. A broker ERROR frame (e.g. for a bad ack) is raised here.
        """
        if not self._pending:
            ready, _, _ = select.select([self._require()], [], [], timeout)
            if not ready:
                return None
            frame = self._read()
            if frame.get("op") == "ERROR":
                _raise_error(frame)
            if frame.get("op") != "DELIVER":
                raise ProtocolError(f"expected DELIVER, got {frame.get('op')!r}")
        else:
            frame = self._pending.popleft()
        return Delivery(tag=frame["tag"], envelope=frame["envelope"])
