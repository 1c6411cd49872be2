"""
Round-robin reverse proxy in front of the worker pool. Each client
connection is routed to the next healthy worker and proxied bytewise in both
directions. A background checker connects to each worker over TCP.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from collections import Counter
from typing import Dict, List, Optional

from .models import BalancerConfig, parse_address

log = logging.getLogger(__name__)

BUFFER_SIZE = 64 * 1024
CONNECT_TIMEOUT = 2.0


class RoundRobinRouter:
    """Strict round robin over the workers currently marked healthy."""

    def __init__(self, workers: List[str]):
        self.workers = list(workers)
        self.current_index = 0
        self.lock = threading.Lock()
        self.counts: Counter = Counter()

    def select(self, healthy: Dict[str, bool], exclude=()) -> Optional[str]:
        """Next healthy worker after the last pick, or None."""
        with self.lock:
            for step in range(len(self.workers)):
                i = (self.current_index + step) % len(self.workers)
                worker = self.workers[i]
                if healthy.get(worker, False) and worker not in exclude:
                    self.current_index = (i + 1) % len(self.workers)
                    self.counts[worker] += 1
                    return worker
            return None


class HealthChecker:
    """TCP connect checks; a worker is down after ``threshold`` straight failures."""

    def __init__(self, workers: List[str], period: float, threshold: int = 3):
        self.workers = list(workers)
        self.period = period
        self.threshold = threshold
        self.status: Dict[str, bool] = {w: True for w in workers}
        self._failures: Dict[str, int] = {w: 0 for w in workers}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def healthy(self) -> Dict[str, bool]:
        with self._lock:
            return dict(self.status)

    def record(self, worker: str, ok: bool) -> None:
        with self._lock:
            if ok:
                if not self.status[worker]:
                    log.info(f"Worker {worker} is healthy again")
                self._failures[worker] = 0
                self.status[worker] = True
                return
            self._failures[worker] += 1
            if self.status[worker] and self._failures[worker] >= self.threshold:
                log.warning(f"Worker {worker} marked unhealthy after {self._failures[worker]} failures")
                self.status[worker] = False

    def check(self, worker: str) -> bool:
        try:
            with socket.create_connection(parse_address(worker), timeout=min(self.period, 1.0)):
                return True
        except OSError:
            return False

    def check_all(self) -> None:
        for worker in self.workers:
            self.record(worker, self.check(worker))

    def _loop(self) -> None:
        while not self._stop.wait(self.period):
            self.check_all()

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, name="health", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


def http_error(status: int, reason: str, detail: str) -> bytes:
    body = json.dumps({"error": detail}).encode()
    head = (
        f"HTTP/1.1 {status} {reason}\r\n"
        "Content-Type: application/json\r\n"
        f"Content-Length: {len(body)}\r\n"
        "Connection: close\r\n\r\n"
    )
    return head.encode("ascii") + body


def _pump(src: socket.socket, dst: socket.socket) -> None:
    try:
        while True:
            data = src.recv(BUFFER_SIZE)
            if not data:
                break
            dst.sendall(data)
    except OSError:
        pass
    finally:
        try:
            dst.shutdown(socket.SHUT_WR)
        except OSError:
            pass


class _ProxyHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: BalancerServer = self.server
        client = self.request
        backend = server.connect_backend()
        if backend is None:
            try:
                client.sendall(http_error(502, "Bad Gateway", "no healthy worker"))
            except OSError:
                pass
            return
        with backend:
            upstream = threading.Thread(target=_pump, args=(client, backend), daemon=True)
            upstream.start()
            _pump(backend, client)
            upstream.join()


class BalancerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 256

    def __init__(self, cfg: BalancerConfig, check_health: bool = True):
        self.cfg = cfg
        self.router = RoundRobinRouter(cfg.workers)
        self.checker = HealthChecker(cfg.workers, cfg.health_period_s, cfg.failure_threshold)
        self._check_health = check_health
        super().__init__(parse_address(cfg.listen), _ProxyHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def connect_backend(self) -> Optional[socket.socket]:
        """Connect to the next healthy worker; a failed connect counts as a failed check."""
        tried = set()
        while True:
            worker = self.router.select(self.checker.healthy(), exclude=tried)
            if worker is None:
                log.error("No healthy worker available")
                return None
            tried.add(worker)
            try:
                sock = socket.create_connection(parse_address(worker), timeout=CONNECT_TIMEOUT)
                sock.settimeout(None)
                return sock
            except OSError as e:
                log.warning(f"Connect to {worker} failed: {e}")
                self.checker.record(worker, False)

    def start(self) -> threading.Thread:
        if self._check_health:
            self.checker.start()
        t = threading.Thread(target=self.serve_forever, name="balancer", daemon=True)
        t.start()
        log.info(f"Balancer on {self.address} over {len(self.cfg.workers)} workers")
        return t

    def stop(self) -> None:
        self.checker.stop()
        self.shutdown()
        self.server_close()


def serve(cfg: BalancerConfig) -> None:
    server = BalancerServer(cfg)
    server.checker.start()
    log.info(f"Balancer on {server.address} over {len(cfg.workers)} workers")
    try:
        server.serve_forever()
    finally:
        server.checker.stop()
        server.server_close()
