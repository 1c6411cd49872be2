"""
Cloud inference worker: REST endpoints over one Seq2Point model instance and
the shared result store, optionally with a broker consume loop running in
the same process.

Endpoints:
    POST /v1/infer            cloud-infer (run the model) or edge-lookup
    GET  /v1/result/latest    latest edge result for a household
    GET  /v1/results          persisted results in a time range
    GET  /v1/health           liveness
"""

from __future__ import annotations

import asyncio
import json
import logging
import signal
import threading
import time
from typing import List, Literal, Optional

import numpy as np
from aiohttp import web
from pydantic import BaseModel, ValidationError

from .cloud_consumer import CloudConsumer
from .errors import RejectedInputError
from .models import CloudConfig, ResultRecord, TargetPrediction, parse_address
from .result_store import ResultStore
from . import seq2point

log = logging.getLogger(__name__)


class InferRequest(BaseModel):
    household_id: str
    mode: Literal["cloud-infer", "edge-lookup"] = "cloud-infer"
    window: Optional[List[List[float]]] = None
    ts_ms: Optional[int] = None


def _targets(target_ids, probs: np.ndarray) -> List[TargetPrediction]:
    return [
        TargetPrediction(id=tid, prob=float(p), state=int(p > 0.5))
        for tid, p in zip(target_ids, probs)
    ]


class InferenceService:
    """Framework-free request handling; model calls are serialized."""

    def __init__(
        self,
        cfg: CloudConfig,
        store: ResultStore,
        model: Optional[seq2point.S2PModel] = None,
    ):
        self.cfg = cfg
        self.store = store
        self.model = model
        self._model_lock = threading.Lock()

    @property
    def model_version(self) -> str:
        return self.model.version if self.model is not None else "synthetic"

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        """B×T probabilities for raw windows, one model call at a time."""
        with self._model_lock:
            if self.cfg.synthetic_service_ms is not None:
                time.sleep(self.cfg.synthetic_service_ms / 1000.0)
                T = len(self.model.targets) if self.model is not None else 0
                return np.full((len(X), T), 0.5)
            return seq2point.forward(self.model, X)

    def infer(self, body: dict) -> dict:
        req = InferRequest.model_validate(body)
        if req.mode == "edge-lookup":
            return self.latest(req.household_id)
        if req.window is None:
            raise RejectedInputError("cloud-infer requires a window")
        X = np.asarray(req.window, dtype=np.float64)
        if self.model is not None:
            expected = (self.model.window, len(self.model.features))
            if X.shape != expected:
                raise RejectedInputError(f"window shape {X.shape}, expected {expected}")
        elif X.ndim != 2:
            raise RejectedInputError("window must be a list of [p, q] rows")
        probs = self.predict_batch(X[None])[0]
        target_ids = self.model.targets if self.model is not None else []
        ts = req.ts_ms if req.ts_ms is not None else int(time.time() * 1000)
        return {
            "ts_ms": ts,
            "targets": [t.model_dump() for t in _targets(target_ids, probs)],
        }

    def latest(self, household_id: str) -> dict:
        record = self.store.latest_edge(household_id)
        if record is None:
            raise LookupError(f"no edge result for household {household_id}")
        return {
            "ts_ms": record.ts_ms,
            "targets": [t.model_dump() for t in record.targets],
            "producer": "edge",
        }

    def results(self, household_id: str, ts_from: Optional[int], ts_to: Optional[int]) -> dict:
        records = self.store.query_results(household_id, ts_from, ts_to)
        return {"records": [r.model_dump() for r in records]}

    def health(self) -> dict:
        return {"status": "ok", "worker": self.cfg.worker_name}

    def cloud_records(self, windows, household_id: str) -> List[ResultRecord]:
        X = np.stack([w.matrix for w in windows])
        probs = self.predict_batch(X)
        return [
            ResultRecord(
                household_id=household_id,
                ts_ms=w.mid_ts_ms,
                targets=_targets(self.model.targets, row),
                producer="cloud",
                model_version=self.model_version,
            )
            for w, row in zip(windows, probs)
        ]


# ---------------------------------------------------------------- HTTP


def _error(status: int, detail: str) -> web.Response:
    resp = web.json_response({"error": detail}, status=status)
    resp.force_close()
    return resp


def build_app(service: InferenceService, max_inflight: int) -> web.Application:
    inflight = 0

    @web.middleware
    async def guard(request: web.Request, handler):
        nonlocal inflight
        if request.path == "/v1/health":
            resp = await handler(request)
            resp.force_close()
            return resp
        if inflight >= max_inflight:
            return _error(503, "worker overloaded")
        inflight += 1
        try:
            resp = await handler(request)
        except (RejectedInputError, ValidationError, json.JSONDecodeError, ValueError) as e:
            resp = _error(400, str(e))
        except LookupError as e:
            resp = _error(404, str(e))
        except web.HTTPException:
            raise
        except Exception as e:
            log.exception(f"{request.method} {request.path} failed")
            resp = _error(500, str(e))
        finally:
            inflight -= 1
        resp.force_close()
        return resp

    async def in_thread(fn, *args):
        return await asyncio.get_running_loop().run_in_executor(None, fn, *args)

    async def infer(request: web.Request) -> web.Response:
        body = json.loads(await request.text())
        if not isinstance(body, dict):
            raise RejectedInputError("request body must be a JSON object")
        return web.json_response(await in_thread(service.infer, body))

    def _household(request: web.Request) -> str:
        household = request.query.get("household_id")
        if not household:
            raise RejectedInputError("household_id is required")
        return household

    def _int_param(request: web.Request, name: str) -> Optional[int]:
        raw = request.query.get(name)
        return None if raw in (None, "") else int(raw)

    async def latest(request: web.Request) -> web.Response:
        return web.json_response(await in_thread(service.latest, _household(request)))

    async def results(request: web.Request) -> web.Response:
        body = await in_thread(
            service.results,
            _household(request),
            _int_param(request, "from"),
            _int_param(request, "to"),
        )
        return web.json_response(body)

    async def health(request: web.Request) -> web.Response:
        return web.json_response(service.health())

    app = web.Application(middlewares=[guard])
    app.router.add_post("/v1/infer", infer)
    app.router.add_get("/v1/result/latest", latest)
    app.router.add_get("/v1/results", results)
    app.router.add_get("/v1/health", health)
    return app


class WorkerServer:
    """Runs the aiohttp app on its own event loop thread."""

    def __init__(self, service: InferenceService, listen: str, backlog: int = 128):
        self.service = service
        self.host, self.port = parse_address(listen)
        self.backlog = backlog
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "WorkerServer":
        ready = threading.Event()
        failure: List[BaseException] = []
        loop = self._loop = asyncio.new_event_loop()
        app = build_app(self.service, self.service.cfg.max_inflight)

        def _run() -> None:
            asyncio.set_event_loop(loop)
            runner = web.AppRunner(app, access_log=None)
            try:
                loop.run_until_complete(runner.setup())
                site = web.TCPSite(runner, self.host, self.port, backlog=self.backlog)
                loop.run_until_complete(site.start())
                self.port = runner.addresses[0][1]
            except BaseException as e:
                failure.append(e)
                ready.set()
                return
            ready.set()
            try:
                loop.run_forever()
            finally:
                loop.run_until_complete(runner.cleanup())
                loop.close()

        self._thread = threading.Thread(target=_run, name="worker-http", daemon=True)
        self._thread.start()
        ready.wait(timeout=30)
        if failure:
            raise failure[0]
        log.info(f"Worker {self.service.cfg.worker_name} listening on {self.address}")
        return self

    def stop(self) -> None:
        if self._loop is not None and self._thread is not None:
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=10)
            self._thread = None


def run_worker(cfg: CloudConfig, stop: Optional[threading.Event] = None) -> None:
    """Serve until ``stop`` is set or the process gets SIGINT/SIGTERM."""
    model = seq2point.load(cfg.s2p_model_path) if cfg.s2p_model_path else None
    store = ResultStore(cfg.results_dir)
    service = InferenceService(cfg, store, model)
    stop = stop or threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())

    server = WorkerServer(service, cfg.listen, cfg.backlog).start()
    consumer_thread = None
    if cfg.consume:
        consumer = CloudConsumer(cfg, service, store)
        consumer_thread = threading.Thread(
            target=consumer.run, args=(stop,), name="cloud-consumer", daemon=True
        )
        consumer_thread.start()
    try:
        while not stop.wait(0.5):
            if consumer_thread is not None and not consumer_thread.is_alive():
                log.error("Consume loop exited, stopping worker")
                break
    finally:
        stop.set()
        if consumer_thread is not None:
            consumer_thread.join(timeout=10)
        server.stop()
