"""
Append-only result store: one JSON-lines file per household under the
results directory. Records are unique per (household, ts_ms, producer);
writes are flushed and fsynced before ``persist`` returns.

Several processes may share a directory: each read first picks up lines
appended since the last read.
"""

import logging
import os
import re
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Tuple

from pydantic import ValidationError

from .errors import RejectedInputError, StateError
from .models import HOUSEHOLD_ID_PATTERN, ResultRecord

log = logging.getLogger(__name__)

HOUSEHOLD_ID = re.compile(HOUSEHOLD_ID_PATTERN)


@dataclass
class _HouseholdIndex:
    offset: int = 0
    records: List[ResultRecord] = field(default_factory=list)
    keys: Set[Tuple[int, str]] = field(default_factory=set)
    latest_edge: Optional[ResultRecord] = None

    def add(self, record: ResultRecord) -> None:
        self.records.append(record)
        self.keys.add((record.ts_ms, record.producer))
        if record.producer == "edge" and (
            self.latest_edge is None or record.ts_ms >= self.latest_edge.ts_ms
        ):
            self.latest_edge = record


class ResultStore:
    """Thread-safe writer and reader for persisted ResultRecords."""

    def __init__(self, results_dir: Path):
        """
        Args:
            results_dir: Directory holding ``<household_id>.jsonl`` files.
                Created if missing; must be writable.
        """
        self.results_dir = Path(results_dir)
        self._lock = threading.Lock()
        self._index: Dict[str, _HouseholdIndex] = {}
        self._check_writable()

    def _check_writable(self) -> None:
        try:
            self.results_dir.mkdir(parents=True, exist_ok=True)
            with tempfile.TemporaryFile(dir=self.results_dir):
                pass
        except OSError as e:
            raise StateError(f"results dir {self.results_dir} is not writable: {e}")
        log.info(f"Result store at {self.results_dir}")

    def path_for(self, household_id: str) -> Path:
        if not isinstance(household_id, str) or not HOUSEHOLD_ID.fullmatch(household_id):
            raise RejectedInputError(f"invalid household id {household_id!r}")
        return self.results_dir / f"{household_id}.jsonl"

    def _refresh_locked(self, household_id: str) -> _HouseholdIndex:
        index = self._index.setdefault(household_id, _HouseholdIndex())
        path = self.path_for(household_id)
        if not path.exists():
            return index
        with path.open("rb") as fh:
            fh.seek(index.offset)
            data = fh.read()
        # only complete lines; a concurrent writer may be mid-line
        end = data.rfind(b"\n") + 1
        for lineno, line in enumerate(data[:end].splitlines(), 1):
            if not line.strip():
                continue
            try:
                record = ResultRecord.model_validate_json(line)
            except ValidationError as e:
                log.error(f"Skipping corrupt record in {path} (new line {lineno}): {e}")
                continue
            if (record.ts_ms, record.producer) not in index.keys:
                index.add(record)
        index.offset += end
        return index

    def persist(self, records: Iterable[ResultRecord]) -> int:
        """
        Append records, skipping any (household, ts_ms, producer) already
        stored. Returns how many were written.
        """
        by_household: Dict[str, List[ResultRecord]] = {}
        for r in records:
            by_household.setdefault(r.household_id, []).append(r)

        written = 0
        with self._lock:
            for household_id, batch in by_household.items():
                index = self._refresh_locked(household_id)
                fresh = []
                batch_keys = set()
                for r in batch:
                    key = (r.ts_ms, r.producer)
                    if key in index.keys or key in batch_keys:
                        log.debug(f"Duplicate result {household_id}@{r.ts_ms} ({r.producer})")
                        continue
                    batch_keys.add(key)
                    fresh.append(r)
                if not fresh:
                    continue
                payload = "".join(r.model_dump_json() + "\n" for r in fresh).encode()
                self._append(self.path_for(household_id), payload)
                # keys become visible only once the lines are on disk
                index.offset += len(payload)
                for r in fresh:
                    index.add(r)
                written += len(fresh)
        return written

    @staticmethod
    def _append(path: Path, payload: bytes) -> None:
        """Append and fsync; a failed write is cut back off the file."""
        with path.open("ab", buffering=0) as fh:
            start = fh.tell()
            try:
                view = memoryview(payload)
                while view:
                    view = view[fh.write(view):]
                os.fsync(fh.fileno())
            except OSError:
                os.ftruncate(fh.fileno(), start)
                raise

    def persist_result(self, record: ResultRecord) -> bool:
        return self.persist([record]) == 1

    def query_results(
        self,
        household_id: str,
        ts_from: Optional[int] = None,
        ts_to: Optional[int] = None,
        producer: Optional[str] = None,
    ) -> List[ResultRecord]:
        """Records with ts_from <= ts_ms <= ts_to, in time order."""
        with self._lock:
            index = self._refresh_locked(household_id)
            out = [
                r
                for r in index.records
                if (ts_from is None or r.ts_ms >= ts_from)
                and (ts_to is None or r.ts_ms <= ts_to)
                and (producer is None or r.producer == producer)
            ]
        return sorted(out, key=lambda r: (r.ts_ms, r.producer))

    def latest_edge(self, household_id: str) -> Optional[ResultRecord]:
        with self._lock:
            return self._refresh_locked(household_id).latest_edge

    def count(self, producer: Optional[str] = None) -> int:
        """Records across every household file in the directory."""
        total = 0
        with self._lock:
            for path in sorted(self.results_dir.glob("*.jsonl")):
                index = self._refresh_locked(path.stem)
                total += sum(producer is None or r.producer == producer for r in index.records)
        return total
