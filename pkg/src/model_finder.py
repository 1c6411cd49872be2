"""
Locate trained model files in a run directory.
Models are saved as ``<kind>_<YYYYmmddHHMMSS>.json``; a second save of the
same kind within one second gets a ``_<n>`` suffix.
"""

import re
from pathlib import Path
from datetime import datetime
from typing import Dict, List, Optional, Tuple, Union
import logging

log = logging.getLogger(__name__)

MODEL_KINDS = ("gbdt", "s2p")
TIMESTAMP_FORMAT = "%Y%m%d%H%M%S"


class ModelFileFinder:
    """Find the most recent model file of each kind."""

    MODEL_PATTERN = re.compile(r"^(gbdt|s2p)_(\d{14})(?:_(\d+))?\.json$")

    def __init__(self, model_dir: Path):
        """
        Args:
            model_dir: Directory the ``train`` command wrote models into
        """
        self.model_dir = Path(model_dir)
        if not self.model_dir.exists():
            log.warning(f"Model directory does not exist: {self.model_dir}")

    def _matches(self, kind: str) -> List[Tuple[datetime, int, Path]]:
        if kind not in MODEL_KINDS:
            raise ValueError(f"Unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
        found = []
        if not self.model_dir.exists():
            return found
        for file_path in self.model_dir.glob("*.json"):
            match = self.MODEL_PATTERN.match(file_path.name)
            if not match or match.group(1) != kind:
                continue
            try:
                timestamp = datetime.strptime(match.group(2), TIMESTAMP_FORMAT)
            except ValueError:
                log.warning(f"Could not parse timestamp from filename: {file_path.name}")
                continue
            found.append((timestamp, int(match.group(3) or 0), file_path))
        return found

    def find_latest(self, kind: str) -> Optional[Path]:
        """
        Newest model of ``kind``, or None.

        Args:
            kind: "gbdt" or "s2p"
        """
        matching = self._matches(kind)
        if not matching:
            log.warning(f"No {kind} models found in {self.model_dir}")
            return None

        matching.sort(key=lambda x: (x[0], x[1]), reverse=True)
        latest = matching[0][2]
        log.info(f"Found latest {kind} model: {latest.name}")
        if len(matching) > 1:
            log.debug(f"  ({len(matching) - 1} older models ignored)")
        return latest

    def list_models(self) -> Dict[str, List[Dict[str, Union[str, int]]]]:
        result = {}
        for kind in MODEL_KINDS:
            matching = sorted(self._matches(kind), key=lambda x: (x[0], x[1]), reverse=True)
            result[kind] = [
                {
                    "name": path.name,
                    "path": str(path),
                    "size": path.stat().st_size,
                    "timestamp": ts.isoformat(),
                }
                for ts, _, path in matching
            ]
        return result

    def next_path(self, kind: str, now: Optional[datetime] = None) -> Path:
        """Unused file name for a model trained at ``now``."""
        stamp = (now or datetime.now()).strftime(TIMESTAMP_FORMAT)
        path = self.model_dir / f"{kind}_{stamp}.json"
        n = 0
        while path.exists():
            n += 1
            path = self.model_dir / f"{kind}_{stamp}_{n}.json"
        return path


def get_latest_model(kind: str, model_dir: Path) -> Path:
    """
    Latest model of ``kind`` in ``model_dir``.
    Raises FileNotFoundError if there is none.
    """
    finder = ModelFileFinder(model_dir)
    file_path = finder.find_latest(kind)
    if not file_path:
        raise FileNotFoundError(f"No {kind} models found in {finder.model_dir}")
    return file_path
