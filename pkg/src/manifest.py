"""Run manifests: what a command was asked to do, written before it does it."""

import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional

from . import __version__
from .models import RunManifest

log = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"


def build_manifest(
    command: str,
    out_dir: Path,
    config_paths: Optional[Dict[str, Path]] = None,
    seeds: Optional[Dict[str, int]] = None,
    model_versions: Optional[Dict[str, str]] = None,
) -> RunManifest:
    return RunManifest(
        command=command,
        argv=list(sys.argv[1:]),
        config_paths={k: str(v) for k, v in (config_paths or {}).items() if v is not None},
        seeds=dict(seeds or {}),
        out_dir=str(out_dir),
        started_at=datetime.now(timezone.utc).isoformat(),
        model_versions=dict(model_versions or {}),
        package_version=__version__,
    )


def write_manifest(manifest: RunManifest) -> Path:
    out_dir = Path(manifest.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2) + "\n")
    log.debug(f"Wrote run manifest to {path}")
    return path


def read_manifest(out_dir: Path) -> RunManifest:
    return RunManifest.model_validate_json((Path(out_dir) / MANIFEST_NAME).read_text())
