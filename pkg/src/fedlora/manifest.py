"""Run manifests and completion markers.

A manifest is written before any training starts and echoes the fully resolved
configuration; re-running from that embedded config must reproduce the metrics
byte for byte. The completion marker is created only after all outputs are
flushed, so a run directory without it is detectably incomplete.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"
MARKER_NAME = "run.complete"


@dataclass
class RunManifest:
    config: dict
    seed: int
    code_version: str = __version__
    started_at: str = ""
    finished_at: str | None = None
    outputs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.started_at:
            self.started_at = datetime.now(timezone.utc).isoformat()


def manifest_path(run_dir) -> Path:
    return Path(run_dir) / MANIFEST_NAME


def write_manifest(run_dir, manifest: RunManifest) -> Path:
    path = manifest_path(run_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(run_dir) -> RunManifest:
    payload = json.loads(manifest_path(run_dir).read_text())
    return RunManifest(**payload)


def mark_complete(run_dir, manifest: RunManifest) -> None:
    manifest.finished_at = datetime.now(timezone.utc).isoformat()
    write_manifest(run_dir, manifest)
    (Path(run_dir) / MARKER_NAME).write_text(manifest.finished_at + "\n")


def is_complete(run_dir) -> bool:
    return (Path(run_dir) / MARKER_NAME).exists()
