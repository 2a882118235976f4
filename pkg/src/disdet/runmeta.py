"""Run manifests: every CLI run records what it did beside its outputs."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .synthdata import MANIFEST_NAME


def dataset_hash(dir_path) -> str:
    """Content hash over the manifest and every image file, path-ordered."""
    dir_path = Path(dir_path)
    h = hashlib.sha256()
    names = [MANIFEST_NAME]
    if (dir_path / "images").is_dir():
        names += sorted(
            str(p.relative_to(dir_path)) for p in (dir_path / "images").glob("*.png")
        )
    for name in names:
        p = dir_path / name
        if not p.is_file():
            continue
        h.update(name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    dataset_hashes: dict = field(default_factory=dict)
    tool_version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None

    def finish(self):
        self.finished_at = _now()

    def write(self, path):
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as f:
                f.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path


def manifest_path_for(output) -> Path:
    """Manifest location beside an output file or directory."""
    output = Path(output)
    # extensionless output files (already written) count as files too
    if output.suffix or output.is_file():
        return output.parent / (output.stem + ".manifest.json")
    return output / "run_manifest.json"
