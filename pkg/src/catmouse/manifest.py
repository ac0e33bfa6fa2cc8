"""Run manifest: what a run directory contains and how to trust it.

Every artifact a run writes is listed with its content hash; ``verify``
re-hashes the directory so stale or truncated files are caught before
anything resumes from them.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .util import file_sha256

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    tool_version: str = __version__
    created_at: str = ""
    updated_at: str = ""
    artifacts: dict[str, dict] = field(default_factory=dict)  # rel path -> {sha256, bytes}

    @staticmethod
    def new(run_id: str, config_hash: str) -> "RunManifest":
        now = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        return RunManifest(run_id=run_id, config_hash=config_hash, created_at=now, updated_at=now)

    def record(self, root: Path, path: Path) -> None:
        rel = str(path.relative_to(root))
        self.artifacts[rel] = {"sha256": file_sha256(path), "bytes": path.stat().st_size}

    def forget_missing(self, root: Path) -> None:
        self.artifacts = {rel: info for rel, info in self.artifacts.items() if (root / rel).exists()}

    def save(self, root: Path) -> None:
        self.updated_at = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        payload = {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "artifacts": {k: self.artifacts[k] for k in sorted(self.artifacts)},
        }
        (root / MANIFEST_NAME).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @staticmethod
    def load(root: Path) -> "RunManifest":
        payload = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
        return RunManifest(
            run_id=payload["run_id"],
            config_hash=payload["config_hash"],
            tool_version=payload["tool_version"],
            created_at=payload["created_at"],
            updated_at=payload["updated_at"],
            artifacts=payload["artifacts"],
        )

    def verify(self, root: Path) -> list[str]:
        """Names of artifacts that are missing or whose bytes changed."""
        bad = []
        for rel, info in self.artifacts.items():
            p = root / rel
            if not p.exists():
                bad.append(f"{rel}: missing")
            elif file_sha256(p) != info["sha256"]:
                bad.append(f"{rel}: content hash mismatch")
        return bad
