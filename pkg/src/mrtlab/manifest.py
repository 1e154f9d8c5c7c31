"""Run manifests: what a command read, what it wrote, and how to rerun it.

The run id hashes the command, resolved config, seed and input digests, so
a faithful rerun gets the same id and can reproduce every artifact that
embeds it. Timestamps live only in the manifest itself.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import MissingArtifact, ValidationError


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@dataclass
class RunManifest:
    command: list
    config: dict
    seed: int
    cwd: str = ""
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)
    execution: dict = field(default_factory=dict)  # threads, deterministic
    version: str = __version__
    run_id: str = ""
    status: str = "pending"
    started: str = ""
    ended: str = ""
    error: str = ""

    def record_input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"{path} not found")
        self.inputs[str(path)] = file_digest(path)
        return path

    def compute_id(self) -> str:
        doc = {"command": self.command, "config": self.config, "seed": self.seed,
               "inputs": sorted(self.inputs.items()), "version": self.version}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def begin(self, path) -> None:
        self.run_id = self.compute_id()
        self.status, self.started = "running", _now()
        self.write(path)

    def finish(self, path, outputs, status: str = "ok", error: str = "") -> None:
        self.outputs = {str(p): file_digest(p) for p in outputs if Path(p).exists()}
        self.status, self.ended, self.error = status, _now(), error
        self.write(path)

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        dump_json(asdict(self), path)

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"manifest {path} not found")
        try:
            return cls(**json.loads(path.read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ValidationError("manifest", f"malformed manifest {path}: {exc}") from None

    def verify_inputs(self) -> None:
        """Inputs must still hash to what the original run read."""
        for p, digest in self.inputs.items():
            full = Path(self.cwd, p) if self.cwd and not os.path.isabs(p) else Path(p)
            if not full.exists():
                raise MissingArtifact(f"input {p} of run {self.run_id} is missing")
            if file_digest(full) != digest:
                raise ValidationError("inputs", f"input {p} changed since run {self.run_id}")
