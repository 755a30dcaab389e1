"""Run manifests tying every output file to the invocation that produced it."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone

from ._version import __version__


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def compute_run_id(command: str, config: dict, inputs: dict, seed, version: str = __version__) -> str:
    """Content hash of everything that determines the data outputs.

    Paths are deliberately excluded: only the digests of what was read count.
    """
    material = json.dumps(
        {"command": command, "config": config, "inputs": inputs, "seed": seed, "version": version},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = field(default_factory=utc_now)
    finished: str | None = None
    path_keys: tuple = ()

    def add_input(self, role: str, path, text: str) -> None:
        self.inputs[role] = {"path": str(path), "sha256": sha256_text(text)}

    def add_output(self, role: str, path, text: str) -> None:
        self.outputs[role] = {"path": str(path), "sha256": sha256_text(text)}

    @property
    def run_id(self) -> str:
        digests = {k: v["sha256"] for k, v in self.inputs.items()}
        config = {k: v for k, v in self.config.items() if k not in self.path_keys}
        return compute_run_id(self.command, config, digests, self.seed, self.version)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n"
