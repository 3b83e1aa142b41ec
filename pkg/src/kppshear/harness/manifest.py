"""Run manifests: config snapshot, seeds, wall times and output digests."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

MANIFEST_NAME = "manifest.json"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    code_version: str
    task_seeds: dict
    start_time: str
    end_time: str
    outputs: dict = field(default_factory=dict)      # relative path -> sha256
    warnings: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write(self, directory):
        path = Path(directory) / MANIFEST_NAME
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path) as fh:
            return cls(**json.load(fh))


def digest_outputs(directory, names):
    directory = Path(directory)
    return {name: sha256_file(directory / name) for name in sorted(names)}
