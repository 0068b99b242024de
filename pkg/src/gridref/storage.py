"""Line-delimited record IO, content hashing, checkpoints, run manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import ConfigurationError

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_jsonl(path: Path | str, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(canonical_json(record))
            fh.write("\n")


def read_jsonl(path: Path | str) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def save_checkpoint(path: Path | str, payload: dict) -> None:
    """Versioned model container; payload must carry kind/dims/vocab fields."""
    import torch

    payload = dict(payload)
    payload["format_version"] = CHECKPOINT_FORMAT_VERSION
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path | str, expected_kind: str | None = None) -> dict:
    import torch

    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format in {path}")
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise ConfigurationError(
            f"checkpoint kind mismatch in {path}: expected {expected_kind!r}, found {payload.get('kind')!r}"
        )
    return payload


@dataclass
class ExperimentManifest:
    """What a run saw and produced; enough to replay it."""

    command: str
    config: dict
    config_hash: str
    seeds: dict
    data_hashes: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    schema_version: int = MANIFEST_SCHEMA_VERSION

    @classmethod
    def start(cls, command: str, config: dict, seeds: dict) -> "ExperimentManifest":
        return cls(
            command=command,
            config=config,
            config_hash=sha256_text(canonical_json(config)),
            seeds=seeds,
            started_at=datetime.now(timezone.utc).isoformat(),
        )

    def add_data_hash(self, name: str, path: Path | str) -> None:
        self.data_hashes[name] = sha256_file(path)

    def finish(self, run_dir: Path | str) -> Path:
        self.finished_at = datetime.now(timezone.utc).isoformat()
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        out = run_dir / "manifest.json"
        out.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return out
