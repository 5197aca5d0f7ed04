"""On-disk run directories: manifest, generation records, images and cache.

Layout of ``<root>/<run-id>/``::

    manifest.json          run id, config, target hash/path, status, schema version
    target.<ext>           the target image
    generations/gen-<i>.json
    images/<digest>-<k>.<ext>
    cache/index.json
    .lock                  advisory single-writer lock

Every JSON file is written to a temporary sibling and renamed into place.
Generation files carry a SHA-256 digest of their own body so tampering and
torn writes are detected on load.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import secrets
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from filelock import FileLock, Timeout

from .core import SCHEMA_VERSION, FitnessRecord, RunConfig, TargetImage, config_to_dict, validate_config
from .errors import ConfigError, CorruptManifest, GapInSequence, RunExists, SchemaMismatch, StorageFailure
from .records import GenerationRecord, RunResult

__all__ = [
    "GenerationRecord",
    "RunHandle",
    "RunManifest",
    "RunStatus",
    "append_generation",
    "create_run",
    "load_generations",
    "load_run",
    "resume_run",
]

_GEN_FILE = re.compile(r"^gen-(\d+)\.json$")


class RunStatus(str, enum.Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    config: RunConfig
    target_hash: str
    target_path: str
    status: RunStatus
    schema_version: int
    root: Path
    mode: str = "invert"

    @property
    def run_dir(self) -> Path:
        return self.root / self.run_id

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "run_id": self.run_id,
            "mode": self.mode,
            "status": self.status.value,
            "target_hash": self.target_hash,
            "target_path": self.target_path,
            "config": config_to_dict(self.config, redact_secrets=True),
        }


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageFailure(f"cannot write {path}: {exc}") from exc


def _write_json(path: Path, obj: Any) -> None:
    atomic_write(path, json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False).encode("utf-8") + b"\n")


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise CorruptManifest(f"{path}: {exc}") from exc


def new_run_id() -> str:
    return f"{time.strftime('%Y%m%d-%H%M%S')}-{secrets.token_hex(3)}"


# -- create / append --------------------------------------------------------


def create_run(
    cfg: RunConfig, target: TargetImage, root: str | Path, run_id: str | None = None, *, mode: str = "invert"
) -> RunManifest:
    root = Path(root)
    run_id = run_id or new_run_id()
    run_dir = root / run_id
    try:
        root.mkdir(parents=True, exist_ok=True)
        run_dir.mkdir()
    except FileExistsError:
        raise RunExists(f"run {run_id!r} already exists under {root}") from None
    except OSError as exc:
        raise StorageFailure(f"cannot create {run_dir}: {exc}") from exc
    try:
        for sub in ("generations", "images", "cache", "reports"):
            (run_dir / sub).mkdir()
        target_name = f"target.{target.extension}"
        atomic_write(run_dir / target_name, target.data)
    except OSError as exc:
        raise StorageFailure(f"cannot populate {run_dir}: {exc}") from exc
    manifest = RunManifest(run_id, cfg, target.content_hash, target_name, RunStatus.RUNNING, SCHEMA_VERSION, root, mode)
    _write_json(run_dir / "manifest.json", manifest.to_dict())
    _write_json(run_dir / "cache" / "index.json", {"schema_version": SCHEMA_VERSION, "entries": {}})
    return manifest


def _gen_path(run_dir: Path, index: int) -> Path:
    return run_dir / "generations" / f"gen-{index}.json"


def _existing_indices(run_dir: Path) -> list[int]:
    out = []
    for p in (run_dir / "generations").iterdir():
        m = _GEN_FILE.match(p.name)
        if m:
            out.append(int(m.group(1)))
    return sorted(out)


def append_generation(run: RunManifest, rec: GenerationRecord) -> None:
    run_dir = run.run_dir
    expected = len(_existing_indices(run_dir))
    if rec.generation_index != expected:
        raise GapInSequence(f"generation {rec.generation_index} appended after {expected} record(s)")
    missing = [
        ref
        for ind in (*rec.population, *rec.offspring)
        if ind.fitness is not None
        for ref in ind.fitness.image_refs
        if not (run_dir / "images" / ref).exists()
    ]
    if missing:
        raise StorageFailure(f"generation {rec.generation_index} references missing images: {missing[:3]}")
    body = rec.to_dict()
    doc = {
        "schema_version": SCHEMA_VERSION,
        "record": body,
        "digest": hashlib.sha256(_canonical(body)).hexdigest(),
    }
    _write_json(_gen_path(run_dir, rec.generation_index), doc)


def load_generations(run_dir: str | Path) -> list[GenerationRecord]:
    run_dir = Path(run_dir)
    out = []
    for expected, idx in enumerate(_existing_indices(run_dir)):
        if idx != expected:
            raise CorruptManifest(f"generation files skip from {expected - 1} to {idx}")
        doc = _read_json(_gen_path(run_dir, idx))
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatch(f"gen-{idx}.json has schema {doc.get('schema_version')}, expected {SCHEMA_VERSION}")
        body = doc.get("record")
        if body is None or hashlib.sha256(_canonical(body)).hexdigest() != doc.get("digest"):
            raise CorruptManifest(f"gen-{idx}.json failed its digest check")
        try:
            rec = GenerationRecord.from_dict(body)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptManifest(f"gen-{idx}.json: {exc}") from exc
        out.append(rec)
    return out


# -- handle -----------------------------------------------------------------


class DiskImageStore:
    def __init__(self, directory: Path) -> None:
        self.directory = directory

    def put(self, key: str, data: bytes) -> None:
        path = self.directory / key
        if not path.exists():
            atomic_write(path, data)

    def get(self, key: str) -> bytes:
        try:
            return (self.directory / key).read_bytes()
        except OSError as exc:
            raise StorageFailure(f"missing image {key}: {exc}") from exc


class RunHandle:
    """Writable view of a run directory, holding its advisory lock."""

    def __init__(self, manifest: RunManifest, *, lock_timeout: float = 0.0) -> None:
        self.manifest = manifest
        self.images = DiskImageStore(manifest.run_dir / "images")
        self._lock = FileLock(str(manifest.run_dir / ".lock"), timeout=lock_timeout)

    def __enter__(self) -> RunHandle:
        try:
            self._lock.acquire()
        except Timeout:
            raise StorageFailure(f"run {self.manifest.run_id} is locked by another writer") from None
        return self

    def __exit__(self, *exc) -> None:
        self._lock.release()

    @property
    def run_dir(self) -> Path:
        return self.manifest.run_dir

    def target(self) -> TargetImage:
        data = (self.run_dir / self.manifest.target_path).read_bytes()
        target = TargetImage(data, self.manifest.run_id)
        if target.content_hash != self.manifest.target_hash:
            raise CorruptManifest("target image does not match the manifest hash")
        return target

    def commit_generation(self, record: GenerationRecord, cache) -> None:
        # cache first: entries are tagged with their generation, and loading
        # filters by the last committed generation, so a crash between the two
        # writes cannot leak uncommitted entries into a resumed run
        entries = {
            digest: {"prompt": e.prompt_text, "record": e.record.to_dict(), "generation": e.generation}
            for digest, e in sorted(cache.entries().items())
        }
        _write_json(self.run_dir / "cache" / "index.json", {"schema_version": SCHEMA_VERSION, "entries": entries})
        append_generation(self.manifest, record)

    def set_status(self, status: str | RunStatus) -> None:
        self.manifest = replace(self.manifest, status=RunStatus(status))
        _write_json(self.run_dir / "manifest.json", self.manifest.to_dict())

    def load_cache(self, upto_generation: int):
        from .engine import CacheEntry, FitnessCache

        doc = _read_json(self.run_dir / "cache" / "index.json")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatch("cache index schema mismatch")
        entries = {}
        for digest, e in doc.get("entries", {}).items():
            if e["generation"] <= upto_generation:
                entries[digest] = CacheEntry(e["prompt"], FitnessRecord.from_dict(e["record"]), e["generation"])
        return FitnessCache(entries)


def load_run(root: str | Path, run_id: str) -> RunManifest:
    root = Path(root)
    path = root / run_id / "manifest.json"
    try:
        doc = _read_json(path)
    except FileNotFoundError:
        raise StorageFailure(f"no run {run_id!r} under {root}") from None
    if not isinstance(doc, dict):
        raise CorruptManifest(f"{path} is not a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"{path} has schema {doc.get('schema_version')}, expected {SCHEMA_VERSION}")
    try:
        cfg = validate_config(doc["config"])
        return RunManifest(
            doc["run_id"],
            cfg,
            doc["target_hash"],
            doc["target_path"],
            RunStatus(doc["status"]),
            doc["schema_version"],
            root,
            doc.get("mode", "invert"),
        )
    except (KeyError, ValueError, ConfigError) as exc:
        raise CorruptManifest(f"{path}: {exc}") from exc


def resume_run(root: str | Path, run_id: str, backends=None, **kw) -> RunResult:
    """Continue an interrupted run from its last committed generation.

    A completed run returns its stored result without touching any backend.
    ``backends`` defaults to whatever the stored config describes.
    """
    from .backends import build_backends
    from .engine import Evolution

    manifest = load_run(root, run_id)
    records = load_generations(manifest.run_dir)
    cfg = manifest.config
    if manifest.status is RunStatus.COMPLETED:
        if len(records) != cfg.generations + 1:
            raise CorruptManifest(f"completed run has {len(records)} generation records, expected {cfg.generations + 1}")
        return RunResult.from_records(records)
    with RunHandle(manifest) as handle:
        target = handle.target()
        cache = handle.load_cache(records[-1].generation_index if records else -1)
        if backends is None:
            backends = build_backends(cfg, target)
        handle.set_status(RunStatus.RUNNING)
        return Evolution(target, cfg, backends, handle, cache=cache, **kw).run(records)
