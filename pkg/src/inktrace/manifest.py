"""Content-hashed run manifest backing resumable pipeline stages."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def hash_paths(root: Path, paths) -> dict[str, str]:
    """Hash files and directory trees, keyed by path relative to root.

    Raises FileNotFoundError naming the first missing path.
    """
    out: dict[str, str] = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files = sorted(q for q in p.rglob("*") if q.is_file())
            if not files:
                raise FileNotFoundError(f"no files under {p}")
            for q in files:
                out[q.relative_to(root).as_posix()] = file_sha256(q)
        elif p.is_file():
            out[p.relative_to(root).as_posix()] = file_sha256(p)
        else:
            raise FileNotFoundError(str(p))
    return out


@dataclass
class RunManifest:
    """Per-stage input/output hashes, timings, and metric summaries."""

    version: str
    config_hash: str
    stages: dict[str, dict] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)  # non-stage files

    def all_files(self) -> set[str]:
        """Every artifact the run wrote (relative paths), manifest aside."""
        names = set(self.files)
        for rec in self.stages.values():
            names.update(rec["outputs"])
        return names

    def save(self, path) -> None:
        doc = {"version": self.version, "config_hash": self.config_hash,
               "files": self.files, "stages": self.stages}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True)
                              + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        doc = json.loads(Path(path).read_text())
        return cls(version=doc["version"], config_hash=doc["config_hash"],
                   stages=doc.get("stages", {}), files=doc.get("files", {}))


def stage_up_to_date(manifest: RunManifest, name: str,
                     inputs: dict[str, str], root: Path) -> bool:
    """True when the recorded stage ran on these exact inputs and all of
    its recorded outputs still exist with matching hashes."""
    rec = manifest.stages.get(name)
    if rec is None or rec["inputs"] != inputs:
        return False
    for rel, digest in rec["outputs"].items():
        p = root / rel
        if not p.is_file() or file_sha256(p) != digest:
            return False
    return True
