"""Reproducibility plumbing: canonical JSON, tree digests, run manifests.

Every command output directory carries a manifest recording the exact
configuration, seed, and artifact digests, so a rerun can be verified
bit-for-bit by comparing SHA-256 hashes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "canonical_json",
    "config_hash",
    "sha256_file",
    "sha256_tree",
    "RunManifest",
    "write_manifest",
    "read_manifest",
]

MANIFEST_NAME = "run_manifest.json"
TOOL_VERSION = "cape 0.1.0"


def canonical_json(obj) -> str:
    """One fixed serialization per value: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(directory, ignore: tuple[str, ...] = (MANIFEST_NAME,)) -> str:
    """Order-independent digest of a directory: hash of the sorted
    (relative path, file hash) listing."""
    directory = Path(directory)
    entries = []
    for path in sorted(directory.rglob("*")):
        if path.is_file() and path.name not in ignore:
            entries.append(f"{path.relative_to(directory).as_posix()}:{sha256_file(path)}")
    return hashlib.sha256("\n".join(entries).encode()).hexdigest()


@dataclass
class RunManifest:
    """Record of one command invocation and its outputs."""

    command: str
    seed: int
    config: dict
    artifacts: dict[str, str] = field(default_factory=dict)
    tree_digest: str = ""
    tool_version: str = TOOL_VERSION

    @property
    def config_digest(self) -> str:
        return config_hash(self.config)


def write_manifest(manifest: RunManifest, directory) -> Path:
    """Digest the directory's files and write the manifest beside them."""
    directory = Path(directory)
    manifest.artifacts = {
        p.relative_to(directory).as_posix(): sha256_file(p)
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }
    manifest.tree_digest = sha256_tree(directory)
    payload = {
        "command": manifest.command,
        "seed": manifest.seed,
        "config": manifest.config,
        "config_digest": manifest.config_digest,
        "artifacts": manifest.artifacts,
        "tree_digest": manifest.tree_digest,
        "tool_version": manifest.tool_version,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no run manifest at {path}")
    return json.loads(path.read_text())
