"""Run manifests: what a run produced, hashed, plus its config echo."""

from __future__ import annotations

import hashlib
import json
import os


class ManifestError(ValueError):
    pass


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, experiment, config_echo, artifact_paths, duration_seconds):
    from .. import __version__

    artifacts = []
    for path in sorted(artifact_paths):
        artifacts.append({
            "name": os.path.relpath(path, out_dir),
            "sha256": _sha256(path),
            "bytes": os.path.getsize(path),
        })
    payload = {
        "experiment": experiment,
        "config": config_echo,
        "artifacts": artifacts,
        "duration_seconds": duration_seconds,
        "library_version": __version__,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def verify_manifest(path):
    """Every listed artifact must exist and match its recorded hash."""
    with open(path) as fh:
        payload = json.load(fh)
    out_dir = os.path.dirname(os.path.abspath(path))
    for entry in payload["artifacts"]:
        full = os.path.join(out_dir, entry["name"])
        if not os.path.exists(full):
            raise ManifestError(f"missing artifact {entry['name']}")
        if _sha256(full) != entry["sha256"]:
            raise ManifestError(f"hash mismatch for {entry['name']}")
    return payload
