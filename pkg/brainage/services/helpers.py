"""
Shared helpers for writing pipeline artifacts.
"""

import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

import pandas as pd

from .. import __version__

logger = logging.getLogger("brainage.services.helpers")


def ensure_writable(path: Path) -> None:
    """Make the given file writable by owner/group."""
    try:
        Path(path).chmod(0o664)
    except PermissionError:
        logger.debug("Could not adjust permissions on %s", path)


def write_json(path: Path, payload) -> Path:
    """Write sorted, indented JSON with a trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ensure_writable(path)
    return path


def metadata_header(seed: Optional[int] = None, config_hash: Optional[str] = None, **extra) -> Dict[str, str]:
    """Key/value pairs written as ``# key: value`` lines above every CSV report."""
    header = {"artifact_version": __version__}
    if seed is not None:
        header["seed"] = str(seed)
    if config_hash is not None:
        header["config_hash"] = config_hash
    header.update({key: str(value) for key, value in extra.items()})
    return header


def write_csv(frame: pd.DataFrame, path: Path, metadata: Optional[Mapping[str, str]] = None) -> Path:
    """Write a report CSV, optionally prefixed by ``# key: value`` metadata lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        for key, value in (metadata or {}).items():
            handle.write(f"# {key}: {value}\n")
        frame.to_csv(handle, index=False, float_format="%.10g", lineterminator="\n")
    ensure_writable(path)
    return path


def read_csv_metadata(path: Path) -> Dict[str, str]:
    """Parse the ``# key: value`` lines at the top of a report CSV."""
    metadata = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition(": ")
            metadata[key] = value
    return metadata


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, artifacts: Iterable[Path], command: str) -> Path:
    """List every artifact under ``out_dir`` with its size and sha256."""
    out_dir = Path(out_dir)
    entries = {}
    for artifact in sorted({Path(a) for a in artifacts}):
        if not artifact.exists():
            logger.warning("Manifest skips missing artifact %s", artifact)
            continue
        try:
            name = artifact.relative_to(out_dir).as_posix()
        except ValueError:
            name = artifact.as_posix()
        entries[name] = {"sha256": sha256_file(artifact), "bytes": artifact.stat().st_size}
    payload = {
        "command": command,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "artifacts": entries,
    }
    return write_json(out_dir / "manifest.json", payload)
