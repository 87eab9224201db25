"""Atomic file output: JSON-lines, CSV, manifests."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

from . import __version__
from .kernels import BACKEND


def atomic_write(path, data: bytes | str) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def jsonl_text(records) -> str:
    lines = [json.dumps(r.to_dict() if hasattr(r, "to_dict") else r, sort_keys=False) for r in records]
    return "".join(line + "\n" for line in lines)


def write_jsonl(path, records) -> Path:
    return atomic_write(path, jsonl_text(records))


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, rows: list[dict], header: list[str]) -> Path:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return atomic_write(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(out_dir, command: str, config_sha256: str, seeds: dict, outputs: list[str],
                   config: dict | None = None, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "code_version": __version__,
        "kernel_backend": BACKEND,
        "config_sha256": config_sha256,
        "seeds": seeds,
        "outputs": sorted(outputs),
    }
    if config is not None:
        manifest["config"] = config
    if extra:
        manifest.update(extra)
    return atomic_write(Path(out_dir) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
