"""Atomic file output and run manifests."""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
import os
import tempfile
from importlib import resources
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def atomic_write_text(path, text: str) -> Path:
    """Write via a temp file in the same directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def _clean(obj):
    # JSON has no inf/nan; map them to null
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write_text(path, dumps(obj))


def write_csv(path, header, rows, footer: dict | None = None) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    for k, v in (footer or {}).items():
        buf.write(f"# {k}={v}\n")
    return atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v)) if math.isfinite(v) else ""
    if v is None:
        return ""
    return v


def build_manifest(command: str, settings: dict, outputs: list, extra: dict | None = None) -> dict:
    return {
        "tool": "certsteer",
        "version": __version__,
        "command": command,
        "seed": settings.get("seed"),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": settings,
        "outputs": [str(Path(p).name) for p in outputs],
        **(extra or {}),
    }


def load_schema(name: str = "experiment.schema.json") -> dict:
    return json.loads(resources.files("certsteer").joinpath("data", name).read_text(encoding="utf-8"))
