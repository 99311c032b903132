"""Deterministic report writing: sorted JSON and RFC-4180 CSV."""
from __future__ import annotations

import csv
import math
import os

import numpy as np

from .config import canonical_json


def artifact_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        from . import __version__
        return __version__


def plain(obj):
    """numpy scalars and arrays to builtins; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def envelope(cfg, payload: dict) -> dict:
    return {"artifact_version": artifact_version(), "config_hash": cfg.hash, "config": cfg.to_dict(),
            "pipeline": cfg.pipeline, "result": plain(payload)}


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(plain(obj)))


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_csv(path, header, rows) -> None:
    """UTF-8, CRLF line ends, minimal quoting, floats in shortest round-trip form."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


class OutputDir:
    """Collects outputs in memory and writes them only when the run completes."""

    def __init__(self, path):
        self.path = str(path)
        self.files = {}

    def json(self, name, obj):
        self.files[name] = ("json", obj)

    def csv(self, name, header, rows):
        self.files[name] = ("csv", (header, [list(r) for r in rows]))

    def flush(self) -> list:
        os.makedirs(self.path, exist_ok=True)
        out = []
        for name in sorted(self.files):
            kind, obj = self.files[name]
            p = os.path.join(self.path, name)
            if kind == "json":
                write_json(p, obj)
            else:
                write_csv(p, *obj)
            out.append(p)
        return out
