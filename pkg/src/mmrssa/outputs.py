"""Deterministic CSV/JSON writers and all-or-nothing output directories."""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, header, rows):
    """CSV with floats at 17 significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


class OutputDir:
    """Collects files in a scratch directory and moves them into place only
    when the block exits cleanly; on error nothing is left behind."""

    def __init__(self, target):
        self.target = Path(target)
        self.tmp: Path | None = None
        self.files: list[str] = []

    def __enter__(self):
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.tmp / name

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.target.mkdir(parents=True, exist_ok=True)
                for name in self.files:
                    os.replace(self.tmp / name, self.target / name)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False
