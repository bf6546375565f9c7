"""Run manifests: resolved config, versions, timing and output digests."""

from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import matplotlib
import numpy as np
import scipy

from .. import __version__

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    return {
        "unalab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, outputs: list[str],
                   wall_clock: float) -> Path:
    """Record the run; outputs are digested in the order they were written."""
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "versions": versions(),
        "wall_clock_seconds": round(wall_clock, 3),
        "outputs": {name: sha256_file(out_dir / name) for name in outputs},
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("command", "config", "seed", "outputs"):
        if key not in doc:
            raise ValueError(f"manifest {path} lacks {key!r}")
    return doc
