"""Checkpoint files: a version header line followed by one JSON document.

Floats are written with Python's shortest round-trip repr, so loading a
checkpoint reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ContractViolation

HEADER = "SDPG-CKPT-v1"


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = json.dumps(payload, allow_nan=False, separators=(",", ":"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(HEADER + "\n" + body + "\n")
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().rstrip("\n")
        if header != HEADER:
            raise ContractViolation(f"{path}: not an {HEADER} checkpoint (header {header!r})")
        return json.loads(fh.read())
