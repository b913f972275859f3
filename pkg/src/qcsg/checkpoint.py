"""``.dpa`` checkpoint: binary matrix sections plus a JSON sidecar.

Layout of the binary file::

    magic  b"QCSGDPA\\0"      8 bytes
    version                 uint32 LE
    header length           uint32 LE
    header                  JSON section table (name, dtype, shape, offset, nbytes)
    sections                raw little-endian arrays, back to back

The sidecar ``<path>.json`` holds human-readable metadata (mode, phase,
config hash, seed). Both files are written deterministically, so
save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qcsg.assembly import Mode, PrimitiveBank
from qcsg.errors import QcsgError, ValidationError

MAGIC = b"QCSGDPA\0"
FORMAT_VERSION = 1
_SECTIONS = ("params", "selection", "weights", "colors")


class CheckpointVersionError(ValidationError):
    pass


@dataclass
class Checkpoint:
    bank: PrimitiveBank
    colors: np.ndarray
    phase: int = 0
    config_hash: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.colors.shape != (self.bank.convex_count, 3):
            raise ValidationError(f"colors shape {self.colors.shape}, expected ({self.bank.convex_count}, 3)")


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    arrays = {
        "params": ckpt.bank.params,
        "selection": ckpt.bank.selection,
        "weights": ckpt.bank.weights,
        "colors": ckpt.colors,
    }
    table, blobs, offset = [], [], 0
    for name in _SECTIONS:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        b = a.tobytes()
        table.append({"name": name, "dtype": "<f8", "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({"sections": table}, sort_keys=True, separators=(",", ":")).encode()
    data = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    side = {
        "format_version": FORMAT_VERSION,
        "mode": ckpt.bank.mode.value,
        "phase": int(ckpt.phase),
        "config_hash": ckpt.config_hash,
        "seed": int(ckpt.seed),
        "primitive_count": ckpt.bank.primitive_count,
        "convex_count": ckpt.bank.convex_count,
        "meta": ckpt.meta,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        sidecar_path(path).write_text(json.dumps(side, sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise QcsgError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise ValidationError(f"{path}: corrupt checkpoint header") from exc
    base = 16 + hlen
    arrays = {}
    for sec in header["sections"]:
        start = base + sec["offset"]
        buf = data[start:start + sec["nbytes"]]
        if len(buf) != sec["nbytes"]:
            raise ValidationError(f"{path}: truncated section {sec['name']}")
        arrays[sec["name"]] = np.frombuffer(buf, dtype=sec["dtype"]).reshape(sec["shape"]).astype(np.float64)
    missing = [s for s in _SECTIONS if s not in arrays]
    if missing:
        raise ValidationError(f"{path}: missing sections {missing}")
    side_file = sidecar_path(path)
    side = json.loads(side_file.read_text()) if side_file.exists() else {}
    if side and side.get("format_version", FORMAT_VERSION) != version:
        raise CheckpointVersionError(
            f"{path}: sidecar version {side.get('format_version')} does not match binary version {version}")
    bank = PrimitiveBank(arrays["params"], arrays["selection"], arrays["weights"], Mode(side.get("mode", "float")))
    return Checkpoint(bank, arrays["colors"], phase=side.get("phase", 0), config_hash=side.get("config_hash", ""),
                      seed=side.get("seed", 0), meta=side.get("meta", {}), version=version)
