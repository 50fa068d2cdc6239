"""Self-describing checkpoint container.

Layout: a magic line, an 8-byte little-endian header length, a JSON header
(version, model config, provenance, parameter manifest, optional optimizer
manifest), then the raw little-endian IEEE-754 blobs in manifest order.
Loading a saved checkpoint reproduces forward outputs bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .model import Model, ModelConfig

MAGIC = b"MOLRLCKPT\n"
FORMAT_VERSION = 1

PHASES = ("base", "mol", "grpo")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    opt_state: Optional[Dict[str, np.ndarray]] = None

    def model(self) -> Model:
        return Model(self.config, self.params)

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            provenance=dict(self.provenance),
            opt_state=None if self.opt_state is None else {k: v.copy() for k, v in self.opt_state.items()},
        )


def params_hash(params: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()[:16]


def make_provenance(phase: str, step: int, config_hash: str, parent: Optional[str] = None, **extra) -> dict:
    if phase not in PHASES:
        raise CheckpointError(f"phase must be one of {PHASES}, got {phase!r}")
    prov = {"phase": phase, "step": int(step), "config_hash": config_hash, "parent": parent}
    prov.update(extra)
    return prov


def _le_dtype(dtype: str) -> str:
    return {"float64": "<f8", "float32": "<f4"}[dtype]


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    if "phase" not in ckpt.provenance:
        raise CheckpointError("provenance must identify the producing phase")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wire = _le_dtype(ckpt.config.dtype)
    manifest = [
        {"name": name, "shape": list(ckpt.params[name].shape)} for name in sorted(ckpt.params)
    ]
    opt_manifest = None
    if ckpt.opt_state is not None:
        opt_manifest = [
            {"name": name, "shape": list(ckpt.opt_state[name].shape)}
            for name in sorted(ckpt.opt_state)
        ]
    header = {
        "version": FORMAT_VERSION,
        "blob_dtype": wire,
        "config": ckpt.config.to_dict(),
        "provenance": dict(ckpt.provenance, params_hash=params_hash(ckpt.params)),
        "params": manifest,
        "opt_state": opt_manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for entry in manifest:
            fh.write(np.ascontiguousarray(ckpt.params[entry["name"]]).astype(wire).tobytes())
        if opt_manifest:
            for entry in opt_manifest:
                fh.write(np.ascontiguousarray(ckpt.opt_state[entry["name"]]).astype(wire).tobytes())
    return str(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig.from_dict(header["config"])
        wire = header["blob_dtype"]
        target = cfg.np_dtype()
        params: Dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * int(wire[-1]))
            params[entry["name"]] = np.frombuffer(buf, dtype=wire).astype(target).reshape(shape)
        opt_state = None
        if header.get("opt_state"):
            opt_state = {}
            for entry in header["opt_state"]:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(n * int(wire[-1]))
                opt_state[entry["name"]] = np.frombuffer(buf, dtype=wire).astype(target).reshape(shape)
    expected = header["provenance"].get("params_hash")
    if expected is not None and params_hash(params) != expected:
        raise CheckpointError("parameter blob hash mismatch; file is corrupt")
    return Checkpoint(config=cfg, params=params, provenance=header["provenance"], opt_state=opt_state)
