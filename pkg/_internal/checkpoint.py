"""
checkpoint.py

Binary checkpoint format:

    [8 bytes]  header length N, unsigned little-endian
    [N bytes]  UTF-8 JSON header (sorted keys): format, digest, config,
               counters, rng, tensors = [{name, shape}, ...] in name order
    [rest]     raw little-endian float64 values of each tensor, concatenated
               in header order

Saving the same Checkpoint twice yields byte-identical files.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from _internal.config_models import ExperimentConfig
from _internal.errors import CheckpointError

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    digest: str
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    counters: Dict[str, int] = field(default_factory=dict)
    rng: Dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        """Sub-map with `prefix.` stripped, e.g. group("agent")."""
        cut = len(prefix) + 1
        return {name[cut:]: value for name, value in self.params.items() if name.startswith(prefix + ".")}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.params)
    header = {
        "format": FORMAT_VERSION,
        "digest": ckpt.digest,
        "config": ckpt.config,
        "counters": ckpt.counters,
        "rng": ckpt.rng,
        "tensors": [{"name": n, "shape": list(np.shape(ckpt.params[n]))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_LEN.pack(len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(ckpt.params[name], dtype="<f8").tobytes())
    return path


def load_checkpoint(path, expected_digest: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint and verify its config digest, both against the stored
    config and, when given, against `expected_digest`.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if len(raw) < _LEN.size:
        raise CheckpointError(f"{path}: truncated header")
    (size,) = _LEN.unpack_from(raw)
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")

    try:
        stored = header["digest"]
        actual = ExperimentConfig.model_validate(header["config"]).digest()
        counters = {k: int(v) for k, v in header["counters"].items()}
        entries = [(entry["name"], tuple(entry["shape"])) for entry in header["tensors"]]
        rng_state = header["rng"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: header is missing {exc.args[0]!r}") from None
    except (TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None

    if actual != stored:
        raise CheckpointError(f"{path}: digest mismatch: header {stored} vs config {actual}")
    if expected_digest is not None and expected_digest != stored:
        raise CheckpointError(f"{path}: digest mismatch: expected {expected_digest}, file has {stored}")

    params: Dict[str, np.ndarray] = {}
    offset = _LEN.size + size
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: data for {name} is truncated")
        params[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    return Checkpoint(
        config=header["config"],
        digest=stored,
        params=params,
        counters=counters,
        rng=rng_state,
    )
