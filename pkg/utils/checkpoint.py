"""
Checkpoints and Run Manifest
Versioned parameter checkpoints (bit-exact JSON) and the per-run manifest
that makes every reported number traceable.
"""

import json
import hashlib
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from utils.error_handler import MissingArtifactError, DataFormatError, DimensionError
from utils.file_utils import atomic_write, read_json, write_json

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "structcbr-params"
CHECKPOINT_VERSION = 1


def parameter_hash(params: Dict[str, Any]) -> str:
    """SHA-256 over sorted parameter names, shapes and float64 bytes"""
    hash_obj = hashlib.sha256()
    for name in sorted(params):
        data = np.ascontiguousarray(getattr(params[name], "data", params[name]), dtype=np.float64)
        hash_obj.update(name.encode("utf-8"))
        hash_obj.update(str(data.shape).encode("ascii"))
        hash_obj.update(data.tobytes())
    return hash_obj.hexdigest()


def save_parameters(path: str, params: Dict[str, Any], meta: Optional[Dict[str, Any]] = None) -> str:
    """
    Write a parameter checkpoint.

    Args:
        path: Target file
        params: name -> Tensor (or ndarray)
        meta: Extra header fields (model config, vocabulary path, ...)

    Returns:
        Parameter hash of the saved values
    """
    body = {}
    for name, tensor in params.items():
        data = np.asarray(getattr(tensor, "data", tensor), dtype=np.float64)
        # repr of a Python float round-trips exactly
        body[name] = {"shape": list(data.shape), "data": [float(x) for x in data.reshape(-1)]}
    digest = parameter_hash(params)
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "param_hash": digest,
        "meta": meta or {},
        "params": body,
    }
    atomic_write(json.dumps(document, separators=(",", ":")).encode("utf-8"), path)
    logger.info(f"Saved {len(body)} tensors to {path}")
    return digest


def read_checkpoint(path: str, producer: Optional[str] = None) -> Dict[str, Any]:
    document = read_json(path, producer=producer)
    if document.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path}: not a parameter checkpoint")
    if document.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {document.get('version')}")
    return document


def load_parameters(path: str, params: Dict[str, Any], producer: Optional[str] = None) -> Dict[str, Any]:
    """Copy checkpoint values into existing tensors in place; returns the header meta"""
    document = read_checkpoint(path, producer)
    stored = document["params"]
    missing = sorted(set(params) - set(stored))
    if missing:
        raise DataFormatError(f"{path}: checkpoint lacks parameters {missing[:5]}")
    for name, tensor in params.items():
        entry = stored[name]
        values = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if values.shape != tensor.data.shape:
            raise DimensionError(f"{path}: {name} has shape {values.shape}, model expects {tensor.data.shape}")
        tensor.data[...] = values
    return document.get("meta", {})


class RunManifest:
    """Manifest of one output directory, rewritten atomically after each phase"""

    def __init__(self, manifest_path: str):
        self.manifest_path = Path(manifest_path)
        self.data: Dict[str, Any] = {"phases": {}, "parameters": {}, "reports": []}
        self._load()

    def _load(self) -> None:
        if not self.manifest_path.exists():
            logger.info(f"No manifest at {self.manifest_path}, starting fresh")
            return
        try:
            loaded = read_json(self.manifest_path)
            if isinstance(loaded, dict):
                self.data.update(loaded)
        except Exception as e:
            logger.warning(f"Failed to load manifest: {e}, starting fresh")

    def set(self, key: str, value: Any) -> None:
        self.data[key] = value
        self.save()

    def get(self, key: str, default: Any = None) -> Any:
        return self.data.get(key, default)

    def record_parameters(self, name: str, path: str, digest: str) -> None:
        self.data["parameters"][name] = {"path": str(path), "hash": digest}
        self.save()

    def parameter_hash(self, name: str) -> Optional[str]:
        return self.data["parameters"].get(name, {}).get("hash")

    def mark_phase(self, phase: str, seconds: float, updates: int, metadata: Optional[Dict] = None) -> None:
        """
        Record a finished phase.

        Args:
            phase: Command or sub-phase name
            seconds: Wall-clock duration
            updates: Gradient updates applied during the phase
            metadata: Extra fields (seeds, losses, counts)
        """
        entry = {
            "status": "ok",
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "seconds": round(float(seconds), 6),
            "gradient_updates": int(updates),
        }
        if metadata:
            entry.update(metadata)
        self.data["phases"][phase] = entry
        self.save()

    def phase(self, phase: str) -> Optional[Dict]:
        return self.data["phases"].get(phase)

    def add_report(self, path: str) -> None:
        if str(path) not in self.data["reports"]:
            self.data["reports"].append(str(path))
        self.save()

    def save(self) -> None:
        write_json(self.data, self.manifest_path)


def require_file(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"Missing artifact: {path}", producer=producer)
    return Path(path)
