"""
Artifact Cache
Persistent store for adaptation artifacts (case memories and GTM
memories). Entries are keyed by kind, parameter snapshot and
case-set hash, so a changed snapshot never hits a stale entry.
"""

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from utils.file_utils import ensure_directory, hash_bytes, read_json, write_json

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"


def case_set_hash(case_ids: Iterable[str]) -> str:
    """Order-sensitive hash of the case ids an artifact was built from"""
    return hash_bytes(*(cid.encode("utf-8") + b"\n" for cid in case_ids))


class ArtifactCache:
    """JSON artifacts under `<cache_dir>/<kind>/<key>.json` plus an index"""

    def __init__(self, cache_dir: str):
        self.cache_dir = Path(cache_dir)
        ensure_directory(self.cache_dir)
        self.index_path = self.cache_dir / INDEX_FILE
        self._index: Dict[str, Dict[str, Any]] = {}
        self.hits = 0
        self.misses = 0
        self._load_index()

    def _load_index(self) -> None:
        if not self.index_path.exists():
            return
        try:
            loaded = read_json(self.index_path)
            if isinstance(loaded, dict):
                self._index = loaded
            logger.info(f"Loaded artifact cache index: {len(self._index)} entries")
        except Exception as e:
            logger.warning(f"Failed to load artifact cache index: {e}")
            self._index = {}

    @staticmethod
    def make_key(kind: str, snapshot: str, cases_hash: str) -> str:
        return f"{kind}-{snapshot[:16]}-{cases_hash[:16]}"

    def _path(self, kind: str, key: str) -> Path:
        return self.cache_dir / kind / f"{key}.json"

    def get(self, kind: str, snapshot: str, cases_hash: str) -> Optional[Dict[str, Any]]:
        """
        Look up one artifact.

        Returns:
            The stored payload, or None when absent or built under another snapshot
        """
        key = self.make_key(kind, snapshot, cases_hash)
        entry = self._index.get(key)
        if not entry or entry.get("snapshot") != snapshot or entry.get("cases_hash") != cases_hash:
            self.misses += 1
            return None
        path = self._path(kind, key)
        if not path.exists():
            logger.warning(f"Cache entry {key} has no file, dropping it")
            del self._index[key]
            self._save_index()
            self.misses += 1
            return None
        self.hits += 1
        return read_json(path)

    def put(self, kind: str, snapshot: str, cases_hash: str, payload: Dict[str, Any]) -> Path:
        key = self.make_key(kind, snapshot, cases_hash)
        path = self._path(kind, key)
        write_json(payload, path)
        self._index[key] = {
            "kind": kind,
            "snapshot": snapshot,
            "cases_hash": cases_hash,
            "cached_at": datetime.now(timezone.utc).isoformat(),
        }
        self._save_index()
        return path

    def invalidate(self, snapshot: str) -> int:
        """Drop every entry built under `snapshot`; returns the number removed"""
        stale = [k for k, v in self._index.items() if v.get("snapshot") == snapshot]
        for key in stale:
            path = self._path(self._index[key]["kind"], key)
            if path.exists():
                path.unlink()
            del self._index[key]
        if stale:
            self._save_index()
            logger.info(f"Invalidated {len(stale)} cached artifacts")
        return len(stale)

    def stats(self) -> Dict[str, int]:
        return {"entries": len(self._index), "hits": self.hits, "misses": self.misses}

    def _save_index(self) -> None:
        write_json(self._index, self.index_path)
