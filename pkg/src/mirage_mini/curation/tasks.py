"""Claim-once task locking on top of an atomic create-if-absent store."""

from __future__ import annotations

import errno
import json
import os
import threading
from pathlib import Path
from typing import Optional


class StoreUnavailableError(RuntimeError):
    """The backing store could not be reached; the claim may be retried."""


class MemoryTaskStore:
    def __init__(self):
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        self.available = True

    def create_if_absent(self, key: str, value: str) -> bool:
        if not self.available:
            raise StoreUnavailableError("in-memory store marked unavailable")
        with self._lock:
            if key in self._data:
                return False
            self._data[key] = value
            return True

    def put(self, key: str, value: str) -> None:
        if not self.available:
            raise StoreUnavailableError("in-memory store marked unavailable")
        with self._lock:
            self._data[key] = value

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            return self._data.get(key)


class FileTaskStore:
    """Directory-backed store; ``O_CREAT | O_EXCL`` gives the atomic create."""

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key.replace("/", "__")

    def create_if_absent(self, key: str, value: str) -> bool:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            fd = os.open(self._path(key), os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            return False
        except OSError as exc:
            raise StoreUnavailableError(str(exc)) from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(value)
        return True

    def put(self, key: str, value: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self._path(key).with_suffix(f".tmp{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(value)
        os.replace(tmp, self._path(key))

    def get(self, key: str) -> Optional[str]:
        try:
            return self._path(key).read_text()
        except FileNotFoundError:
            return None


def acquire_task(store, task_id: str, owner: str = "") -> bool:
    """True for exactly one caller per ``task_id``; raises StoreUnavailableError if the store is down."""
    return store.create_if_absent(f"lock/{task_id}", owner)


def store_result(store, clip_id: str, stage: str, payload: dict) -> None:
    store.put(f"result/{clip_id}/{stage}", json.dumps(payload, sort_keys=True))
