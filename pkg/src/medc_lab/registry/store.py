"""Content-addressed blob store: in memory, or a directory of CID-named files."""
from __future__ import annotations

import hashlib
import os
from pathlib import Path


class ContentError(KeyError):
    pass


class ContentStore:
    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, bytes] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def cid_of(data: bytes) -> str:
        return hashlib.sha256(data).hexdigest()

    def put(self, data: bytes) -> str:
        cid = self.cid_of(data)
        if self.root is None:
            self._mem[cid] = bytes(data)
            return cid
        path = self.root / cid
        if not path.exists():
            tmp = self.root / f".{cid}.tmp"
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return cid

    def has(self, cid: str) -> bool:
        return cid in self._mem if self.root is None else (self.root / cid).is_file()

    def get(self, cid: str) -> bytes:
        if self.root is None:
            data = self._mem.get(cid)
        else:
            path = self.root / cid
            data = path.read_bytes() if path.is_file() else None
        if data is None:
            raise ContentError(f"no content stored for {cid}")
        if self.cid_of(data) != cid:
            raise ContentError(f"stored content for {cid} fails its digest check")
        return data

    def __iter__(self):
        if self.root is None:
            return iter(sorted(self._mem))
        return iter(sorted(p.name for p in self.root.iterdir() if not p.name.startswith(".")))
