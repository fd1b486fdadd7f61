"""Hash-chained, append-only transaction log."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

GENESIS_PREV = "0" * 64


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def payload_digest(op: str, payload: dict) -> str:
    return hashlib.sha256(canonical_json({"op": op, "payload": payload}).encode()).hexdigest()


def entry_hash(index: int, timestamp: int, digest: str, prev_hash: str) -> str:
    return hashlib.sha256(f"{index}|{timestamp}|{digest}|{prev_hash}".encode()).hexdigest()


@dataclass
class LedgerEntry:
    index: int
    timestamp: int
    op: str
    payload: dict
    payload_digest: str
    prev_hash: str
    entry_hash: str

    def to_line(self) -> str:
        return canonical_json(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "LedgerEntry":
        return cls(**{k: d[k] for k in ("index", "timestamp", "op", "payload", "payload_digest",
                                         "prev_hash", "entry_hash")})


class Ledger:
    def __init__(self):
        self.entries: list[LedgerEntry] = []
        self.clock = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def head(self) -> str:
        return self.entries[-1].entry_hash if self.entries else GENESIS_PREV

    def append(self, op: str, payload: dict) -> LedgerEntry:
        index = len(self.entries)
        timestamp = self.clock
        self.clock += 1
        digest = payload_digest(op, payload)
        entry = LedgerEntry(index, timestamp, op, payload, digest, self.head,
                            entry_hash(index, timestamp, digest, self.head))
        self.entries.append(entry)
        return entry

    def to_jsonl(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.entries)

    @classmethod
    def from_jsonl(cls, text: str) -> "Ledger":
        ledger = cls()
        for line in text.splitlines():
            if line.strip():
                ledger.entries.append(LedgerEntry.from_dict(json.loads(line)))
        ledger.clock = ledger.entries[-1].timestamp + 1 if ledger.entries else 0
        return ledger

    def verify(self) -> int | None:
        return verify_entries(self.entries)


def _entry_ok(entry: LedgerEntry, index: int, prev_hash: str, prev_ts: int) -> bool:
    try:
        return (entry.index == index and isinstance(entry.timestamp, int) and entry.timestamp > prev_ts
                and entry.prev_hash == prev_hash
                and entry.payload_digest == payload_digest(entry.op, entry.payload)
                and entry.entry_hash == entry_hash(entry.index, entry.timestamp,
                                                   entry.payload_digest, entry.prev_hash))
    except (TypeError, ValueError, AttributeError):
        return False


def verify_entries(entries) -> int | None:
    """Recompute the chain; return the first corrupt index, or None if intact."""
    prev, prev_ts = GENESIS_PREV, -1
    for i, entry in enumerate(entries):
        if not _entry_ok(entry, i, prev, prev_ts):
            return i
        prev, prev_ts = entry.entry_hash, entry.timestamp
    return None


def verify_lines(lines) -> int | None:
    """Verify a serialized ledger; each line must also be in canonical form."""
    prev, prev_ts = GENESIS_PREV, -1
    for i, raw in enumerate(lines):
        try:
            line = raw.decode("utf-8", errors="strict") if isinstance(raw, bytes) else raw
            entry = LedgerEntry.from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError, UnicodeDecodeError):
            return i
        if entry.to_line() != line.rstrip("\n") or not _entry_ok(entry, i, prev, prev_ts):
            return i
        prev, prev_ts = entry.entry_hash, entry.timestamp
    return None
