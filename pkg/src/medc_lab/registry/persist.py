"""On-disk layout of a registry: state.json, ledger.jsonl and a content/ directory."""
from __future__ import annotations

import os
from pathlib import Path

from .core import Registry, RegistryError
from .store import ContentStore

STATE_FILE = "state.json"
LEDGER_FILE = "ledger.jsonl"
CONTENT_DIR = "content"


class StateDirError(RegistryError):
    exit_code = 6


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def init_dir(root, default_balance: int | None = None) -> Registry:
    root = Path(root)
    if (root / STATE_FILE).exists():
        raise StateDirError(f"{root} already holds a registry")
    root.mkdir(parents=True, exist_ok=True)
    kw = {} if default_balance is None else {"default_balance": default_balance}
    reg = Registry(ContentStore(root / CONTENT_DIR), **kw)
    save_dir(reg, root)
    return reg


def save_dir(reg: Registry, root) -> None:
    root = Path(root)
    # ledger first: a crash between the two writes leaves a detectable head mismatch
    _write_atomic(root / LEDGER_FILE, reg.ledger.to_jsonl())
    _write_atomic(root / STATE_FILE, reg.state_json() + "\n")


def load_dir(root) -> Registry:
    root = Path(root)
    if not (root / STATE_FILE).exists():
        raise StateDirError(f"{root} is not a registry directory (run init first)")
    return Registry.import_state((root / STATE_FILE).read_text(encoding="utf-8"),
                                 (root / LEDGER_FILE).read_text(encoding="utf-8"),
                                 ContentStore(root / CONTENT_DIR))
