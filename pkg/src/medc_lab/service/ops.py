"""Registry operations on a state directory, returning JSON-ready values.

The HTTP service and the local CLI both go through :class:`RegistryOps`, so a
command behaves the same whether it runs in-process or against ``--url``.
"""
from __future__ import annotations

import threading
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

from medc_lab.package import ModelPackage, PackageError
from medc_lab.registry import (
    AllocationRequest,
    Registry,
    StateDirError,
    ValidationError,
    dm_exact,
    from_fixed,
    init_dir,
    load_dir,
    qos_exact,
    save_dir,
    verify_lines,
)
from medc_lab.registry.persist import LEDGER_FILE

# HTTP status per registry exit code
HTTP_STATUS = {1: 500, 2: 400, 3: 409, 4: 404, 5: 402, 6: 503}


def user_view(u) -> dict:
    return {"address": u.address, "reputation": from_fixed(u.reputation),
            "models_alloc_count": u.models_alloc_count, "total_review": from_fixed(u.total_review),
            "balance": u.balance}


def model_view(m) -> dict:
    d = asdict(m)
    d["reputation"] = from_fixed(m.reputation)
    d["total_model_review"] = from_fixed(m.total_model_review)
    return d


class RegistryOps:
    """Single-writer access to one registry directory."""

    def __init__(self, root, create: bool = False, default_balance: int | None = None):
        self.root = Path(root)
        self.lock = threading.Lock()
        self.reg = init_dir(self.root, default_balance) if create else load_dir(self.root)

    def _write(self, fn):
        with self.lock:
            out = fn(self.reg)
            save_dir(self.reg, self.root)
            return out

    def add_user(self, address: str, balance: int | None = None) -> dict:
        return self._write(lambda r: user_view(r.add_user(address, balance)))

    def user(self, address: str) -> dict:
        return user_view(self.reg.user(address))

    def add_model(self, owner: str, package: bytes, description: str | None = None) -> dict:
        try:
            pkg = ModelPackage.from_bytes(package, require_complete=True)
        except PackageError as exc:
            raise ValidationError(f"not a valid model package: {exc}") from None
        meta = pkg.metadata
        desc = meta.get("description", "") if description is None else description
        return self._write(lambda r: model_view(
            r.add_model(owner, package, desc, meta["application"], meta["environment_details"])))

    def model(self, cid: str) -> dict:
        return model_view(self.reg.model(cid))

    def content(self, cid: str) -> bytes:
        return self.reg.fetch_content(cid)

    def allocate(self, requester: str, request: AllocationRequest) -> dict:
        def run(r: Registry):
            res = r.allocate_models(requester, request)
            weights = [Fraction(w) for w in request.weights] if request.weights else None
            rows = []
            for aid, rec in zip(res.allocation_ids, res.records):
                owner = r.users[rec.owner]
                q = qos_exact(Fraction(owner.reputation, 10_000), Fraction(rec.reputation, 10_000),
                              dm_exact(rec.environment_details, request.desired_details, weights))
                rows.append({"allocation_id": aid, "cid": rec.cid, "owner": rec.owner, "qos": float(q)})
            return {"allocations": rows, "short": res.short}
        return self._write(run)

    def review(self, requester: str, cid: str, review: float) -> dict:
        owner_rep, model_rep = self._write(lambda r: r.submit_review(requester, cid, review))
        return {"cid": cid, "owner_reputation": owner_rep, "model_reputation": model_rep}

    def balances(self) -> dict:
        return self.reg.balances()

    def verify(self) -> dict:
        """Check the on-disk ledger bytes, then the in-memory chain."""
        path = self.root / LEDGER_FILE
        index = verify_lines(path.read_bytes().splitlines(keepends=True)) if path.exists() else None
        if index is None:
            index = self.reg.verify_ledger()
        return {"ok": index is None, "first_corrupt_index": index, "length": len(self.reg.ledger)}

    def export_state(self) -> dict:
        return self.reg.export_state()

    def ledger_text(self) -> str:
        return self.reg.ledger.to_jsonl()


def verify_dir(root) -> dict:
    """Verify a ledger file without loading state (which may itself be unreadable)."""
    path = Path(root) / LEDGER_FILE
    if not path.exists():
        raise StateDirError(f"{root} has no {LEDGER_FILE}")
    lines = path.read_bytes().splitlines(keepends=True)
    index = verify_lines(lines)
    return {"ok": index is None, "first_corrupt_index": index, "length": len(lines)}
