"""User/model managers, QoS-greedy allocation and payments as one event-sourced state machine.

Every mutation goes through ``_commit(op, payload)``: the payload is applied
to the in-memory state and appended to the ledger, so replaying a ledger
against an empty registry rebuilds the state exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .ledger import Ledger, LedgerEntry, canonical_json, verify_entries
from .store import ContentError, ContentStore

SCALE = 10_000  # four decimal places
INITIAL_REPUTATION = SCALE // 2
DEFAULT_BALANCE = 1000
EPS_D = Fraction(1, 2)
STATE_VERSION = 1

SCHEMAS = {
    "target_localization": ("agents", "targets", "obstacles"),
    "fleet": ("agents", "customers", "capacity"),
    "maze": ("agents", "grid_h", "grid_w"),
}


class RegistryError(Exception):
    exit_code = 1


class ValidationError(RegistryError):
    exit_code = 2


class DuplicateError(RegistryError):
    exit_code = 3


class NotFoundError(RegistryError):
    exit_code = 4


class InsufficientFunds(RegistryError):
    exit_code = 5


def to_fixed(x) -> int:
    """Real in [0, 1] (float, str or Fraction) to a 4-decimal fixed-point int."""
    try:
        frac = Fraction(str(x)) if isinstance(x, float) else Fraction(x)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"not a number: {x!r}") from exc
    return round(frac * SCALE)


def from_fixed(v: int) -> float:
    return v / SCALE


def _ratio_fixed(total: int, count: int) -> int:
    # total is already scaled, so total/count is the scaled reputation; round half up
    return (2 * total + count) // (2 * count)


def _weights(w, n: int) -> tuple[Fraction, ...]:
    if w is None:
        return tuple(Fraction(1, n) for _ in range(n))
    if len(w) != n:
        raise ValidationError(f"weight vector has {len(w)} entries, expected {n}")
    fw = tuple(Fraction(x) for x in w)
    if any(x < 0 for x in fw):
        raise ValidationError("weights must be non-negative")
    if abs(sum(fw) - 1) > Fraction(1, 10**9):
        raise ValidationError(f"weights sum to {float(sum(fw))}, expected 1")
    return fw


def dm_exact(em, er, w=None) -> Fraction:
    if len(em) != len(er):
        raise ValidationError(f"environment tuples differ in length: {len(em)} vs {len(er)}")
    fw = _weights(w, len(em))
    return sum((wi * abs(Fraction(a) - Fraction(b)) for wi, a, b in zip(fw, em, er)), Fraction(0))


def compute_dm(em, er, w=None) -> float:
    """Weighted L1 distance between environment-detail tuples."""
    return float(dm_exact(em, er, w))


def qos_exact(rep_i: Fraction, rep_m: Fraction, dm: Fraction) -> Fraction:
    return rep_i * rep_m / max(dm, EPS_D)


def compute_qos(rep_i, rep_m, dm) -> float:
    ri, rm = Fraction(str(rep_i)), Fraction(str(rep_m))
    if not (0 <= ri <= 1 and 0 <= rm <= 1):
        raise ValidationError("reputations must lie in [0, 1]")
    return float(qos_exact(ri, rm, Fraction(str(dm))))


@dataclass
class User:
    address: str
    reputation: int = INITIAL_REPUTATION
    models_alloc_count: int = 0
    total_review: int = 0
    balance: int = DEFAULT_BALANCE

    @property
    def rep(self) -> float:
        return from_fixed(self.reputation)


@dataclass
class ModelRecord:
    owner: str
    cid: str
    application: str
    environment_details: list
    description: str = ""
    reputation: int = INITIAL_REPUTATION
    allocation_count: int = 0
    total_model_review: int = 0

    @property
    def rep(self) -> float:
        return from_fixed(self.reputation)


@dataclass
class AllocationRequest:
    application: str
    desired_details: list
    weights: list | None = None
    min_model_reputation: float = 0.0
    min_owner_reputation: float = 0.0
    count: int = 1
    price: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["desired_details"] = [int(x) for x in self.desired_details]
        d["weights"] = None if self.weights is None else [str(Fraction(x)) for x in self.weights]
        d["min_model_reputation"] = to_fixed(self.min_model_reputation)
        d["min_owner_reputation"] = to_fixed(self.min_owner_reputation)
        return d


@dataclass
class Allocation:
    id: int
    requester: str
    cid: str
    price: int
    reviewed: bool = False
    review: int | None = None


@dataclass
class AllocationResult:
    records: list
    allocation_ids: list
    short: bool  # fewer qualifying models than requested

    @property
    def cids(self) -> list[str]:
        return [r.cid for r in self.records]


def rank_key(rep_i: int, record: ModelRecord, er, weights) -> tuple:
    """Sort key: QoS descending, then Rep_m descending, then CID ascending."""
    q = qos_exact(Fraction(rep_i, SCALE), Fraction(record.reputation, SCALE),
                  dm_exact(record.environment_details, er, weights))
    return (-q, -record.reputation, record.cid)


def _check_details(application: str, details) -> list:
    if application not in SCHEMAS:
        raise NotFoundError(f"unknown application {application!r}; known: {', '.join(sorted(SCHEMAS))}")
    schema = SCHEMAS[application]
    if len(details) != len(schema):
        raise ValidationError(f"{application} details need {len(schema)} values {schema}, got {len(details)}")
    out = []
    for name, v in zip(schema, details):
        if isinstance(v, bool) or int(v) != v or v < 0:
            raise ValidationError(f"{name} must be a non-negative integer, got {v!r}")
        out.append(int(v))
    return out


class Registry:
    def __init__(self, store: ContentStore | None = None, default_balance: int = DEFAULT_BALANCE,
                 _genesis: bool = True):
        self.store = store if store is not None else ContentStore()
        self.default_balance = default_balance
        self.users: dict[str, User] = {}
        self.models: dict[str, list[ModelRecord]] = {}
        self.by_cid: dict[str, ModelRecord] = {}
        self.allocations: list[Allocation] = []
        self.ledger = Ledger()
        if _genesis:
            self._commit("genesis", {"default_balance": default_balance, "version": STATE_VERSION})

    # -- event sourcing ----------------------------------------------------

    def _commit(self, op: str, payload: dict) -> LedgerEntry:
        self._apply(op, payload)
        return self.ledger.append(op, payload)

    def _apply(self, op: str, p: dict) -> None:
        if op == "genesis":
            self.default_balance = p["default_balance"]
        elif op == "add_user":
            self.users[p["address"]] = User(p["address"], balance=p["balance"])
        elif op == "add_model":
            rec = ModelRecord(p["owner"], p["cid"], p["application"], list(p["environment_details"]),
                              p["description"])
            self.models.setdefault(rec.application, []).append(rec)
            self.by_cid[rec.cid] = rec
        elif op == "allocate":
            buyer = self.users[p["requester"]]
            for cid, aid in zip(p["selected"], p["allocation_ids"]):
                rec = self.by_cid[cid]
                owner = self.users[rec.owner]
                rec.allocation_count += 1
                owner.models_alloc_count += 1
                buyer.balance -= p["price"]
                owner.balance += p["price"]
                self.allocations.append(Allocation(aid, buyer.address, cid, p["price"]))
        elif op == "review":
            alloc = self.allocations[p["allocation_id"]]
            rec = self.by_cid[alloc.cid]
            owner = self.users[rec.owner]
            alloc.reviewed, alloc.review = True, p["review"]
            rec.total_model_review += p["review"]
            owner.total_review += p["review"]
            rec.reputation = _ratio_fixed(rec.total_model_review, rec.allocation_count)
            owner.reputation = _ratio_fixed(owner.total_review, owner.models_alloc_count)
        else:
            raise RegistryError(f"unknown ledger operation {op!r}")

    @classmethod
    def replay(cls, entries, store: ContentStore | None = None) -> "Registry":
        """Rebuild a registry by re-applying every logged operation in order."""
        reg = cls(store, _genesis=False)
        for e in entries:
            e = e if isinstance(e, LedgerEntry) else LedgerEntry.from_dict(e)
            reg._commit(e.op, e.payload)
        return reg

    # -- user manager --------------------------------------------------------

    def add_user(self, address: str, balance: int | None = None) -> User:
        if not isinstance(address, str) or not address:
            raise ValidationError("address must be a non-empty string")
        if address in self.users:
            raise DuplicateError(f"address {address!r} already registered")
        balance = self.default_balance if balance is None else balance
        if isinstance(balance, bool) or not isinstance(balance, int) or balance < 0:
            raise ValidationError(f"balance must be a non-negative integer, got {balance!r}")
        self._commit("add_user", {"address": address, "balance": balance})
        return self.users[address]

    def user(self, address: str) -> User:
        try:
            return self.users[address]
        except KeyError:
            raise NotFoundError(f"unknown user {address!r}") from None

    # -- model manager ----------------------------------------------------

    def add_model(self, owner: str, package_bytes: bytes, description: str, application: str,
                  details) -> ModelRecord:
        self.user(owner)
        details = _check_details(application, details)
        cid = self.store.cid_of(package_bytes)
        if any(r.cid == cid for r in self.models.get(application, [])):
            raise DuplicateError(f"model {cid} already registered under {application}")
        if cid in self.by_cid:
            raise DuplicateError(f"model {cid} already registered under {self.by_cid[cid].application}")
        self.store.put(package_bytes)
        self._commit("add_model", {"owner": owner, "cid": cid, "application": application,
                                   "environment_details": details, "description": str(description)})
        return self.by_cid[cid]

    def model(self, cid: str) -> ModelRecord:
        try:
            return self.by_cid[cid]
        except KeyError:
            raise NotFoundError(f"unknown model {cid}") from None

    def fetch_content(self, cid: str) -> bytes:
        self.model(cid)
        try:
            return self.store.get(cid)
        except ContentError as exc:
            raise NotFoundError(str(exc)) from None

    # -- allocation -------------------------------------------------------

    def rank(self, requester: str, request: AllocationRequest) -> list[ModelRecord]:
        """Qualifying records in allocation order (no state change)."""
        er = _check_details(request.application, request.desired_details)
        weights = _weights(request.weights, len(er))
        min_m, min_o = to_fixed(request.min_model_reputation), to_fixed(request.min_owner_reputation)
        pool = [r for r in self.models.get(request.application, [])
                if r.owner != requester and r.reputation >= min_m
                and self.users[r.owner].reputation >= min_o]
        return sorted(pool, key=lambda r: rank_key(self.users[r.owner].reputation, r, er, weights))

    def allocate_models(self, requester: str, request: AllocationRequest) -> AllocationResult:
        buyer = self.user(requester)
        if isinstance(request.count, bool) or not isinstance(request.count, int) or request.count < 1:
            raise ValidationError(f"count must be a positive integer, got {request.count!r}")
        if isinstance(request.price, bool) or not isinstance(request.price, int) or request.price < 0:
            raise ValidationError(f"price must be a non-negative integer, got {request.price!r}")
        ranked = self.rank(requester, request)
        if buyer.balance < request.count * request.price:
            raise InsufficientFunds(f"{requester} holds {buyer.balance}, needs {request.count * request.price}")
        chosen = ranked[:request.count]
        ids = list(range(len(self.allocations), len(self.allocations) + len(chosen)))
        self._commit("allocate", {"requester": requester, "request": request.to_dict(),
                                  "selected": [r.cid for r in chosen], "allocation_ids": ids,
                                  "price": request.price, "short": len(chosen) < request.count})
        return AllocationResult(chosen, ids, len(chosen) < request.count)

    def submit_review(self, requester: str, cid: str, review) -> tuple[float, float]:
        """Review the oldest un-reviewed allocation of ``cid`` to ``requester``.

        Returns the updated (owner reputation, model reputation).
        """
        self.user(requester)
        rec = self.model(cid)
        r = to_fixed(review)
        if not 0 <= r <= SCALE:
            raise ValidationError(f"review must lie in [0, 1], got {review!r}")
        pending = [a for a in self.allocations if a.requester == requester and a.cid == cid and not a.reviewed]
        if not pending:
            raise NotFoundError(f"{requester} has no un-reviewed allocation of {cid}")
        self._commit("review", {"allocation_id": pending[0].id, "review": r})
        return self.users[rec.owner].rep, rec.rep

    # -- inspection / persistence -----------------------------------------

    def balances(self) -> dict[str, int]:
        return {a: u.balance for a, u in sorted(self.users.items())}

    def verify_ledger(self) -> int | None:
        return verify_entries(self.ledger.entries)

    def export_state(self) -> dict:
        return {
            "version": STATE_VERSION,
            "default_balance": self.default_balance,
            "users": {a: asdict(u) for a, u in sorted(self.users.items())},
            "models": {app: [asdict(r) for r in recs] for app, recs in sorted(self.models.items())},
            "allocations": [asdict(a) for a in self.allocations],
            "ledger": {"length": len(self.ledger), "head": self.ledger.head, "clock": self.ledger.clock},
        }

    def state_json(self) -> str:
        return canonical_json(self.export_state())

    @classmethod
    def import_state(cls, state, ledger_text: str, store: ContentStore | None = None) -> "Registry":
        if isinstance(state, (str, bytes)):
            state = json.loads(state)
        if state.get("version") != STATE_VERSION:
            raise ValidationError(f"unsupported state version {state.get('version')!r}")
        reg = cls(store, state["default_balance"], _genesis=False)
        reg.users = {a: User(**u) for a, u in state["users"].items()}
        for app, recs in state["models"].items():
            reg.models[app] = [ModelRecord(**r) for r in recs]
            for r in reg.models[app]:
                reg.by_cid[r.cid] = r
        reg.allocations = [Allocation(**a) for a in state["allocations"]]
        reg.ledger = Ledger.from_jsonl(ledger_text)
        meta = state["ledger"]
        if (len(reg.ledger), reg.ledger.head, reg.ledger.clock) != (meta["length"], meta["head"], meta["clock"]):
            raise ValidationError("ledger does not match the exported state head")
        return reg
