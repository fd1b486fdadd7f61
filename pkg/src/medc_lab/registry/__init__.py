from .core import (DEFAULT_BALANCE, EPS_D, INITIAL_REPUTATION, SCALE, SCHEMAS, Allocation,
                   AllocationRequest, AllocationResult, DuplicateError, InsufficientFunds, ModelRecord,
                   NotFoundError, Registry, RegistryError, User, ValidationError, compute_dm,
                   compute_qos, dm_exact, from_fixed, qos_exact, rank_key, to_fixed)
from .ledger import GENESIS_PREV, Ledger, LedgerEntry, canonical_json, verify_entries, verify_lines
from .persist import StateDirError, init_dir, load_dir, save_dir
from .store import ContentError, ContentStore
