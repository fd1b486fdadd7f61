"""HTTP front end for a registry directory and a queue of training runs."""
from __future__ import annotations

import base64
import binascii
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response

from medc_lab.harness import ConfigError, parse_scenario_text, run_scenario
from medc_lab.registry import AllocationRequest, RegistryError, StateDirError

from .ops import HTTP_STATUS, RegistryOps
from .schemas import (
    AllocateIn,
    AllocateOut,
    ModelIn,
    ModelOut,
    ReviewIn,
    ReviewOut,
    RunIn,
    RunStatus,
    UserIn,
    UserOut,
    VerifyOut,
)

log = logging.getLogger(__name__)


class RunQueue:
    """Scenarios run one at a time in a background thread."""

    def __init__(self):
        self.pool = ThreadPoolExecutor(max_workers=1)
        self.jobs: dict[int, dict] = {}
        self.lock = threading.Lock()

    def submit(self, cfg, resume: bool) -> dict:
        with self.lock:
            job = {"id": len(self.jobs), "name": cfg.name, "status": "queued"}
            self.jobs[job["id"]] = job
        self.pool.submit(self._run, job, cfg, resume)
        return job

    def _run(self, job, cfg, resume):
        job["status"] = "running"
        try:
            out = run_scenario(cfg, resume)
        except Exception as exc:  # reported through the status endpoint
            log.exception("run %s failed", cfg.name)
            job.update(status="failed", error=repr(exc))
            return
        job.update(status="complete", aggregate=str(out.aggregate_path), final_lengths=out.final_lengths())


def create_app(state_dir, init: bool = False) -> FastAPI:
    root = Path(state_dir)
    if init and not (root / "state.json").exists():
        ops = RegistryOps(root, create=True)
    else:
        ops = RegistryOps(root)
    runs = RunQueue()
    app = FastAPI(title="medc registry", version="1")
    app.state.ops = ops
    app.state.runs = runs

    @app.exception_handler(RegistryError)
    async def registry_error(request: Request, exc: RegistryError):
        return JSONResponse(status_code=HTTP_STATUS.get(exc.exit_code, 500),
                            content={"error": str(exc), "kind": type(exc).__name__,
                                     "exit_code": exc.exit_code})

    @app.exception_handler(ConfigError)
    async def config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content={"error": str(exc), "kind": "ConfigError",
                                                      "exit_code": 2})

    @app.post("/users", response_model=UserOut, status_code=201)
    def add_user(body: UserIn):
        return ops.add_user(body.address, body.balance)

    @app.get("/users/{address}", response_model=UserOut)
    def get_user(address: str):
        return ops.user(address)

    @app.post("/models", response_model=ModelOut, status_code=201)
    def add_model(body: ModelIn):
        try:
            data = base64.b64decode(body.package_b64, validate=True)
        except binascii.Error:
            raise HTTPException(400, "package_b64 is not valid base64") from None
        return ops.add_model(body.owner, data, body.description)

    @app.get("/models/{cid}", response_model=ModelOut)
    def get_model(cid: str):
        return ops.model(cid)

    @app.get("/content/{cid}")
    def get_content(cid: str):
        return Response(ops.content(cid), media_type="application/octet-stream")

    @app.post("/allocations", response_model=AllocateOut)
    def allocate(body: AllocateIn):
        req = AllocationRequest(body.application, body.desired_details, body.weights,
                                body.min_model_reputation, body.min_owner_reputation, body.count, body.price)
        return ops.allocate(body.requester, req)

    @app.post("/reviews", response_model=ReviewOut)
    def review(body: ReviewIn):
        return ops.review(body.requester, body.cid, body.review)

    @app.get("/balances")
    def balances() -> dict[str, int]:
        return ops.balances()

    @app.get("/ledger/verify", response_model=VerifyOut)
    def verify():
        return ops.verify()

    @app.get("/ledger", response_class=PlainTextResponse)
    def ledger():
        return ops.ledger_text()

    @app.get("/state")
    def state():
        return ops.export_state()

    @app.post("/runs", response_model=RunStatus, status_code=202)
    def submit_run(body: RunIn):
        cfg = parse_scenario_text(body.scenario, body.base_dir)
        return runs.submit(cfg, body.resume)

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: int):
        if run_id not in runs.jobs:
            raise HTTPException(404, f"no run {run_id}")
        return runs.jobs[run_id]

    return app


def app_from_env() -> FastAPI:
    """Factory for ``uvicorn --factory``; reads MEDC_STATE."""
    state = os.environ.get("MEDC_STATE")
    if not state:
        raise StateDirError("MEDC_STATE is not set")
    return create_app(state, init=True)
