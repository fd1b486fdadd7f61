"""``medc`` command line: registry verbs, scenario runs and the HTTP service.

Registry verbs act on a local state directory (``--state``) or, with
``--url``, on a running ``medc serve``. Output is JSON on stdout, except
``add-model`` which prints the new CID alone.
"""
from __future__ import annotations

import base64
import json
import logging
import sys
from pathlib import Path

import click
import httpx

from medc_lab.harness import DEFAULT_SEEDS, PRESETS, ConfigError, parse_scenario, replicate_figure, run_scenario
from medc_lab.package import PackageError
from medc_lab.registry import AllocationRequest, RegistryError

from .service.ops import RegistryOps, verify_dir

CLIENT_ERROR = 1
# for error bodies without an exit code (request validation, unknown routes)
STATUS_EXIT = {400: 2, 422: 2, 402: 5, 404: 4, 409: 3}


class RemoteError(Exception):
    def __init__(self, message, exit_code=CLIENT_ERROR):
        super().__init__(message)
        self.exit_code = exit_code


class Remote:
    """Same surface as RegistryOps, over HTTP."""

    def __init__(self, url: str):
        self.http = httpx.Client(base_url=url.rstrip("/"), timeout=60)

    def _call(self, method, path, **kw):
        try:
            resp = self.http.request(method, path, **kw)
        except httpx.HTTPError as exc:
            raise RemoteError(f"cannot reach {self.http.base_url}: {exc}") from None
        if resp.status_code >= 400:
            try:
                body = resp.json()
            except ValueError:
                body = {"error": resp.text}
            raise RemoteError(body.get("error") or str(body.get("detail")),
                              body.get("exit_code", STATUS_EXIT.get(resp.status_code, CLIENT_ERROR)))
        return resp

    def add_user(self, address, balance=None):
        return self._call("POST", "/users", json={"address": address, "balance": balance}).json()

    def add_model(self, owner, package, description=None):
        body = {"owner": owner, "package_b64": base64.b64encode(package).decode(), "description": description}
        return self._call("POST", "/models", json=body).json()

    def content(self, cid):
        return self._call("GET", f"/content/{cid}").content

    def allocate(self, requester, request: AllocationRequest):
        body = {"requester": requester, "application": request.application,
                "desired_details": list(request.desired_details), "weights": request.weights,
                "min_model_reputation": request.min_model_reputation,
                "min_owner_reputation": request.min_owner_reputation,
                "count": request.count, "price": request.price}
        return self._call("POST", "/allocations", json=body).json()

    def review(self, requester, cid, review):
        return self._call("POST", "/reviews", json={"requester": requester, "cid": cid, "review": review}).json()

    def balances(self):
        return self._call("GET", "/balances").json()

    def verify(self):
        return self._call("GET", "/ledger/verify").json()

    def export_state(self):
        return self._call("GET", "/state").json()

    def ledger_text(self):
        return self._call("GET", "/ledger").text


def _emit(obj):
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


def _fail(exc, code):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _backend(ctx):
    url, state = ctx.obj["url"], ctx.obj["state"]
    return Remote(url) if url else RegistryOps(state)


def _csv(value, cast=str):
    return [cast(x.strip()) for x in value.split(",") if x.strip()] if value else []


class Group(click.Group):
    """Maps domain errors onto exit codes instead of tracebacks."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (RegistryError, RemoteError) as exc:
            _fail(exc, exc.exit_code)
        except (ConfigError, PackageError) as exc:
            _fail(exc, 2)


@click.group(cls=Group)
@click.option("--state", default="registry", envvar="MEDC_STATE", show_default=True,
              type=click.Path(file_okay=False), help="registry state directory")
@click.option("--url", envvar="MEDC_URL", help="talk to a running `medc serve` instead")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, state, url, verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    ctx.obj = {"state": state, "url": url}


@main.command()
@click.option("--balance", type=int, help="initial balance for new users (default 1000)")
@click.pass_context
def init(ctx, balance):
    """Create an empty registry with its genesis ledger entry."""
    if ctx.obj["url"]:
        raise click.UsageError("init works on a local state directory only")
    ops = RegistryOps(ctx.obj["state"], create=True, default_balance=balance)
    _emit({"state": str(ops.root), "ledger_head": ops.reg.ledger.head})


@main.command("add-user")
@click.argument("address")
@click.option("--balance", type=int)
@click.pass_context
def add_user(ctx, address, balance):
    _emit(_backend(ctx).add_user(address, balance))


@main.command("add-model")
@click.argument("owner")
@click.argument("package", type=click.Path(exists=True, dir_okay=False))
@click.option("--description", help="overrides the package's own description")
@click.pass_context
def add_model(ctx, owner, package, description):
    """Register a model package file; prints its CID."""
    rec = _backend(ctx).add_model(owner, Path(package).read_bytes(), description)
    click.echo(rec["cid"])


@main.command()
@click.argument("requester")
@click.option("--application", required=True, type=click.Choice(["target_localization", "fleet", "maze"]))
@click.option("--details", required=True, help="desired environment details, e.g. 2,1,2")
@click.option("--weights", help="per-attribute weights, e.g. 1/2,1/4,1/4 (default equal)")
@click.option("--min-model-rep", type=float, default=0.0)
@click.option("--min-owner-rep", type=float, default=0.0)
@click.option("-k", "--count", type=int, default=1)
@click.option("--price", type=int, default=0)
@click.option("--out", type=click.Path(file_okay=False), help="write fetched packages here as <cid>.medc")
@click.pass_context
def allocate(ctx, requester, application, details, weights, min_model_rep, min_owner_rep, count, price, out):
    """Allocate the top-QoS models and pay their owners."""
    backend = _backend(ctx)
    try:
        desired = _csv(details, int)
    except ValueError:
        raise click.BadParameter(f"not a list of integers: {details!r}", param_hint="--details") from None
    req = AllocationRequest(application, desired, _csv(weights) or None, min_model_rep, min_owner_rep,
                            count, price)
    result = backend.allocate(requester, req)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        for row in result["allocations"]:
            path = Path(out) / f"{row['cid']}.medc"
            path.write_bytes(backend.content(row["cid"]))
            row["path"] = str(path)
    _emit(result)


@main.command()
@click.argument("requester")
@click.argument("cid")
@click.argument("score", type=float)
@click.pass_context
def review(ctx, requester, cid, score):
    """Review an allocated model with a score in [0, 1]."""
    _emit(_backend(ctx).review(requester, cid, score))


@main.command()
@click.pass_context
def balances(ctx):
    _emit(_backend(ctx).balances())


@main.command("verify-ledger")
@click.pass_context
def verify_ledger(ctx):
    """Exit 0 if the hash chain is intact; otherwise report the first bad entry and exit 7."""
    report = Remote(ctx.obj["url"]).verify() if ctx.obj["url"] else verify_dir(ctx.obj["state"])
    _emit(report)
    if not report["ok"]:
        sys.exit(7)


@main.command("export-state")
@click.option("--ledger", "ledger_path", type=click.Path(dir_okay=False), help="also write the ledger JSON lines")
@click.pass_context
def export_state(ctx, ledger_path):
    backend = _backend(ctx)
    click.echo(json.dumps(backend.export_state(), sort_keys=True, separators=(",", ":")))
    if ledger_path:
        Path(ledger_path).write_text(backend.ledger_text())


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--no-resume", is_flag=True, help="retrain seeds even if a matching run exists")
def run(scenario, no_resume):
    """Train every seed of a scenario file."""
    out = run_scenario(parse_scenario(scenario), resume=not no_resume)
    _emit({"aggregate": str(out.aggregate_path),
           "seeds": {s.seed: {"csv": str(s.csv_path), "package": str(s.package_path), "reused": s.reused}
                     for s in out.seeds}})


@main.command()
@click.argument("name", type=click.Choice(PRESETS))
@click.option("--root", default="experiments", show_default=True, type=click.Path(file_okay=False))
@click.option("--seeds", default=",".join(map(str, DEFAULT_SEEDS)), show_default=True)
@click.option("--steps", type=int, default=500_000, show_default=True)
@click.option("--expert", type=click.Path(exists=True, dir_okay=False), help="skip the expert stage")
@click.option("--expert-steps", type=int, default=2_000_000, show_default=True)
@click.option("--no-resume", is_flag=True)
def replicate(name, root, seeds, steps, expert, expert_steps, no_resume):
    """Run a preset comparison batch and write <root>/<name>-comparison.csv."""
    outcomes = replicate_figure(name, root, _csv(seeds, int), steps, expert, expert_steps, not no_resume)
    _emit({k: {"aggregate": str(v.aggregate_path), "final_lengths": v.final_lengths()}
           for k, v in outcomes.items()})


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.pass_context
def serve(ctx, host, port):
    """Serve the registry in --state over HTTP (creating it if needed)."""
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(ctx.obj["state"], init=True), host=host, port=port)


if __name__ == "__main__":
    main()
