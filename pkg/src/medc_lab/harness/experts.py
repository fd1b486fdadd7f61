"""Turn ``[experts] sources`` entries into expert handles with roulette weights."""
from __future__ import annotations

from fractions import Fraction

from medc_lab.envs import EnvConfig
from medc_lab.medc import ExpertError, ExpertHandle
from medc_lab.package import ModelPackage, PackageError, digest, encode_params, read_package
from medc_lab.registry import INITIAL_REPUTATION, SCALE, RegistryError, dm_exact, load_dir, qos_exact


def _load(source: str, registry_dir, cache: dict):
    """(package, owner_rep, model_rep) for a ``file:`` or ``cid:`` source."""
    kind, _, ref = source.partition(":")
    if kind == "file":
        try:
            pkg = read_package(ref)
        except (OSError, PackageError) as exc:
            raise ExpertError(f"cannot load expert {ref}: {exc}") from None
        return pkg, INITIAL_REPUTATION, INITIAL_REPUTATION
    if kind == "cid":
        if registry_dir is None:
            raise ExpertError(f"source {source!r} needs [experts] registry")
        try:
            reg = cache.setdefault("registry", load_dir(registry_dir))
            rec = reg.model(ref)
            pkg = ModelPackage.from_bytes(reg.fetch_content(ref))
        except (RegistryError, PackageError) as exc:
            raise ExpertError(f"cannot load expert {ref}: {exc}") from None
        return pkg, reg.users[rec.owner].reputation, rec.reputation
    raise ExpertError(f"unknown expert source {source!r}")


def _qos(pkg: ModelPackage, env: EnvConfig, owner_rep: int, model_rep: int) -> Fraction:
    meta = pkg.metadata
    app = meta.get("application", env.kind)
    if app != env.kind:
        raise ExpertError(f"expert for {app} cannot guide a {env.kind} scenario")
    dm = dm_exact(tuple(meta.get("environment_details", ())), env.environment_details())
    return qos_exact(Fraction(owner_rep, SCALE), Fraction(model_rep, SCALE), dm)


def resolve_experts(sources, env: EnvConfig, registry_dir=None) -> list[ExpertHandle]:
    """Build handles in source order.

    Loaded experts (``file:``/``cid:``, possibly wrapped in ``malicious:``) get
    R_S = QoS_i / sum(QoS_j) over the loaded experts; synthetic ones get 1.
    """
    cache, staged = {}, []
    for source in sources:
        kind, _, rest = source.partition(":")
        if kind == "random":
            staged.append((ExpertHandle.random(source=source), None))
        elif kind == "biased":
            try:
                staged.append((ExpertHandle.biased(int(rest), source=source), None))
            except ValueError:
                raise ExpertError(f"biased expert needs an action id, got {source!r}") from None
        elif kind in ("file", "cid", "malicious"):
            inner = rest if kind == "malicious" else source
            pkg, rep_i, rep_m = _load(inner, registry_dir, cache)
            handle = ExpertHandle.from_package(pkg, source=source)
            if kind == "malicious":
                handle = ExpertHandle.malicious(handle, source=source)
            staged.append((handle, _qos(pkg, env, rep_i, rep_m)))
        else:
            raise ExpertError(f"unknown expert source {source!r}")
    total = sum((q for _, q in staged if q is not None), Fraction(0))
    out = []
    for handle, q in staged:
        if q is None:
            out.append(handle)
        else:
            share = q / total if total > 0 else Fraction(1, sum(1 for _, x in staged if x is not None))
            out.append(handle.with_similarity(float(share)))
    return out


def expert_identity(experts) -> list:
    """Path-independent description of an expert list, for run manifests."""
    out = []
    for e in experts:
        item = {"kind": e.kind, "similarity": repr(e.similarity), "fixed_action": e.fixed_action}
        if e.params is not None:
            item["params"] = digest(encode_params(e.params))
        out.append(item)
    return out
