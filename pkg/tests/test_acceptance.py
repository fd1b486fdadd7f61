"""Acceptance gate: one PASS/FAIL line per criterion (see the summary section of the pytest run).

Criteria 3-7 read the preset outputs under ``$MEDC_EXPERIMENTS`` (default
``experiments/`` next to this directory), produced by ``medc replicate fig5``,
``fig7``, ``fig8-il`` and ``fig8-frl``. Every seed's manifest key is recomputed
from the current code and configuration, so stale outputs fail instead of passing.
"""
import csv
import json
import os
import statistics
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import mannwhitneyu

from medc_lab.envs import EnvConfig, is_connected, make_env
from medc_lab.harness import expert_stage, parse_scenario_text, preset_scenarios, read_curve, resolve_experts, run_scenario
from medc_lab.harness.runner import run_key, seed_paths
from medc_lab.medc import ExpertHandle, MedcConfig, draw_mode, roulette_select
from medc_lab.network import ConvLayer, DenseLayer, NetworkSpec, bc_loss, build_network, gradients, param_count, \
    policy_and_value, ppo_loss, value_loss
from medc_lab.registry import AllocationRequest, Registry, compute_dm, compute_qos, verify_lines
from medc_lab.trainer import compute_gae

ROOT = Path(os.environ.get("MEDC_EXPERIMENTS", Path(__file__).resolve().parent.parent / "experiments"))
THRESHOLD_LENGTH = 50
EXPERT_LENGTH = 30


# -- experiment outputs ------------------------------------------------------

class Missing(Exception):
    pass


def expert_path() -> Path:
    return Path(expert_stage("fig5", ROOT).output) / "model_seed0.medc"


def load(cfg):
    """Per-seed curves (and guidance paths) of a finished scenario, checked against its manifests."""
    experts = resolve_experts(cfg.expert_sources, cfg.env, cfg.registry_dir) if cfg.baseline in ("medc", "il") \
        else []
    runs = {}
    for seed in cfg.seeds:
        paths = seed_paths(Path(cfg.output), seed)
        if not paths["manifest"].exists():
            raise Missing(f"{cfg.name} seed {seed} has not been run")
        manifest = json.loads(paths["manifest"].read_text())
        if manifest.get("status") != "complete":
            raise Missing(f"{cfg.name} seed {seed} is {manifest.get('status')}")
        if manifest["key"] != run_key(cfg, seed, experts):
            raise Missing(f"{cfg.name} seed {seed} was produced by different code or settings")
        runs[seed] = {"curve": read_curve(paths["csv"]), "guidance": paths["guidance"]}
    return runs


def scenarios(preset):
    if not expert_path().exists():
        raise Missing(f"expert package {expert_path()} is missing")
    load(expert_stage("fig5", ROOT))
    return {c.name: c for c in preset_scenarios(preset, ROOT, expert=str(expert_path()))}


def median_curve(runs):
    steps = sorted(set.intersection(*({r.step for r in run["curve"]} for run in runs.values())))
    by_seed = [{r.step: r.mean_episode_length for r in run["curve"]} for run in runs.values()]
    return [(s, statistics.median(d[s] for d in by_seed)) for s in steps]


def first_step_at_or_below(curve, level):
    return next((s for s, v in curve if v <= level), None)


def final_lengths(runs):
    return [run["curve"][-1].mean_episode_length for run in runs.values()]


def heavy(test):
    """Turn missing experiment outputs into a FAIL line rather than an error."""
    def wrapper(verdict):
        try:
            test(verdict)
        except Missing as exc:
            verdict(test.number, False, f"experiment outputs unavailable: {exc}")
    wrapper.__name__ = test.__name__
    return wrapper


def criterion(n):
    def mark(fn):
        fn.number = n
        return fn
    return mark


# -- 1. gradients ------------------------------------------------------------

TINY = NetworkSpec(2, 5, 5, (ConvLayer(2, 3, 1), ConvLayer(3, 2, 1), DenseLayer(8)), n_actions=3)


def max_rel_error(fn, params, h=1e-5):
    loss, leaves = fn(params, True)
    analytic = gradients(loss, leaves, params).flat()
    base = params.flat()
    numeric = np.empty_like(base)
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (fn(params.with_flat(up), False)[0].item() - fn(params.with_flat(down), False)[0].item()) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)))


def test_criterion_01_gradients(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    base = build_network(TINY, 10, policy_gain=1.0)
    # off-kink evaluation point: zero initial biases sit exactly on ReLU corners
    params = base.with_flat(base.flat() + rng.normal(scale=0.05, size=base.size))
    obs = rng.normal(size=(6, 2, 5, 5))
    actions = rng.integers(0, 3, size=6)
    probs, _ = policy_and_value(params, TINY, obs)
    old = np.log(probs[np.arange(6), actions]) + rng.uniform(-0.4, 0.4, size=6)
    adv, ret = rng.normal(size=6), rng.normal(size=6)
    errors = {
        "ppo": max_rel_error(lambda p, r: (lambda o: (o[0], o[2]))(
            ppo_loss(p, TINY, obs, actions, old, adv, ret, 0.2, 0.5, 0.01, r)), params),
        "value": max_rel_error(lambda p, r: value_loss(p, TINY, obs, ret, r), params),
        "bc": max_rel_error(lambda p, r: bc_loss(p, TINY, obs, actions, r), params),
    }
    elapsed = time.perf_counter() - start
    ok = param_count(TINY) <= 500 and max(errors.values()) < 1e-4 and elapsed < 60
    verdict(1, ok, f"{param_count(TINY)} params, max rel error "
                   + ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f" (tol 1e-4), {elapsed:.1f}s")


# -- 2. GAE ------------------------------------------------------------------

def double_loop_gae(r, v, f, boot, gamma, lam):
    T = len(r)
    nxt = list(v[1:]) + [boot]
    out = np.zeros(T)
    for t in range(T):
        total, weight = 0.0, 1.0
        for k in range(t, T):
            total += weight * (r[k] + gamma * nxt[k] * (1 - f[k]) - v[k])
            if f[k]:
                break
            weight *= gamma * lam
        out[t] = total
    return out


def test_criterion_02_gae(verdict):
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 65))
        r, v = rng.normal(size=T), rng.normal(size=T)
        f = (rng.random(T) < 0.2).astype(int)
        boot, gamma, lam = float(rng.normal()), float(rng.uniform(0.8, 1)), float(rng.uniform(0, 1))
        adv, _ = compute_gae(r, v, f, boot, gamma, lam)
        worst = max(worst, float(np.max(np.abs(adv - double_loop_gae(r, v, f, boot, gamma, lam)))))
    # identities on dyadic data, where every operation is exact in binary floating point
    r = np.array([0.0, 0.5, 1.0, 0.0, 0.25, 0.0])
    v = np.array([0.5, 0.25, 0.75, 0.125, 0.5, 0.25])
    f = np.array([0, 0, 1, 0, 0, 0])
    boot, gamma = 0.5, 0.5
    adv0, _ = compute_gae(r, v, f, boot, gamma, 0.0)
    nxt = np.append(v[1:], boot)
    td = r + gamma * nxt * (1 - f) - v
    adv1, _ = compute_gae(r, v, f, boot, gamma, 1.0)
    g = np.zeros(6)
    acc = boot
    for t in reversed(range(6)):
        acc = r[t] + gamma * acc * (1 - f[t])
        g[t] = acc
    ok = worst <= 1e-10 and np.array_equal(adv0, td) and np.array_equal(adv1, g - v)
    verdict(2, ok, f"max |gae - double loop| = {worst:.1e} over 1000 sequences (tol 1e-10); "
                   f"lambda=0 exact {np.array_equal(adv0, td)}, lambda=1 exact {np.array_equal(adv1, g - v)}")


# -- 3-7. training experiments ----------------------------------------------

@heavy
@criterion(3)
def test_criterion_03_learning_signal(verdict):
    cfgs = scenarios("fig5")
    expert = load(expert_stage("fig5", ROOT))[0]["curve"][-1].mean_episode_length
    sparse = median_curve(load(cfgs["a2w2-sparse"]))
    medc = median_curve(load(cfgs["a2w2-medc-proper"]))
    s_step = first_step_at_or_below(sparse, THRESHOLD_LENGTH)
    m_step = first_step_at_or_below(medc, THRESHOLD_LENGTH)
    if m_step is None:
        ok = False
    elif s_step is None:
        ok = True  # sparse never got there within the budget
    else:
        ok = m_step <= 0.7 * s_step
    ok = ok and expert <= EXPERT_LENGTH
    verdict(3, ok, f"expert A1W0 eval length {expert:.1f} (need <= {EXPERT_LENGTH}); steps to median length "
                   f"<= {THRESHOLD_LENGTH}: medc {m_step}, sparse {s_step} (need medc <= 0.7 x sparse); "
                   f"final medians medc {medc[-1][1]:.1f}, sparse {sparse[-1][1]:.1f}")


@heavy
@criterion(4)
def test_criterion_04_faulty_experts(verdict):
    cfgs = scenarios("fig7")
    base = median_curve(load(cfgs["a2w2-sparse"]))[-1][1]
    finals = {k.split("-")[-1]: median_curve(load(cfgs[k]))[-1][1]
              for k in ("a2w2-medc-random", "a2w2-medc-biased", "a2w2-medc-malicious")}
    ok = all(v <= 1.1 * base for v in finals.values())
    verdict(4, ok, f"final median length sparse {base:.1f}; "
                   + ", ".join(f"{k} {v:.1f} ({(v / base - 1) * 100:+.1f}%)" for k, v in finals.items())
                   + " (need <= +10%)")


@heavy
@criterion(5)
def test_criterion_05_baseline_ordering(verdict):
    il_cfgs, frl_cfgs = scenarios("fig8-il"), scenarios("fig8-frl")
    medc_runs = load(il_cfgs["a2w2-medc-proper"])
    il_runs, frl_runs = load(il_cfgs["a2w2-il"]), load(frl_cfgs["a2w2-frl"])
    medc, il, frl = final_lengths(medc_runs), final_lengths(il_runs), final_lengths(frl_runs)
    p_il = mannwhitneyu(medc, il, alternative="less").pvalue
    p_frl = mannwhitneyu(medc, frl, alternative="less").pvalue
    ordered = statistics.median(medc) <= statistics.median(il) and statistics.median(medc) <= \
        statistics.median(frl) and p_il < 0.1 and p_frl < 0.1
    detail = (f"final lengths median medc {statistics.median(medc):.1f}, il {statistics.median(il):.1f}, "
              f"frl {statistics.median(frl):.1f}; Mann-Whitney p(medc<il) {p_il:.3f}, p(medc<frl) {p_frl:.3f}")
    if ordered:
        verdict(5, True, detail + " (< 0.1)")
        return

    def late_variance(runs):
        # eval lengths over the second half of training, pooled across seeds
        xs = [r.mean_episode_length for run in runs.values() for r in run["curve"][len(run["curve"]) // 2:]]
        return statistics.pvariance(xs)

    v_frl, v_medc = late_variance(frl_runs), late_variance(medc_runs)
    verdict(5, v_frl > v_medc, detail + f"; ordering not significant, fallback: late eval-length variance "
                                        f"frl {v_frl:.1f} vs medc {v_medc:.1f} (need frl > medc)")


def medc_scenarios():
    cfgs = scenarios("fig7")
    return [cfgs[k] for k in cfgs if "medc" in k]


def read_guidance(path):
    with open(path, newline="") as fh:
        return [{k: int(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@heavy
@criterion(6)
def test_criterion_06_q_filter(verdict):
    total, guided, runs = 0, 0, 0
    for cfg in medc_scenarios():
        for run in load(cfg).values():
            rows = read_guidance(run["guidance"])
            total += sum(r["violations"] for r in rows)
            guided += sum(r["expert_used"] for r in rows)
            runs += 1
    verdict(6, total == 0 and runs > 0, f"{total} violations among {guided} executed expert actions "
                                        f"in {runs} training runs")


@heavy
@criterion(7)
def test_criterion_07_involvement_decay(verdict):
    runs = load(scenarios("fig5")["a2w2-medc-proper"])
    results = []
    for seed, run in sorted(runs.items()):
        rows = read_guidance(run["guidance"])
        n_updates = max(r["update"] for r in rows) + 1
        decile = max(1, n_updates // 10)

        def fraction(lo, hi):
            sel = [r for r in rows if lo <= r["update"] < hi]
            steps = sum(r["guided_agent_steps"] for r in sel)
            return sum(r["top_passed"] for r in sel) / steps if steps else float("nan")

        results.append((seed, fraction(0, decile), fraction(n_updates - decile, n_updates)))
    good = sum(1 for _, first, last in results if last <= first)
    verdict(7, good >= 4, f"last-decile <= first-decile top-pass fraction in {good}/5 seeds: "
                          + ", ".join(f"s{s} {a:.3f}->{b:.3f}" for s, a, b in results))


# -- 8. gate and roulette ----------------------------------------------------

def test_criterion_08_frequencies(verdict):
    rng = np.random.default_rng(80)
    cfg = MedcConfig(expert_rate=0.1)
    experts = [ExpertHandle.random(similarity=w) for w in (0.1, 0.2, 0.3, 0.4)]
    guided = sum(draw_mode(cfg, experts, rng).guided for _ in range(100_000)) / 100_000
    picks = np.bincount([experts.index(roulette_select(experts, rng)) for _ in range(100_000)], minlength=4)
    freq = picks / picks.sum()
    target = np.array([0.1, 0.2, 0.3, 0.4])
    ok = abs(guided - 0.1) <= 0.005 and np.all(np.abs(freq - target) <= 0.02)
    verdict(8, ok, f"guided episode fraction {guided:.4f} (R_E 0.1 +- 0.005); selection frequencies "
                   f"{np.round(freq, 4).tolist()} vs {target.tolist()} (+- 0.02)")


# -- 9. registry allocation --------------------------------------------------

def oracle_top_k(pool, owner_rep, er, weights, k):
    """Selection by repeated pairwise maximum, independent of the registry's sort."""
    def beats(a, b):
        da = sum(w * abs(x - y) for w, x, y in zip(weights, a["details"], er))
        db = sum(w * abs(x - y) for w, x, y in zip(weights, b["details"], er))
        qa = Fraction(owner_rep[a["owner"]] * a["rep"], 10**8) / max(da, Fraction(1, 2))
        qb = Fraction(owner_rep[b["owner"]] * b["rep"], 10**8) / max(db, Fraction(1, 2))
        return (qa, a["rep"], [-ord(c) for c in a["cid"]]) > (qb, b["rep"], [-ord(c) for c in b["cid"]])

    left, chosen = list(pool), []
    while left and len(chosen) < k:
        best = left[0]
        for m in left[1:]:
            if beats(m, best):
                best = m
        chosen.append(best["cid"])
        left.remove(best)
    return chosen


def test_criterion_09_registry(verdict):
    rng = np.random.default_rng(90)
    mismatches = 0
    for trial in range(10_000):
        reg = Registry()
        users = [f"u{i}" for i in range(int(rng.integers(2, 6)))]
        owner_rep = {}
        for u in users:
            reg.add_user(u)
            owner_rep[u] = reg.users[u].reputation = int(rng.integers(0, 10_001))
        models = []
        for i in range(int(rng.integers(0, 21))):
            owner = users[int(rng.integers(len(users)))]
            details = [int(x) for x in rng.integers(0, 6, size=3)]
            rec = reg.add_model(owner, f"{trial}-{i}".encode(), "", "fleet", details)
            rec.reputation = int(rng.choice([0, 2500, 5000, 7500, 10_000, int(rng.integers(0, 10_001))]))
            models.append({"owner": owner, "details": details, "rep": rec.reputation, "cid": rec.cid})
        raw = rng.integers(0, 5, size=3)
        if raw.sum() == 0:
            raw[0] = 1
        weights = [Fraction(int(x), int(raw.sum())) for x in raw]
        er = [int(x) for x in rng.integers(0, 6, size=3)]
        k = int(rng.integers(1, 6))
        min_m, min_o = float(rng.choice([0, 0.25, 0.5])), float(rng.choice([0, 0.5]))
        requester = users[0]
        pool = [m for m in models if m["owner"] != requester and m["rep"] >= min_m * 10_000
                and owner_rep[m["owner"]] >= min_o * 10_000]
        got = reg.allocate_models(requester, AllocationRequest("fleet", er, [str(w) for w in weights],
                                                               min_m, min_o, k)).cids
        mismatches += got != oracle_top_k(pool, owner_rep, er, weights, k)
    ex = Registry()
    for u in "ab":
        ex.add_user(u)
    m = ex.add_model("a", b"m", "", "maze", [1, 10, 10])
    for _ in range(2):
        ex.allocate_models("b", AllocationRequest("maze", [1, 10, 10]))
    ex.submit_review("b", m.cid, 1.0)
    owner_rep, model_rep = ex.submit_review("b", m.cid, 0.5)
    examples = (model_rep == 0.75 and owner_rep == 0.75 and compute_qos(0.5, 0.5, 1) == 0.25
                and compute_dm((1, 0), (3, 2), (0.5, 0.5)) == 2.0)
    verdict(9, mismatches == 0 and examples,
            f"{mismatches} mismatches against the selection oracle on 10000 pools (<= 20 models); "
            f"reputation 0.75, QoS 0.25, D_m 2 examples {'exact' if examples else 'WRONG'}")


# -- 10. ledger --------------------------------------------------------------

def test_criterion_10_ledger(verdict):
    rng = np.random.default_rng(100)
    reg = Registry()
    users = [f"u{i}" for i in range(40)]
    for u in users:
        reg.add_user(u)
    cids = [reg.add_model(users[i % 40], f"m{i}".encode(), f"d{i}", "maze", [1 + i % 3, 10, 10]).cid
            for i in range(60)]
    while len(reg.ledger) < 1000:
        buyer = users[int(rng.integers(40))]
        res = reg.allocate_models(buyer, AllocationRequest("maze", [int(rng.integers(1, 4)), 10, 10], price=1))
        for cid in res.cids:
            if len(reg.ledger) < 1000 and rng.random() < 0.7:
                reg.submit_review(buyer, cid, round(float(rng.random()), 4))
    lines = reg.ledger.to_jsonl().encode().splitlines(keepends=True)
    assert len(lines) == 1000
    wrong, flips = [], 0
    for i, line in enumerate(lines):
        for pos in rng.choice(len(line), size=2, replace=False):
            flips += 1
            bad = bytearray(line)
            bad[int(pos)] ^= 1 << int(rng.integers(8))
            corrupted = lines[:i] + [bytes(bad)] + lines[i + 1:]
            found = verify_lines(corrupted)
            if found != i:
                wrong.append((i, int(pos), found))
    intact = verify_lines(lines) is None
    replay_ok = Registry.replay(reg.ledger.entries, reg.store).state_json() == reg.state_json()
    imported = Registry.import_state(reg.state_json(), reg.ledger.to_jsonl(), reg.store)
    import_ok = imported.state_json() == reg.state_json()
    ok = not wrong and intact and replay_ok and import_ok
    verdict(10, ok, f"{flips - len(wrong)}/{flips} single-bit flips across 1000 entries located at the right "
                    f"index; replay byte-identical {replay_ok}, import byte-identical {import_ok}")


# -- 11. determinism ---------------------------------------------------------

SMALL = ("[ppo]\nhorizon = 400\nminibatch_size = 100\nepochs = 2\neval_every = 400\neval_steps = 200\n"
         "total_steps = 800\n")


def test_criterion_11_determinism(verdict, tmp_path):
    bodies = {
        "sparse": "baseline = sparse\nenvironment = A2W2",
        "rs": "baseline = rs\nenvironment = A2W1",
        "medc": "baseline = medc\nenvironment = A2W2\n[medc]\nexpert_rate = 0.5\n[experts]\nsources = random*2, biased:3",
        "il": "baseline = il\nenvironment = A2W2\n[medc]\nexpert_rate = 0.5\n[experts]\nsources = biased:4",
        "frl": "baseline = frl\nenvironment = A2W2\nusers = A1W0, A3W1",
        "fleet": "baseline = sparse\nenvironment = fleet\n[environment]\nn_agents = 2",
        "maze": "baseline = sparse\nenvironment = maze",
    }
    same = {}
    for name, body in bodies.items():
        text = f"[scenario]\nseeds = 0, 1\noutput = {name}\n{body}\n{SMALL}"
        cfg = parse_scenario_text(text, tmp_path)
        blobs = []
        for _ in range(2):
            out = run_scenario(cfg, resume=False)
            blobs.append([(s.csv_path.read_bytes(), s.package_path.read_bytes()) for s in out.seeds]
                         + [out.aggregate_path.read_bytes()])
        same[name] = blobs[0] == blobs[1]
    verdict(11, all(same.values()), "bitwise-identical CSVs and packages on rerun: "
                                    + ", ".join(f"{k} {v}" for k, v in same.items()))


# -- 12. environments --------------------------------------------------------

def test_criterion_12_environments(verdict):
    problems = []
    counts = {}
    configs = {"target_localization": EnvConfig(n_agents=3, n_walls=4, seed=120),
               "fleet": EnvConfig(kind="fleet", n_agents=3, n_customers=8, seed=121),
               "maze": EnvConfig(kind="maze", n_agents=3, seed=122)}
    for kind, cfg in configs.items():
        env = make_env(cfg)
        rng = np.random.default_rng(cfg.seed)
        episodes = 0
        for _ in range(10_000):
            env.reset()
            if kind == "maze" and not is_connected(env.walls):
                problems.append(f"{kind}: disconnected maze")
            steps = 0
            while True:
                res = env.step(rng.integers(0, 9, size=cfg.n_agents))
                steps += 1
                if any(env.walls[p] for p in env.positions):
                    problems.append(f"{kind}: agent on a wall")
                if kind == "target_localization" and res.reward not in (0.0, 1.0):
                    problems.append(f"{kind}: reward {res.reward}")
                if kind == "fleet" and max(env.loads) > cfg.capacity:
                    problems.append(f"{kind}: load {max(env.loads)}")
                if res.done:
                    break
            if steps > 100:
                problems.append(f"{kind}: episode of {steps} steps")
            episodes += 1
        counts[kind] = episodes
    verdict(12, not problems, f"{sum(counts.values())} random episodes "
                              f"({', '.join(f'{k} {v}' for k, v in counts.items())}), "
                              f"{len(problems)} invariant violations" + (f": {problems[:3]}" if problems else ""))
