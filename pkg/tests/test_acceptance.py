"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is echoed in the terminal summary.
The experiment criteria (6-10) share one desk-scale run grid built once per
session; expect roughly ten minutes in total.
"""

import time
import zlib

import numpy as np
import pytest
from scipy import stats

from bssdistill import attack as A
from bssdistill import autodiff as ad
from bssdistill import distill as Dl
from bssdistill import experiments as E
from bssdistill import metrics as Mt
from bssdistill import models as M
from helpers import ACCEPTANCE, GRAD_CASES, linear_model, objective_case, train_gaussian_teacher

SEEDS = tuple(range(10))
ALPHA = 0.05


def report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


# --------------------------------------------------------------------------
# property suites
# --------------------------------------------------------------------------


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    worst, failed, points = 0.0, [], 0
    cases = {**GRAD_CASES, "objective": objective_case}
    for name, build in cases.items():
        rng = np.random.default_rng(zlib.crc32(f"acceptance-{name}".encode()))
        for _ in range(100):
            fn, leaf = build(rng)
            rep = ad.finite_difference_check(fn, leaf, tolerance=1e-4)
            worst = max(worst, rep.max_rel_error)
            points += 1
            if not rep.passed:
                failed.append(name)
    elapsed = time.perf_counter() - t0
    ok = not failed and worst <= 1e-4 and elapsed < 60
    report(1, "gradient correctness", ok, f"{len(cases)} functions x 100 points, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert not failed, sorted(set(failed))
    assert elapsed < 60


def test_c02_attack_contract():
    t0 = time.perf_counter()
    cfg = A.AttackConfig(lr=0.3, eps=0.01, max_iter=10, record_trajectory=True)
    succ = eligible = 0
    per_seed, violations = [], []
    for seed in SEEDS:
        m, ds = train_gaussian_teacher(seed=seed)
        ok = M.predict(m, ds.x_test) == ds.y_test
        res = A.find_bss_batch(m, ds.x_test[ok], ds.y_test[ok], 1 - ds.y_test[ok], cfg)
        per_seed.append(A.success_rate(res))
        succ += sum(r.success for r in res)
        eligible += len(res)
        for r in res:
            if r.success and not (r.loss_final < 0 < r.loss_previous or (r.precrossed and r.iterations == 0)):
                violations.append(("contract", seed))
            for i in range(1, len(r.losses)):
                want = cfg.lr * (r.losses[i - 1] + cfg.eps)
                if want > 0 and abs(r.step_norms[i] - want) > 1e-10 * want:
                    violations.append(("step", seed))
    elapsed = time.perf_counter() - t0
    rate = succ / eligible
    ok = rate >= 0.9 and not violations and elapsed < 120
    report(2, "attack contract", ok,
           f"pooled success {rate:.3f} over {eligible} bases (per seed {', '.join(f'{r:.2f}' for r in per_seed)}), "
           f"{len(violations)} violations, {elapsed:.1f}s")
    assert rate >= 0.9 and not violations and elapsed < 120


def test_c03_taylor_diagnostic():
    lin_worst = 0.0
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = linear_model(rng.standard_normal((3, 4)), rng.standard_normal(3))
        x = rng.standard_normal(4)
        z = M.logits(m, x[None])[0]
        b, k = int(np.argmax(z)), int(np.argmin(z))
        lin_worst = max(lin_worst, A.taylor_residual(m, x, b, k, lr=0.3))
    # smooth MLP: observed order log10(r(eta) / r(eta/10)) once higher-order terms have died out
    orders = []
    for s in range(5):
        m = M.init(M.mlp_spec(3, [8, 8], 3, "tanh"), s)
        for _ in range(4):
            x = rng.standard_normal(3)
            z = M.logits(m, x[None])[0]
            b, k = int(np.argmax(z)), int(np.argsort(z)[-2])
            r1, r2 = (A.taylor_residual(m, x, b, k, lr) for lr in (1e-3, 1e-4))
            orders.append(np.log10(r1 / r2))
    ok = lin_worst <= 1e-12 and min(orders) >= 1.99
    report(3, "Taylor diagnostic", ok,
           f"linear residual {lin_worst:.1e}; MLP shrink ratio for eta/10 in [{10 ** min(orders):.1f}, {10 ** max(orders):.1f}]")
    assert lin_worst <= 1e-12
    assert min(orders) >= 1.99


def test_c04_metric_identities(gaussian_teacher):
    m, ds = gaussian_teacher
    rep = Mt.compare_classifiers(m, m, ds.x_test[:100], ds.y_test[:100])
    rng = np.random.default_rng(4)
    pairs = [(2 * v, v) for v in rng.standard_normal((50, 7))]
    mag, ang = Mt.magsim(pairs), Mt.angsim(pairs)
    ok = (abs(rep.magsim - 1) <= 1e-6 and abs(rep.angsim - 1) <= 1e-6
          and abs(mag - 0.5) <= 1e-12 and abs(ang - 1) <= 1e-12)
    report(4, "metric identities", ok,
           f"self MagSim {rep.magsim:.9f} AngSim {rep.angsim:.9f} ({rep.included} pairs); scaled MagSim {mag!r} AngSim {ang!r}")
    assert ok


def test_c05_target_sampling():
    q = np.array([0.42, 0.03, 0.25, 0.2, 0.1])
    base, n = 0, 100_000
    targets, _ = Dl.sample_target_classes(np.tile(q, (n, 1)), np.full(n, base), np.random.default_rng(5))
    p = Dl.target_probabilities(q, base)
    counts = np.bincount(targets, minlength=len(q))
    keep = p > 0
    chi2, pval = stats.chisquare(counts[keep], n * p[keep])
    ok = counts[base] == 0 and pval > 0.01
    report(5, "target sampling", ok, f"chi2 {chi2:.2f} on {keep.sum() - 1} dof, p = {pval:.3f}, base drawn {counts[base]} times")
    assert ok


# --------------------------------------------------------------------------
# desk-scale experiments
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Lazily computed grids shared by criteria 6-10, keyed by (fraction, method)."""
    cfg = E.ExperimentConfig()
    cache = E.TeacherCache(tmp_path_factory.mktemp("teachers"))
    done: dict = {}
    timings: dict = {}

    def get(fraction, methods):
        todo = [m for m in methods if (fraction, m) not in done]
        if todo:
            t0 = time.perf_counter()
            for r in E.run_grid(cfg, todo, seeds=SEEDS, fractions=[fraction], cache=cache):
                done.setdefault((fraction, r.method), []).append(r)
            timings[(fraction, tuple(todo))] = time.perf_counter() - t0
        return {m: done[(fraction, m)] for m in methods}

    get.cfg, get.cache, get.timings = cfg, cache, timings
    return get


def _acc(results):
    return np.array([r.test_accuracy for r in sorted(results, key=lambda r: r.seed)])


@pytest.mark.slow
def test_c06_directional_distillation(runs):
    t0 = time.perf_counter()
    res = runs(0.2, E.MAIN_METHODS)
    elapsed = time.perf_counter() - t0
    o, h, b = (_acc(res[m]) for m in E.MAIN_METHODS)
    _, p = E.paired_test(b, o, "greater")
    ok = b.mean() >= h.mean() >= o.mean() and p < ALPHA and elapsed < 15 * 60
    report(6, "directional distillation", ok,
           f"spirals, 20% of the training split: original {o.mean():.4f}, hinton {h.mean():.4f}, bss {b.mean():.4f}; "
           f"bss > original p = {p:.2g}; {elapsed:.0f}s")
    assert b.mean() >= h.mean() >= o.mean()
    assert p < ALPHA
    assert elapsed < 15 * 60


@pytest.mark.slow
def test_c07_generalization_sweep(runs):
    low = runs(0.2, ("original", "bss"))
    full = runs(1.0, ("original", "bss"))
    gain_low = _acc(low["bss"]).mean() - _acc(low["original"]).mean()
    gain_full = _acc(full["bss"]).mean() - _acc(full["original"]).mean()
    ok = gain_low > gain_full
    report(7, "generalization sweep", ok, f"bss - original: {gain_low:+.4f} at 20%, {gain_full:+.4f} at 100%")
    assert ok


@pytest.mark.slow
def test_c08_boundary_transfer(runs):
    res = runs(0.2, E.MAIN_METHODS)
    ang = {m: np.mean([r.angsim for r in res[m]]) for m in E.MAIN_METHODS}
    mag = {m: np.mean([r.magsim for r in res[m]]) for m in E.MAIN_METHODS}
    pairs = int(np.mean([r.similarity_pairs for r in res["bss"]]))
    ok = ang["bss"] > ang["original"]
    report(8, "boundary transfer", ok,
           "AngSim " + ", ".join(f"{m} {v:.3f}" for m, v in ang.items())
           + "; MagSim " + ", ".join(f"{m} {v:.3f}" for m, v in mag.items()) + f"; ~{pairs} pairs per student")
    assert ok


@pytest.mark.slow
def test_c09_ablation_echo(runs):
    variants = ("all-selection", "random-selection", "random-target")
    res = runs(0.2, ("bss", *variants))
    b = _acc(res["bss"])
    worse = {}
    parts = [f"bss {b.mean():.4f}"]
    for v in variants:
        a = _acc(res[v])
        _, p_less = E.paired_test(b, a, "less")
        worse[v] = p_less < ALPHA
        parts.append(f"{v} {a.mean():.4f} (bss worse p = {p_less:.2g})")
    ok = not any(worse.values())
    report(9, "ablation echo", ok, "; ".join(parts))
    assert ok, f"bss significantly worse than {[v for v, w in worse.items() if w]}"


@pytest.mark.slow
def test_c10_replay_determinism(runs):
    original = runs(0.2, ("bss",))["bss"][0]
    again = E.replay(original.summary(), runs.cache)
    same = again.test_accuracy == original.test_accuracy
    same_params = all(a.tobytes() == b.tobytes() for a, b in zip(original.model.params, again.model.params))
    ok = same and same_params
    report(10, "replay determinism", ok,
           f"seed {original.seed}: accuracy {original.test_accuracy!r} -> {again.test_accuracy!r}, weights identical: {same_params}")
    assert ok
