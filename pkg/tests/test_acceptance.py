"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4 to 10 run on the bundled tiny experiment (6 train / 2 dev / 2
final models). "Pooled" means all challenge queries of the dev-phase models
taken together.
"""

import json
import time

import numpy as np
import pytest

from tabmia import challenge as ch
from tabmia import evaluation as ev
from tabmia.attack import best_noise_oracle, make_noise_set
from tabmia.config import bundled_config, derive_seed
from tabmia.diffusion import build_schedule, forward_diffuse, init_denoiser
from tabmia.numerics import init_mlp, mlp_backward, mlp_forward, mlp_forward_cached

TIME_STEPS = (5, 10, 20, 50)


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {number:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def _reports(root, name):
    return {r["id"]: r for r in json.loads((root / name).read_text())}


def _all_reports(root):
    out = _reports(root, "metrics.json")
    out.update(_reports(root, "baselines.json"))
    return out


# -- 1: gradient correctness ------------------------------------------------


def _max_rel_error(params, loss_fn, analytic, h=1e-5):
    worst = 0.0
    for bi, (blk, g) in enumerate(zip(params.blocks(), analytic.blocks())):
        for idx in np.ndindex(blk.shape):
            orig = blk[idx]
            blk[idx] = orig + h
            up = loss_fn()
            blk[idx] = orig - h
            down = loss_fn()
            blk[idx] = orig
            num = (up - down) / (2 * h)
            worst = max(worst, abs(g[idx] - num) / max(abs(g[idx]), abs(num), 1e-6))
    return worst


def test_criterion_01_gradient_correctness(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    sched = build_schedule()

    den = init_denoiser(3, sched.T, rng, hidden=(10,), embed_dim=4)
    x0, eps = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    t = rng.integers(0, sched.T, size=6)
    inp = den.net_input(forward_diffuse(x0, eps, t, sched), t)

    def den_loss():
        d = mlp_forward(den.mlp, inp) - eps
        return float(np.sum(d * d) / 6)

    pred, cache = mlp_forward_cached(den.mlp, inp)
    den_err = _max_rel_error(den.mlp, den_loss, mlp_backward(den.mlp, inp, 2 * (pred - eps) / 6, cache=cache))

    clf = init_mlp([12, 12, 6, 1], rng, "relu", "sigmoid")
    X, y = rng.standard_normal((20, 12)), rng.integers(0, 2, 20).astype(float)

    def bce():
        p = mlp_forward(clf, X)[:, 0]
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

    p = mlp_forward(clf, X)[:, 0]
    clf_err = _max_rel_error(clf, bce, mlp_backward(clf, X, ((p - y) / 20)[:, None], through_head=False))
    elapsed = time.perf_counter() - start
    sizes = (den.mlp.n_params, clf.n_params)
    ok = max(den_err, clf_err) < 1e-4 and elapsed < 10 and max(sizes) <= 500
    verdict(capsys, 1, ok, f"max rel err denoiser={den_err:.2e} classifier={clf_err:.2e} (< 1e-4), "
                           f"params={sizes} (<= 500), {elapsed:.1f}s (< 10s)")


# -- 2: forward-process moments ---------------------------------------------


def test_criterion_02_forward_moments(capsys):
    start = time.perf_counter()
    sched = build_schedule()
    rng = np.random.default_rng(202)
    x0 = np.array([1.3, -0.7, 0.0, 2.1])
    worst_mean, worst_var = 0.0, 0.0
    for t in (0, 5, 50, 100, 500, 999):
        xt = forward_diffuse(np.broadcast_to(x0, (100_000, 4)), rng.standard_normal((100_000, 4)), t, sched)
        ab = sched.alpha_bar[t]
        worst_mean = max(worst_mean, float(np.max(np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0))))
        worst_var = max(worst_var, float(np.max(np.abs(xt.var(axis=0) / (1 - ab) - 1))))
    elapsed = time.perf_counter() - start
    ok = worst_mean < 0.02 and worst_var < 0.05 and elapsed < 30
    verdict(capsys, 2, ok, f"mean abs err={worst_mean:.4f} (< 0.02), var rel err={worst_var:.4f} (< 0.05), "
                           f"{elapsed:.1f}s (< 30s)")


# -- 3: metric oracles ------------------------------------------------------


def _pairwise(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def _brute_roc(s, y):
    ths = np.r_[np.inf, np.unique(s)[::-1]]
    pred = s[None, :] >= ths[:, None]
    fp = (pred & (y == 0)).sum(axis=1)
    tp = (pred & (y == 1)).sum(axis=1)
    return fp / (y == 0).sum(), tp / (y == 1).sum(), fp, tp


def test_criterion_03_metric_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    worst_auc, roc_bad, tpr_bad = 0.0, 0, 0
    for i in range(1000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 1, 0
        s = rng.integers(0, int(rng.integers(2, 50)), n) / 3.0 if i % 2 else rng.standard_normal(n)
        worst_auc = max(worst_auc, abs(ev.auc(s, y) - _pairwise(s, y)))
        fpr, tpr, fp, tp = _brute_roc(s, y)
        c = ev.compute_roc(s, y)
        roc_bad += not (np.array_equal(c.fpr, fpr) and np.array_equal(c.tpr, tpr))
        n_neg = (y == 0).sum()
        expected = float(tpr[fp <= np.floor(0.10 * n_neg + 1e-9)].max())
        tpr_bad += ev.tpr_at_fpr(s, y, 0.10) != expected
    elapsed = time.perf_counter() - start
    ok = worst_auc <= 1e-12 and roc_bad == 0 and tpr_bad == 0 and elapsed < 60
    verdict(capsys, 3, ok, f"1000 instances: max |trapezoid - pairwise|={worst_auc:.1e} (<= 1e-12), "
                           f"ROC mismatches={roc_bad}, TPR@10% mismatches={tpr_bad}, {elapsed:.1f}s (< 60s)")


# -- 4 to 8: tiny experiment ------------------------------------------------


@pytest.mark.slow
def test_criterion_04_secmi_near_chance(tiny_experiment, capsys):
    root, _ = tiny_experiment
    cfg = bundled_config("tiny")
    a = _all_reports(root)[f"white_box/secmi_t{cfg.attack.secmi_t}/dev"]["auc"]
    verdict(capsys, 4, 0.43 <= a <= 0.57,
            f"SecMI t-error (t={cfg.attack.secmi_t}, stride={cfg.attack.secmi_stride}) dev AUC={a:.3f} "
            f"in [0.43, 0.57]")


@pytest.mark.slow
def test_criterion_05_naive_loss_profile(tiny_experiment, capsys):
    root, _ = tiny_experiment
    reps = _all_reports(root)
    T = bundled_config("tiny").diffusion.T
    low = {t: reps[f"white_box/naive_t{t}/dev"]["auc"] for t in TIME_STEPS}
    full = reps[f"white_box/naive_t{T - 1}/dev"]["auc"]
    ok = all(v > 0.55 for v in low.values()) and 0.45 <= full <= 0.55
    shown = ", ".join(f"t={t}:{v:.3f}" for t, v in low.items())
    verdict(capsys, 5, ok, f"naive dev AUC {shown} (> 0.55); t={T - 1}: {full:.3f} in [0.45, 0.55]")


@pytest.mark.slow
def test_criterion_06_noise_variance(tiny_experiment, capsys):
    root, _ = tiny_experiment
    cfg = bundled_config("tiny")
    view = ch.AdversaryView(root, "white_box")
    truth = ch.load_truth(root)
    noises = make_noise_set(200, view.schema.encoded_dim, derive_seed(cfg.master_seed, "noise_variance")).noises
    spreads = {}
    for mid in view.ids_for("dev"):
        ids, X = view.challenge(mid)
        y = np.array([truth[mid][r] for r in ids])
        aucs, _ = best_noise_oracle(view.target(mid), X, y, noises, 20, view.schedule(mid))
        spreads[mid] = float(aucs.max() - aucs.min())
    ok = max(spreads.values()) >= 0.08
    verdict(capsys, 6, ok, "per-noise AUC spread at t=20 over 200 noises: "
            + ", ".join(f"{m}={v:.3f}" for m, v in spreads.items()) + " (max >= 0.08)")


@pytest.mark.slow
def test_criterion_07_method_ordering(tiny_experiment, capsys):
    root, _ = tiny_experiment
    reps = _all_reports(root)
    mlp, best, naive = reps["white_box/dev"], reps["white_box/best_noise_t20/dev"], reps["white_box/naive_t20/dev"]
    checks = []
    for key, get in (("AUC", lambda r: r["auc"]), ("TPR@10%FPR", lambda r: r["tpr_at_fpr"]["0.10"])):
        m, b, n = get(mlp), get(best), get(naive)
        checks.append((m >= b - 0.02 and m >= n + 0.03, f"{key}: MLP={m:.3f} best-noise={b:.3f} naive={n:.3f}"))
    verdict(capsys, 7, all(c for c, _ in checks),
            "; ".join(d for _, d in checks) + " (MLP >= best-noise - 0.02 and >= naive + 0.03)")


@pytest.mark.slow
def test_criterion_08_blackbox_sanity(tiny_experiment, capsys):
    root, _ = tiny_experiment
    reps = _reports(root, "metrics.json")
    bb, wb = reps["black_box/dev"]["auc"], reps["white_box/dev"]["auc"]
    verdict(capsys, 8, bb > 0.52 and wb >= bb,
            f"black-box dev AUC={bb:.3f} (> 0.52), white-box dev AUC={wb:.3f} (>= black-box)")


# -- 9: no-leak control -----------------------------------------------------


@pytest.mark.slow
def test_criterion_09_no_leak_on_random_denoisers(tiny_untrained, capsys):
    root, _ = tiny_untrained
    reps = _all_reports(root)
    # the best-noise reference picks its noise with the labels, so it is not an attack
    attacks = {k: v["auc"] for k, v in reps.items()
               if k.endswith("/dev") and "best_noise" not in k}
    bad = {k: v for k, v in attacks.items() if not 0.45 <= v <= 0.55}
    shown = ", ".join(f"{k.removesuffix('/dev')}={v:.3f}" for k, v in sorted(attacks.items()))
    labels = [y for mid, rows in ch.load_truth(root).items() if mid.startswith("dev_") for y in rows.values()]
    n_pos, n_neg = sum(labels), len(labels) - sum(labels)
    null_sd = np.sqrt((n_pos + n_neg + 1) / (12 * n_pos * n_neg))
    verdict(capsys, 9, not bad, f"zero-step targets, dev AUC of every attack in [0.45, 0.55]: {shown} "
                                f"(null AUC sd at {n_pos}+{n_neg} queries = {null_sd:.3f})")


# -- 10: determinism and runtime --------------------------------------------


@pytest.mark.slow
def test_criterion_10_determinism_and_runtime(tiny_experiment, tiny_rerun, capsys):
    (a, ta), (b, tb) = tiny_experiment, tiny_rerun
    files = ["scores/white_box.csv", "scores/black_box.csv", "metrics.json", "baselines.json"]
    same = {f: (a / f).read_bytes() == (b / f).read_bytes() for f in files}
    ok = all(same.values()) and max(ta, tb) < 600
    verdict(capsys, 10, ok, f"byte-identical {sorted(f for f, v in same.items() if v)}; "
                            f"runtimes {ta:.0f}s and {tb:.0f}s (< 600s)")


# -- supporting checks on the same fleet (no criterion number) --------------


@pytest.mark.slow
def test_whitebox_dev_auc_above_point_six(tiny_experiment):
    root, _ = tiny_experiment
    assert _reports(root, "metrics.json")["white_box/dev"]["auc"] > 0.6


@pytest.mark.slow
def test_trained_mlp_beats_naive_loss_at_every_grid_timestep(tiny_experiment):
    root, _ = tiny_experiment
    reps = _all_reports(root)
    for t in bundled_config("tiny").attack.timesteps:
        assert reps["white_box/dev"]["auc"] >= reps[f"white_box/naive_t{t}/dev"]["auc"], t


@pytest.mark.slow
def test_shadow_loss_lower_on_target_members(tiny_experiment):
    root, _ = tiny_experiment
    view = ch.AdversaryView(root, "black_box")
    truth = ch.load_truth(root)
    mid = view.ids_for("dev")[0]
    shadow = ch.train_shadow(view, mid, seed=derive_seed(0, "shadow-check"))
    ids, X = view.challenge(mid)
    y = np.array([truth[mid][r] for r in ids])
    sched = view.schedule(mid)
    E = make_noise_set(64, X.shape[1], 5).noises
    losses = np.zeros(len(ids))
    for t in TIME_STEPS:
        for e in E:
            xt = forward_diffuse(X, np.broadcast_to(e, X.shape), t, sched)
            d = shadow.params.predict(xt, t) - e
            losses += np.sum(d * d, axis=1)
    assert losses[y == 1].mean() < losses[y == 0].mean()
