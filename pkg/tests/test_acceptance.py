"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The summary lines appear at the end of the pytest run (see conftest.py).
Run alone with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import ortho_group

from stitchlab import pipeline as P
from stitchlab.anchors import StageSpec, build_anchor
from stitchlab.config import config_from_dict, resolve
from stitchlab.data import gen_blobs
from stitchlab.evaluation import ParetoPoint, auc, pareto_front
from stitchlab.probenet import Probe, probe_loss_and_grads, train_probeset
from stitchlab.selection import StitchConfig, build_buckets, select_candidates
from stitchlab.similarity import cka, kl_divergence, kl_rows, theta
from stitchlab.stitching import StitchedSupernet, StitchLayer, init_stitch_layer, stitch_loss_and_grads


@pytest.fixture
def record(request):
    lines = request.config.__dict__.setdefault("_stitchlab_acceptance", [])

    def _record(number, ok, detail):
        lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _record


# -- 1: selection vs brute force -----------------------------------------------------

def _brute_force(configs, gam, tau, nb):
    lo, hi = min(c.flops for c in configs), max(c.flops for c in configs)
    width = Fraction(hi - lo, nb)

    def index(c):
        if hi == lo:
            return 0
        return next(k for k in range(nb) if c.flops < lo + (k + 1) * width or k == nb - 1)
    out = set()
    for k in range(nb):
        members = [c for c in configs if index(c) == k]
        if members:
            m = min(gam[c] for c in members)
            out |= {c for c in members if gam[c] <= (1 + tau) * m}
    return out


def test_criterion_1_selection_matches_brute_force(record):
    rng = np.random.default_rng(2024)
    elapsed = 0.0
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 201))
        configs = list({StitchConfig("f", "g", 0, int(rng.integers(0, 20)), int(rng.integers(0, 20)),
                                     int(rng.integers(1, 10_000))) for _ in range(n)})
        gam = {c: float(rng.choice([rng.random(), round(rng.random(), 2)])) for c in configs}
        nb = int(rng.integers(1, 26))
        tau = float(rng.choice([0.0, 0.01, 0.05, 0.1, 0.3]))
        start = time.perf_counter()
        got = set(select_candidates(build_buckets(configs, nb), gam, tau))
        elapsed += time.perf_counter() - start  # the oracle's own cost is not counted
        if got != _brute_force(configs, gam, tau, nb):
            mismatches += 1
    ok = mismatches == 0 and elapsed < 5.0
    record(1, ok, f"{mismatches} mismatches over 100 instances, selection time {elapsed:.2f}s")
    assert ok


# -- 2: KL / theta -------------------------------------------------------------------

def test_criterion_2_kl_suite(record):
    rng = np.random.default_rng(7)
    p = rng.dirichlet(np.ones(5), size=10_000)
    q = rng.dirichlet(np.ones(5), size=10_000)
    kls = kl_rows(p, q)
    nonneg = bool(kls.min() >= -1e-9)
    self_kl = max(abs(kl_divergence(r, r)) for r in p[:1000])
    oracle = sum(sum(a * math.log((a + 1e-12) / (b + 1e-12)) for a, b in zip(pr, qr))
                 for pr, qr in zip(p[:500], q[:500])) / 500
    theta_err = abs(theta(p[:500], q[:500]) - oracle)
    fwd, bwd = kl_divergence([0.9, 0.1], [0.5, 0.5]), kl_divergence([0.5, 0.5], [0.9, 0.1])
    asym = abs(fwd - 0.3681) <= 1e-3 and abs(bwd - 0.5108) <= 1e-3
    ok = nonneg and self_kl <= 1e-10 and theta_err <= 1e-12 and asym
    record(2, ok, f"min KL {kls.min():.3g}, max KL(p,p) {self_kl:.3g}, theta err {theta_err:.3g}, "
                  f"asymmetry {fwd:.4f} vs {bwd:.4f}")
    assert ok


# -- 3: least-squares init ------------------------------------------------------------

def test_criterion_3_stitch_init(record):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 6))
    y = x @ rng.normal(size=(6, 9)) + rng.normal(size=9)
    lin = init_stitch_layer(None, x, y)
    resid = float(np.sum((lin(x) - y) ** 2))
    ident = init_stitch_layer(None, x, x)
    id_err = max(np.abs(ident.weight - np.eye(6)).max(), np.abs(ident.bias).max())
    yn = np.tanh(x @ rng.normal(size=(6, 4)))
    layer = init_stitch_layer(None, x, yn)
    best = float(np.sum((layer(x) - yn) ** 2))
    worse = 0
    for _ in range(100):
        dw, db = rng.normal(size=layer.weight.shape), rng.normal(size=layer.bias.shape)
        s = 1e-3 / math.sqrt(np.sum(dw ** 2) + np.sum(db ** 2))
        if float(np.sum((x @ (layer.weight + s * dw) + layer.bias + s * db - yn) ** 2)) < best:
            worse += 1
    ok = resid < 1e-8 and id_err <= 1e-6 and worse == 0
    record(3, ok, f"linear residual {resid:.3g}, identity err {id_err:.3g}, "
                  f"{worse}/100 perturbations improved")
    assert ok


# -- 4: probe amortisation ------------------------------------------------------------

def test_criterion_4_probe_amortisation(record):
    ds = gen_blobs(3, 70, 5, 0.5, seed=1)
    anchor = build_anchor("a", 5, 3, [StageSpec(8, 5)], seed=0).freeze()
    counts = {}
    for blocks in ([0], [0, 2], None):
        ps = train_probeset(anchor, ds, epochs=3, batch_size=32, seed=0, blocks=blocks)
        counts[len(blocks) if blocks else anchor.depth] = ps.anchor_forward_passes
    expected = math.ceil(len(ds) / 32) * 3
    ok = set(counts.values()) == {expected}
    record(4, ok, f"forward passes by probe count {counts}, expected {expected}")
    assert ok


# -- 5: gradient checks ---------------------------------------------------------------

def _rel_err(num, ana):
    return float(np.max(np.abs(num - ana)) / max(np.max(np.abs(num) + np.abs(ana)), 1e-12))


def _central(fn, arr, h=1e-6):
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        lp = fn()
        arr[idx] = orig - h
        lm = fn()
        arr[idx] = orig
        out[idx] = (lp - lm) / (2 * h)
    return out


def test_criterion_5_gradient_checks(record):
    rng = np.random.default_rng(5)
    acts = rng.normal(size=(16, 8))
    labels = rng.integers(0, 8, size=16)
    probe = Probe(rng.normal(scale=0.3, size=(8, 8)), rng.normal(scale=0.3, size=8), 0, "a")
    _, gw, gb = probe_loss_and_grads(probe, acts, labels)
    loss = lambda: probe_loss_and_grads(probe, acts, labels)[0]  # noqa: E731
    probe_err = max(_rel_err(_central(loss, probe.weight), gw), _rel_err(_central(loss, probe.bias), gb))

    f = build_anchor("f", 8, 8, [StageSpec(8, 2)], seed=1).freeze()
    g = build_anchor("g", 8, 8, [StageSpec(8, 3)], seed=2).freeze()
    c = StitchConfig("f", "g", 0, 0, 1, 1)
    layer = StitchLayer(c, rng.normal(scale=0.3, size=(8, 8)), rng.normal(scale=0.3, size=8))
    net = StitchedSupernet(f, g, {c: layer})
    _, sw, sb = stitch_loss_and_grads(net, layer, acts, labels)
    sloss = lambda: stitch_loss_and_grads(net, layer, acts, labels)[0]  # noqa: E731
    stitch_err = max(_rel_err(_central(sloss, layer.weight), sw), _rel_err(_central(sloss, layer.bias), sb))
    ok = probe_err < 1e-4 and stitch_err < 1e-4
    record(5, ok, f"relative error probe {probe_err:.2g}, stitch layer {stitch_err:.2g}")
    assert ok


# -- 6 and 8: end-to-end study ----------------------------------------------------------

@pytest.fixture(scope="module")
def study(tmp_path_factory):
    base = tmp_path_factory.mktemp("study")
    cfg = config_from_dict({})
    rows, times, roots = [], [], {}
    for seed in cfg.seeds:
        start = time.perf_counter()
        ctx = P.open_run(resolve(cfg, seed), base)
        checks = P.run_all(ctx)
        times.append(time.perf_counter() - start)
        rows.append(P.study_row(seed, checks))
        roots[seed] = ctx.root
    return rows, times, roots


def _heatmap_shape_ok(root):
    from stitchlab.similarity import read_heatmap
    paths = sorted((root / "heatmaps").glob("*.csv"))
    _, _, vals = read_heatmap(paths[0])
    near = np.mean([vals[i, min(2 * i + 1, vals.shape[1] - 1)] for i in range(vals.shape[0])])
    return bool(near < vals[0, -1])


def test_criterion_6_directional_study(study, record):
    rows, times, roots = study
    n = len(rows)
    counts = {k: sum(r[k] for r in rows) for k in ("spearman_ok", "snnet_ok", "minkl_ok", "cascade_ok")}
    parts = {
        "a": counts["spearman_ok"] >= 4,
        "b": counts["snnet_ok"] >= 4,
        "c": counts["minkl_ok"] >= 4,
        "d": counts["cascade_ok"] >= 3,
        "time": max(times) < 15 * 60,
    }
    heat = sum(_heatmap_shape_ok(r) for r in roots.values())
    rho = ", ".join(f"{r['spearman_gamma']:.3f}" for r in rows)
    detail = (f"(a) spearman>=0.3 {counts['spearman_ok']}/{n} [{rho}]; "
              f"(b) klas>=snnet {counts['snnet_ok']}/{n}; (c) klas>=minkl {counts['minkl_ok']}/{n}; "
              f"(d) cascade dominated {counts['cascade_ok']}/{n}; "
              f"max {max(times):.0f}s per seed; heatmap diagonal<corner {heat}/{n} (informative)")
    failed = [k for k, v in parts.items() if not v]
    record(6, not failed, detail + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert not failed, detail


def test_criterion_8_determinism(study, record, tmp_path):
    _, _, roots = study
    cfg = resolve(config_from_dict({}), 0)
    ctx = P.open_run(cfg, tmp_path)
    P.run_all(ctx)
    first = roots[0]
    names = sorted(p.relative_to(first) for p in first.rglob("*.csv"))
    diff = [str(n) for n in names if (first / n).read_bytes() != (ctx.root / n).read_bytes()]
    report_csvs = [n for n in names if n.parts[0] == "report"]
    ok = not diff and len(report_csvs) == 4
    record(8, ok, f"{len(names)} CSVs compared ({len(report_csvs)} in report/), {len(diff)} differ")
    assert ok, diff


# -- 7: AUC / Pareto -------------------------------------------------------------------

def test_criterion_7_auc_pareto(record):
    checks = [
        abs(auc([(10, 0.5), (20, 1.0)], 10, 20) - 0.75) <= 1e-12,
        abs(auc([(2, 0.6), (9, 0.6)], 1, 10) - 0.6) <= 1e-12,
        abs(auc([(2.0, 0.4), (4.0, 0.8)], 1.0, 5.0) - 0.6) <= 1e-12,
    ]
    rng = np.random.default_rng(11)
    idem = resc = True
    for _ in range(200):
        pts = [ParetoPoint(f"p{k}", float(rng.integers(1, 500)), float(rng.integers(0, 101)) / 100)
               for k in range(int(rng.integers(2, 30)))]
        front = pareto_front(pts)
        idem &= pareto_front(front) == front
        a, b = float(rng.uniform(0.01, 50)), float(rng.uniform(0, 100))
        scaled = [ParetoPoint(p.config_id, a * p.flops + b, p.accuracy) for p in pts]
        resc &= abs(auc(scaled, b, a * 600 + b) - auc(pts, 0, 600)) <= 1e-12
    ok = all(checks) and idem and resc
    record(7, ok, f"analytic cases {sum(checks)}/3, idempotent {idem}, rescale invariant {resc}")
    assert ok


# -- 9: CKA ------------------------------------------------------------------------------

def test_criterion_9_cka(record):
    rng = np.random.default_rng(9)
    F = rng.normal(size=(50, 7))
    self_err = abs(cka(F, F) - 1.0)
    Q = ortho_group.rvs(7, random_state=3)
    orth_err = abs(cka(F, F @ Q) - cka(F, F))
    vals = [cka(rng.normal(size=(20, int(rng.integers(1, 8)))), rng.normal(size=(20, int(rng.integers(1, 8)))))
            for _ in range(1000)]
    in_range = min(vals) >= 0.0 and max(vals) <= 1.0 + 1e-9
    ok = self_err <= 1e-9 and orth_err <= 1e-6 and in_range
    record(9, ok, f"|CKA(F,F)-1| {self_err:.2g}, orthogonal err {orth_err:.2g}, "
                  f"range [{min(vals):.3f}, {max(vals):.3f}] over 1000 pairs")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
