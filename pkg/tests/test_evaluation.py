import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stitchlab.errors import InvalidInputError, UndefinedCorrelationError
from stitchlab.evaluation import (
    ParetoPoint,
    auc,
    correlation_study,
    global_bounds,
    overlap,
    pareto_front,
    pearson,
    read_pareto_csv,
    spearman,
    summarize,
    write_report,
)


def _pearson_oracle(x, y):
    # textbook definition in plain python
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def _auc_oracle(points, lo, hi):
    # dense step-extended front, evaluated with a fine trapezoid grid
    front = pareto_front(points)
    xs = [(p.flops - lo) / (hi - lo) for p in front]
    ys = [p.accuracy for p in front]
    grid = np.linspace(0, 1, 200_001)
    return float(np.trapezoid(np.interp(grid, xs, ys), grid))


# -- pareto ---------------------------------------------------------------------------

def test_pareto_examples():
    assert [(p.flops, p.accuracy) for p in pareto_front([(1, 0.5), (2, 0.9)])] == [(1, 0.5), (2, 0.9)]
    assert [(p.flops, p.accuracy) for p in pareto_front([(1, 0.5), (2, 0.4)])] == [(1, 0.5)]
    dup = [ParetoPoint("a", 1, 0.5), ParetoPoint("a", 1, 0.5), ParetoPoint("b", 3, 0.7)]
    assert len(pareto_front(dup)) == 2


def test_point_validation():
    with pytest.raises(InvalidInputError):
        ParetoPoint("x", 1, 1.5)
    with pytest.raises(InvalidInputError):
        ParetoPoint("x", 0, 0.5)


points_st = st.lists(st.tuples(st.integers(1, 1000), st.integers(0, 100).map(lambda v: v / 100)),
                     min_size=2, max_size=20)


@settings(max_examples=100, deadline=None)
@given(points_st)
def test_pareto_idempotent_and_nondominated(pts):
    front = pareto_front(pts)
    assert pareto_front(front) == front
    for p in front:
        assert not any(q.flops <= p.flops and q.accuracy >= p.accuracy
                       and (q.flops < p.flops or q.accuracy > p.accuracy)
                       for q in map(lambda t: ParetoPoint("", *t), pts))
    assert [p.flops for p in front] == sorted(p.flops for p in front)


# -- auc ------------------------------------------------------------------------------

def test_auc_trapezoid_example():
    assert auc([(10, 0.5), (20, 1.0)], 10, 20) == pytest.approx(0.75, abs=1e-15)


def test_auc_constant_accuracy():
    assert auc([(3, 0.7), (8, 0.7)], 1, 10) == pytest.approx(0.7, abs=1e-15)


def test_auc_step_extension():
    # front spans x in [0.25, 0.75]; constant before and after
    val = auc([(2.0, 0.4), (4.0, 0.8)], 1.0, 5.0)
    assert val == pytest.approx(0.25 * 0.4 + 0.5 * 0.6 + 0.25 * 0.8, abs=1e-15)


def test_auc_dominated_point_is_ignored():
    base = [(1, 0.5), (4, 0.9), (9, 0.95)]
    assert auc(base + [(5, 0.6)], 1, 9) == auc(base, 1, 9)


def test_auc_errors():
    with pytest.raises(InvalidInputError):
        auc([(1, 0.5)], 0, 1)
    with pytest.raises(InvalidInputError):
        auc([(1, 0.5), (2, 0.6)], 2, 2)


@settings(max_examples=60, deadline=None)
@given(points_st)
def test_auc_matches_dense_oracle_and_range(pts):
    lo = min(p[0] for p in pts) - 1
    hi = max(p[0] for p in pts) + 1
    v = auc(pts, lo, hi)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(_auc_oracle(pts, lo, hi), abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(points_st, st.floats(0.1, 100), st.floats(-50, 50))
def test_auc_affine_rescale_invariance(pts, a, b):
    lo, hi = 0.5, 1001.0
    scaled = [(a * f + b + 100, acc) for f, acc in pts]
    assert auc(scaled, a * lo + b + 100, a * hi + b + 100) == pytest.approx(auc(pts, lo, hi), abs=1e-12)


def test_summarize_and_bounds():
    cs = summarize("m", [(2, 0.5), (6, 0.9)], 2, 6)
    assert cs.auc == pytest.approx(0.7)
    assert global_bounds([(3, 0.1)], [ParetoPoint("a", 9, 0.2), ParetoPoint("b", 1, 0.2)]) == (1.0, 9.0)
    with pytest.raises(InvalidInputError):
        global_bounds([])


# -- overlap and correlations ------------------------------------------------------------

def test_overlap_examples():
    assert overlap({"a", "b"}, {"a", "b"}) == 100.0
    assert overlap({"b", "c", "x"}, {"a", "b", "c"}) == pytest.approx(66.66666666666667, abs=1e-12)
    assert overlap({"x"}, {"a"}) == 0.0
    with pytest.raises(InvalidInputError):
        overlap({"a"}, set())


def test_pearson_spearman_examples():
    x, y = [1, 2, 3], [1, 4, 9]
    assert pearson(x, y) == pytest.approx(_pearson_oracle(x, y), abs=1e-15)
    assert pearson(x, y) == pytest.approx(0.989743318610787, abs=1e-12)
    assert spearman(x, y) == 1.0


def test_correlation_study_linear_and_negated():
    acc = np.array([0.9, 0.7, 0.8, 0.6])
    drop = 0.95 - acc
    out = correlation_study({"lin": 2 * drop + 1, "neg": -drop}, acc, 0.95)
    assert out["lin"][0] == pytest.approx(1.0, abs=1e-12) and out["lin"][1] == pytest.approx(1.0)
    assert out["neg"][0] == pytest.approx(-1.0, abs=1e-12)


def test_correlation_errors():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(InvalidInputError):
        correlation_study({"m": [1, 2]}, [0.5, 0.6], 0.9)
    with pytest.raises(InvalidInputError):
        correlation_study({"m": [1, 2]}, [0.5, 0.6, 0.7], 0.9)
    with pytest.raises(InvalidInputError):
        pearson([1, 2], [1, 2, 3])


def test_spearman_average_ranks_with_ties():
    x, y = [1, 2, 2, 3], [10, 20, 30, 40]
    # average ranks [1, 2.5, 2.5, 4] against [1, 2, 3, 4]
    assert spearman(x, y) == pytest.approx(_pearson_oracle([1, 2.5, 2.5, 4], [1, 2, 3, 4]), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=3, max_size=15, unique=True),
       st.integers(0, 10_000))
def test_spearman_monotone_invariance(x, seed):
    y = np.random.default_rng(seed).permutation(len(x)).astype(float)
    base = spearman(x, y)
    assert spearman(np.exp(np.array(x) / 10.0), y) == base
    assert spearman(x, y ** 3 + 7) == base


# -- report bundle --------------------------------------------------------------------

def _curves():
    a = summarize("klas", [ParetoPoint("a:0->b:0", 100, 0.6), ParetoPoint("a:1->b:2", 250, 0.81),
                           ParetoPoint("a:1->b:1", 200, 0.55)], 100, 300)
    b = summarize("snnet", [ParetoPoint("a:0->b:1", 150, 1 / 3), ParetoPoint("a:1->b:3", 300, 0.7)], 100, 300)
    return [a, b]


def test_report_bundle(tmp_path):
    curves = _curves()
    paths = write_report(curves, tmp_path / "rep", {"gamma": (0.5, 0.25)},
                         [("klas", "oracle", 200 / 3)], {"note": 1})
    for name in ("pareto.csv", "auc.json", "correlations.csv", "overlap.csv", "curves.csv"):
        assert paths[name].exists()
    back = read_pareto_csv(paths["pareto.csv"])
    for cs in curves:
        assert sorted(back[cs.method], key=lambda p: p.config_id) == sorted(cs.points, key=lambda p: p.config_id)
    data = json.loads(paths["auc.json"].read_text())
    assert data["delta_auc"]["klas-snnet"] == curves[0].auc - curves[1].auc
    assert data["delta_auc"]["snnet-klas"] == curves[1].auc - curves[0].auc
    assert data["integration"] == "pareto_front_trapezoid_step_extended"
    with open(paths["pareto.csv"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["on_front"] for r in rows if r["method"] == "klas"] == ["1", "0", "1"]
    with open(paths["curves.csv"], newline="") as fh:
        assert next(csv.reader(fh)) == ["method", "x", "y"]


def test_report_empty_raises(tmp_path):
    with pytest.raises(InvalidInputError):
        write_report([], tmp_path)


def test_report_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        write_report(_curves(), blocker / "sub")
