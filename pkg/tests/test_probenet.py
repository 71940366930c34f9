import csv
import math

import numpy as np
import pytest

from stitchlab.anchors import StageSpec, accuracy, block_activations, build_anchor, train_anchor
from stitchlab.config import config_from_dict, resolve
from stitchlab.data import split
from stitchlab.errors import FormatError, InvalidInputError, StateError
from stitchlab.pipeline import make_dataset
from stitchlab.probenet import (
    Probe,
    all_probe_distributions,
    expected_forward_passes,
    export_trace_csv,
    init_probes,
    load_probeset,
    probe_distributions,
    probe_loss_and_grads,
    probeset_from_dict,
    probeset_to_dict,
    save_probeset,
    train_probe_independent,
    train_probeset,
)


def test_forward_pass_count_matches_batches(small_pair, blob_splits):
    tr, _, _ = blob_splits
    f, _ = small_pair
    ps = train_probeset(f, tr, epochs=3, batch_size=16, seed=0)
    assert ps.anchor_forward_passes == math.ceil(len(tr) / 16) * 3
    assert ps.anchor_forward_passes == expected_forward_passes(len(tr), 16, 3)


def test_forward_pass_count_independent_of_probe_count(small_pair, blob_splits):
    tr, _, _ = blob_splits
    _, g = small_pair
    one = train_probeset(g, tr, epochs=2, batch_size=10, seed=0, blocks=[0])
    allb = train_probeset(g, tr, epochs=2, batch_size=10, seed=0)
    assert one.anchor_forward_passes == allb.anchor_forward_passes == math.ceil(len(tr) / 10) * 2


def test_joint_training_equals_independent_training(small_pair, blob_splits):
    tr, _, _ = blob_splits
    _, g = small_pair
    ps = train_probeset(g, tr, epochs=3, lr=0.1, batch_size=16, seed=7)
    for b in range(g.depth):
        ref = train_probe_independent(g, b, tr, epochs=3, lr=0.1, batch_size=16, seed=7)
        assert np.array_equal(ps.probes[b].weight, ref.weight)
        assert np.array_equal(ps.probes[b].bias, ref.bias)


def test_untrained_subset_stays_at_init(small_pair, blob_splits):
    tr, _, _ = blob_splits
    _, g = small_pair
    ps = train_probeset(g, tr, epochs=2, seed=0, blocks=[1, 3])
    assert not np.any(ps.probes[0].weight) and not np.any(ps.probes[2].weight)
    assert np.any(ps.probes[1].weight) and np.any(ps.probes[3].weight)


def test_anchor_digest_unchanged(small_pair, blob_splits):
    tr, _, _ = blob_splits
    f, _ = small_pair
    before = f.digest()
    ps = train_probeset(f, tr, epochs=2, seed=0)
    assert f.digest() == before == ps.anchor_digest


def test_unfrozen_anchor_raises(blob_splits):
    tr, _, _ = blob_splits
    a = build_anchor("u", 6, 4, [StageSpec(8, 2)], seed=0)
    with pytest.raises(StateError):
        train_probeset(a, tr, epochs=1)
    with pytest.raises(StateError):
        train_probe_independent(a, 0, tr, epochs=1)


def test_bad_budget_raises(small_pair, blob_splits):
    tr, _, _ = blob_splits
    with pytest.raises(InvalidInputError):
        train_probeset(small_pair[0], tr, epochs=-1)
    with pytest.raises(InvalidInputError):
        train_probeset(small_pair[0], tr, batch_size=0)


def test_zero_probe_gives_uniform(small_pair, blob_splits, rng):
    _, g = small_pair
    probes = init_probes(g)
    assert len(probes) == g.depth
    acts = rng.normal(size=(5, g.block_width(2)))
    assert np.allclose(probes[2].distributions(acts), 0.25)


def test_probe_shape_validation():
    with pytest.raises(InvalidInputError):
        Probe(np.zeros((3, 4)), np.zeros(5), 0, "a")


def test_probe_distributions_rows_sum_to_one(small_probes, small_pair, blob_splits):
    _, va, _ = blob_splits
    f, _ = small_pair
    dists = all_probe_distributions(small_probes[0], f, va.inputs)
    assert len(dists) == f.depth
    for d in dists:
        assert d.shape == (len(va), 4)
        assert np.allclose(d.sum(axis=1), 1.0)
        assert np.all(d >= 0)


def test_probe_distributions_errors(small_probes, small_pair, blob_splits):
    _, va, _ = blob_splits
    f, g = small_pair
    with pytest.raises(InvalidInputError):
        probe_distributions(small_probes[0], f.depth, np.zeros((1, 8)))
    with pytest.raises(InvalidInputError):
        all_probe_distributions(small_probes[0], g, va.inputs)


def test_epoch_zero_accuracy_is_near_chance(small_probes):
    for ps in small_probes:
        for b, e, s, acc in ps.trace:
            if e == 0:
                assert abs(acc - 0.25) <= 0.05 + 1e-12


def test_probe_gradient_matches_finite_differences(rng):
    acts = rng.normal(size=(8, 8))
    labels = rng.integers(0, 4, size=8)
    probe = Probe(rng.normal(scale=0.3, size=(8, 4)), rng.normal(scale=0.3, size=4), 0, "a")
    _, gw, gb = probe_loss_and_grads(probe, acts, labels)
    h = 1e-6
    for arr, grad, name in ((probe.weight, gw, "w"), (probe.bias, gb, "b")):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += h
            minus[idx] -= h
            pw = (plus, probe.bias) if name == "w" else (probe.weight, plus)
            mw = (minus, probe.bias) if name == "w" else (probe.weight, minus)
            lp = probe_loss_and_grads(Probe(*pw, 0, "a"), acts, labels)[0]
            lm = probe_loss_and_grads(Probe(*mw, 0, "a"), acts, labels)[0]
            num[idx] = (lp - lm) / (2 * h)
        rel = np.max(np.abs(num - grad)) / max(np.max(np.abs(num) + np.abs(grad)), 1e-12)
        assert rel < 1e-5


def test_trace_csv_layout(small_probes, tmp_path):
    path = tmp_path / "trace.csv"
    export_trace_csv(small_probes[0], path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["block", "epoch", "split", "accuracy"]
    # 2 blocks, 11 recorded epochs (init + 10), 2 splits
    assert len(rows) - 1 == 2 * 11 * 2
    assert {r[2] for r in rows[1:]} == {"train", "val"}


def test_persistence_roundtrip(small_probes, tmp_path):
    ps = small_probes[1]
    path = tmp_path / "p.json"
    save_probeset(ps, path)
    back = load_probeset(path)
    assert back.anchor_id == ps.anchor_id and back.anchor_digest == ps.anchor_digest
    assert back.trace == ps.trace and back.loss_trace == ps.loss_trace
    for a, b in zip(ps.probes, back.probes):
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


def test_persistence_rejects_wrong_format(small_probes):
    d = probeset_to_dict(small_probes[0])
    d["format"] = "other"
    with pytest.raises(FormatError):
        probeset_from_dict(d)


# -- default task ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def default_anchors():
    cfg = resolve(config_from_dict({}))
    tr, va, te = split(make_dataset(cfg), tuple(cfg.dataset.fractions), cfg.dataset.seed)
    out = {}
    for spec in cfg.anchors:
        a = build_anchor(spec.id, tr.input_dim, tr.num_classes, [StageSpec(*s) for s in spec.stages],
                         spec.seed)
        a, _ = train_anchor(a, tr, 50, 0.05, 64, spec.train_seed)
        out[spec.id] = (a.freeze(), spec.probe_seed)
    return out, (tr, va, te)


def _val_curve(ps, block):
    return {e: acc for b, e, s, acc in ps.trace if b == block and s == "val"}


def test_default_deepest_probe_converges_early(default_anchors):
    anchors, (tr, va, _) = default_anchors
    expected = {"small": (0.94, 0.948), "large": (0.98, 0.988)}  # seeded reference run
    for aid, (a, pseed) in anchors.items():
        ps = train_probeset(a, tr, 30, 0.1, 64, pseed, val=va)
        curve = _val_curve(ps, a.depth - 1)
        assert curve[4] == pytest.approx(expected[aid][0], abs=1e-12)
        assert curve[30] == pytest.approx(expected[aid][1], abs=1e-12)
        assert curve[30] - curve[4] <= 0.01 + 1e-12
        assert abs(curve[0] - 1 / tr.num_classes) <= 0.05
        assert ps.anchor_forward_passes == math.ceil(len(tr) / 64) * 30


def test_default_large_deepest_probe_tracks_head(default_anchors):
    anchors, (tr, va, _) = default_anchors
    a, pseed = anchors["large"]
    ps = train_probeset(a, tr, 30, 0.1, 64, pseed, val=va)
    head = accuracy(a, va)
    assert head == pytest.approx(0.984, abs=1e-12)
    assert abs(_val_curve(ps, a.depth - 1)[30] - head) <= 0.02


@pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
def test_default_first_epoch_lowers_every_probe_loss(default_anchors, seed):
    anchors, (tr, _, _) = default_anchors
    for a, _ in anchors.values():
        ps = train_probeset(a, tr, 1, 0.1, 64, seed)
        for b in range(a.depth):
            assert ps.loss_trace[b][1] < ps.loss_trace[b][0]


def test_block_activations_feed_probes_consistently(small_pair, small_probes, blob_splits):
    _, va, _ = blob_splits
    f, _ = small_pair
    acts = block_activations(f, va.inputs)
    d = all_probe_distributions(small_probes[0], f, va.inputs)
    assert np.array_equal(d[1], small_probes[0].probes[1].distributions(acts[1]))
