"""Joint training of one linear softmax probe per anchor block.

Each mini-batch costs exactly one forward pass of the frozen anchor; the block
activations from that pass feed every probe's SGD step. Probes share no
parameters, so this is the same arithmetic as training them one at a time on
the same batch stream.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stitchlab import tensor as T
from stitchlab.anchors import AnchorModel, block_activations
from stitchlab.data import Dataset
from stitchlab.errors import FormatError, InvalidInputError, StateError

PROBESET_FORMAT = "stitchlab.probeset"


@dataclass
class Probe:
    weight: np.ndarray
    bias: np.ndarray
    block: int
    anchor_id: str

    def __post_init__(self):
        if self.weight.shape[1] != self.bias.shape[0]:
            raise InvalidInputError("probe weight width must equal num_classes")

    def distributions(self, activations) -> np.ndarray:
        return T.softmax(T.affine_forward(np.atleast_2d(activations), self.weight, self.bias))


@dataclass
class ProbeSet:
    anchor_id: str
    anchor_digest: str
    probes: list[Probe]
    epochs: int = 0
    lr: float = 0.0
    batch_size: int = 0
    seed: int = 0
    # rows of (block, epoch, split, accuracy)
    trace: list[tuple] = field(default_factory=list)
    # per block, mean train CE after every epoch (index 0 = at init)
    loss_trace: list[list[float]] = field(default_factory=list)
    anchor_forward_passes: int = 0

    def __len__(self):
        return len(self.probes)


class CountingAnchor:
    """Wraps a frozen anchor and counts block-feature extractions."""

    def __init__(self, anchor: AnchorModel):
        self.anchor = anchor
        self.calls = 0

    def extract_block_features(self, batch) -> list[np.ndarray]:
        self.calls += 1
        return block_activations(self.anchor, batch)


def init_probes(anchor: AnchorModel) -> list[Probe]:
    return [Probe(np.zeros((anchor.block_width(b), anchor.num_classes)),
                  np.zeros(anchor.num_classes), b, anchor.id)
            for b in range(anchor.depth)]


def probe_loss_and_grads(probe: Probe, acts: np.ndarray, labels: np.ndarray):
    """Mean CE of the probe on ``acts`` and its gradient w.r.t. weight and bias."""
    probs = probe.distributions(acts)
    loss = T.batch_cross_entropy(probs, labels)
    gw, gb, _ = T.affine_backward(acts, probe.weight, T.softmax_ce_backward(probs, labels))
    return loss, gw, gb


def _probe_step(probe: Probe, acts: np.ndarray, labels: np.ndarray, lr: float) -> tuple[Probe, float]:
    loss, gw, gb = probe_loss_and_grads(probe, acts, labels)
    w, b = T.sgd_step([probe.weight, probe.bias], [gw, gb], lr)
    return Probe(w, b, probe.block, probe.anchor_id), loss


def _accuracy(probe: Probe, acts: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probe.distributions(acts), axis=1) == labels))


def _mean_ce(probe: Probe, acts: np.ndarray, labels: np.ndarray) -> float:
    return T.batch_cross_entropy(probe.distributions(acts), labels)


def train_probeset(anchor: AnchorModel, train: Dataset, epochs: int = 30, lr: float = 0.1,
                   batch_size: int = 64, seed: int = 0, val: Dataset | None = None,
                   blocks=None) -> ProbeSet:
    """Train all probes of a frozen anchor jointly.

    ``blocks`` restricts training to a subset (the others stay at their zero
    init); the anchor pass count does not depend on it.
    """
    if not anchor.frozen:
        raise StateError(f"anchor {anchor.id} must be frozen before probe training")
    if epochs < 0 or batch_size < 1:
        raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")
    digest = anchor.digest()
    counted = CountingAnchor(anchor)
    probes = init_probes(anchor)
    active = list(range(anchor.depth)) if blocks is None else list(blocks)

    # evaluation features: the anchor is frozen, so one pass per split suffices
    eval_sets = [("train", train)] + ([("val", val)] if val is not None else [])
    eval_acts = {name: block_activations(anchor, ds.inputs) for name, ds in eval_sets}

    trace, loss_trace = [], [[] for _ in probes]

    def record(epoch):
        for b, probe in enumerate(probes):
            for name, ds in eval_sets:
                trace.append((b, epoch, name, _accuracy(probe, eval_acts[name][b], ds.labels)))
            loss_trace[b].append(_mean_ce(probe, eval_acts["train"][b], train.labels))

    record(0)
    rng = T.make_rng(seed)
    n = len(train)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            feats = counted.extract_block_features(train.inputs[rows])
            labels = train.labels[rows]
            for b in active:
                probes[b], _ = _probe_step(probes[b], feats[b], labels, lr)
        record(epoch)

    if anchor.digest() != digest:
        raise StateError("anchor weights changed during probe training")
    return ProbeSet(anchor.id, digest, probes, epochs, lr, batch_size, seed, trace,
                    loss_trace, counted.calls)


def train_probe_independent(anchor: AnchorModel, block: int, train: Dataset, epochs: int = 30,
                            lr: float = 0.1, batch_size: int = 64, seed: int = 0) -> Probe:
    """Reference path: a single probe with its own anchor pass per batch."""
    if not anchor.frozen:
        raise StateError(f"anchor {anchor.id} must be frozen before probe training")
    probe = init_probes(anchor)[block]
    rng = T.make_rng(seed)
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            feats = block_activations(anchor, train.inputs[rows])
            probe, _ = _probe_step(probe, feats[block], train.labels[rows], lr)
    return probe


def probe_distributions(probeset: ProbeSet, block: int, activations) -> np.ndarray:
    """Softmax output of the probe after ``block`` on that block's activations."""
    if not 0 <= block < len(probeset.probes):
        raise InvalidInputError(f"block {block} out of range for {len(probeset.probes)} probes")
    return probeset.probes[block].distributions(activations)


def all_probe_distributions(probeset: ProbeSet, anchor: AnchorModel, inputs) -> list[np.ndarray]:
    if anchor.id != probeset.anchor_id:
        raise InvalidInputError(f"probeset belongs to {probeset.anchor_id}, not {anchor.id}")
    acts = block_activations(anchor, inputs)
    return [probe_distributions(probeset, b, a) for b, a in enumerate(acts)]


def probe_accuracy_trace(probeset: ProbeSet) -> list[tuple]:
    """Rows ``(block, epoch, split, accuracy)`` sorted by split, block, epoch."""
    return sorted(probeset.trace, key=lambda r: (r[2], r[0], r[1]))


def export_trace_csv(probeset: ProbeSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "epoch", "split", "accuracy"])
        for block, epoch, name, acc in probe_accuracy_trace(probeset):
            w.writerow([block, epoch, name, format(acc, ".17g")])


def expected_forward_passes(n: int, batch_size: int, epochs: int) -> int:
    return math.ceil(n / batch_size) * epochs


def probeset_to_dict(ps: ProbeSet) -> dict:
    return {
        "format": PROBESET_FORMAT,
        "version": 1,
        "anchor_id": ps.anchor_id,
        "anchor_digest": ps.anchor_digest,
        "epochs": ps.epochs, "lr": ps.lr, "batch_size": ps.batch_size, "seed": ps.seed,
        "anchor_forward_passes": ps.anchor_forward_passes,
        "trace": [list(r) for r in ps.trace],
        "loss_trace": ps.loss_trace,
        "probes": [{"block": p.block, "shape": list(p.weight.shape),
                    "weight": p.weight.ravel().tolist(), "bias": p.bias.tolist()}
                   for p in ps.probes],
    }


def probeset_from_dict(d: dict) -> ProbeSet:
    if d.get("format") != PROBESET_FORMAT:
        raise FormatError("not a stitchlab probeset file", field="format")
    probes = [Probe(np.asarray(p["weight"], dtype=np.float64).reshape(p["shape"]),
                    np.asarray(p["bias"], dtype=np.float64), p["block"], d["anchor_id"])
              for p in d["probes"]]
    return ProbeSet(d["anchor_id"], d["anchor_digest"], probes, d["epochs"], d["lr"],
                    d["batch_size"], d["seed"], [tuple(r) for r in d["trace"]],
                    d["loss_trace"], d["anchor_forward_passes"])


def save_probeset(ps: ProbeSet, path) -> None:
    Path(path).write_text(json.dumps(probeset_to_dict(ps)))


def load_probeset(path) -> ProbeSet:
    return probeset_from_dict(json.loads(Path(path).read_text()))
