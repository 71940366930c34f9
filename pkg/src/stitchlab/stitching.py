"""Stitch layers, least-squares initialisation, supernet finetuning and evaluation.

Anchors stay frozen throughout; only the affine stitch layers train. Each
mini-batch samples one configuration of the plan uniformly and updates that
configuration's layer alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stitchlab import tensor as T
from stitchlab.anchors import (
    AnchorModel,
    block_activations,
    forward_prefix,
    forward_suffix,
    suffix_backward,
    suffix_forward_cached,
)
from stitchlab.data import Dataset
from stitchlab.errors import FormatError, InvalidInputError, StateError
from stitchlab.selection import StitchConfig, StitchPlan, config_from_dict, config_to_dict

INIT_ROWS = 512
RIDGE = 1e-8


@dataclass
class StitchLayer:
    config: StitchConfig
    weight: np.ndarray  # source width x target width
    bias: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return T.affine_forward(x, self.weight, self.bias)


def init_stitch_layer(config: StitchConfig, source_acts, target_acts, ridge: float = RIDGE) -> StitchLayer:
    """Least-squares fit of ``[src, 1] @ [W; b] ~ tgt`` (ridge-regularised normal equations)."""
    src = np.atleast_2d(T.as_tensor(source_acts, "source activations"))
    tgt = np.atleast_2d(T.as_tensor(target_acts, "target activations"))
    if src.shape[0] != tgt.shape[0]:
        raise InvalidInputError(f"row count mismatch: {src.shape[0]} vs {tgt.shape[0]}")
    w, b = T.affine_lstsq(src, tgt, ridge)
    return StitchLayer(config, w, b)


@dataclass
class StitchedSupernet:
    source: AnchorModel
    target: AnchorModel
    layers: dict = field(default_factory=dict)  # StitchConfig -> StitchLayer | None

    def __post_init__(self):
        if not (self.source.frozen and self.target.frozen):
            raise StateError("supernet anchors must be frozen")
        for c in self.layers:
            if c.source_id != self.source.id or c.target_id != self.target.id:
                raise InvalidInputError(f"config {c.key} does not belong to this anchor pair")

    @property
    def configs(self) -> list[StitchConfig]:
        return sorted(self.layers, key=lambda c: (c.flops, c.i, c.j))

    def layer(self, config: StitchConfig) -> StitchLayer:
        if config not in self.layers:
            raise InvalidInputError(f"config {config.key} not in plan")
        layer = self.layers[config]
        if layer is None:
            raise StateError(f"stitch layer for {config.key} is not initialised")
        return layer


def empty_supernet(source: AnchorModel, target: AnchorModel, plan: StitchPlan) -> StitchedSupernet:
    configs = [c for c in plan.configs if c.source_id == source.id and c.target_id == target.id]
    return StitchedSupernet(source, target, {c: None for c in configs})


def init_supernet(source: AnchorModel, target: AnchorModel, plan: StitchPlan, init_set: Dataset,
                  max_rows: int = INIT_ROWS) -> StitchedSupernet:
    """Initialise one stitch layer per plan configuration on a shared batch."""
    net = empty_supernet(source, target, plan)
    x = init_set.inputs[:max_rows]
    src_acts = block_activations(source, x)
    tgt_acts = block_activations(target, x)
    for c in net.layers:
        net.layers[c] = init_stitch_layer(c, src_acts[c.i], tgt_acts[c.j])
    return net


def forward_stitched(net: StitchedSupernet, config: StitchConfig, batch) -> np.ndarray:
    layer = net.layer(config)
    src = forward_prefix(net.source, config.i + 1, batch)
    return forward_suffix(net.target, config.j + 1, layer(src))


def stitch_loss_and_grads(net: StitchedSupernet, layer: StitchLayer, src_acts: np.ndarray,
                          labels: np.ndarray):
    """Mean CE of the stitched model and its gradient w.r.t. the stitch layer."""
    c = layer.config
    z = layer(src_acts)
    logits, cache = suffix_forward_cached(net.target, c.j + 1, z)
    probs = T.softmax(logits)
    loss = T.batch_cross_entropy(probs, labels)
    _, grad_z = suffix_backward(net.target, c.j + 1, cache, T.softmax_ce_backward(probs, labels),
                                param_grads=False)
    gw, gb, _ = T.affine_backward(src_acts, layer.weight, grad_z)
    return loss, gw, gb


def finetune_supernet(net: StitchedSupernet, train: Dataset, epochs: int = 20, lr: float = 0.05,
                      batch_size: int = 64, seed: int = 0):
    """Random-configuration SGD on the stitch layers.

    Returns ``(finetuned_net, traces)`` where ``traces[config]`` is the list of
    batch losses that configuration saw, in order. The input net is untouched.
    """
    if not net.layers:
        raise InvalidInputError("supernet has no configurations")
    for c in net.layers:
        net.layer(c)
    if epochs < 0 or batch_size < 1:
        raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")
    src_digest, tgt_digest = net.source.digest(), net.target.digest()
    configs = net.configs
    layers = {c: StitchLayer(c, net.layers[c].weight.copy(), net.layers[c].bias.copy()) for c in configs}
    traces = {c: [] for c in configs}
    # frozen source: every prefix activation of the train split is fixed, compute once
    src_all = block_activations(net.source, train.inputs)
    rng = T.make_rng(seed)
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            c = configs[int(rng.integers(len(configs)))]
            layer = layers[c]
            loss, gw, gb = stitch_loss_and_grads(net, layer, src_all[c.i][rows], train.labels[rows])
            w, b = T.sgd_step([layer.weight, layer.bias], [gw, gb], lr)
            layers[c] = StitchLayer(c, w, b)
            traces[c].append(loss)
    if net.source.digest() != src_digest or net.target.digest() != tgt_digest:
        raise StateError("anchor weights changed during finetuning")
    return StitchedSupernet(net.source, net.target, layers), traces


@dataclass(frozen=True)
class StitchResult:
    config: StitchConfig
    flops: int
    accuracy: float


def evaluate_stitched(net: StitchedSupernet, test: Dataset) -> list[StitchResult]:
    """Top-1 accuracy of every configuration on the full split."""
    if len(test) == 0:
        raise InvalidInputError("empty test set")
    src_acts = block_activations(net.source, test.inputs)
    out = []
    for c in net.configs:
        probs = forward_suffix(net.target, c.j + 1, net.layer(c)(src_acts[c.i]))
        acc = float(np.mean(np.argmax(probs, axis=1) == test.labels))
        out.append(StitchResult(c, c.flops, acc))
    return out


def export_results_csv(results: list[StitchResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_id", "i", "j", "flops", "accuracy"])
        for r in results:
            w.writerow([r.config.key, r.config.i, r.config.j, r.flops, format(r.accuracy, ".17g")])


def supernet_to_dict(net: StitchedSupernet) -> dict:
    return {
        "format": "stitchlab.supernet", "version": 1,
        "source": net.source.id, "target": net.target.id,
        "source_digest": net.source.digest(), "target_digest": net.target.digest(),
        "layers": [dict(config_to_dict(c),
                        shape=list(net.layers[c].weight.shape) if net.layers[c] is not None else None,
                        weight=net.layers[c].weight.ravel().tolist() if net.layers[c] is not None else None,
                        bias=net.layers[c].bias.tolist() if net.layers[c] is not None else None)
                   for c in net.configs],
    }


def supernet_from_dict(d: dict, source: AnchorModel, target: AnchorModel) -> StitchedSupernet:
    if d.get("format") != "stitchlab.supernet":
        raise FormatError("not a stitchlab supernet file", field="format")
    if d["source_digest"] != source.digest() or d["target_digest"] != target.digest():
        raise FormatError("supernet was built against different anchor weights", field="digest")
    layers = {}
    for e in d["layers"]:
        c = config_from_dict(e)
        layers[c] = None if e["weight"] is None else StitchLayer(
            c, np.asarray(e["weight"], dtype=np.float64).reshape(e["shape"]), np.asarray(e["bias"]))
    return StitchedSupernet(source, target, layers)


def save_supernet(net: StitchedSupernet, path) -> None:
    Path(path).write_text(json.dumps(supernet_to_dict(net)))


def load_supernet(path, source: AnchorModel, target: AnchorModel) -> StitchedSupernet:
    return supernet_from_dict(json.loads(Path(path).read_text()), source, target)
