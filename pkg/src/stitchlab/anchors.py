"""Block-structured MLP anchors with prefix/suffix execution, training and FLOPs.

Block indices are 0-based. ``forward_prefix(anchor, k, x)`` runs the first ``k``
blocks (``k = 0`` returns ``x``), so the output of block ``b`` is
``forward_prefix(anchor, b + 1, x)``. ``forward_suffix(anchor, k, a)`` runs the
blocks after the first ``k`` plus the classifier head.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from stitchlab import tensor as T
from stitchlab.data import Dataset
from stitchlab.errors import FormatError, InvalidInputError, StateError

ANCHOR_FORMAT = "stitchlab.anchor"
ANCHOR_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidInputError("block dims must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise InvalidInputError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class StageSpec:
    hidden_dim: int
    num_blocks: int

    def __post_init__(self):
        if self.hidden_dim < 1 or self.num_blocks < 1:
            raise InvalidInputError("stage needs hidden_dim >= 1 and num_blocks >= 1")


@dataclass
class AnchorModel:
    id: str
    input_dim: int
    num_classes: int
    stages: tuple[StageSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    activation: str = "relu"
    frozen: bool = False
    seed: int | None = None
    dataset_digest: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stages = tuple(self.stages)
        specs = self.blocks
        if len(self.weights) != len(specs) or len(self.biases) != len(specs):
            raise InvalidInputError("weights/biases do not match the stage layout")
        for spec, w, b in zip(specs, self.weights, self.biases):
            if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                raise InvalidInputError(f"anchor {self.id}: parameter shape mismatch")
        last = specs[-1].out_dim
        if self.head_weight.shape != (last, self.num_classes) or self.head_bias.shape != (self.num_classes,):
            raise InvalidInputError(f"anchor {self.id}: head shape mismatch")
        if self.frozen:
            for arr in self.parameters():
                arr.setflags(write=False)

    @property
    def blocks(self) -> list[BlockSpec]:
        specs, prev = [], self.input_dim
        for stage in self.stages:
            for _ in range(stage.num_blocks):
                specs.append(BlockSpec(prev, stage.hidden_dim, self.activation))
                prev = stage.hidden_dim
        return specs

    @property
    def depth(self) -> int:
        return sum(s.num_blocks for s in self.stages)

    def block_width(self, block: int) -> int:
        return self.blocks[block].out_dim

    def stage_of_block(self, block: int) -> int:
        if not 0 <= block < self.depth:
            raise InvalidInputError(f"block {block} out of range for depth {self.depth}")
        edge = 0
        for s, stage in enumerate(self.stages):
            edge += stage.num_blocks
            if block < edge:
                return s
        raise AssertionError("unreachable")

    def stage_blocks(self, stage: int) -> list[int]:
        start = sum(s.num_blocks for s in self.stages[:stage])
        return list(range(start, start + self.stages[stage].num_blocks))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.head_weight, self.head_bias]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in self.parameters():
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def freeze(self) -> "AnchorModel":
        return replace(self, weights=[w.copy() for w in self.weights],
                       biases=[b.copy() for b in self.biases],
                       head_weight=self.head_weight.copy(), head_bias=self.head_bias.copy(),
                       frozen=True)


def build_anchor(anchor_id: str, input_dim: int, num_classes: int, stages, seed: int,
                 activation: str = "relu") -> AnchorModel:
    """He-initialised anchor; biases start at zero."""
    stages = tuple(s if isinstance(s, StageSpec) else StageSpec(*s) for s in stages)
    if not stages:
        raise InvalidInputError("anchor needs at least one stage")
    rng = T.make_rng(seed)
    weights, biases, prev = [], [], input_dim
    for stage in stages:
        for _ in range(stage.num_blocks):
            weights.append(rng.standard_normal((prev, stage.hidden_dim)) * math.sqrt(2.0 / prev))
            biases.append(np.zeros(stage.hidden_dim))
            prev = stage.hidden_dim
    head_w = rng.standard_normal((prev, num_classes)) * math.sqrt(1.0 / prev)
    return AnchorModel(anchor_id, input_dim, num_classes, stages, weights, biases,
                       head_w, np.zeros(num_classes), activation=activation, seed=seed)


def _check_batch(batch, width: int, what: str) -> np.ndarray:
    x = np.atleast_2d(T.as_tensor(batch, what))
    if x.shape[1] != width:
        raise InvalidInputError(f"{what}: width {x.shape[1]} != expected {width}")
    return x


def _apply_block(anchor: AnchorModel, b: int, x: np.ndarray) -> np.ndarray:
    pre = T.affine_forward(x, anchor.weights[b], anchor.biases[b])
    return T.relu(pre) if anchor.activation == "relu" else pre


def forward_prefix(anchor: AnchorModel, upto: int, batch) -> np.ndarray:
    """Activations after the first ``upto`` blocks (the input itself for 0)."""
    if not 0 <= upto <= anchor.depth:
        raise InvalidInputError(f"prefix length {upto} outside [0, {anchor.depth}]")
    x = _check_batch(batch, anchor.input_dim, "batch")
    for b in range(upto):
        x = _apply_block(anchor, b, x)
    return x


def block_activations(anchor: AnchorModel, batch) -> list[np.ndarray]:
    """Outputs of every block from a single pass; entry ``b`` is block ``b``'s output."""
    x = _check_batch(batch, anchor.input_dim, "batch")
    acts = []
    for b in range(anchor.depth):
        x = _apply_block(anchor, b, x)
        acts.append(x)
    return acts


def suffix_logits(anchor: AnchorModel, after: int, activations) -> np.ndarray:
    if not 0 <= after <= anchor.depth:
        raise InvalidInputError(f"suffix start {after} outside [0, {anchor.depth}]")
    width = anchor.input_dim if after == 0 else anchor.block_width(after - 1)
    x = _check_batch(activations, width, "activations")
    for b in range(after, anchor.depth):
        x = _apply_block(anchor, b, x)
    return T.affine_forward(x, anchor.head_weight, anchor.head_bias)


def forward_suffix(anchor: AnchorModel, after: int, activations) -> np.ndarray:
    """Blocks ``after..depth-1`` then the softmax head."""
    return T.softmax(suffix_logits(anchor, after, activations))


def forward(anchor: AnchorModel, batch) -> np.ndarray:
    return forward_suffix(anchor, 0, batch)


def head_distributions(anchor: AnchorModel, batch) -> np.ndarray:
    """Softmax of the classifier head, i.e. the last block's class distribution."""
    return forward(anchor, batch)


def predict(anchor: AnchorModel, batch) -> np.ndarray:
    return np.argmax(suffix_logits(anchor, 0, batch), axis=1)


def accuracy(anchor: AnchorModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    return float(np.mean(predict(anchor, dataset.inputs) == dataset.labels))


# -- backprop through a run of blocks -------------------------------------------------

def suffix_forward_cached(anchor: AnchorModel, after: int, x: np.ndarray):
    """Like ``suffix_logits`` but keeps what ``suffix_backward`` needs."""
    cache = []
    for b in range(after, anchor.depth):
        pre = T.affine_forward(x, anchor.weights[b], anchor.biases[b])
        cache.append((x, pre))
        x = T.relu(pre) if anchor.activation == "relu" else pre
    logits = T.affine_forward(x, anchor.head_weight, anchor.head_bias)
    cache.append((x, None))
    return logits, cache


def suffix_backward(anchor: AnchorModel, after: int, cache, grad_logits: np.ndarray,
                    param_grads: bool = True):
    """Backprop from logits to the suffix input.

    Returns ``(grads, grad_input)`` where ``grads`` follows ``anchor.parameters()``
    order restricted to blocks ``after..`` and the head (``None`` when
    ``param_grads`` is false).
    """
    head_in, _ = cache[-1]
    gw, gb, g = T.affine_backward(head_in, anchor.head_weight, grad_logits)
    grads = [gw, gb]
    for b in range(anchor.depth - 1, after - 1, -1):
        x_in, pre = cache[b - after]
        if anchor.activation == "relu":
            g = T.relu_backward(pre, g)
        gw, gb, g = T.affine_backward(x_in, anchor.weights[b], g)
        grads = [gw, gb] + grads
    return (grads if param_grads else None), g


def train_anchor(anchor: AnchorModel, train: Dataset, epochs: int = 50, lr: float = 0.05,
                 batch_size: int = 64, seed: int = 0):
    """Mini-batch SGD on mean cross-entropy.

    Returns ``(trained_anchor, loss_trace)``; the trace holds the mean batch loss
    of every epoch. The input anchor is not modified.
    """
    if anchor.frozen:
        raise StateError(f"anchor {anchor.id} is frozen")
    if epochs < 0 or batch_size < 1:
        raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")
    _check_batch(train.inputs[:1], anchor.input_dim, "train inputs")
    params = [p.copy() for p in anchor.parameters()]
    model = _with_params(anchor, params)
    rng = T.make_rng(seed)
    n = len(train)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            logits, cache = suffix_forward_cached(model, 0, train.inputs[rows])
            probs = T.softmax(logits)
            losses.append(T.batch_cross_entropy(probs, train.labels[rows]))
            grads, _ = suffix_backward(model, 0, cache, T.softmax_ce_backward(probs, train.labels[rows]))
            params = T.sgd_step(params, grads, lr)
            model = _with_params(model, params)
        trace.append(float(np.mean(losses)))
    return model, trace


def _with_params(anchor: AnchorModel, params: list[np.ndarray]) -> AnchorModel:
    m = anchor.depth
    return replace(anchor, weights=params[0:2 * m:2], biases=params[1:2 * m:2],
                   head_weight=params[2 * m], head_bias=params[2 * m + 1])


# -- FLOPs ----------------------------------------------------------------------------

def affine_flops(in_dim: int, out_dim: int) -> int:
    """2 * in * out per sample; bias adds and activations are not counted."""
    return 2 * in_dim * out_dim


def blocks_flops(anchor: AnchorModel, start: int, stop: int) -> int:
    return sum(affine_flops(s.in_dim, s.out_dim) for s in anchor.blocks[start:stop])


def head_flops(anchor: AnchorModel) -> int:
    return affine_flops(anchor.head_weight.shape[0], anchor.num_classes)


def flops(anchor: AnchorModel) -> int:
    return blocks_flops(anchor, 0, anchor.depth) + head_flops(anchor)


def stitched_flops(source: AnchorModel, target: AnchorModel, src_block: int, tgt_block: int) -> int:
    """FLOPs of ``g_{>tgt_block} . T . f_{<=src_block}`` (0-based blocks, inclusive prefix)."""
    return (blocks_flops(source, 0, src_block + 1)
            + affine_flops(source.block_width(src_block), target.block_width(tgt_block))
            + blocks_flops(target, tgt_block + 1, target.depth)
            + head_flops(target))


# -- persistence ----------------------------------------------------------------------

def anchor_to_dict(anchor: AnchorModel) -> dict:
    return {
        "format": ANCHOR_FORMAT,
        "version": ANCHOR_VERSION,
        "id": anchor.id,
        "input_dim": anchor.input_dim,
        "num_classes": anchor.num_classes,
        "activation": anchor.activation,
        "stages": [[s.hidden_dim, s.num_blocks] for s in anchor.stages],
        "seed": anchor.seed,
        "dataset_digest": anchor.dataset_digest,
        "frozen": anchor.frozen,
        "meta": anchor.meta,
        "digest": anchor.digest(),
        "params": [{"shape": list(p.shape), "values": p.ravel().tolist()} for p in anchor.parameters()],
    }


def anchor_from_dict(d: dict) -> AnchorModel:
    if d.get("format") != ANCHOR_FORMAT or d.get("version") != ANCHOR_VERSION:
        raise FormatError("not a stitchlab anchor file (format/version)", field="format")
    params = [np.asarray(p["values"], dtype=np.float64).reshape(p["shape"]) for p in d["params"]]
    m = sum(n for _, n in d["stages"])
    anchor = AnchorModel(
        d["id"], d["input_dim"], d["num_classes"],
        tuple(StageSpec(h, n) for h, n in d["stages"]),
        params[0:2 * m:2], params[1:2 * m:2], params[2 * m], params[2 * m + 1],
        activation=d["activation"], frozen=d["frozen"], seed=d["seed"],
        dataset_digest=d["dataset_digest"], meta=d.get("meta", {}),
    )
    if anchor.digest() != d["digest"]:
        raise FormatError(f"anchor {anchor.id}: weight digest mismatch", field="digest")
    return anchor


def save_anchor(anchor: AnchorModel, path) -> None:
    Path(path).write_text(json.dumps(anchor_to_dict(anchor)))


def load_anchor(path) -> AnchorModel:
    return anchor_from_dict(json.loads(Path(path).read_text()))
