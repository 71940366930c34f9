"""KL-based block similarity between anchors plus the usual comparison metrics.

``theta`` is the mean over validation samples of KL(source probe || target
probe). Natural log, with EPS added to both distributions inside the ratio.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stitchlab import tensor as T
from stitchlab.anchors import AnchorModel, flops, head_distributions
from stitchlab.data import Dataset
from stitchlab.errors import FormatError, InvalidInputError
from stitchlab.probenet import ProbeSet, all_probe_distributions, train_probeset
from stitchlab.tensor import EPS

SIMILARITY_FORMAT = "stitchlab.similarity"


def kl_divergence(p, q) -> float:
    p = T.as_tensor(p, "p")
    q = T.as_tensor(q, "q")
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInputError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return float(np.sum(p * np.log((p + EPS) / (q + EPS))))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row KL for two batches of distributions."""
    if p.shape != q.shape:
        raise InvalidInputError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return np.sum(p * np.log((p + EPS) / (q + EPS)), axis=1)


def theta(p_rows: np.ndarray, q_rows: np.ndarray) -> float:
    """Mean KL over the validation rows (source first)."""
    if len(p_rows) == 0:
        raise InvalidInputError("empty validation set")
    return float(np.mean(kl_rows(p_rows, q_rows)))


@dataclass
class SimilarityMatrix:
    source_id: str
    target_id: str
    stage: int
    source_blocks: list[int]
    target_blocks: list[int]
    theta: np.ndarray  # [source block][target block] within the stage
    num_samples: int
    source_digest: str = ""
    target_digest: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (len(self.source_blocks), len(self.target_blocks)):
            raise InvalidInputError("theta shape does not match block lists")

    def value(self, i: int, j: int) -> float:
        """Theta for global block indices ``i`` (source) and ``j`` (target)."""
        return float(self.theta[self.source_blocks.index(i), self.target_blocks.index(j)])

    def __contains__(self, ij) -> bool:
        return ij[0] in self.source_blocks and ij[1] in self.target_blocks


@dataclass
class IntraCapacity:
    anchor_id: str
    sigma: np.ndarray  # sigma[j] = theta(P_j, P_{j+1})

    def mean(self) -> float:
        return float(np.mean(self.sigma)) if len(self.sigma) else 0.0


def check_direction(f: AnchorModel, g: AnchorModel) -> None:
    if flops(f) >= flops(g):
        raise InvalidInputError(
            f"source {f.id} ({flops(f)} FLOPs) must be cheaper than target {g.id} ({flops(g)} FLOPs)"
        )


def shared_stages(f: AnchorModel, g: AnchorModel) -> list[int]:
    return list(range(min(len(f.stages), len(g.stages))))


def similarity_matrices(f: AnchorModel, probes_f: ProbeSet, g: AnchorModel, probes_g: ProbeSet,
                        val: Dataset) -> list[SimilarityMatrix]:
    """Theta for every same-stage (source block, target block) pair."""
    check_direction(f, g)
    if len(val) == 0:
        raise InvalidInputError("empty validation set")
    pf = all_probe_distributions(probes_f, f, val.inputs)
    pg = all_probe_distributions(probes_g, g, val.inputs)
    out = []
    for stage in shared_stages(f, g):
        sb, tb = f.stage_blocks(stage), g.stage_blocks(stage)
        grid = np.array([[theta(pf[i], pg[j]) for j in tb] for i in sb])
        out.append(SimilarityMatrix(f.id, g.id, stage, sb, tb, grid, len(val),
                                    f.digest(), g.digest()))
    return out


def intra_capacity(g: AnchorModel, probes_g: ProbeSet, val: Dataset) -> IntraCapacity:
    pg = all_probe_distributions(probes_g, g, val.inputs)
    return IntraCapacity(g.id, np.array([theta(pg[j], pg[j + 1]) for j in range(g.depth - 1)]))


def last_block_kl(f: AnchorModel, g: AnchorModel, val: Dataset) -> float:
    """Mean KL between the two classifier heads, ``f``'s output as p."""
    if len(val) == 0:
        raise InvalidInputError("empty validation set")
    return theta(head_distributions(f, val.inputs), head_distributions(g, val.inputs))


# -- comparison metrics ---------------------------------------------------------------

def mse_metric(src: np.ndarray, tgt: np.ndarray) -> float:
    if src.shape != tgt.shape:
        raise InvalidInputError(f"mse needs equal activation dims, got {src.shape} vs {tgt.shape}")
    return float(np.mean(np.sum((src - tgt) ** 2, axis=1)))


def ce_metric(probs: np.ndarray, labels: np.ndarray) -> float:
    """Summed negative log-likelihood of the true labels under ``probs``."""
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise InvalidInputError("ce metric needs one label per row")
    return float(-np.sum(np.log(probs[np.arange(len(labels)), labels] + EPS)))


def dm_metric(src: np.ndarray, tgt: np.ndarray, ridge: float = 1e-8) -> float:
    """Residual sum of squares of the best ridge-affine map ``src -> tgt``."""
    w, b = T.affine_lstsq(src, tgt, ridge)
    return float(np.sum((src @ w + b - tgt) ** 2))


def cka(src, tgt) -> float:
    """Linear CKA on column-centred features."""
    F = T.as_tensor(src, "src")
    G = T.as_tensor(tgt, "tgt")
    if F.shape[0] != G.shape[0]:
        raise InvalidInputError("cka needs the same number of rows")
    F = F - F.mean(axis=0)
    G = G - G.mean(axis=0)
    denom = np.linalg.norm(F.T @ F) * np.linalg.norm(G.T @ G)
    if denom == 0:
        raise InvalidInputError("cka undefined for constant features")
    return float(np.linalg.norm(F.T @ G) ** 2 / denom)


def class_conditional_cka(src, tgt, labels) -> float:
    """CKA within each class (classes with < 2 rows skipped), averaged."""
    labels = np.asarray(labels)
    scores = []
    for c in np.unique(labels):
        rows = labels == c
        if rows.sum() < 2:
            continue
        scores.append(cka(np.asarray(src)[rows], np.asarray(tgt)[rows]))
    if not scores:
        raise InvalidInputError("no class has at least 2 samples")
    return float(np.mean(scores))


def baseline_metric(kind: str, f_data, g_data=None, labels=None) -> float:
    """Dispatch for mse/ce/cka/dm.

    ``ce`` takes the source probe distributions as ``f_data`` and ignores
    ``g_data``; the others take source and target activations.
    """
    if kind == "mse":
        return mse_metric(np.asarray(f_data), np.asarray(g_data))
    if kind == "ce":
        if labels is None:
            raise InvalidInputError("ce metric requires labels")
        return ce_metric(np.asarray(f_data), labels)
    if kind == "cka":
        return cka(f_data, g_data)
    if kind == "dm":
        return dm_metric(np.asarray(f_data), np.asarray(g_data))
    raise InvalidInputError(f"unknown metric {kind!r}")


def shuffled_probeset(anchor: AnchorModel, train: Dataset, seed: int, **train_kw) -> ProbeSet:
    """Probes retrained against a seeded permutation of the training labels."""
    perm = T.make_rng(seed).permutation(len(train))
    shuffled = Dataset(train.inputs, train.labels[perm], train.num_classes, train.split, train.indices)
    return train_probeset(anchor, shuffled, seed=seed, **train_kw)


def metric_variants(kind: str, **kw) -> float:
    """``shuffled_kl`` (f, g, train, val, i, j, seed) or ``class_conditional_cka`` (src, tgt, labels)."""
    if kind == "class_conditional_cka":
        return class_conditional_cka(kw["src"], kw["tgt"], kw["labels"])
    if kind == "shuffled_kl":
        f, g, train, val = kw["f"], kw["g"], kw["train"], kw["val"]
        extra = kw.get("train_kw", {})
        pf = shuffled_probeset(f, train, kw.get("seed", 0), **extra)
        pg = shuffled_probeset(g, train, kw.get("seed", 0) + 1, **extra)
        df = all_probe_distributions(pf, f, val.inputs)[kw["i"]]
        dg = all_probe_distributions(pg, g, val.inputs)[kw["j"]]
        return theta(df, dg)
    raise InvalidInputError(f"unknown variant {kind!r}")


# -- persistence ----------------------------------------------------------------------

def export_heatmap(sm: SimilarityMatrix, path) -> None:
    if sm.theta.size == 0:
        raise InvalidInputError("empty similarity matrix")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source\\target"] + [str(j) for j in sm.target_blocks])
        for i, row in zip(sm.source_blocks, sm.theta):
            w.writerow([str(i)] + [format(v, ".17g") for v in row])


def read_heatmap(path) -> tuple[list[int], list[int], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = [int(c) for c in rows[0][1:]]
    src = [int(r[0]) for r in rows[1:]]
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return src, cols, vals


def similarity_to_dict(sm: SimilarityMatrix) -> dict:
    return {
        "format": SIMILARITY_FORMAT, "version": 1,
        "source_id": sm.source_id, "target_id": sm.target_id, "stage": sm.stage,
        "source_blocks": sm.source_blocks, "target_blocks": sm.target_blocks,
        "theta": sm.theta.tolist(), "num_samples": sm.num_samples,
        "source_digest": sm.source_digest, "target_digest": sm.target_digest,
    }


def similarity_from_dict(d: dict) -> SimilarityMatrix:
    if d.get("format") != SIMILARITY_FORMAT:
        raise FormatError("not a stitchlab similarity file", field="format")
    return SimilarityMatrix(d["source_id"], d["target_id"], d["stage"], d["source_blocks"],
                            d["target_blocks"], np.asarray(d["theta"]), d["num_samples"],
                            d["source_digest"], d["target_digest"])


def save_similarity(matrices: list[SimilarityMatrix], path, extra: dict | None = None) -> None:
    payload = {"matrices": [similarity_to_dict(m) for m in matrices]}
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload))


def load_similarity(path) -> list[SimilarityMatrix]:
    return [similarity_from_dict(d) for d in json.loads(Path(path).read_text())["matrices"]]

