"""Stitch scoring and selection: KLAS plus nearest-anchor proportional, Min-KL and cascade baselines.

A stitch configuration ``(i, j)`` feeds the output of source block ``i`` through
an affine stitch layer into the target after block ``j`` (0-based, inclusive
prefix), producing ``g_{>j} . T . f_{<=i}``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stitchlab.anchors import AnchorModel, flops, forward, stitched_flops
from stitchlab.data import Dataset
from stitchlab.errors import FormatError, InvalidInputError
from stitchlab.similarity import (
    IntraCapacity,
    SimilarityMatrix,
    check_direction,
    intra_capacity,
    last_block_kl,
    shared_stages,
    similarity_matrices,
)

DELTA = 1e-9
PLAN_FORMAT = "stitchlab.plan"
METHODS = ("klas", "snnet", "minkl")


@dataclass(frozen=True, order=True)
class StitchConfig:
    source_id: str
    target_id: str
    stage: int
    i: int
    j: int
    flops: int

    @property
    def key(self) -> str:
        return f"{self.source_id}:{self.i}->{self.target_id}:{self.j}"


def enumerate_configs(f: AnchorModel, g: AnchorModel) -> list[StitchConfig]:
    """Every same-stage configuration between a cheaper source and a target."""
    check_direction(f, g)
    out = []
    for stage in shared_stages(f, g):
        for i in f.stage_blocks(stage):
            for j in g.stage_blocks(stage):
                out.append(StitchConfig(f.id, g.id, stage, i, j, stitched_flops(f, g, i, j)))
    return out


def make_config(f: AnchorModel, g: AnchorModel, i: int, j: int) -> StitchConfig:
    check_direction(f, g)
    if f.stage_of_block(i) != g.stage_of_block(j):
        raise InvalidInputError(f"blocks {i} and {j} are in different stages")
    return StitchConfig(f.id, g.id, f.stage_of_block(i), i, j, stitched_flops(f, g, i, j))


# -- stitch score ---------------------------------------------------------------------

def gamma_ratio(omega: float, sigma: float, delta: float = DELTA) -> float:
    return omega / max(sigma, delta)


def _find_matrix(matrices, i: int, j: int) -> SimilarityMatrix:
    if isinstance(matrices, SimilarityMatrix):
        matrices = [matrices]
    for m in matrices:
        if (i, j) in m:
            return m
    raise InvalidInputError(f"no same-stage similarity entry for ({i}, {j})")


def stitch_score(matrices, capacity: IntraCapacity, i: int, j: int) -> tuple[float, float, float]:
    """``(gamma, omega, sigma)`` for configuration ``(i, j)``.

    The last target block has no successor; its sigma is the anchor's mean sigma.
    """
    omega = _find_matrix(matrices, i, j).value(i, j)
    depth = len(capacity.sigma) + 1
    if not 0 <= j < depth:
        raise InvalidInputError(f"target block {j} out of range")
    sigma = float(capacity.sigma[j]) if j + 1 < depth else capacity.mean()
    return gamma_ratio(omega, sigma), omega, sigma


# -- buckets and candidate selection ----------------------------------------------------

@dataclass
class Bucket:
    lo: float
    hi: float
    configs: list[StitchConfig]


def build_buckets(configs, num_buckets: int) -> list[Bucket]:
    """Equal-width FLOPs intervals ``[lo, hi)`` over [min, max]; the last is closed."""
    if num_buckets < 1:
        raise InvalidInputError("num_buckets must be >= 1")
    configs = list(configs)
    if not configs:
        raise InvalidInputError("no configurations to bucket")
    lo = min(c.flops for c in configs)
    hi = max(c.flops for c in configs)
    span = hi - lo
    members = [[] for _ in range(num_buckets)]
    for c in configs:
        k = 0 if span == 0 else min((c.flops - lo) * num_buckets // span, num_buckets - 1)
        members[k].append(c)
    width = span / num_buckets
    return [Bucket(lo + k * width, lo + (k + 1) * width if k < num_buckets - 1 else hi,
                   sorted(m, key=lambda c: (c.flops, c.i, c.j, c.source_id)))
            for k, m in enumerate(members)]


def _tie_key(c: StitchConfig, score: float):
    return (score, c.flops, c.i, c.j, c.source_id, c.target_id)


def select_candidates(buckets: list[Bucket], gammas: dict, tau: float = 0.05,
                      relative: bool = True, cover_targets=None) -> list[StitchConfig]:
    """Per bucket: the argmin-Gamma config plus everything within the threshold.

    With ``relative`` the cutoff is ``(1 + tau) * min`` inside each bucket,
    otherwise ``tau`` is an absolute Gamma bound. ``cover_targets`` lists
    ``(target_id, j)`` blocks that must each end up with a configuration; any
    uncovered one gets its min-Gamma configuration added.
    """
    if not any(b.configs for b in buckets):
        raise InvalidInputError("empty configuration set")
    if tau < 0:
        raise InvalidInputError("tau must be non-negative")
    chosen = set()
    for b in buckets:
        if not b.configs:
            continue
        best = min(b.configs, key=lambda c: _tie_key(c, gammas[c]))
        cutoff = (1.0 + tau) * gammas[best] if relative else tau
        chosen.add(best)
        chosen.update(c for c in b.configs if gammas[c] <= cutoff)
    if cover_targets:
        everything = [c for b in buckets for c in b.configs]
        for tid, j in cover_targets:
            if any(c.target_id == tid and c.j == j for c in chosen):
                continue
            pool = [c for c in everything if c.target_id == tid and c.j == j]
            if pool:
                chosen.add(min(pool, key=lambda c: _tie_key(c, gammas[c])))
    return sorted(chosen, key=lambda c: (c.flops, c.i, c.j, c.source_id, c.target_id))


# -- plans ----------------------------------------------------------------------------

@dataclass
class PlanEntry:
    config: StitchConfig
    gamma: float | None = None
    omega: float | None = None
    sigma: float | None = None
    priority: int = 0  # lower survives longer under trim_plan


@dataclass
class StitchPlan:
    method: str
    entries: list[PlanEntry]
    tau: float | None = None
    relative_tau: bool = True
    buckets: list[tuple[float, float, int]] = field(default_factory=list)
    # (target_id, j) pairs that must be covered; checked on construction
    cover_targets: list[tuple[str, int]] = field(default_factory=list)
    anchor_digests: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        keys = [e.config for e in self.entries]
        if len(set(keys)) != len(keys):
            raise InvalidInputError("duplicate configuration in plan")
        for e in self.entries:
            if e.config.stage < 0:
                raise InvalidInputError("bad stage")
        covered = {(e.config.target_id, e.config.j) for e in self.entries}
        missing = [t for t in map(tuple, self.cover_targets) if t not in covered]
        if missing:
            raise InvalidInputError(f"plan leaves target blocks uncovered: {missing}")

    @property
    def configs(self) -> list[StitchConfig]:
        return [e.config for e in self.entries]

    def __len__(self):
        return len(self.entries)


def score_configs(configs, matrices, capacity: IntraCapacity) -> dict:
    return {c: stitch_score(matrices, capacity, c.i, c.j) for c in configs}


def _anchor_digests(*anchors) -> dict:
    return {a.id: a.digest() for a in anchors}


def klas_plan(f: AnchorModel, g: AnchorModel, matrices, capacity: IntraCapacity,
              tau: float = 0.05, num_buckets: int | None = None, relative: bool = True) -> StitchPlan:
    """Gamma scoring and bucketed candidate selection for a fixed anchor pair."""
    configs = enumerate_configs(f, g)
    scores = score_configs(configs, matrices, capacity)
    gammas = {c: s[0] for c, s in scores.items()}
    nb = g.depth if num_buckets is None else num_buckets
    buckets = build_buckets(configs, nb)
    targets = sorted({(c.target_id, c.j) for c in configs})
    chosen = select_candidates(buckets, gammas, tau, relative, cover_targets=targets)

    argmins = set()
    for b in buckets:
        if b.configs:
            argmins.add(min(b.configs, key=lambda c: _tie_key(c, gammas[c])))
    ordered = sorted(chosen, key=lambda c: (c not in argmins, _tie_key(c, gammas[c])))
    rank = {c: r for r, c in enumerate(ordered)}
    entries = [PlanEntry(c, *scores[c], priority=rank[c]) for c in chosen]
    return StitchPlan("klas", entries, tau, relative,
                      [(b.lo, b.hi, len(b.configs)) for b in buckets], targets,
                      _anchor_digests(f, g), {"num_buckets": nb})


def rank_anchor_pairs(anchors, val: Dataset) -> list[tuple[float, str, str]]:
    """Directed last-block KL (cheaper anchor as p) for every valid pair, ascending."""
    out = []
    for f in anchors:
        for g in anchors:
            if flops(f) < flops(g):
                out.append((last_block_kl(f, g, val), f.id, g.id))
    return sorted(out)


def klas(anchors, probesets: dict, val: Dataset, tau: float = 0.05,
         num_buckets: int | None = None, relative: bool = True) -> StitchPlan:
    """Pick the anchor pair with the lowest last-block KL, then select stitches."""
    anchors = list(anchors)
    if len(anchors) < 2:
        raise InvalidInputError("KLAS needs at least two anchors")
    ranking = rank_anchor_pairs(anchors, val)
    if not ranking:
        raise InvalidInputError("no anchor pair with distinct FLOPs")
    _, fid, gid = ranking[0]
    by_id = {a.id: a for a in anchors}
    f, g = by_id[fid], by_id[gid]
    matrices = similarity_matrices(f, probesets[fid], g, probesets[gid], val)
    capacity = intra_capacity(g, probesets[gid], val)
    plan = klas_plan(f, g, matrices, capacity, tau, num_buckets, relative)
    plan.meta["anchor_ranking"] = [list(r) for r in ranking]
    return plan


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def snnet_configs(f: AnchorModel, g: AnchorModel, mode: str = "paired") -> list[tuple[StitchConfig, int]]:
    """Proportional block mapping per shared stage; ``unpaired`` adds a +-1 window.

    Returns ``(config, distance from the paired index)`` pairs.
    """
    if mode not in ("paired", "unpaired"):
        raise InvalidInputError(f"unknown snnet mode {mode!r}")
    out = {}
    for stage in shared_stages(f, g):
        sb, tb = f.stage_blocks(stage), g.stage_blocks(stage)
        for k, i in enumerate(sb, start=1):
            # k source blocks of the stage map to round(k * ratio) target blocks
            paired = min(max(_round_half_up(k * len(tb) / len(sb)), 1), len(tb)) - 1
            window = (0,) if mode == "paired" else (0, -1, 1)
            for d in window:
                jj = paired + d
                if 0 <= jj < len(tb):
                    c = make_config(f, g, i, tb[jj])
                    out[c] = min(out.get(c, 9), abs(d))
    return sorted(out.items(), key=lambda kv: (kv[1], kv[0].flops, kv[0].i, kv[0].j))


def snnet_baseline(anchors, mode: str = "paired", scores: dict | None = None) -> StitchPlan:
    """Nearest stitching: adjacent anchors by FLOPs, proportional block mapping."""
    chain = sorted(anchors, key=lambda a: (flops(a), a.id))
    entries, pos = [], 0
    for f, g in zip(chain, chain[1:]):
        if flops(f) == flops(g):
            continue
        for c, _ in snnet_configs(f, g, mode):
            s = (scores or {}).get(c, (None, None, None))
            entries.append(PlanEntry(c, *s, priority=pos))
            pos += 1
    return StitchPlan("snnet", entries, meta={"mode": mode},
                      anchor_digests=_anchor_digests(*chain))


def minkl_baseline(matrices, k: int, f: AnchorModel, g: AnchorModel,
                   scores: dict | None = None) -> StitchPlan:
    """The ``k`` configurations with the smallest theta, ignoring buckets and sigma."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if isinstance(matrices, SimilarityMatrix):
        matrices = [matrices]
    cands = []
    for m in matrices:
        for a, i in enumerate(m.source_blocks):
            for b, j in enumerate(m.target_blocks):
                cands.append((float(m.theta[a, b]), make_config(f, g, i, j)))
    if k > len(cands):
        warnings.warn(f"minkl k={k} exceeds {len(cands)} configurations; clamping", stacklevel=2)
        k = len(cands)
    cands.sort(key=lambda t: _tie_key(t[1], t[0]))
    entries = []
    for r, (th, c) in enumerate(cands[:k]):
        s = (scores or {}).get(c)
        entries.append(PlanEntry(c, s[0] if s else None, th, s[2] if s else None, priority=r))
    return StitchPlan("minkl", entries, meta={"k": k}, anchor_digests=_anchor_digests(f, g))


def trim_plan(plan: StitchPlan, k: int) -> StitchPlan:
    """Keep the ``k`` highest-priority entries (coverage is not re-checked)."""
    keep = sorted(plan.entries, key=lambda e: (e.priority, e.config))[:k]
    meta = dict(plan.meta, trimmed_from=len(plan))
    return StitchPlan(plan.method, keep, plan.tau, plan.relative_tau, plan.buckets, [],
                      plan.anchor_digests, meta)


# -- cascades -------------------------------------------------------------------------

@dataclass(frozen=True)
class CascadePoint:
    threshold: float
    flops: float
    accuracy: float
    routed_fraction: float


def cascade_operating_points(small: AnchorModel, big: AnchorModel, thresholds,
                             eval_set: Dataset) -> list[CascadePoint]:
    """Route a sample to ``big`` iff the small model's max softmax is below ``t``."""
    if len(eval_set) == 0:
        raise InvalidInputError("empty evaluation set")
    ps = forward(small, eval_set.inputs)
    pb = forward(big, eval_set.inputs)
    conf = ps.max(axis=1)
    pred_s, pred_b = ps.argmax(axis=1), pb.argmax(axis=1)
    out = []
    for t in thresholds:
        if not 0 < t <= 1:
            raise InvalidInputError(f"threshold {t} outside (0, 1]")
        routed = conf < t
        pred = np.where(routed, pred_b, pred_s)
        frac = float(routed.mean())
        out.append(CascadePoint(float(t), flops(small) + frac * flops(big),
                                float(np.mean(pred == eval_set.labels)), frac))
    return out


# -- persistence ----------------------------------------------------------------------

def config_to_dict(c: StitchConfig) -> dict:
    return {"source_id": c.source_id, "target_id": c.target_id, "stage": c.stage,
            "i": c.i, "j": c.j, "flops": c.flops}


def plan_to_dict(plan: StitchPlan) -> dict:
    return {
        "format": PLAN_FORMAT, "version": 1,
        "method": plan.method, "tau": plan.tau, "relative_tau": plan.relative_tau,
        "buckets": [list(b) for b in plan.buckets],
        "cover_targets": [list(t) for t in plan.cover_targets],
        "anchor_digests": plan.anchor_digests,
        "meta": plan.meta,
        "configs": [dict(config_to_dict(e.config), gamma=e.gamma, omega=e.omega,
                         sigma=e.sigma, priority=e.priority)
                    for e in sorted(plan.entries, key=lambda e: e.config.key)],
    }


def config_from_dict(d: dict) -> StitchConfig:
    return StitchConfig(d["source_id"], d["target_id"], d["stage"], d["i"], d["j"], d["flops"])


def plan_from_dict(d: dict) -> StitchPlan:
    if d.get("format") != PLAN_FORMAT:
        raise FormatError("not a stitchlab plan file", field="format")
    entries = [PlanEntry(config_from_dict(c), c["gamma"], c["omega"], c["sigma"], c["priority"])
               for c in d["configs"]]
    return StitchPlan(d["method"], entries, d["tau"], d["relative_tau"],
                      [tuple(b) for b in d["buckets"]],
                      [tuple(t) for t in d["cover_targets"]], d["anchor_digests"], d["meta"])


def save_plan(plan: StitchPlan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=1))


def load_plan(path) -> StitchPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))

