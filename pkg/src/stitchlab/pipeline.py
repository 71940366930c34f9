"""Pipeline stages over a run directory.

Each stage reads earlier artifacts through a ``RunStore`` and writes its own
as JSON wrapped in an envelope that records the sha256 of every input file.
Reading an artifact re-hashes its inputs (transitively), so anything built
from an older upstream file is reported as stale instead of silently reused.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stitchlab.anchors import (
    StageSpec,
    accuracy,
    anchor_from_dict,
    anchor_to_dict,
    block_activations,
    build_anchor,
    flops,
    train_anchor,
)
from stitchlab.config import ExperimentConfig, config_digest, dump_config
from stitchlab.data import Dataset, gen_blobs, gen_spirals, load_idx, split
from stitchlab.errors import (
    InvalidInputError,
    MissingArtifactError,
    StaleArtifactError,
    UndefinedCorrelationError,
)
from stitchlab.evaluation import (
    ParetoPoint,
    auc,
    correlation_study,
    global_bounds,
    overlap,
    pareto_front,
    summarize,
    write_report,
)
from stitchlab.probenet import (
    all_probe_distributions,
    export_trace_csv,
    probeset_from_dict,
    probeset_to_dict,
    train_probeset,
)
from stitchlab.selection import (
    PlanEntry,
    StitchPlan,
    cascade_operating_points,
    config_from_dict,
    config_to_dict,
    enumerate_configs,
    klas_plan,
    minkl_baseline,
    plan_from_dict,
    plan_to_dict,
    rank_anchor_pairs,
    score_configs,
    snnet_baseline,
    trim_plan,
)
from stitchlab.similarity import (
    IntraCapacity,
    baseline_metric,
    export_heatmap,
    intra_capacity,
    shuffled_probeset,
    similarity_from_dict,
    similarity_matrices,
    similarity_to_dict,
    theta,
)
from stitchlab.stitching import (
    StitchResult,
    evaluate_stitched,
    export_results_csv,
    finetune_supernet,
    init_supernet,
    supernet_from_dict,
    supernet_to_dict,
)

ENVELOPE_VERSION = 1

# artifact name -> stage that produces it (for actionable errors)
PRODUCERS = {
    "config": "any stage",
    "data": "gen-data",
    "anchors": "train-anchors",
    "probes": "train-probes",
    "similarity": "similarity",
    "plans": "select",
    "stitches": "init-stitches",
    "finetuned": "finetune",
    "results": "evaluate",
    "oracle": "oracle",
}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunStore:
    """Artifact I/O for one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / f"{name}.json"

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def digest(self, name: str) -> str:
        return file_digest(self.path(name))

    def write(self, name: str, payload: dict, inputs) -> Path:
        envelope = {
            "artifact": name,
            "envelope_version": ENVELOPE_VERSION,
            "inputs": {i: self.digest(i) for i in sorted(inputs)},
            "payload": payload,
        }
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(envelope, sort_keys=True))
        return p

    def _load(self, name: str) -> dict:
        p = self.path(name)
        if not p.exists():
            stage = PRODUCERS.get(name.split("/")[0], "an earlier stage")
            raise MissingArtifactError(f"missing artifact {p}; run the '{stage}' stage first")
        return json.loads(p.read_text())

    def check(self, name: str, _seen=None) -> None:
        """Raise StaleArtifactError if any transitive input changed since ``name`` was written."""
        seen = set() if _seen is None else _seen
        if name in seen:
            return
        seen.add(name)
        for dep, recorded in self._load(name).get("inputs", {}).items():
            if not self.exists(dep):
                raise MissingArtifactError(
                    f"{name} depends on {self.path(dep)}, which is gone; rerun "
                    f"'{PRODUCERS.get(dep.split('/')[0], 'an earlier stage')}'")
            if self.digest(dep) != recorded:
                raise StaleArtifactError(
                    f"{self.path(name)} was built from a different {dep} "
                    f"(recorded {recorded[:12]}, found {self.digest(dep)[:12]}); "
                    f"rerun the stages after '{PRODUCERS.get(dep.split('/')[0], dep)}'")
            self.check(dep, seen)

    def read(self, name: str) -> dict:
        self.check(name)
        return self._load(name)["payload"]


# -- context --------------------------------------------------------------------------

@dataclass
class RunContext:
    cfg: ExperimentConfig
    store: RunStore

    @property
    def root(self) -> Path:
        return self.store.root


def open_run(cfg: ExperimentConfig, out_dir=None) -> RunContext:
    """Run directory ``<out>/<config digest prefix>``; writes the resolved config."""
    root = Path(out_dir or cfg.output_dir) / config_digest(cfg)[:16]
    root.mkdir(parents=True, exist_ok=True)
    store = RunStore(root)
    text = dump_config(cfg)
    p = store.path("config")
    if not p.exists() or p.read_text() != text:
        p.write_text(text)
    return RunContext(cfg, store)


def _anchor_name(aid: str) -> str:
    return f"anchors/{aid}"


def _probe_name(aid: str) -> str:
    return f"probes/{aid}"


# -- stages ---------------------------------------------------------------------------

def make_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "blobs":
        return gen_blobs(d.num_classes, d.per_class, d.input_dim, d.spread, d.seed, d.modes_per_class)
    if d.kind == "spirals":
        return gen_spirals(d.num_classes, d.per_class, d.noise, d.seed)
    return load_idx(d.images, d.labels, d.num_classes)


def stage_gen_data(ctx: RunContext) -> Path:
    full = make_dataset(ctx.cfg)
    tr, va, te = split(full, tuple(ctx.cfg.dataset.fractions), ctx.cfg.dataset.seed)
    payload = {"full_digest": full.digest(), "train": tr.to_dict(), "val": va.to_dict(),
               "test": te.to_dict()}
    return ctx.store.write("data", payload, ["config"])


def load_data(ctx: RunContext) -> tuple[Dataset, Dataset, Dataset]:
    d = ctx.store.read("data")
    return Dataset.from_dict(d["train"]), Dataset.from_dict(d["val"]), Dataset.from_dict(d["test"])


def stage_train_anchors(ctx: RunContext) -> list[Path]:
    tr, _, te = load_data(ctx)
    b = ctx.cfg.training.anchor
    out = []
    for spec in ctx.cfg.anchors:
        a = build_anchor(spec.id, tr.input_dim, tr.num_classes,
                         [StageSpec(h, n) for h, n in spec.stages], spec.seed)
        a, trace = train_anchor(a, tr, b.epochs, b.lr, b.batch_size, spec.train_seed)
        a = a.freeze()
        a.dataset_digest = tr.digest()
        payload = {"model": anchor_to_dict(a), "loss_trace": trace,
                   "test_accuracy": accuracy(a, te), "flops": flops(a)}
        out.append(ctx.store.write(_anchor_name(spec.id), payload, ["data"]))
    return out


def load_anchor_artifact(ctx: RunContext, aid: str):
    return anchor_from_dict(ctx.store.read(_anchor_name(aid))["model"])


def load_anchors(ctx: RunContext) -> dict:
    return {s.id: load_anchor_artifact(ctx, s.id) for s in ctx.cfg.anchors}


def stage_train_probes(ctx: RunContext) -> list[Path]:
    tr, va, _ = load_data(ctx)
    b = ctx.cfg.training.probe
    out = []
    for spec in ctx.cfg.anchors:
        a = load_anchor_artifact(ctx, spec.id)
        ps = train_probeset(a, tr, b.epochs, b.lr, b.batch_size, spec.probe_seed, val=va)
        name = _probe_name(spec.id)
        out.append(ctx.store.write(name, probeset_to_dict(ps), ["data", _anchor_name(spec.id)]))
        export_trace_csv(ps, ctx.root / "probes" / f"{spec.id}_trace.csv")
    return out


def stage_similarity(ctx: RunContext) -> Path:
    """Rank anchor pairs by last-block KL, then Theta matrices and Sigma for the best pair."""
    _, va, _ = load_data(ctx)
    anchors = load_anchors(ctx)
    probes = {aid: probeset_from_dict(ctx.store.read(_probe_name(aid))) for aid in anchors}
    ranking = rank_anchor_pairs(list(anchors.values()), va)
    if not ranking:
        raise InvalidInputError("no anchor pair with distinct FLOPs")
    _, fid, gid = ranking[0]
    f, g = anchors[fid], anchors[gid]
    mats = similarity_matrices(f, probes[fid], g, probes[gid], va)
    cap = intra_capacity(g, probes[gid], va)
    (ctx.root / "heatmaps").mkdir(exist_ok=True)
    for m in mats:
        export_heatmap(m, ctx.root / "heatmaps" / f"{fid}_{gid}_stage{m.stage}.csv")
    payload = {"ranking": [list(r) for r in ranking], "source": fid, "target": gid,
               "matrices": [similarity_to_dict(m) for m in mats],
               "capacity": {"anchor_id": cap.anchor_id, "sigma": cap.sigma.tolist()}}
    inputs = ["data"] + [_anchor_name(a) for a in anchors] + [_probe_name(a) for a in anchors]
    return ctx.store.write("similarity", payload, inputs)


@dataclass
class PairInfo:
    f: object
    g: object
    matrices: list
    capacity: IntraCapacity
    inputs: list


def load_pair(ctx: RunContext) -> PairInfo:
    s = ctx.store.read("similarity")
    f = load_anchor_artifact(ctx, s["source"])
    g = load_anchor_artifact(ctx, s["target"])
    mats = [similarity_from_dict(m) for m in s["matrices"]]
    cap = IntraCapacity(s["capacity"]["anchor_id"], np.asarray(s["capacity"]["sigma"]))
    return PairInfo(f, g, mats, cap, ["similarity", _anchor_name(f.id), _anchor_name(g.id)])


def plan_name(method: str, suffix: str = "") -> str:
    return f"plans/{method}{suffix}"


def build_plan(ctx: RunContext, pair: PairInfo, method: str, tau=None, num_buckets=None) -> StitchPlan:
    sel = ctx.cfg.selection
    tau = sel.tau if tau is None else tau
    nb = sel.num_buckets if num_buckets is None else num_buckets
    scores = score_configs(enumerate_configs(pair.f, pair.g), pair.matrices, pair.capacity)
    if method == "klas":
        return klas_plan(pair.f, pair.g, pair.matrices, pair.capacity, tau, nb, sel.relative_tau)
    klas_size = len(plan_from_dict(ctx.store.read(plan_name("klas"))))
    if method == "snnet":
        full = snnet_baseline([pair.f, pair.g], sel.snnet_mode, scores)
        # equal selected-set size: the larger of the two plans is trimmed by priority
        return trim_plan(full, min(klas_size, len(full)))
    k = sel.minkl_k if sel.minkl_k is not None else klas_size
    return minkl_baseline(pair.matrices, k, pair.f, pair.g, scores)


def stage_select(ctx: RunContext, method: str, tau=None, num_buckets=None) -> Path:
    pair = load_pair(ctx)
    plan = build_plan(ctx, pair, method, tau, num_buckets)
    inputs = list(pair.inputs) + ([plan_name("klas")] if method != "klas" else [])
    return ctx.store.write(plan_name(method), plan_to_dict(plan), inputs)


def load_plan_artifact(ctx: RunContext, method: str) -> StitchPlan:
    return plan_from_dict(ctx.store.read(plan_name(method)))


def stage_init_stitches(ctx: RunContext, method: str) -> Path:
    _, va, _ = load_data(ctx)
    pair = load_pair(ctx)
    plan = load_plan_artifact(ctx, method)
    net = init_supernet(pair.f, pair.g, plan, va, ctx.cfg.training.init_rows)
    return ctx.store.write(f"stitches/{method}", supernet_to_dict(net),
                           ["data", plan_name(method), *pair.inputs[1:]])


def stage_finetune(ctx: RunContext, method: str) -> Path:
    tr, _, _ = load_data(ctx)
    pair = load_pair(ctx)
    net = supernet_from_dict(ctx.store.read(f"stitches/{method}"), pair.f, pair.g)
    b = ctx.cfg.training.stitch
    net, traces = finetune_supernet(net, tr, b.epochs, b.lr, b.batch_size, ctx.cfg.training.stitch_seed)
    payload = supernet_to_dict(net)
    payload["final_loss"] = {c.key: (t[-1] if t else None) for c, t in traces.items()}
    return ctx.store.write(f"finetuned/{method}", payload, ["data", f"stitches/{method}"])


def oracle_accuracies(ctx: RunContext) -> dict:
    """config key -> accuracy of that configuration trained on its own."""
    return {r["key"]: r["accuracy"] for r in ctx.store.read("oracle")["rows"]}


def stage_evaluate(ctx: RunContext, method: str) -> Path:
    """Test accuracy of every configuration in the plan (per the configured accuracy source)."""
    _, _, te = load_data(ctx)
    plan = load_plan_artifact(ctx, method)
    mode = ctx.cfg.evaluation.plan_accuracy
    if mode == "supernet":
        pair = load_pair(ctx)
        net = supernet_from_dict(ctx.store.read(f"finetuned/{method}"), pair.f, pair.g)
        rows = [{"config": config_to_dict(r.config), "key": r.config.key, "flops": r.flops,
                 "accuracy": r.accuracy} for r in evaluate_stitched(net, te)]
        inputs = ["data", plan_name(method), f"finetuned/{method}"]
    else:
        accs = oracle_accuracies(ctx)
        missing = [c.key for c in plan.configs if c.key not in accs]
        if missing:
            raise InvalidInputError(f"oracle has no accuracy for {missing[:3]}; "
                                    "use evaluation.plan_accuracy = supernet")
        rows = [{"config": config_to_dict(c), "key": c.key, "flops": c.flops, "accuracy": accs[c.key]}
                for c in sorted(plan.configs, key=lambda c: (c.flops, c.i, c.j))]
        inputs = [plan_name(method), "oracle"]
    out = ctx.store.write(f"results/{method}", {"method": method, "source": mode, "rows": rows},
                          inputs)
    export_results_csv([StitchResult(config_from_dict(r["config"]), r["flops"], r["accuracy"])
                        for r in rows], ctx.root / "results" / f"{method}.csv")
    return out


def stage_oracle(ctx: RunContext) -> Path:
    """Train every configuration of the selected pair on its own and record test accuracy.

    Also stores the per-configuration comparison metrics used by the
    correlation study.
    """
    tr, va, te = load_data(ctx)
    pair = load_pair(ctx)
    f, g = pair.f, pair.g
    configs = enumerate_configs(f, g)
    scores = score_configs(configs, pair.matrices, pair.capacity)
    probes_f = probeset_from_dict(ctx.store.read(_probe_name(f.id)))
    pf = all_probe_distributions(probes_f, f, va.inputs)
    src_val, tgt_val = block_activations(f, va.inputs), block_activations(g, va.inputs)
    # label-shuffled probes: the control for how much of theta is label signal
    pb = ctx.cfg.training.probe
    spec = {a.id: a for a in ctx.cfg.anchors}
    shuffled = {a.id: all_probe_distributions(
        shuffled_probeset(a, tr, spec[a.id].probe_seed, epochs=pb.epochs, lr=pb.lr,
                          batch_size=pb.batch_size), a, va.inputs) for a in (f, g)}
    b = ctx.cfg.training.stitch
    rows = []
    for c in configs:
        single = StitchPlan("snnet", [PlanEntry(c, *scores[c], priority=0)])
        net = init_supernet(f, g, single, va, ctx.cfg.training.init_rows)
        net, _ = finetune_supernet(net, tr, b.epochs, b.lr, b.batch_size, ctx.cfg.training.stitch_seed)
        acc = evaluate_stitched(net, te)[0].accuracy
        gamma, omega, sigma = scores[c]
        metrics = {"gamma": gamma, "theta": omega,
                   "cka": baseline_metric("cka", src_val[c.i], tgt_val[c.j]),
                   "dm": baseline_metric("dm", src_val[c.i], tgt_val[c.j]),
                   "ce": baseline_metric("ce", pf[c.i], labels=va.labels),
                   "shuffled_kl": theta(shuffled[f.id][c.i], shuffled[g.id][c.j])}
        if src_val[c.i].shape == tgt_val[c.j].shape:
            metrics["mse"] = baseline_metric("mse", src_val[c.i], tgt_val[c.j])
        rows.append({"config": config_to_dict(c), "key": c.key, "flops": c.flops,
                     "accuracy": acc, "sigma": sigma, "metrics": metrics})
    payload = {"source": f.id, "target": g.id, "source_accuracy": accuracy(f, te),
               "target_accuracy": accuracy(g, te), "rows": rows}
    return ctx.store.write("oracle", payload, ["data", _probe_name(f.id), *pair.inputs])


# -- analysis -------------------------------------------------------------------------

def _points(rows) -> list[ParetoPoint]:
    return [ParetoPoint(r["key"], float(r["flops"]), float(r["accuracy"])) for r in rows]


def nearest_cascade(flops_value: float, cascade):
    return min(cascade, key=lambda cp: (abs(cp.flops - flops_value), cp.flops))


def dominance_count(points, cascade) -> int:
    """How many points weakly dominate the cascade operating point nearest in FLOPs."""
    n = 0
    for p in points:
        cp = nearest_cascade(p.flops, cascade)
        n += p.flops <= cp.flops and p.accuracy >= cp.accuracy
    return n


def stage_report(ctx: RunContext) -> dict:
    """Curves, AUCs, correlations and overlaps for the compared methods."""
    _, _, te = load_data(ctx)
    pair = load_pair(ctx)
    methods = ctx.cfg.evaluation.compare
    results = {m: ctx.store.read(f"results/{m}") for m in methods}
    plans = {m: load_plan_artifact(ctx, m) for m in methods}
    oracle = ctx.store.read("oracle")

    pts = {m: _points(results[m]["rows"]) for m in methods}
    if "snnet" in methods and len(plans["snnet"]) < len(plans["klas"]):
        keep = {c.key for c in trim_plan(plans["klas"], len(plans["snnet"])).configs}
        pts["klas_eq"] = [p for p in pts["klas"] if p.config_id in keep]
    lo, hi = global_bounds(*pts.values())
    curves = []
    for m, ps in pts.items():
        cs = summarize(m, ps, lo, hi) if len(ps) >= 2 else None
        if cs is None:
            raise InvalidInputError(f"method {m} has fewer than two stitched points")
        cs.meta["plan_size"] = len(ps)
        curves.append(cs)

    cascade = cascade_operating_points(pair.f, pair.g, ctx.cfg.selection.cascade_thresholds, te)
    cpts = [ParetoPoint(f"t={cp.threshold:g}", cp.flops, cp.accuracy) for cp in cascade]
    cs = summarize("cascade", cpts, lo, hi) if len(cpts) >= 2 else None
    if cs is not None:
        curves.append(cs)

    ta = oracle["target_accuracy"]
    orows = oracle["rows"]
    names = sorted({k for r in orows for k in r["metrics"]})
    metric_scores = {n: [r["metrics"][n] for r in orows] for n in names
                     if all(n in r["metrics"] for r in orows)}
    try:
        correlations = correlation_study(metric_scores, [r["accuracy"] for r in orows], ta)
    except UndefinedCorrelationError:
        correlations = {}
        for n, s in metric_scores.items():
            try:
                correlations.update(correlation_study({n: s}, [r["accuracy"] for r in orows], ta))
            except UndefinedCorrelationError:
                correlations[n] = (math.nan, math.nan)

    front = {p.config_id for p in pareto_front(_points(orows))}
    overlaps = [(m, "oracle_front", overlap({c.key for c in plans[m].configs}, front)) for m in methods]

    aucs = {c.method: c.auc for c in curves}
    eq = "klas_eq" if "klas_eq" in aucs else "klas"
    checks = {
        "spearman_gamma": correlations.get("gamma", (math.nan, math.nan))[1],
        "klas_vs_snnet_equal_size": (aucs[eq] - aucs["snnet"]) if "snnet" in aucs else None,
        "klas_vs_minkl": (aucs["klas"] - aucs["minkl"]) if "minkl" in aucs else None,
        "cascade_dominated": dominance_count(pts["klas"], cascade),
        "klas_points": len(pts["klas"]),
    }
    inputs = {n: ctx.store.digest(n) for n in
              ["data", "similarity", "oracle"] + [f"results/{m}" for m in methods]
              + [plan_name(m) for m in methods]}
    meta = {"inputs": inputs, "flops_bounds": [lo, hi], "checks": checks,
            "source": pair.f.id, "target": pair.g.id,
            "source_accuracy": oracle["source_accuracy"], "target_accuracy": ta,
            "accuracy_source": results["klas"]["source"]}
    write_report(curves, ctx.root / "report", correlations, overlaps, meta)
    return checks


def run_ablation(ctx: RunContext, kind: str) -> Path:
    """KLAS plans over a sweep of tau or bucket counts, scored with oracle accuracies."""
    pair = load_pair(ctx)
    accs = oracle_accuracies(ctx)
    values = ctx.cfg.evaluation.ablate_taus if kind == "tau" else ctx.cfg.evaluation.ablate_buckets
    plans = []
    for v in values:
        plan = build_plan(ctx, pair, "klas", tau=v if kind == "tau" else None,
                          num_buckets=v if kind == "buckets" else None)
        suffix = f"_tau{v:g}" if kind == "tau" else f"_b{v}"
        ctx.store.write(plan_name("klas", suffix), plan_to_dict(plan), pair.inputs)
        plans.append((v, plan))
    lo = min(c.flops for c in enumerate_configs(pair.f, pair.g))
    hi = max(c.flops for c in enumerate_configs(pair.f, pair.g))
    out = ctx.root / f"ablate_{kind}.csv"
    with open(out, "w") as fh:
        fh.write(f"{kind},num_selected,auc\n")
        for v, plan in plans:
            ps = [ParetoPoint(c.key, c.flops, accs[c.key]) for c in plan.configs]
            a = auc(ps, lo, hi) if len(ps) >= 2 else math.nan
            fh.write(f"{v:g},{len(plan)},{format(a, '.17g')}\n")
    return out


STAGE_ORDER = ("gen-data", "train-anchors", "train-probes", "similarity", "select",
               "init-stitches", "finetune", "oracle", "evaluate", "report")


def run_all(ctx: RunContext) -> dict:
    """Every stage in order for every compared method, then the report."""
    stage_gen_data(ctx)
    stage_train_anchors(ctx)
    stage_train_probes(ctx)
    stage_similarity(ctx)
    methods = ctx.cfg.evaluation.compare
    for m in ["klas"] + [m for m in methods if m != "klas"]:
        stage_select(ctx, m)
    if ctx.cfg.evaluation.plan_accuracy == "supernet":
        for m in methods:
            stage_init_stitches(ctx, m)
            stage_finetune(ctx, m)
    stage_oracle(ctx)
    for m in methods:
        stage_evaluate(ctx, m)
    return stage_report(ctx)


def study_row(seed: int, checks: dict) -> dict:
    """Pass/fail of the directional checks for one seed."""
    return {
        "seed": seed,
        "spearman_gamma": checks["spearman_gamma"],
        "spearman_ok": bool(checks["spearman_gamma"] >= 0.3),
        "snnet_ok": bool(checks["klas_vs_snnet_equal_size"] >= 0),
        "minkl_ok": bool(checks["klas_vs_minkl"] >= 0),
        "cascade_ok": bool(checks["cascade_dominated"] == checks["klas_points"]),
        "delta_auc_snnet": checks["klas_vs_snnet_equal_size"],
        "delta_auc_minkl": checks["klas_vs_minkl"],
        "cascade_dominated": checks["cascade_dominated"],
        "klas_points": checks["klas_points"],
    }
