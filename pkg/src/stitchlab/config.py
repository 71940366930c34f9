"""Experiment configuration: a versioned JSON schema with field-level validation.

Every seed used by a run is either given in the file or derived from the
top-level ``seed`` by a fixed rule; ``resolve`` writes them all out so the
resolved config alone pins the run.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from stitchlab.errors import ConfigError

SCHEMA_VERSION = 1
METHODS = ("klas", "snnet", "minkl")


@dataclass
class DatasetSpec:
    kind: str = "blobs"  # blobs | spirals | idx
    num_classes: int = 8
    per_class: int = 250
    input_dim: int = 16
    spread: float = 0.5
    modes_per_class: int = 4
    noise: float = 0.2
    images: str | None = None
    labels: str | None = None
    fractions: list = field(default_factory=lambda: [0.75, 0.125, 0.125])
    seed: int | None = None


@dataclass
class AnchorSpec:
    id: str
    stages: list  # [[hidden_dim, num_blocks], ...]
    seed: int | None = None
    train_seed: int | None = None
    probe_seed: int | None = None


@dataclass
class Budget:
    epochs: int
    lr: float
    batch_size: int = 64


@dataclass
class TrainingSpec:
    anchor: Budget = field(default_factory=lambda: Budget(50, 0.05))
    probe: Budget = field(default_factory=lambda: Budget(30, 0.1))
    stitch: Budget = field(default_factory=lambda: Budget(20, 0.05))
    stitch_seed: int | None = None
    init_rows: int = 512


@dataclass
class SelectionSpec:
    method: str = "klas"
    tau: float = 0.05
    relative_tau: bool = True
    num_buckets: int | None = None  # None: one per target block
    minkl_k: int | None = None  # None: size of the KLAS plan
    snnet_mode: str = "unpaired"
    cascade_thresholds: list = field(
        default_factory=lambda: [0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95])


@dataclass
class EvaluationSpec:
    plan_accuracy: str = "supernet"  # supernet | oracle
    compare: list = field(default_factory=lambda: list(METHODS))
    ablate_taus: list = field(default_factory=lambda: [0.01, 0.05, 0.10])
    ablate_buckets: list = field(default_factory=lambda: [2, 4, 8, 16])


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    anchors: list = field(default_factory=lambda: [
        AnchorSpec("small", [[16, 4]]),
        AnchorSpec("large", [[64, 8]]),
    ])
    training: TrainingSpec = field(default_factory=TrainingSpec)
    selection: SelectionSpec = field(default_factory=SelectionSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


# -- parsing --------------------------------------------------------------------------

def _take(d: dict, cls, path: str):
    """Build dataclass ``cls`` from ``d``, rejecting unknown keys by name."""
    if not isinstance(d, dict):
        raise ConfigError("expected an object", path)
    known = set(cls.__dataclass_fields__)
    for k in d:
        if k not in known:
            raise ConfigError("unknown field", f"{path}.{k}" if path else k)
    return d


def _int(v, path, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"expected an integer, got {v!r}", path)
    if lo is not None and v < lo:
        raise ConfigError(f"must be >= {lo}, got {v}", path)
    return v


def _num(v, path, lo=None, hi=None, strict_lo=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", path)
    v = float(v)
    if lo is not None and (v <= lo if strict_lo else v < lo):
        raise ConfigError(f"must be {'>' if strict_lo else '>='} {lo}, got {v}", path)
    if hi is not None and v > hi:
        raise ConfigError(f"must be <= {hi}, got {v}", path)
    return v


def _seed(v, path):
    if v is None:
        return None
    v = _int(v, path, 0)
    if v >= 2**64:
        raise ConfigError("seed must fit in 64 bits", path)
    return v


def _budget(d, path, default: Budget) -> Budget:
    d = _take(d, Budget, path)
    b = Budget(**{**asdict(default), **d})
    return Budget(_int(b.epochs, f"{path}.epochs", 0), _num(b.lr, f"{path}.lr", 0, strict_lo=True),
                  _int(b.batch_size, f"{path}.batch_size", 1))


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = _take(raw, ExperimentConfig, "")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version!r} (expected {SCHEMA_VERSION})",
                          "schema_version")
    cfg = ExperimentConfig()
    cfg.seed = _seed(raw.get("seed", cfg.seed), "seed")

    ds = DatasetSpec(**_take(raw.get("dataset", {}), DatasetSpec, "dataset"))
    if ds.kind not in ("blobs", "spirals", "idx"):
        raise ConfigError(f"unknown dataset kind {ds.kind!r}", "dataset.kind")
    _int(ds.num_classes, "dataset.num_classes", 2)
    _int(ds.per_class, "dataset.per_class", 1)
    _int(ds.input_dim, "dataset.input_dim", 1)
    _int(ds.modes_per_class, "dataset.modes_per_class", 1)
    _num(ds.spread, "dataset.spread", 0)
    _num(ds.noise, "dataset.noise", 0)
    if ds.kind == "idx" and not (ds.images and ds.labels):
        raise ConfigError("idx datasets need images and labels paths", "dataset.images")
    if (not isinstance(ds.fractions, list) or len(ds.fractions) != 3
            or any(_num(x, "dataset.fractions", 0, strict_lo=True) is None for x in ds.fractions)
            or abs(sum(ds.fractions) - 1.0) > 1e-9):
        raise ConfigError("need three positive fractions summing to 1", "dataset.fractions")
    ds.seed = _seed(ds.seed, "dataset.seed")
    cfg.dataset = ds

    if "anchors" in raw:
        if not isinstance(raw["anchors"], list) or len(raw["anchors"]) < 2:
            raise ConfigError("need a list of at least two anchors", "anchors")
        anchors = []
        for k, a in enumerate(raw["anchors"]):
            p = f"anchors[{k}]"
            a = _take(a, AnchorSpec, p)
            if "id" not in a or not isinstance(a["id"], str) or not a["id"]:
                raise ConfigError("missing anchor id", f"{p}.id")
            if "stages" not in a or not isinstance(a["stages"], list) or not a["stages"]:
                raise ConfigError("need a non-empty stage list", f"{p}.stages")
            for s, st in enumerate(a["stages"]):
                if not isinstance(st, list) or len(st) != 2:
                    raise ConfigError("stage must be [hidden_dim, num_blocks]", f"{p}.stages[{s}]")
                _int(st[0], f"{p}.stages[{s}][0]", 1)
                _int(st[1], f"{p}.stages[{s}][1]", 1)
            spec = AnchorSpec(**a)
            for name in ("seed", "train_seed", "probe_seed"):
                _seed(getattr(spec, name), f"{p}.{name}")
            anchors.append(spec)
        ids = [a.id for a in anchors]
        if len(set(ids)) != len(ids):
            raise ConfigError("anchor ids must be unique", "anchors")
        cfg.anchors = anchors

    tr = _take(raw.get("training", {}), TrainingSpec, "training")
    base = TrainingSpec()
    cfg.training = TrainingSpec(
        anchor=_budget(tr.get("anchor", {}), "training.anchor", base.anchor),
        probe=_budget(tr.get("probe", {}), "training.probe", base.probe),
        stitch=_budget(tr.get("stitch", {}), "training.stitch", base.stitch),
        stitch_seed=_seed(tr.get("stitch_seed"), "training.stitch_seed"),
        init_rows=_int(tr.get("init_rows", base.init_rows), "training.init_rows", 1),
    )

    sel = SelectionSpec(**_take(raw.get("selection", {}), SelectionSpec, "selection"))
    validate_selection(sel.method, sel.tau, sel.num_buckets)
    if sel.minkl_k is not None:
        _int(sel.minkl_k, "selection.minkl_k", 1)
    if sel.snnet_mode not in ("paired", "unpaired"):
        raise ConfigError(f"unknown mode {sel.snnet_mode!r}", "selection.snnet_mode")
    if not isinstance(sel.relative_tau, bool):
        raise ConfigError("expected true/false", "selection.relative_tau")
    if not sel.cascade_thresholds:
        raise ConfigError("need at least one threshold", "selection.cascade_thresholds")
    for t in sel.cascade_thresholds:
        _num(t, "selection.cascade_thresholds", 0, 1, strict_lo=True)
    cfg.selection = sel

    ev = EvaluationSpec(**_take(raw.get("evaluation", {}), EvaluationSpec, "evaluation"))
    if ev.plan_accuracy not in ("oracle", "supernet"):
        raise ConfigError(f"unknown mode {ev.plan_accuracy!r}", "evaluation.plan_accuracy")
    if not ev.compare or any(m not in METHODS for m in ev.compare) or "klas" not in ev.compare:
        raise ConfigError(f"compare must list methods from {METHODS} including klas",
                          "evaluation.compare")
    for t in ev.ablate_taus:
        _num(t, "evaluation.ablate_taus", 0, 1)
    for b in ev.ablate_buckets:
        _int(b, "evaluation.ablate_buckets", 1)
    cfg.evaluation = ev

    seeds = raw.get("seeds", cfg.seeds)
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("need a non-empty list of seeds", "seeds")
    cfg.seeds = [_seed(s, f"seeds[{k}]") for k, s in enumerate(seeds)]
    out = raw.get("output_dir", cfg.output_dir)
    if not isinstance(out, str) or not out:
        raise ConfigError("expected a path", "output_dir")
    cfg.output_dir = out
    return cfg


def validate_selection(method: str, tau: float, num_buckets) -> None:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}", "selection.method")
    _num(tau, "selection.tau", 0, 1)
    if num_buckets is not None:
        _int(num_buckets, "selection.num_buckets", 1)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}", "config") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}", "config") from exc
    return config_from_dict(raw)


# -- resolution -----------------------------------------------------------------------

def resolve(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentConfig:
    """Copy with ``seed`` applied and every derived seed written out."""
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg.seed = _seed(seed, "seed")
        cfg.dataset.seed = None
        for a in cfg.anchors:
            a.seed = a.train_seed = a.probe_seed = None
        cfg.training.stitch_seed = None
    base = cfg.seed * 1000
    if cfg.dataset.seed is None:
        cfg.dataset.seed = base
    for k, a in enumerate(cfg.anchors):
        if a.seed is None:
            a.seed = base + 10 * (k + 1)
        if a.train_seed is None:
            a.train_seed = base + 10 * (k + 1) + 1
        if a.probe_seed is None:
            a.probe_seed = base + 10 * (k + 1) + 2
    if cfg.training.stitch_seed is None:
        cfg.training.stitch_seed = base + 999
    return cfg


def config_digest(cfg: ExperimentConfig) -> str:
    """Digest of everything that affects results (output location excluded)."""
    d = cfg.to_dict()
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=1, sort_keys=True)
