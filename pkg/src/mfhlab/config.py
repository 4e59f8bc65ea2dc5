"""One JSON document drives every command.

Sections: facets, tasks, arch, routing, train, data, split, out, seeds.
Loading cross-validates the whole document and reports every violation in
one error instead of stopping at the first, so a config can be repaired
in a single round. Content digests over the canonical rendering identify
configs in output manifests; the shared-section digest (everything except
the architecture and output path) decides whether two configs describe
comparable experiments.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

from .data import (
    Dataset,
    generate_synthetic,
    load_csv,
    random_synthetic_spec,
    split as split_rows,
    with_derived_labels,
)
from .engine import (
    RoutingPolicy,
    TrainConfig,
    cascade_policy,
    identity_policy,
)
from .errors import ConfigError, ContractError, DataError, DimensionError
from .lattice import (
    BuildOptions,
    FacetSpec,
    LatticeGraph,
    TaskSpec,
    build_biasnet,
    build_flat,
    build_hmtl,
    build_mfh,
    parse_code,
    parse_head,
)
from .nn import MLPSpec
from .switchers import parse_kind

ARCH_KINDS = ("flat", "hmtl", "mfh", "biasnet")

# sections that must agree between configs for a comparison to be fair
SHARED_SECTIONS = ("facets", "tasks", "routing", "train", "data", "split",
                   "seeds")


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed, cross-validated experiment document."""

    facets: FacetSpec
    tasks: tuple[TaskSpec, ...]
    arch: dict
    policy: RoutingPolicy
    train: TrainConfig
    data: dict
    split: dict
    out: str | None
    seeds: tuple[int, ...]
    obj: dict  # the raw document, digests are computed over this


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(cfg) -> str:
    obj = cfg.obj if isinstance(cfg, ExperimentConfig) else cfg
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def shared_digest(cfg) -> str:
    obj = cfg.obj if isinstance(cfg, ExperimentConfig) else cfg
    return config_digest({k: obj.get(k) for k in SHARED_SECTIONS})


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    return parse_config(obj, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_config(obj, base_dir: str = ".") -> ExperimentConfig:
    """Validate the whole document, listing every violation found."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    violations: list[str] = []

    def attempt(section, fn, default=None):
        try:
            return fn()
        except (ConfigError, ContractError, DataError, DimensionError,
                KeyError, TypeError, ValueError) as e:
            reason = str(e) or type(e).__name__
            if isinstance(e, KeyError):
                reason = f"missing key {e}"
            violations.append(f"{section}: {reason}")
            return default

    facets = attempt("facets", lambda: _parse_facets(obj))
    arch = attempt("arch", lambda: _parse_arch(obj, facets))
    expert_dim = (arch or {}).get("expert_dim", 16)
    tasks = attempt("tasks",
                    lambda: _parse_tasks(obj, facets, expert_dim, violations),
                    default=())
    policy = attempt("routing", lambda: _parse_routing(obj, facets))
    train = attempt("train", lambda: _parse_train(obj),
                    default=TrainConfig())
    data = attempt("data", lambda: _parse_data(obj, facets, base_dir),
                   default={})
    split = attempt("split", lambda: _parse_split(obj), default={})
    seeds = attempt("seeds", lambda: _parse_seeds(obj, train), default=(0,))
    out = obj.get("out")
    if out is not None and not isinstance(out, str):
        violations.append("out: must be a string path")

    if violations:
        raise ConfigError("invalid config:\n  - "
                          + "\n  - ".join(violations))
    return ExperimentConfig(facets=facets, tasks=tasks, arch=arch,
                            policy=policy, train=train, data=data,
                            split=split, out=out, seeds=seeds, obj=obj)


def _parse_facets(obj) -> FacetSpec:
    raw = obj["facets"]
    return FacetSpec(tuple((str(n), tuple(str(p) for p in ps))
                           for n, ps in raw))


def _parse_tasks(obj, facets, expert_dim, violations) -> tuple[TaskSpec, ...]:
    raw = obj["tasks"]
    if not isinstance(raw, list) or not raw:
        raise ConfigError("need a non-empty task list")
    if facets is None:
        return ()  # facet section already failed; codes cannot be checked
    tasks = []
    for i, entry in enumerate(raw):
        try:
            code = parse_code(facets, entry["code"])
            if code.size < 1:
                raise ConfigError("task code must assign at least one facet")
            tower = None
            if "tower" in entry:
                tower = MLPSpec(input_dim=expert_dim,
                                hidden_sizes=tuple(int(x)
                                                   for x in entry["tower"]))
            name = entry.get("name") or "&".join(
                facets.partitions(f)[p] for f, p in code.pairs)
            tasks.append(TaskSpec(name=name, code=code,
                                  head=parse_head(entry.get("head",
                                                            "regression")),
                                  label=entry.get("label"),
                                  tower_mlp=tower))
        except (ConfigError, KeyError, TypeError, ValueError) as e:
            reason = f"missing key {e}" if isinstance(e, KeyError) else e
            violations.append(f"tasks[{i}]: {reason}")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate task names: {sorted(names)}")
    return tuple(tasks)


def _parse_arch(obj, facets) -> dict:
    raw = obj.get("arch") or {"kind": "flat"}
    if not isinstance(raw, dict):
        raise ConfigError("must be an object")
    kind = raw.get("kind")
    if kind not in ARCH_KINDS:
        raise ConfigError(f"unknown kind {kind!r}; use one of {ARCH_KINDS}")
    for k in ("level_kinds",):
        for lvl, text in (raw.get(k) or {}).items():
            int(lvl)
            parse_kind(text)
    if kind == "mfh" and int(raw.get("depth", 1)) < 1:
        raise ConfigError("depth must be >= 1")
    if facets is not None:
        if kind == "hmtl" or (kind == "biasnet"
                              and raw.get("body") == "hmtl"):
            perm = raw.get("permutation")
            if perm is not None and kind == "hmtl":
                if sorted(int(x) for x in perm) != list(range(facets.n_facets)):
                    raise ConfigError(f"permutation {perm} is not a "
                                      f"permutation of the facet indices")
        if kind == "biasnet":
            bias = raw.get("bias_facet", 0)
            if isinstance(bias, str):
                facets.facet_index(bias)
            elif not 0 <= int(bias) < facets.n_facets:
                raise ConfigError(f"bias_facet {bias} out of range")
            if raw.get("body", "flat") not in ("flat", "hmtl"):
                raise ConfigError(f"body must be flat or hmtl")
    return raw


def _parse_routing(obj, facets) -> RoutingPolicy | None:
    raw = obj.get("routing")
    if facets is None:
        return None
    if raw is None:
        return identity_policy(facets, 0)
    facet = raw.get("facet", facets.facet_name(0))
    fi = facets.facet_index(facet) if isinstance(facet, str) else int(facet)
    if not 0 <= fi < facets.n_facets:
        raise ConfigError(f"routing facet {facet} out of range")
    policy = raw.get("policy", "identity")
    if policy == "cascade":
        return cascade_policy(facets, fi)
    if policy == "identity":
        return identity_policy(facets, fi)
    if policy == "mask":
        names = set(facets.partitions(fi))
        mask = raw.get("mask") or {}
        for p, consumers in mask.items():
            for name in [p] + list(consumers):
                if name not in names:
                    raise ConfigError(f"mask names unknown partition "
                                      f"{name!r} of facet {facet!r}")
        missing = names - set(mask)
        if missing:
            raise ConfigError(f"mask lacks partitions {sorted(missing)}")
        return RoutingPolicy(routing_facet=fi,
                             train_mask=tuple((p, tuple(c))
                                              for p, c in sorted(mask.items())))
    raise ConfigError(f"unknown routing policy {policy!r}")


def _parse_train(obj) -> TrainConfig:
    raw = obj.get("train") or {}
    weights = raw.get("weights")
    if weights is not None:
        weights = tuple(sorted((str(k), float(v)) for k, v in weights.items()))
    return TrainConfig(epochs=int(raw.get("epochs", 5)),
                       batch_size=int(raw.get("batch_size", 256)),
                       lr=float(raw.get("lr", 1e-3)),
                       weights=weights,
                       seed=int(raw.get("seed", 0)),
                       eval_every=int(raw.get("eval_every", 1)))


def _parse_data(obj, facets, base_dir) -> dict:
    raw = obj.get("data") or {}
    has_syn, has_csv = "synthetic" in raw, "csv" in raw
    if has_syn == has_csv:
        raise ConfigError("give exactly one of data.synthetic or data.csv")
    if has_syn:
        syn = dict(raw["synthetic"])
        counts = syn.get("counts")
        if not counts:
            raise ConfigError("synthetic.counts must be a non-empty object")
        if facets is not None:
            for key, cnt in counts.items():
                parse_code(facets, key)
                if int(cnt) < 0:
                    raise ConfigError(f"count for {key!r} must be >= 0")
        if float(syn.get("noise", 0.1)) < 0:
            raise ConfigError("synthetic.noise must be >= 0")
        if int(syn.get("feature_dim", 16)) < 1:
            raise ConfigError("synthetic.feature_dim must be >= 1")
        return {"synthetic": syn}
    path = raw["csv"]
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    if not os.path.exists(path):
        raise ConfigError(f"data.csv file does not exist: {path}")
    return {"csv": path, "derive_labels": bool(raw.get("derive_labels"))}


def _parse_split(obj) -> dict:
    raw = obj.get("split")
    if raw is None:
        return {"fraction": 0.5, "seed": 0}
    has_fraction = "fraction" in raw
    if has_fraction == ("time_threshold" in raw):
        raise ConfigError("give exactly one of split.fraction or "
                          "split.time_threshold")
    if has_fraction:
        fraction = float(raw["fraction"])
        if not 0 < fraction < 1:
            raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
        return {"fraction": fraction, "seed": int(raw.get("seed", 0))}
    return {"time_threshold": float(raw["time_threshold"]),
            "time_column": str(raw.get("time_column", "time"))}


def _parse_seeds(obj, train) -> tuple[int, ...]:
    raw = obj.get("seeds")
    if raw is None:
        return (train.seed,)
    seeds = tuple(int(s) for s in raw)
    if not seeds:
        raise ConfigError("seeds must be non-empty when given")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds: {list(seeds)}")
    return seeds


# ---------------------------------------------------------------------------
# realizing a config


def synthetic_spec(cfg: ExperimentConfig, seed=None):
    syn = cfg.data["synthetic"]
    return random_synthetic_spec(
        cfg.facets, cfg.tasks, {k: int(v) for k, v in syn["counts"].items()},
        feature_dim=int(syn.get("feature_dim", 16)),
        deviation_scale=float(syn.get("deviation_scale", 1.0)),
        noise=float(syn.get("noise", 0.1)),
        seed=int(syn.get("seed", 0)) if seed is None else seed)


def make_dataset(cfg: ExperimentConfig, seed=None) -> Dataset:
    """Generate or load the configured dataset; seed overrides synthetic."""
    if "synthetic" in cfg.data:
        return generate_synthetic(synthetic_spec(cfg, seed))
    needed = list(dict.fromkeys(t.label_key for t in cfg.tasks))
    if cfg.data.get("derive_labels"):
        derived = ("y_cmpl", "y_finish", "y_skip")
        ds = load_csv(cfg.data["csv"], cfg.facets,
                      labels=[k for k in needed if k not in derived])
        return with_derived_labels(ds)
    return load_csv(cfg.data["csv"], cfg.facets, labels=needed)


def split_dataset(cfg: ExperimentConfig, ds: Dataset, seed=None):
    s = cfg.split
    if "fraction" in s:
        return split_rows(ds, fraction=s["fraction"],
                          seed=s.get("seed", 0) if seed is None else seed)
    return split_rows(ds, time_threshold=s["time_threshold"],
                      time_column=s.get("time_column", "time"))


def build_options(cfg: ExperimentConfig, feature_dim: int) -> BuildOptions:
    a = cfg.arch

    def hidden(key, default):
        return tuple(int(x) for x in a[key]) if key in a else default

    level_kinds = None
    if a.get("level_kinds"):
        level_kinds = tuple(sorted(
            (int(lvl), parse_kind(text))
            for lvl, text in a["level_kinds"].items()))
    return BuildOptions(
        feature_dim=feature_dim,
        expert_dim=int(a.get("expert_dim", 16)),
        shared_expert_count=int(a.get("shared_experts", 1)),
        specific_expert_count_per_child=int(a.get("specific_experts", 1)),
        expert_hidden=hidden("expert_hidden", None),
        node_hidden=hidden("node_hidden", None),
        tower_hidden=hidden("tower_hidden", (128, 64)),
        bias_hidden=hidden("bias_hidden", (128, 64)),
        level_kinds=level_kinds,
        learned_combine=bool(a.get("learned_combine")))


def build_graph(cfg: ExperimentConfig, feature_dim: int) -> LatticeGraph:
    opts = build_options(cfg, feature_dim)
    a = cfg.arch
    kind = a["kind"]
    if kind == "flat":
        return build_flat(cfg.facets, cfg.tasks, opts)
    if kind == "hmtl":
        perm = a.get("permutation", range(cfg.facets.n_facets))
        return build_hmtl(cfg.facets, tuple(int(x) for x in perm),
                          cfg.tasks, opts)
    if kind == "mfh":
        return build_mfh(cfg.facets, int(a.get("depth", 1)), cfg.tasks, opts)
    bias = a.get("bias_facet", 0)
    fi = cfg.facets.facet_index(bias) if isinstance(bias, str) else int(bias)
    return build_biasnet(cfg.facets, fi, cfg.tasks, opts,
                         body=a.get("body", "flat"))
