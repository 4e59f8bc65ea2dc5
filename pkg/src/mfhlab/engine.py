"""Trainable models over task lattices.

Turns a built graph into a parameterized model: topological forward and
exact reverse-mode backward over the node DAG, masked per-task losses
under a group routing policy, a deterministic mini-batch training loop,
region-local serving, and AUC/MSE curves with per-region overfit gaps.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     NumericError)
from .lattice import Code, FacetSpec, LatticeGraph, TaskSpec, validate_graph
from .nn import (MLPParams, MlpCache, adam_init, adam_step, init_mlp,
                 mlp_backward, mlp_forward, node_seed, sigmoid, tree_size)
from .switchers import init_switcher, switcher_backward, switcher_forward


# ---------------------------------------------------------------------------
# routing policy


@dataclass(frozen=True)
class RoutingPolicy:
    """Which groups' samples train which groups' tasks.

    train_mask maps a sample's partition of ``routing_facet`` to the set of
    task partitions that consume it during training. Serving and evaluation
    always use the sample's own partition, never the training mask.
    """

    routing_facet: int
    train_mask: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        seen = set()
        for partition, consumers in self.train_mask:
            if partition in seen:
                raise ConfigError(f"duplicate routing entry for {partition!r}")
            seen.add(partition)
            if partition not in consumers:
                raise ConfigError(
                    f"partition {partition!r} must consume its own samples")
        object.__setattr__(
            self, "_mask",
            {p: frozenset(c) for p, c in self.train_mask})

    def consumers(self, partition: str) -> frozenset:
        try:
            return self._mask[partition]
        except KeyError:
            raise DataError(f"unknown partition {partition!r} "
                            "in routing policy") from None


def cascade_policy(facets: FacetSpec, facet: int) -> RoutingPolicy:
    """Each partition's samples also train all later partitions' tasks.

    With partitions ordered smallest group first (New, Low, High) this is
    the asymmetric sharing rule: new-user samples feed every group's tasks,
    low feeds low and high, high stays home.
    """
    names = facets.partitions(facet)
    return RoutingPolicy(
        routing_facet=facet,
        train_mask=tuple((p, names[i:]) for i, p in enumerate(names)))


def identity_policy(facets: FacetSpec, facet: int) -> RoutingPolicy:
    names = facets.partitions(facet)
    return RoutingPolicy(routing_facet=facet,
                         train_mask=tuple((p, (p,)) for p in names))


def _check_regions(regions: np.ndarray, facets: FacetSpec) -> np.ndarray:
    regions = np.asarray(regions)
    if regions.ndim != 2 or regions.shape[1] != facets.n_facets:
        raise DimensionError(
            f"regions must be batch x {facets.n_facets}, got {regions.shape}")
    for f in range(facets.n_facets):
        col = regions[:, f]
        if col.size and (col.min() < 0 or col.max() >= facets.m(f)):
            raise DataError(f"region column for facet "
                            f"{facets.facet_name(f)!r} holds an unknown "
                            "partition index")
    return regions.astype(int)


def routing_masks(regions: np.ndarray, policy: RoutingPolicy,
                  tasks, facets: FacetSpec) -> dict[str, np.ndarray]:
    """Boolean training mask per task under the routing policy.

    A sample is masked in for a task when the task's partition of the
    routing facet consumes the sample's partition, and the sample matches
    the task's partition on every other facet the task's code assigns.
    """
    regions = _check_regions(regions, facets)
    rf = policy.routing_facet
    rf_names = facets.partitions(rf)
    # consumption[p][q]: partition-p samples feed partition-q tasks
    consumption = np.array(
        [[q in policy.consumers(p) for q in rf_names] for p in rf_names])
    masks = {}
    for t in tasks:
        mask = np.ones(regions.shape[0], dtype=bool)
        for f, p in t.code.pairs:
            if f == rf:
                mask &= consumption[regions[:, f], p]
            else:
                mask &= regions[:, f] == p
        masks[t.name] = mask
    return masks


def region_masks(regions: np.ndarray, tasks,
                 facets: FacetSpec) -> dict[str, np.ndarray]:
    """Own-region masks: exact code match on every assigned facet."""
    regions = _check_regions(regions, facets)
    masks = {}
    for t in tasks:
        mask = np.ones(regions.shape[0], dtype=bool)
        for f, p in t.code.pairs:
            mask &= regions[:, f] == p
        masks[t.name] = mask
    return masks


# ---------------------------------------------------------------------------
# model parameters


@dataclass(frozen=True)
class ModelParams:
    """All learnables keyed by node id.

    nodes holds MLPParams for mlp/tower/bias nodes and SwitcherParams for
    switchers; nodes whose spec owns zero parameters (identity
    pass-throughs) have no entry. combine holds per-tower inbound mixing
    weights, present only when the graph was built with learned combination
    (default is a plain elementwise sum).
    """

    nodes: dict
    combine: dict


def _default_params(node):
    """Stand-in parameters for a zero-parameter node."""
    if node.kind == "switcher":
        made = init_switcher(node.switcher)
    else:
        spec = node.task.tower_mlp if node.kind == "tower" else node.mlp
        made = init_mlp(spec)
    if tree_size(made) != 0:
        raise ContractError(f"missing parameters for node {node.node_id!r}")
    return made


def _combine_slots(graph: LatticeGraph, tower_id: str) -> int:
    return sum(1 for e in graph.in_edges(tower_id) if e.branch != "bias")


def init_model(graph: LatticeGraph, seed: int) -> ModelParams:
    """Deterministic init; every node's seed is salted with its id."""
    report = validate_graph(graph)
    if not report.ok:
        raise ContractError("graph failed validation: "
                            + "; ".join(report.violations))
    nodes = {}
    for node in graph.nodes:
        salt = node_seed(seed, node.node_id)
        if node.kind == "switcher":
            made = init_switcher(replace(node.switcher, seed=salt))
        elif node.kind == "tower":
            made = init_mlp(replace(node.task.tower_mlp, seed=salt))
        else:
            made = init_mlp(replace(node.mlp, seed=salt))
        if tree_size(made) > 0:
            nodes[node.node_id] = made
    combine = {}
    if graph.arch.get("learned_combine"):
        for tower in graph.towers():
            k = _combine_slots(graph, tower.node_id)
            if k >= 2:
                combine[tower.node_id] = np.ones(k)
    return ModelParams(nodes=nodes, combine=combine)


def parameterized_nodes(params: ModelParams) -> int:
    return len(params.nodes)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ModelCache:
    x: np.ndarray
    regions: np.ndarray | None
    order: tuple[str, ...]
    inputs: dict
    parts: dict        # node -> sorted (src, branch) keys feeding its input
    bias_parts: dict   # tower -> sorted (src, "bias") keys added to its logit
    stacks: dict       # tower -> inbound arrays, kept when combine is learned
    caches: dict
    preds: dict


def _one_hot(idx: np.ndarray, width: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= width):
        raise DataError("partition index out of range for bias input")
    out = np.zeros((idx.shape[0], width))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


def _forward_pass(graph: LatticeGraph, params: ModelParams, x: np.ndarray,
                  regions, node_ids=None) -> ModelCache:
    learned = bool(graph.arch.get("learned_combine"))
    order = tuple(nid for nid in graph.topo_order()
                  if node_ids is None or nid in node_ids)
    main: dict = defaultdict(dict)
    biasin: dict = defaultdict(dict)
    inputs, parts, bias_parts, stacks, caches, preds = {}, {}, {}, {}, {}, {}
    for nid in order:
        node = graph.node(nid)
        if node.kind == "bias":
            if regions is None:
                raise ContractError(
                    "graphs with bias nodes need sample regions at forward time")
            inp = _one_hot(regions[:, node.pending_facet],
                           graph.facets.m(node.pending_facet))
        elif not graph.in_edges(nid):
            inp = x
        else:
            keys = tuple(sorted(main[nid]))
            parts[nid] = keys
            arrs = [main[nid][k] for k in keys]
            weights = params.combine.get(nid) if learned else None
            if weights is not None:
                stacks[nid] = tuple(arrs)
                inp = weights[0] * arrs[0]
                for i in range(1, len(arrs)):
                    inp = inp + weights[i] * arrs[i]
            else:
                inp = arrs[0]
                for a in arrs[1:]:
                    inp = inp + a
        inputs[nid] = inp
        p = params.nodes.get(nid)
        if p is None:
            p = _default_params(node)
        if node.kind == "switcher":
            outs, cache = switcher_forward(node.switcher, p, inp)
            caches[nid] = cache
            for e in graph.out_edges(nid):
                if node_ids is None or e.dst in node_ids:
                    main[e.dst][(nid, e.branch)] = outs[e.branch]
        else:
            y, cache = mlp_forward(p, inp)
            caches[nid] = cache
            if node.kind == "tower":
                keys = tuple(sorted(biasin[nid]))
                bias_parts[nid] = keys
                for k in keys:
                    y = y + biasin[nid][k]
                preds[node.task.name] = y[:, 0]
            else:
                for e in graph.out_edges(nid):
                    if node_ids is None or e.dst in node_ids:
                        bucket = biasin if e.branch == "bias" else main
                        bucket[e.dst][(nid, e.branch)] = y
    return ModelCache(x=x, regions=regions, order=order, inputs=inputs,
                      parts=parts, bias_parts=bias_parts, stacks=stacks,
                      caches=caches, preds=preds)


def model_forward(graph: LatticeGraph, params: ModelParams, x: np.ndarray,
                  regions=None) -> tuple[dict[str, np.ndarray], ModelCache]:
    """Evaluate every task head. Binary towers emit logits, not probabilities.

    Multi-inbound nodes sum their contributions elementwise in sorted
    (source, branch) order so rebuilt and re-imported graphs agree bitwise.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DimensionError(f"expected batch x features, got shape {x.shape}")
    root = graph.root()
    if x.shape[1] != root.switcher.input_dim:
        raise DimensionError(f"feature width {x.shape[1]} != graph input "
                             f"width {root.switcher.input_dim}")
    if regions is not None:
        regions = _check_regions(regions, graph.facets)
    cache = _forward_pass(graph, params, x, regions)
    return cache.preds, cache


def model_backward(graph: LatticeGraph, params: ModelParams,
                   cache: ModelCache,
                   d_preds: dict[str, np.ndarray]) -> ModelParams:
    """Gradients for every entry of params given d(loss)/d(prediction)."""
    learned = bool(graph.arch.get("learned_combine"))
    node_grads, combine_grads = {}, {}
    d_child: dict = defaultdict(dict)   # switcher id -> branch -> grad
    d_flat: dict = defaultdict(dict)    # mlp/bias id -> consumer id -> grad

    def route(nid: str, dx: np.ndarray, weights=None) -> None:
        for i, (src, branch) in enumerate(cache.parts.get(nid, ())):
            d = dx if weights is None else weights[i] * dx
            if graph.node(src).kind == "switcher":
                d_child[src][branch] = d
            else:
                d_flat[src][nid] = d

    for nid in reversed(cache.order):
        node = graph.node(nid)
        p = params.nodes.get(nid)
        if p is None:
            p = _default_params(node)
        if node.kind == "tower":
            name = node.task.name
            if name not in d_preds:
                raise ContractError(f"no prediction gradient for task {name!r}")
            dy = np.asarray(d_preds[name], dtype=float)[:, None]
            grads, dx = mlp_backward(p, cache.caches[nid], dy)
            weights = params.combine.get(nid) if learned else None
            if weights is not None:
                combine_grads[nid] = np.array(
                    [float(np.sum(dx * arr)) for arr in cache.stacks[nid]])
            route(nid, dx, weights)
            for src, _ in cache.bias_parts.get(nid, ()):
                d_flat[src][nid] = dy
        elif node.kind == "switcher":
            grads, dx = switcher_backward(node.switcher, p, cache.caches[nid],
                                          d_child.get(nid, {}))
            route(nid, dx)
        else:
            received = d_flat.get(nid, {})
            if received:
                keys = sorted(received)
                dy = received[keys[0]]
                for k in keys[1:]:
                    dy = dy + received[k]
            else:
                dy = np.zeros((cache.x.shape[0], node.output_dim))
            grads, dx = mlp_backward(p, cache.caches[nid], dy)
            if node.kind == "mlp":
                route(nid, dx)
        if nid in params.nodes:
            node_grads[nid] = grads
    return ModelParams(nodes=node_grads, combine=combine_grads)


def relu_margin(cache: ModelCache) -> float:
    """Smallest |pre-activation| over every hidden layer of a forward pass.

    A margin below the step of a central-difference gradient check means
    some unit sits close enough to its kink for the perturbation to cross
    it, which poisons the numeric estimate; scan seeds for a comfortable
    margin before checking.
    """
    def walk(obj):
        if isinstance(obj, MlpCache):
            yield obj
        elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            for fld in dataclasses.fields(obj):
                yield from walk(getattr(obj, fld.name))
        elif isinstance(obj, dict):
            for v in obj.values():
                yield from walk(v)
        elif isinstance(obj, (tuple, list)):
            for v in obj:
                yield from walk(v)

    # the final layer of each MLP is linear, so its pre-activation is not
    # a kink; everything before it passes through the ReLU
    gaps = [float(np.min(np.abs(pre)))
            for c in walk(cache.caches)
            for pre in c.pre[:-1] if pre.size]
    return min(gaps) if gaps else float("inf")


# ---------------------------------------------------------------------------
# losses


def _bce_on_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def _resolve_weights(tasks, weights) -> dict[str, float]:
    out = {t.name: 1.0 for t in tasks}
    if weights:
        for name, w in dict(weights).items():
            if name not in out:
                raise ConfigError(f"loss weight for unknown task {name!r}")
            if w < 0:
                raise ConfigError(f"negative loss weight for task {name!r}")
            out[name] = float(w)
    return out


def compute_loss(preds, labels, masks, tasks,
                 weights=None) -> tuple[float, dict[str, float]]:
    """Weighted sum of masked per-task means; empty masks contribute zero."""
    w = _resolve_weights(tasks, weights)
    total, per_task = 0.0, {}
    for t in tasks:
        pred, mask = preds[t.name], masks[t.name]
        y = labels[t.label_key]
        if mask.shape[0] != pred.shape[0] or y.shape[0] != pred.shape[0]:
            raise DimensionError(f"mask/label width mismatch for {t.name!r}")
        if not mask.any():
            per_task[t.name] = 0.0
            continue
        ym = y[mask]
        if t.head == "binary":
            if ym.size and (ym.min() < 0.0 or ym.max() > 1.0):
                raise DataError(f"labels for binary task {t.name!r} "
                                "fall outside [0, 1]")
            value = float(np.mean(_bce_on_logits(pred[mask], ym)))
        else:
            diff = pred[mask] - ym
            value = float(np.mean(diff * diff))
        per_task[t.name] = value
        total += w[t.name] * value
    return total, per_task


def loss_gradients(preds, labels, masks, tasks,
                   weights=None) -> dict[str, np.ndarray]:
    """d(total loss)/d(prediction) per task, zero outside each task's mask."""
    w = _resolve_weights(tasks, weights)
    out = {}
    for t in tasks:
        pred, mask = preds[t.name], masks[t.name]
        y = labels[t.label_key]
        g = np.zeros_like(pred)
        count = int(mask.sum())
        if count:
            scale = w[t.name] / count
            if t.head == "binary":
                g[mask] = (sigmoid(pred[mask]) - y[mask]) * scale
            else:
                g[mask] = 2.0 * (pred[mask] - y[mask]) * scale
        out[t.name] = g
    return out


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels):
    """Rank-based AUC; ties get half credit. None when one class is absent."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels differ in length")
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    n = scores.size
    boundaries = np.nonzero(np.diff(sorted_scores))[0] + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    group_rank = (starts + ends - 1) / 2.0 + 1.0  # average 1-based rank
    group_of = np.zeros(n, dtype=int)
    group_of[starts[1:]] = 1
    group_of = np.cumsum(group_of)
    ranks = np.empty(n)
    ranks[order] = group_rank[group_of]
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _thread_count() -> int:
    raw = os.environ.get("MFH_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"MFH_THREADS must be an integer, got {raw!r}") from None
    return max(1, value)


_EVAL_CHUNK = 1024


def predict(graph: LatticeGraph, params: ModelParams, x: np.ndarray,
            regions=None) -> dict[str, np.ndarray]:
    """Forward over fixed-size chunks; MFH_THREADS fans chunks out.

    Chunk boundaries never depend on the thread count and results are
    concatenated in index order, so any thread setting is bitwise
    equivalent to a serial run.
    """
    x = np.asarray(x, dtype=float)
    spans = [(i, min(i + _EVAL_CHUNK, x.shape[0]))
             for i in range(0, x.shape[0], _EVAL_CHUNK)] or [(0, 0)]

    def run(span):
        i, j = span
        preds, _ = model_forward(graph, params, x[i:j],
                                 None if regions is None else regions[i:j])
        return preds

    workers = _thread_count()
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, spans))
    else:
        outs = [run(s) for s in spans]
    return {t.name: np.concatenate([o[t.name] for o in outs])
            for t in graph.tasks}


def evaluate(graph: LatticeGraph, params: ModelParams,
             dataset) -> dict[str, float | None]:
    """Own-region metric per task: AUC for binary heads, MSE for regression.

    None marks an undefined value (no routed samples, or a single-class
    AUC slice).
    """
    preds = predict(graph, params, dataset.X, dataset.regions)
    masks = region_masks(dataset.regions, graph.tasks, graph.facets)
    out = {}
    for t in graph.tasks:
        mask = masks[t.name]
        if not mask.any():
            out[t.name] = None
            continue
        y = dataset.labels[t.label_key][mask]
        if t.head == "binary":
            out[t.name] = auc(sigmoid(preds[t.name][mask]), y)
        else:
            diff = preds[t.name][mask] - y
            out[t.name] = float(np.mean(diff * diff))
    return out


def _error_form(task: TaskSpec, value):
    """Uniform lower-is-better scale: MSE as-is, AUC flipped to 1 - AUC."""
    if value is None:
        return None
    return 1.0 - value if task.head == "binary" else value


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 256
    lr: float = 1e-3
    weights: tuple[tuple[str, float], ...] | None = None
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass(frozen=True)
class TaskCurve:
    name: str
    metric: str  # "auc" | "mse"
    train: tuple
    test: tuple


@dataclass(frozen=True)
class RegionCurve:
    """Per-epoch mean task error within one routing-facet partition.

    Errors are MSE for regression heads and 1 - AUC for binary heads, so
    lower is better throughout and gap = test - train measures overfit.
    """

    name: str
    train: tuple
    test: tuple
    gap: tuple


@dataclass(frozen=True)
class MetricsReport:
    epochs: tuple
    tasks: tuple
    regions: tuple
    meta: dict


def _region_value(tasks, values, facet: int, partition: int):
    errs = [_error_form(t, values[t.name]) for t in tasks
            if t.code.partition_of(facet) == partition]
    errs = [e for e in errs if e is not None]
    if not errs:
        return None
    return float(sum(errs) / len(errs))


def _build_report(graph, policy, eval_epochs, train_rows, test_rows,
                  meta) -> MetricsReport:
    facets = graph.facets
    tasks = []
    for t in graph.tasks:
        tasks.append(TaskCurve(
            name=t.name,
            metric="auc" if t.head == "binary" else "mse",
            train=tuple(r[t.name] for r in train_rows),
            test=tuple(r[t.name] for r in test_rows)))
    regions = []
    rf = policy.routing_facet
    for p, name in enumerate(facets.partitions(rf)):
        tr = tuple(_region_value(graph.tasks, r, rf, p) for r in train_rows)
        te = tuple(_region_value(graph.tasks, r, rf, p) for r in test_rows)
        gap = tuple(None if a is None or b is None else b - a
                    for a, b in zip(tr, te))
        regions.append(RegionCurve(name=name, train=tr, test=te, gap=gap))
    return MetricsReport(epochs=tuple(eval_epochs), tasks=tuple(tasks),
                         regions=tuple(regions), meta=dict(meta or {}))


def train(graph: LatticeGraph, train_ds, test_ds, policy: RoutingPolicy,
          config: TrainConfig, meta=None) -> tuple[ModelParams, MetricsReport]:
    """Seeded mini-batch training; bitwise deterministic per (inputs, seed)."""
    n = train_ds.X.shape[0]
    if n == 0:
        raise ContractError("training split is empty")
    for t in graph.tasks:
        if t.label_key not in train_ds.labels:
            raise DataError(f"dataset lacks label column {t.label_key!r}")
    params = init_model(graph, config.seed)
    state = adam_init(params, lr=config.lr)
    rng = np.random.default_rng(node_seed(config.seed, "batch-order"))
    weights = config.weights
    eval_epochs, train_rows, test_rows = [], [], []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            take = order[start:start + config.batch_size]
            xb = train_ds.X[take]
            rb = train_ds.regions[take]
            yb = {k: v[take] for k, v in train_ds.labels.items()}
            masks = routing_masks(rb, policy, graph.tasks, graph.facets)
            preds, cache = model_forward(graph, params, xb, rb)
            total, _ = compute_loss(preds, yb, masks, graph.tasks, weights)
            if not math.isfinite(total):
                raise NumericError(f"non-finite training loss at epoch "
                                   f"{epoch}, batch {start // config.batch_size}")
            d_preds = loss_gradients(preds, yb, masks, graph.tasks, weights)
            grads = model_backward(graph, params, cache, d_preds)
            params, state = adam_step(params, grads, state)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            eval_epochs.append(epoch)
            train_rows.append(evaluate(graph, params, train_ds))
            test_rows.append(evaluate(graph, params, test_ds))
    base_meta = {"seed": config.seed}
    base_meta.update(meta or {})
    report = _build_report(graph, policy, eval_epochs, train_rows, test_rows,
                           base_meta)
    return params, report


def snapshot_report(graph: LatticeGraph, params: ModelParams, train_ds,
                    test_ds, policy: RoutingPolicy, meta=None) -> MetricsReport:
    """Single-point MetricsReport from already trained parameters.

    Epoch 0 marks that no training happened in this process.
    """
    train_row = evaluate(graph, params, train_ds)
    test_row = evaluate(graph, params, test_ds)
    return _build_report(graph, policy, [0], [train_row], [test_row],
                         meta or {})


# ---------------------------------------------------------------------------
# serving


def serve_predict(graph: LatticeGraph, params: ModelParams,
                  sample) -> dict[str, float]:
    """Evaluate only the towers matching the sample's own region.

    A facet the region leaves unassigned is a wildcard, so a group-only
    region serves every behavior tower of that group. Nodes outside the
    matched towers' ancestor closure are never touched, so their
    parameters cannot influence the result. Binary heads return
    probabilities here.
    """
    region: Code = sample.region
    matched = [t for t in graph.towers()
               if all(region.partition_of(f) in (None, p)
                      for f, p in t.code.pairs)]
    if not matched:
        raise ContractError(
            f"no tower matches region {region.text(graph.facets)!r}")
    needed = {t.node_id for t in matched}
    frontier = list(needed)
    while frontier:
        for e in graph.in_edges(frontier.pop()):
            if e.src not in needed:
                needed.add(e.src)
                frontier.append(e.src)
    x = np.asarray(sample.features, dtype=float)[None, :]
    row = [region.partition_of(f) for f in range(graph.facets.n_facets)]
    regions = np.array([[-1 if p is None else p for p in row]])
    cache = _forward_pass(graph, params, x, regions, node_ids=needed)
    out = {}
    for t in matched:
        value = float(cache.preds[t.task.name][0])
        out[t.task.name] = float(sigmoid(value)) if t.task.head == "binary" \
            else value
    return out


# ---------------------------------------------------------------------------
# report serialization and comparison


def _jsonable(value):
    if value is None:
        return None
    return float(value)


def report_to_json(report: MetricsReport) -> str:
    doc = {
        "epochs": list(report.epochs),
        "tasks": [{"name": t.name, "metric": t.metric,
                   "train": [_jsonable(v) for v in t.train],
                   "test": [_jsonable(v) for v in t.test]}
                  for t in report.tasks],
        "regions": [{"name": r.name,
                     "train": [_jsonable(v) for v in r.train],
                     "test": [_jsonable(v) for v in r.test]}
                    for r in report.regions],
        "gaps": [{"region": r.name, "values": [_jsonable(v) for v in r.gap]}
                 for r in report.regions],
        "meta": report.meta,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _csv_value(v) -> str:
    return "" if v is None else repr(float(v))


def report_to_csv(report: MetricsReport) -> str:
    lines = ["task,epoch,split,value"]
    for t in report.tasks:
        for i, epoch in enumerate(report.epochs):
            lines.append(f"{t.name},{epoch},train,{_csv_value(t.train[i])}")
            lines.append(f"{t.name},{epoch},test,{_csv_value(t.test[i])}")
    for r in report.regions:
        for i, epoch in enumerate(report.epochs):
            lines.append(f"region:{r.name},{epoch},train,{_csv_value(r.train[i])}")
            lines.append(f"region:{r.name},{epoch},test,{_csv_value(r.test[i])}")
            lines.append(f"region:{r.name},{epoch},gap,{_csv_value(r.gap[i])}")
    return "\n".join(lines) + "\n"


def overfit_report(report: MetricsReport, baseline: MetricsReport) -> dict:
    """Per-region relative improvements of report over baseline.

    train_impr = (baseline - model) / baseline on the train error, likewise
    test_impr; entries are None where the baseline error is zero or either
    value is undefined.
    """
    if report.epochs != baseline.epochs:
        raise ContractError("reports cover different evaluation epochs")
    if tuple(t.name for t in report.tasks) != \
            tuple(t.name for t in baseline.tasks):
        raise ContractError("reports cover different task sets")

    def impr(model_v, base_v):
        if model_v is None or base_v is None or base_v == 0.0:
            return None
        return (base_v - model_v) / base_v

    base_regions = {r.name: r for r in baseline.regions}
    regions = []
    for r in report.regions:
        b = base_regions.get(r.name)
        if b is None:
            raise ContractError(f"baseline lacks region {r.name!r}")
        regions.append({
            "name": r.name,
            "train_impr": [impr(m, v) for m, v in zip(r.train, b.train)],
            "test_impr": [impr(m, v) for m, v in zip(r.test, b.test)],
            "gap": [_jsonable(v) for v in r.gap],
            "baseline_gap": [_jsonable(v) for v in b.gap],
        })
    return {"epochs": list(report.epochs), "regions": regions}


# ---------------------------------------------------------------------------
# parameter persistence (portable JSON of shaped arrays)


def _mlp_params_to_obj(p: MLPParams):
    return [[w.tolist(), b.tolist()] for w, b in p.layers]


def _mlp_params_from_obj(obj) -> MLPParams:
    return MLPParams(layers=tuple(
        (np.asarray(w, dtype=float), np.asarray(b, dtype=float))
        for w, b in obj))


def params_to_obj(graph: LatticeGraph, params: ModelParams) -> dict:
    nodes = {}
    for nid in sorted(params.nodes):
        p = params.nodes[nid]
        if graph.node(nid).kind == "switcher":
            levels = []
            for lvl in p.levels:
                levels.append({
                    "specific": {c: [_mlp_params_to_obj(m) for m in ms]
                                 for c, ms in sorted(lvl.specific.items())},
                    "shared": [_mlp_params_to_obj(m) for m in lvl.shared],
                    "child_gates": {c: g.tolist()
                                    for c, g in sorted(lvl.child_gates.items())},
                    "shared_gate": None if lvl.shared_gate is None
                    else lvl.shared_gate.tolist(),
                })
            nodes[nid] = {"bottom": None if p.bottom is None
                          else _mlp_params_to_obj(p.bottom),
                          "levels": levels}
        else:
            nodes[nid] = {"layers": _mlp_params_to_obj(p)}
    return {"nodes": nodes,
            "combine": {k: v.tolist() for k, v in sorted(params.combine.items())}}


def params_from_obj(graph: LatticeGraph, obj: dict) -> ModelParams:
    from .switchers import LevelParams, SwitcherParams

    nodes = {}
    for nid, entry in obj["nodes"].items():
        if graph.node(nid).kind == "switcher":
            levels = tuple(LevelParams(
                specific={c: tuple(_mlp_params_from_obj(m) for m in ms)
                          for c, ms in lvl["specific"].items()},
                shared=tuple(_mlp_params_from_obj(m) for m in lvl["shared"]),
                child_gates={c: np.asarray(g, dtype=float)
                             for c, g in lvl["child_gates"].items()},
                shared_gate=None if lvl["shared_gate"] is None
                else np.asarray(lvl["shared_gate"], dtype=float),
            ) for lvl in entry["levels"])
            bottom = None if entry["bottom"] is None \
                else _mlp_params_from_obj(entry["bottom"])
            nodes[nid] = SwitcherParams(bottom=bottom, levels=levels)
        else:
            nodes[nid] = _mlp_params_from_obj(entry["layers"])
    combine = {k: np.asarray(v, dtype=float)
               for k, v in obj.get("combine", {}).items()}
    return ModelParams(nodes=nodes, combine=combine)
