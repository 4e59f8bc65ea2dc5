"""Config-driven command line for the whole workbench.

Verbs: gen-data, train, eval, compare, inspect-graph, grad-check. Exit
codes: 0 success, 1 validation or check failure, 2 configuration or IO
error, 3 numeric failure. Re-running a verb with identical config and
seed overwrites its artifacts with byte-identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import os
import re

import click
import numpy as np

from . import engine
from .config import (
    build_graph,
    config_digest,
    load_config,
    make_dataset,
    shared_digest,
    split_dataset,
    synthetic_spec,
)
from .data import generate_synthetic, region_counts, spec_digest, write_csv
from .engine import (
    compute_loss,
    init_model,
    loss_gradients,
    model_forward,
    params_from_obj,
    params_to_obj,
    relu_margin,
    report_to_csv,
    report_to_json,
    routing_masks,
    snapshot_report,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericError,
    SchemaError,
)
from .lattice import export_graph, validate_graph
from .nn import finite_difference_grads, max_grad_rel_error, node_seed, tree_size
from .plots import save_comparison, save_region_errors, save_task_curves

GRAD_CHECK_MAX_FEATURES = 16
GRAD_CHECK_BATCH = 3
GRAD_CHECK_THRESHOLD = 1e-4


def _fail(code: int, message) -> None:
    click.echo(f"error: {message}", err=True)
    raise SystemExit(code)


def _guard(fn):
    """Map the exception taxonomy onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as e:
            _fail(3, e)
        except (ConfigError, SchemaError, DataError, DimensionError,
                ContractError, OSError) as e:
            _fail(2, e)

    return wrapper


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _out_dir(cfg, out) -> str:
    path = out or cfg.out or "."
    os.makedirs(path, exist_ok=True)
    return path


def _feature_dim(cfg) -> int:
    if "synthetic" in cfg.data:
        return int(cfg.data["synthetic"].get("feature_dim", 16))
    with open(cfg.data["csv"], encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise SchemaError(f"{cfg.data['csv']}: empty file")
    return sum(1 for c in header if re.fullmatch(r"f\d+", c))


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.6g}"


def _echo_final_metrics(report) -> None:
    for t in report.tasks:
        click.echo(f"{t.name}: {t.metric} train {_fmt(t.train[-1])} "
                   f"test {_fmt(t.test[-1])}")
    for r in report.regions:
        click.echo(f"region {r.name}: error train {_fmt(r.train[-1])} "
                   f"test {_fmt(r.test[-1])} gap {_fmt(r.gap[-1])}")


@click.group()
@click.version_option(package_name="mfhlab")
def main():
    """Multi-facet hierarchy workbench."""


# ---------------------------------------------------------------------------
# gen-data


@main.command("gen-data")
@click.option("--config", "config_path", required=True, help="Experiment JSON.")
@click.option("--seed", type=int, default=None,
              help="Override the synthetic generation seed.")
@click.option("--out", default=None, help="Output directory.")
@_guard
def cmd_gen_data(config_path, seed, out):
    """Generate the configured synthetic dataset as CSV plus manifest."""
    cfg = load_config(config_path)
    if "synthetic" not in cfg.data:
        raise ConfigError("gen-data needs a data.synthetic section")
    spec = synthetic_spec(cfg, seed)
    dataset = generate_synthetic(spec)
    out_dir = _out_dir(cfg, out)
    csv_path = os.path.join(out_dir, "data.csv")
    write_csv(dataset, csv_path)
    manifest = {
        "command": "gen-data",
        "config_digest": config_digest(cfg),
        "spec_digest": spec_digest(spec),
        "seed": spec.seed,
        "rows": len(dataset),
        "counts": region_counts(spec),
        "csv": "data.csv",
        "provenance": dataset.provenance,
    }
    _write_text(os.path.join(out_dir, "manifest.json"), _json_text(manifest))
    click.echo(f"wrote {len(dataset)} rows to {csv_path}")


# ---------------------------------------------------------------------------
# train


def _run_train(cfg, seed, out_dir):
    """Train one configuration once and persist every artifact.

    Returns the metrics report. A --seed or compare-loop seed replaces the
    synthetic, split, and train seeds together so one integer names the
    whole run.
    """
    dataset = make_dataset(cfg, seed)
    train_ds, test_ds = split_dataset(cfg, dataset, seed)
    graph = build_graph(cfg, _feature_dim(cfg))
    tc = cfg.train if seed is None else dataclasses.replace(cfg.train,
                                                            seed=seed)
    meta = {"config_digest": config_digest(cfg),
            "provenance": dataset.provenance}
    params, report = engine.train(graph, train_ds, test_ds, cfg.policy, tc,
                                  meta=meta)
    os.makedirs(out_dir, exist_ok=True)
    doc = {"meta": {**meta, "seed": tc.seed},
           "params": params_to_obj(graph, params)}
    _write_text(os.path.join(out_dir, "params.json"), _json_text(doc))
    _write_text(os.path.join(out_dir, "report.json"), report_to_json(report))
    _write_text(os.path.join(out_dir, "report.csv"), report_to_csv(report))
    save_task_curves(report, os.path.join(out_dir, "curves.png"))
    save_region_errors(report, os.path.join(out_dir, "regions.png"))
    manifest = {
        "command": "train",
        "config_digest": config_digest(cfg),
        "shared_digest": shared_digest(cfg),
        "seed": tc.seed,
        "provenance": dataset.provenance,
        "outputs": ["curves.png", "params.json", "regions.png",
                    "report.csv", "report.json"],
        "final": {t.name: {"metric": t.metric, "train": t.train[-1],
                           "test": t.test[-1]} for t in report.tasks},
    }
    _write_text(os.path.join(out_dir, "manifest.json"), _json_text(manifest))
    return report


@main.command("train")
@click.option("--config", "config_path", required=True, help="Experiment JSON.")
@click.option("--seed", type=int, default=None,
              help="Override data, split, and train seeds together.")
@click.option("--out", default=None, help="Output directory.")
@_guard
def cmd_train(config_path, seed, out):
    """Train the configured architecture; write params, reports, figures."""
    cfg = load_config(config_path)
    out_dir = _out_dir(cfg, out)
    report = _run_train(cfg, seed, out_dir)
    _echo_final_metrics(report)
    click.echo(f"artifacts in {out_dir}")


# ---------------------------------------------------------------------------
# eval


@main.command("eval")
@click.option("--config", "config_path", required=True, help="Experiment JSON.")
@click.option("--params", "params_path", required=True,
              help="params.json from a train run under the same config.")
@click.option("--seed", type=int, default=None,
              help="Override the recorded run seed (changes the split).")
@click.option("--out", default=None, help="Output directory.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]),
              default=None, help="Also dump the report to stdout.")
@_guard
def cmd_eval(config_path, params_path, seed, out, fmt):
    """Re-evaluate persisted parameters on the configured dataset."""
    cfg = load_config(config_path)
    try:
        with open(params_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{params_path} is not valid JSON: {e}") from None
    meta = doc.get("meta") or {}
    want = config_digest(cfg)
    if meta.get("config_digest") != want:
        raise ConfigError(
            f"params were trained under config digest "
            f"{meta.get('config_digest')}, current config is {want}")
    run_seed = meta.get("seed") if seed is None else seed
    dataset = make_dataset(cfg, run_seed)
    train_ds, test_ds = split_dataset(cfg, dataset, run_seed)
    graph = build_graph(cfg, _feature_dim(cfg))
    params = params_from_obj(graph, doc["params"])
    report = snapshot_report(graph, params, train_ds, test_ds, cfg.policy,
                             meta={"config_digest": want,
                                   "provenance": dataset.provenance,
                                   "seed": run_seed})
    out_dir = _out_dir(cfg, out)
    _write_text(os.path.join(out_dir, "eval.json"), report_to_json(report))
    _write_text(os.path.join(out_dir, "eval.csv"), report_to_csv(report))
    if fmt == "json":
        click.echo(report_to_json(report), nl=False)
    elif fmt == "csv":
        click.echo(report_to_csv(report), nl=False)
    else:
        _echo_final_metrics(report)


# ---------------------------------------------------------------------------
# compare


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def _delta(value, base, higher_better: bool):
    """Relative improvement over the baseline; positive means better."""
    if value is None or base is None or base == 0:
        return None
    change = (value - base) / abs(base)
    return (change if higher_better else -change) + 0.0  # drop -0.0


def _cell(value, delta) -> str:
    if value is None:
        return "n/a"
    text = f"{value:.6g}"
    if delta is not None:
        text += f" [{delta:+.2%}]"
    return text


def _render_table(headers, rows) -> str:
    table = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
                     for r in table)


def _config_names(paths) -> list[str]:
    names = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    seen: dict[str, int] = {}
    out = []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if names.count(n) == 1 else f"{n}-{seen[n]}")
    return out


@main.command("compare")
@click.option("--config", "config_paths", required=True, multiple=True,
              help="Experiment JSON; repeat once per architecture. The "
                   "first one is the baseline.")
@click.option("--out", default=None, help="Output directory.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]),
              default=None, help="Also dump the comparison to stdout.")
@_guard
def cmd_compare(config_paths, out, fmt):
    """Train each config over the shared seed list; tabulate medians with
    relative improvements over the first (baseline) config."""
    cfgs = [load_config(p) for p in config_paths]
    names = _config_names(config_paths)
    base_cfg = cfgs[0]
    base_tasks = tuple((t.name, t.head, t.label_key) for t in base_cfg.tasks)
    for name, cfg in zip(names[1:], cfgs[1:]):
        tasks = tuple((t.name, t.head, t.label_key) for t in cfg.tasks)
        if tasks != base_tasks:
            raise ConfigError(f"config {name!r} trains a different task set "
                              f"than the baseline; comparison is meaningless")
        if shared_digest(cfg) != shared_digest(base_cfg):
            raise ConfigError(
                f"config {name!r} differs from the baseline outside the "
                f"architecture section (shared digest "
                f"{shared_digest(cfg)[:12]} != "
                f"{shared_digest(base_cfg)[:12]})")
    seeds = base_cfg.seeds
    out_dir = _out_dir(base_cfg, out)

    reports: dict[str, list] = {}
    for name, cfg in zip(names, cfgs):
        reports[name] = [
            _run_train(cfg, s, os.path.join(out_dir, name, f"seed-{s}"))
            for s in seeds]

    task_meta = {t.name: t.head for t in base_cfg.tasks}
    doc = {
        "baseline": names[0],
        "seeds": list(seeds),
        "configs": [{"name": n, "arch": c.arch.get("kind"),
                     "config_digest": config_digest(c)}
                    for n, c in zip(names, cfgs)],
        "tasks": {}, "regions": {},
    }
    for tname in task_meta:
        entry = {"metric": "auc" if task_meta[tname] == "binary" else "mse",
                 "per_config": {}}
        for name in names:
            per_seed = [next(t.test[-1] for t in r.tasks if t.name == tname)
                        for r in reports[name]]
            entry["per_config"][name] = {"per_seed": per_seed,
                                         "median": _median(per_seed)}
        base = entry["per_config"][names[0]]["median"]
        for name in names:
            e = entry["per_config"][name]
            e["delta"] = _delta(e["median"], base,
                                higher_better=task_meta[tname] == "binary")
        doc["tasks"][tname] = entry
    region_names = [r.name for r in reports[names[0]][0].regions]
    for rname in region_names:
        entry = {"test": {}, "gap": {}}
        for kind in ("test", "gap"):
            for name in names:
                per_seed = [next(getattr(r, kind)[-1] for r in rep.regions
                                 if r.name == rname)
                            for rep in reports[name]]
                entry[kind][name] = {"per_seed": per_seed,
                                     "median": _median(per_seed)}
            base = entry[kind][names[0]]["median"]
            for name in names:
                e = entry[kind][name]
                e["delta"] = _delta(e["median"], base, higher_better=False)
        doc["regions"][rname] = entry

    _write_text(os.path.join(out_dir, "compare.json"), _json_text(doc))

    lines = ["kind,name,config," + ",".join(f"seed-{s}" for s in seeds)
             + ",median,delta"]

    def csv_row(kind, row_name, config, entry):
        cells = [kind, row_name, config]
        cells += ["" if v is None else repr(float(v))
                  for v in entry["per_seed"]]
        for key in ("median", "delta"):
            v = entry[key]
            cells.append("" if v is None else repr(float(v)))
        lines.append(",".join(cells))

    for tname, entry in doc["tasks"].items():
        for name in names:
            csv_row("task", tname, name, entry["per_config"][name])
    for rname, entry in doc["regions"].items():
        for name in names:
            csv_row("region-test", rname, name, entry["test"][name])
        for name in names:
            csv_row("region-gap", rname, name, entry["gap"][name])
    _write_text(os.path.join(out_dir, "compare.csv"), "\n".join(lines) + "\n")

    by_config = {name: {"test": {rn: doc["regions"][rn]["test"][name]["median"]
                                 for rn in region_names},
                        "gap": {rn: doc["regions"][rn]["gap"][name]["median"]
                                for rn in region_names}}
                 for name in names}
    save_comparison(region_names, by_config,
                    os.path.join(out_dir, "compare.png"))

    if fmt == "json":
        click.echo(_json_text(doc), nl=False)
    elif fmt == "csv":
        click.echo("\n".join(lines))
    else:
        rows = []
        for tname, entry in doc["tasks"].items():
            rows.append([f"{tname} ({entry['metric']})"]
                        + [_cell(entry["per_config"][n]["median"],
                                 entry["per_config"][n]["delta"])
                           for n in names])
        for rname, entry in doc["regions"].items():
            for kind in ("test", "gap"):
                rows.append([f"region {rname} {kind}"]
                            + [_cell(entry[kind][n]["median"],
                                     entry[kind][n]["delta"])
                               for n in names])
        click.echo(_render_table([f"median over {len(seeds)} seed(s)"]
                                 + names, rows))
    click.echo(f"artifacts in {out_dir}")


# ---------------------------------------------------------------------------
# inspect-graph


@main.command("inspect-graph")
@click.option("--config", "config_path", required=True, help="Experiment JSON.")
@click.option("--out", default=None, help="Output directory.")
@click.option("--format", "fmt", type=click.Choice(["json", "dot"]),
              default=None, help="Also dump the export to stdout.")
@_guard
def cmd_inspect_graph(config_path, out, fmt):
    """Build the configured graph, print its census, write exports."""
    cfg = load_config(config_path)
    graph = build_graph(cfg, _feature_dim(cfg))
    audit = validate_graph(graph)
    stats = audit.stats
    if stats:
        degrees = sorted(set(stats["tower_in_degree"].values())) or [0]
        in_deg = str(degrees[0]) if len(degrees) == 1 \
            else f"{degrees[0]}..{degrees[-1]}"
        by_size = ", ".join(f"size {s}: {c}" for s, c in
                            sorted(stats["mlp_count_by_code_size"].items()))
        click.echo(f"arch: {graph.arch.get('kind')}")
        click.echo(f"nodes: {stats['n_nodes']}, edges: {stats['n_edges']}")
        click.echo(f"switchers: {stats['n_switchers']}, "
                   f"mlps: {stats['n_mlps']}, bias: {stats['n_bias']}")
        click.echo(f"towers: {stats['n_towers']}, in-degree: {in_deg}")
        if by_size:
            click.echo(f"mlps by code size: {by_size}")
    if audit.violations:
        click.echo("violations:")
        for v in audit.violations:
            click.echo(f"  - {v}")
        raise SystemExit(1)
    text = export_graph(graph)
    out_dir = _out_dir(cfg, out)
    _write_text(os.path.join(out_dir, "graph.json"), text.json)
    _write_text(os.path.join(out_dir, "graph.dot"), text.dot)
    if fmt == "json":
        click.echo(text.json, nl=False)
    elif fmt == "dot":
        click.echo(text.dot, nl=False)


# ---------------------------------------------------------------------------
# grad-check


def _toy_batch(graph, feature_dim: int, data_seed: int):
    """Tiny random batch with labels for every task head."""
    rng = np.random.default_rng(node_seed(data_seed, "grad-check"))
    facets = graph.facets
    X = rng.normal(size=(GRAD_CHECK_BATCH, feature_dim))
    regions = np.stack([rng.integers(0, facets.m(f), size=GRAD_CHECK_BATCH)
                        for f in range(facets.n_facets)], axis=1)
    labels = {}
    for t in graph.tasks:
        if t.label_key in labels:
            continue
        if t.head == "binary":
            labels[t.label_key] = rng.integers(0, 2,
                                               size=GRAD_CHECK_BATCH).astype(float)
        else:
            labels[t.label_key] = rng.normal(size=GRAD_CHECK_BATCH)
    return X, regions, labels


def _pick_kink_free(graph, feature_dim: int, base_seed: int, policy, tasks):
    """Scan (data, init) seeds for pre-activations clear of the FD step.

    Central differences move parameters by 1e-5; a hidden pre-activation
    closer than that to zero crosses its ReLU kink and poisons the
    estimate. Dense graphs carry a few thousand pre-activations, which
    caps the best attainable margin near 1e-4, so that is the bar.
    """
    margin = GRAD_CHECK_THRESHOLD
    best = (-1.0, None)
    for shift in range(3):
        X, regions, labels = _toy_batch(graph, feature_dim, base_seed + shift)
        masks = routing_masks(regions, policy, tasks, graph.facets)
        for k in range(200):
            params = init_model(graph, base_seed + k)
            _, cache = model_forward(graph, params, X, regions)
            gap = relu_margin(cache)
            if gap > best[0]:
                best = (gap, (params, X, regions, labels, masks,
                              base_seed + k, base_seed + shift))
            if gap > 3 * margin:
                return best
    return best


@main.command("grad-check")
@click.option("--config", "config_path", required=True, help="Experiment JSON.")
@click.option("--seed", type=int, default=None,
              help="Base seed for the check batch and init scan.")
@_guard
def cmd_grad_check(config_path, seed):
    """Compare every parameter's analytic gradient against central finite
    differences on a toy batch; pass iff max relative error < 1e-4."""
    cfg = load_config(config_path)
    feature_dim = _feature_dim(cfg)
    if feature_dim > GRAD_CHECK_MAX_FEATURES:
        raise ConfigError(
            f"gradient check refused: feature_dim {feature_dim} > "
            f"{GRAD_CHECK_MAX_FEATURES}; finite differences cost two full "
            f"forward passes per parameter")
    graph = build_graph(cfg, feature_dim)
    base_seed = cfg.train.seed if seed is None else seed
    n_params = tree_size(init_model(graph, base_seed))
    if n_params == 0:
        click.echo("warning: graph has 0 parameters; nothing to check",
                   err=True)
        click.echo("PASS (vacuous: 0 parameters checked)")
        return
    gap, picked = _pick_kink_free(graph, feature_dim, base_seed, cfg.policy,
                                  graph.tasks)
    params, X, regions, labels, masks, init_seed, data_seed = picked
    if gap <= 1e-5:
        click.echo(f"warning: smallest ReLU margin found is {gap:.3g}, "
                   f"within reach of the 1e-05 step; the numeric estimate "
                   f"may be unreliable", err=True)
    weights = cfg.train.weights

    def loss(p):
        preds, _ = model_forward(graph, p, X, regions)
        total, _ = compute_loss(preds, labels, masks, graph.tasks, weights)
        return total

    preds, cache = model_forward(graph, params, X, regions)
    d_preds = loss_gradients(preds, labels, masks, graph.tasks, weights)
    analytic = engine.model_backward(graph, params, cache, d_preds)
    numeric = finite_difference_grads(loss, params, h=1e-5)

    worst_err, worst_node = -1.0, None
    for nid in sorted(params.nodes):
        err = max_grad_rel_error(analytic.nodes[nid], numeric.nodes[nid])
        if err > worst_err:
            worst_err, worst_node = err, nid
    for nid in sorted(params.combine):
        err = max_grad_rel_error(analytic.combine[nid], numeric.combine[nid])
        if err > worst_err:
            worst_err, worst_node = err, nid

    click.echo(f"data seed {data_seed}, init seed {init_seed} "
               f"(ReLU margin {gap:.3g})")
    click.echo(f"checked {n_params} parameters across "
               f"{len(params.nodes) + len(params.combine)} nodes")
    click.echo(f"max relative error {worst_err:.3g} at node {worst_node!r} "
               f"(threshold {GRAD_CHECK_THRESHOLD:g})")
    if worst_err < GRAD_CHECK_THRESHOLD:
        click.echo("PASS")
        return
    # Roundoff in the central difference scales like 1/h while a backward
    # defect is h-independent, so a 4x step separates the two causes.
    pool = params.combine if worst_node in params.combine else params.nodes
    ana = (analytic.combine if worst_node in params.combine
           else analytic.nodes)[worst_node]
    numeric2 = finite_difference_grads(lambda _: loss(params),
                                       pool[worst_node], h=4e-5)
    err2 = max_grad_rel_error(ana, numeric2)
    if err2 < GRAD_CHECK_THRESHOLD and err2 < worst_err / 2:
        click.echo(f"note: at step 4e-05 the worst node's error drops to "
                   f"{err2:.3g}; the excess at 1e-05 looks like "
                   f"finite-difference roundoff, not a backward defect "
                   f"(smaller graphs clear the threshold)")
    click.echo("FAIL")
    raise SystemExit(1)


if __name__ == "__main__":
    main()
