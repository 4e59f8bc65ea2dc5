"""Facet/task vocabulary and construction of the macro-structure graphs.

A facet is a named dimension with at least two named partitions. A code
assigns partitions to a subset of facets; tasks carry codes (full or
partial). The builders turn a facet/task declaration into one of four
graph shapes over switcher, MLP, tower, and bias nodes:

* flat: one root switcher fanning straight out to task towers;
* hmtl: a tree that splits one facet per level in a fixed permutation,
  MLP+switcher pairs at code sizes 1..N-1, towers at size N;
* mfh: nested hmtl trees; the root switcher branches per facet into a
  facet MLP+switcher, those branch per partition into size-1 code nodes,
  and code nodes extend until size d. A size-j node sums one inbound
  branch per retained size-(j-1) subcode, and each tower attaches to all
  retained subcodes of its task code of size min(d, |code|);
* biasnet: a flat or hmtl body over the non-bias facets plus a side MLP
  reading the bias facet's one-hot, added to every tower's output logit.

Graphs are immutable. Structural rules live in validate_graph, which
reports violations instead of throwing.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple

from .errors import ConfigError, ContractError
from .nn import MLPSpec
from .switchers import (
    CGC,
    SHARED_BOTTOM,
    SwitcherKind,
    SwitcherSpec,
    parse_kind,
    ple,
)

# ---------------------------------------------------------------------------
# facets, codes, tasks


@dataclass(frozen=True)
class FacetSpec:
    """Ordered facets, each an ordered tuple of partition names."""

    facets: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        object.__setattr__(self, "facets",
                           tuple((n, tuple(ps)) for n, ps in self.facets))
        if len(self.facets) < 1:
            raise ConfigError("need at least one facet")
        names = [n for n, _ in self.facets]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate facet names: {names}")
        for name, parts in self.facets:
            if len(parts) < 2:
                raise ConfigError(f"facet {name!r} needs >= 2 partitions")
            if len(set(parts)) != len(parts):
                raise ConfigError(f"duplicate partitions in facet {name!r}")

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    def facet_name(self, i: int) -> str:
        return self.facets[i][0]

    def partitions(self, i: int) -> tuple[str, ...]:
        return self.facets[i][1]

    def m(self, i: int) -> int:
        return len(self.facets[i][1])

    def facet_index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.facets):
            if n == name:
                return i
        raise ConfigError(f"unknown facet {name!r}")

    def partition_index(self, facet: int, name: str) -> int:
        parts = self.partitions(facet)
        if name not in parts:
            raise ConfigError(f"unknown partition {name!r} of facet "
                              f"{self.facet_name(facet)!r}")
        return parts.index(name)

    def code_of(self, assignment: dict[str, str]) -> "Code":
        pairs = []
        for fname, pname in assignment.items():
            fi = self.facet_index(fname)
            pairs.append((fi, self.partition_index(fi, pname)))
        return Code(tuple(pairs))


@dataclass(frozen=True, order=True)
class Code:
    """Canonically sorted (facet_index, partition_index) pairs.

    The empty code denotes the root. At most one pair per facet.
    """

    pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        pairs = tuple(sorted((int(f), int(p)) for f, p in self.pairs))
        object.__setattr__(self, "pairs", pairs)
        facets = [f for f, _ in pairs]
        if len(set(facets)) != len(facets):
            raise ConfigError(f"code assigns a facet twice: {pairs}")

    @property
    def size(self) -> int:
        return len(self.pairs)

    def assigned_facets(self) -> tuple[int, ...]:
        return tuple(f for f, _ in self.pairs)

    def partition_of(self, facet: int) -> int | None:
        for f, p in self.pairs:
            if f == facet:
                return p
        return None

    def is_subcode_of(self, other: "Code") -> bool:
        return set(self.pairs) <= set(other.pairs)

    def subcodes(self, j: int) -> list["Code"]:
        """All subcodes of exactly size j, canonical order."""
        return sorted(Code(c) for c in itertools.combinations(self.pairs, j))

    def extend(self, facet: int, partition: int) -> "Code":
        return Code(self.pairs + ((facet, partition),))

    def text(self, facets: FacetSpec) -> str:
        if not self.pairs:
            return "()"
        return "&".join(f"{facets.facet_name(f)}={facets.partitions(f)[p]}"
                        for f, p in self.pairs)

    def validate_against(self, facets: FacetSpec) -> None:
        for f, p in self.pairs:
            if not 0 <= f < facets.n_facets:
                raise ConfigError(f"facet index {f} out of range")
            if not 0 <= p < facets.m(f):
                raise ConfigError(f"partition index {p} out of range for "
                                  f"facet {facets.facet_name(f)!r}")


HEADS = ("regression", "binary")
_HEAD_ALIASES = {"mse": "regression", "bce": "binary", "xent": "binary"}


def parse_head(text: str) -> str:
    head = _HEAD_ALIASES.get(text.strip().lower(), text.strip().lower())
    if head not in HEADS:
        raise ConfigError(f"unknown head {text!r}; use one of {HEADS}")
    return head


@dataclass(frozen=True)
class TaskSpec:
    """One prediction task: a code, a head, and optionally its own tower."""

    name: str
    code: Code
    head: str = "regression"  # regression (MSE) | binary (BCE)
    label: str | None = None  # dataset label column; defaults to the name
    tower_mlp: MLPSpec | None = None  # None: filled in from BuildOptions

    def __post_init__(self):
        if self.code.size < 1:
            raise ConfigError(f"task {self.name!r} needs a code of size >= 1")
        if self.head not in HEADS:
            raise ConfigError(f"task {self.name!r}: unknown head {self.head!r}")

    @property
    def label_key(self) -> str:
        return self.label if self.label is not None else self.name


def make_task(facets: FacetSpec, assignment: dict[str, str], head: str = "regression",
              name: str | None = None, label: str | None = None,
              tower_mlp: MLPSpec | None = None) -> TaskSpec:
    """TaskSpec helper; the default name joins partition names in facet order."""
    code = facets.code_of(assignment)
    code.validate_against(facets)
    if name is None:
        name = "&".join(facets.partitions(f)[p] for f, p in code.pairs)
    return TaskSpec(name=name, code=code, head=parse_head(head), label=label,
                    tower_mlp=tower_mlp)


# ---------------------------------------------------------------------------
# code enumeration


def enumerate_codes(facets: FacetSpec, j: int) -> list[Code]:
    """All codes of exactly size j, canonical order.

    Count is the sum over j-subsets S of facets of the product of M_i for
    i in S; with all M_i equal to M this is C(N,j) * M^j.
    """
    n = facets.n_facets
    if j < 0 or j > n:
        raise ContractError(f"code size {j} out of range 0..{n}")
    codes = []
    for subset in itertools.combinations(range(n), j):
        for parts in itertools.product(*(range(facets.m(f)) for f in subset)):
            codes.append(Code(tuple(zip(subset, parts))))
    return sorted(codes)


def parse_code(facets: FacetSpec, text: str) -> Code:
    """Inverse of Code.text: 'g=a&h=c', or '()' / '' for the empty code."""
    text = text.strip()
    if text in ("", "()"):
        return Code()
    pairs = []
    for part in text.split("&"):
        fname, sep, pname = part.partition("=")
        if not sep:
            raise ConfigError(f"malformed code fragment {part!r}; "
                              f"expected facet=partition")
        fi = facets.facet_index(fname.strip())
        pairs.append((fi, facets.partition_index(fi, pname.strip())))
    return Code(tuple(pairs))


def full_regions(facets: FacetSpec) -> list[Code]:
    """Every full code (one partition per facet), facet-major order."""
    ranges = [range(facets.m(f)) for f in range(facets.n_facets)]
    return [Code(tuple(enumerate(combo)))
            for combo in itertools.product(*ranges)]


def extensions(code: Code, facets: FacetSpec) -> list[Code]:
    """All supercodes one facet bigger; empty for a full code."""
    code.validate_against(facets)
    assigned = set(code.assigned_facets())
    out = []
    for f in range(facets.n_facets):
        if f in assigned:
            continue
        for p in range(facets.m(f)):
            out.append(code.extend(f, p))
    return out


# ---------------------------------------------------------------------------
# graph types


@dataclass(frozen=True)
class Node:
    """One graph node; exactly one payload field is set, matching kind."""

    node_id: str
    kind: str  # switcher | mlp | tower | bias
    code: Code
    switcher: SwitcherSpec | None = None
    mlp: MLPSpec | None = None
    task: TaskSpec | None = None
    pending_facet: int | None = None  # facet-level nodes: facet chosen, partition not

    def __post_init__(self):
        payloads = {"switcher": self.switcher, "mlp": self.mlp,
                    "tower": self.task, "bias": self.mlp}
        if self.kind not in payloads:
            raise ConfigError(f"unknown node kind {self.kind!r}")
        if payloads[self.kind] is None:
            raise ConfigError(f"node {self.node_id!r} ({self.kind}) missing its spec")

    @property
    def output_dim(self) -> int:
        if self.kind == "switcher":
            return self.switcher.expert_dim
        if self.kind in ("mlp", "bias"):
            return self.mlp.output_dim
        return self.task.tower_mlp.output_dim

    def input_dim(self) -> int:
        if self.kind == "switcher":
            return self.switcher.input_dim
        if self.kind in ("mlp", "bias"):
            return self.mlp.input_dim
        return self.task.tower_mlp.input_dim


class Edge(NamedTuple):
    src: str
    dst: str
    branch: str  # switcher child id, "out" for chains, "bias" for bias adds


@dataclass(frozen=True)
class LatticeGraph:
    facets: FacetSpec
    arch: dict
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(Edge(*e) for e in self.edges))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        by_id = {n.node_id: n for n in self.nodes}
        if len(by_id) != len(self.nodes):
            raise ConfigError("duplicate node ids")
        outgoing: dict[str, list[Edge]] = {n.node_id: [] for n in self.nodes}
        incoming: dict[str, list[Edge]] = {n.node_id: [] for n in self.nodes}
        for e in self.edges:
            if e.src not in by_id or e.dst not in by_id:
                raise ConfigError(f"edge {e} references a missing node")
            outgoing[e.src].append(e)
            incoming[e.dst].append(e)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_out", {k: tuple(v) for k, v in outgoing.items()})
        object.__setattr__(self, "_in", {k: tuple(v) for k, v in incoming.items()})

    def node(self, node_id: str) -> Node:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise ContractError(f"no node {node_id!r}") from None

    def out_edges(self, node_id: str) -> tuple[Edge, ...]:
        return self._out[node_id]

    def in_edges(self, node_id: str) -> tuple[Edge, ...]:
        return self._in[node_id]

    def towers(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.kind == "tower")

    def root(self) -> Node:
        roots = [n for n in self.nodes
                 if n.kind == "switcher" and not self._in[n.node_id]]
        if len(roots) != 1:
            raise ContractError(f"expected one root switcher, found {len(roots)}")
        return roots[0]

    def topo_order(self) -> tuple[str, ...]:
        """Kahn's algorithm, stable in stored node order; cycles raise."""
        pending = {n.node_id: len(self._in[n.node_id]) for n in self.nodes}
        order, ready = [], [n.node_id for n in self.nodes if pending[n.node_id] == 0]
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for e in self._out[nid]:
                pending[e.dst] -= 1
                if pending[e.dst] == 0:
                    ready.append(e.dst)
        if len(order) != len(self.nodes):
            raise ContractError("graph has a cycle")
        return tuple(order)


# ---------------------------------------------------------------------------
# construction options

DEFAULT_LEVEL_KINDS: dict[int, SwitcherKind] = {0: SHARED_BOTTOM, 1: ple(2), 2: CGC}


@dataclass(frozen=True)
class BuildOptions:
    """Width/expert/kind knobs shared by all builders.

    level_kinds maps switcher level (root 0, facet switchers 1, code-size-j
    switchers j+1 in mfh graphs, j in hmtl trees) to a SwitcherKind; levels
    past the deepest key reuse the deepest entry.
    """

    feature_dim: int = 16
    expert_dim: int = 16
    shared_expert_count: int = 1
    specific_expert_count_per_child: int = 1
    expert_hidden: tuple[int, ...] | None = None  # None: one hidden layer
    node_hidden: tuple[int, ...] | None = None  # lattice MLPs; None: one hidden layer
    tower_hidden: tuple[int, ...] = (128, 64)
    bias_hidden: tuple[int, ...] = (128, 64)
    level_kinds: tuple[tuple[int, SwitcherKind], ...] | None = None
    learned_combine: bool = False

    def kind_for_level(self, level: int) -> SwitcherKind:
        kinds = dict(self.level_kinds) if self.level_kinds else DEFAULT_LEVEL_KINDS
        if level in kinds:
            return kinds[level]
        below = [k for k in kinds if k < level]
        if not below:
            raise ConfigError(f"no switcher kind configured at level {level}")
        return kinds[max(below)]

    def node_mlp(self, input_dim: int) -> MLPSpec:
        hidden = ((self.expert_dim, self.expert_dim) if self.node_hidden is None
                  else self.node_hidden)
        return MLPSpec(input_dim=input_dim, hidden_sizes=hidden)

    def tower_mlp(self) -> MLPSpec:
        return MLPSpec(input_dim=self.expert_dim,
                       hidden_sizes=self.tower_hidden + (1,))

    def bias_mlp(self, onehot_dim: int) -> MLPSpec:
        return MLPSpec(input_dim=onehot_dim, hidden_sizes=self.bias_hidden + (1,))

    def switcher(self, level: int, input_dim: int,
                 child_ids: tuple[str, ...]) -> SwitcherSpec:
        kind = self.kind_for_level(level)
        expert_mlp = None
        if self.expert_hidden is not None:
            expert_mlp = MLPSpec(input_dim=input_dim, hidden_sizes=self.expert_hidden)
        return SwitcherSpec(kind=kind, input_dim=input_dim,
                            expert_dim=self.expert_dim, child_ids=child_ids,
                            shared_expert_count=self.shared_expert_count,
                            specific_expert_count_per_child=(
                                0 if kind.name in ("mmoe", "shared_bottom")
                                else self.specific_expert_count_per_child),
                            expert_mlp=expert_mlp)


# ---------------------------------------------------------------------------
# builders


def _check_tasks(facets: FacetSpec, tasks: Iterable[TaskSpec]) -> tuple[TaskSpec, ...]:
    tasks = tuple(tasks)
    if not tasks:
        raise ContractError("need at least one task")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate task names: {names}")
    codes = [t.code for t in tasks]
    if len(set(codes)) != len(codes):
        raise ConfigError("task codes must be pairwise distinct")
    for t in tasks:
        t.code.validate_against(facets)
    return tasks


def _resolve_towers(tasks: tuple[TaskSpec, ...],
                    options: BuildOptions) -> tuple[TaskSpec, ...]:
    out = []
    for t in tasks:
        if t.tower_mlp is None:
            t = replace(t, tower_mlp=options.tower_mlp())
        elif t.tower_mlp.input_dim != options.expert_dim:
            raise ConfigError(f"task {t.name!r}: tower input width "
                              f"{t.tower_mlp.input_dim} != expert_dim "
                              f"{options.expert_dim}")
        if t.tower_mlp.output_dim != 1:
            raise ConfigError(f"task {t.name!r}: towers emit one column")
        out.append(t)
    return tuple(out)


def _tower_id(task: TaskSpec) -> str:
    return f"tower:{task.name}"


def _code_id(code: Code, facets: FacetSpec, part: str) -> str:
    return f"code:{code.text(facets)}/{part}"


def _branch_node(options: BuildOptions, node_id: str, code: Code, level: int,
                 input_dim: int, children: tuple[str, ...],
                 pending_facet: int | None = None) -> Node:
    """Switcher node, or a pass-through when only one branch survives.

    Switchers branch at least twice; a single-branch site degrades to an
    identity MLP (a one-layer projection when the widths differ).
    """
    if len(children) >= 2:
        return Node(node_id=node_id, kind="switcher", code=code,
                    switcher=options.switcher(level, input_dim, children),
                    pending_facet=pending_facet)
    hidden = () if input_dim == options.expert_dim else (options.expert_dim,)
    return Node(node_id=node_id, kind="mlp", code=code,
                mlp=MLPSpec(input_dim=input_dim, hidden_sizes=hidden),
                pending_facet=pending_facet)


def _arch(options: BuildOptions, **fields) -> dict:
    # combination weights are a model-level opt-in, so the graph must carry it
    if options.learned_combine:
        fields["learned_combine"] = True
    return fields


def _prune(facets: FacetSpec, arch: dict, nodes: list[Node],
           edges: list[Edge], tasks: tuple[TaskSpec, ...]) -> LatticeGraph:
    """Drop every node that lies on no path to a tower."""
    inbound: dict[str, list[str]] = {n.node_id: [] for n in nodes}
    for e in edges:
        inbound[e.dst].append(e.src)
    alive = {n.node_id for n in nodes if n.kind == "tower"}
    frontier = list(alive)
    while frontier:
        for src in inbound[frontier.pop()]:
            if src not in alive:
                alive.add(src)
                frontier.append(src)
    return LatticeGraph(
        facets=facets, arch=arch,
        nodes=tuple(n for n in nodes if n.node_id in alive),
        edges=tuple(e for e in edges if e.src in alive and e.dst in alive),
        tasks=tasks)


def build_flat(facets: FacetSpec, tasks: Iterable[TaskSpec],
               options: BuildOptions | None = None) -> LatticeGraph:
    """One root switcher branching straight to task towers."""
    options = options or BuildOptions()
    tasks = _resolve_towers(_check_tasks(facets, tasks), options)
    if len(tasks) < 2:
        raise ContractError("flat graphs need >= 2 tasks (switchers branch >= 2)")
    tower_ids = tuple(_tower_id(t) for t in tasks)
    root = Node(node_id="root", kind="switcher", code=Code(),
                switcher=options.switcher(0, options.feature_dim, tower_ids))
    nodes = [root] + [Node(node_id=_tower_id(t), kind="tower", code=t.code, task=t)
                      for t in tasks]
    edges = [Edge("root", tid, tid) for tid in tower_ids]
    return LatticeGraph(facets=facets, arch=_arch(options, kind="flat"),
                        nodes=tuple(nodes), edges=tuple(edges), tasks=tasks)


def build_hmtl(facets: FacetSpec, permutation: Iterable[int],
               tasks: Iterable[TaskSpec],
               options: BuildOptions | None = None) -> LatticeGraph:
    """Tree splitting one facet per level in permutation order."""
    options = options or BuildOptions()
    tasks = _resolve_towers(_check_tasks(facets, tasks), options)
    perm = tuple(int(i) for i in permutation)
    if sorted(perm) != list(range(facets.n_facets)):
        raise ConfigError(f"{perm} is not a permutation of all "
                          f"{facets.n_facets} facets")
    for t in tasks:
        if t.code.size != facets.n_facets:
            raise ContractError(f"hmtl requires full task codes; task "
                                f"{t.name!r} assigns {t.code.size} of "
                                f"{facets.n_facets} facets")

    n = facets.n_facets

    def prefix(code: Code, j: int) -> Code:
        keep = set(perm[:j])
        return Code(tuple(p for p in code.pairs if p[0] in keep))

    # realized prefix codes per depth, in first-task order
    by_depth: list[list[Code]] = []
    for j in range(1, n):
        seen: list[Code] = []
        for t in tasks:
            pc = prefix(t.code, j)
            if pc not in seen:
                seen.append(pc)
        by_depth.append(seen)

    nodes: list[Node] = []
    edges: list[Edge] = []

    def chain_entry(code: Code) -> str:
        return _code_id(code, facets, "mlp")

    first_children = (tuple(chain_entry(c) for c in by_depth[0]) if n > 1
                      else tuple(_tower_id(t) for t in tasks))
    if len(first_children) < 2:
        raise ContractError("root switcher would have fewer than 2 branches")
    nodes.append(Node(node_id="root", kind="switcher", code=Code(),
                      switcher=options.switcher(0, options.feature_dim,
                                                first_children)))
    for child in first_children:
        edges.append(Edge("root", child, child))
    for j in range(1, n):
        for code in by_depth[j - 1]:
            mlp_id = _code_id(code, facets, "mlp")
            sw_id = _code_id(code, facets, "sw")
            if j < n - 1:
                children = tuple(chain_entry(c) for c in by_depth[j]
                                 if code.is_subcode_of(c))
            else:
                children = tuple(_tower_id(t) for t in tasks
                                 if code.is_subcode_of(t.code))
            nodes.append(Node(node_id=mlp_id, kind="mlp", code=code,
                              mlp=options.node_mlp(options.expert_dim)))
            nodes.append(_branch_node(options, sw_id, code, j,
                                      options.expert_dim, children))
            edges.append(Edge(mlp_id, sw_id, "out"))
            for child in children:
                edges.append(Edge(sw_id, child, child))
    nodes.extend(Node(node_id=_tower_id(t), kind="tower", code=t.code, task=t)
                 for t in tasks)
    arch = _arch(options, kind="hmtl", permutation=list(perm))
    return _prune(facets, arch, nodes, edges, tasks)


def build_mfh(facets: FacetSpec, depth: int, tasks: Iterable[TaskSpec],
              options: BuildOptions | None = None) -> LatticeGraph:
    """Nested hmtl trees over every facet order, code nodes up to size depth."""
    options = options or BuildOptions()
    tasks = _resolve_towers(_check_tasks(facets, tasks), options)
    n = facets.n_facets
    if n < 2:
        raise ContractError("mfh needs >= 2 facets")
    if not 1 <= depth <= n - 1:
        raise ContractError(f"depth must satisfy 1 <= d <= {n - 1}, got {depth}")

    # retained codes: subcodes of task codes at sizes 1..min(d, |t|)
    retained: set[Code] = set()
    for t in tasks:
        top = min(depth, t.code.size)
        for j in range(1, top + 1):
            retained.update(t.code.subcodes(j))
    retained_facets = sorted({c.pairs[0][0] for c in retained if c.size == 1})
    if len(retained_facets) < 2:
        raise ContractError("tasks touch fewer than 2 facets; use flat or hmtl")

    def attach_here(code: Code, t: TaskSpec) -> bool:
        return (code.is_subcode_of(t.code)
                and code.size == min(depth, t.code.size))

    nodes: list[Node] = []
    edges: list[Edge] = []
    facet_mlp = {f: f"facet:{facets.facet_name(f)}/mlp" for f in retained_facets}
    facet_sw = {f: f"facet:{facets.facet_name(f)}/sw" for f in retained_facets}

    root_children = tuple(facet_mlp[f] for f in retained_facets)
    nodes.append(Node(node_id="root", kind="switcher", code=Code(),
                      switcher=options.switcher(0, options.feature_dim,
                                                root_children)))
    for f in retained_facets:
        edges.append(Edge("root", facet_mlp[f], facet_mlp[f]))
        size1 = sorted(c for c in retained
                       if c.size == 1 and c.pairs[0][0] == f)
        children = tuple(_code_id(c, facets, "mlp") for c in size1)
        nodes.append(Node(node_id=facet_mlp[f], kind="mlp", code=Code(),
                          mlp=options.node_mlp(options.expert_dim),
                          pending_facet=f))
        nodes.append(_branch_node(options, facet_sw[f], Code(), 1,
                                  options.expert_dim, children,
                                  pending_facet=f))
        edges.append(Edge(facet_mlp[f], facet_sw[f], "out"))
        for c in size1:
            cid = _code_id(c, facets, "mlp")
            edges.append(Edge(facet_sw[f], cid, cid))

    for code in sorted(retained, key=lambda c: (c.size, c.pairs)):
        mlp_id = _code_id(code, facets, "mlp")
        sw_id = _code_id(code, facets, "sw")
        ext_children = tuple(
            _code_id(c, facets, "mlp")
            for c in sorted(e for e in retained
                            if e.size == code.size + 1 and code.is_subcode_of(e)))
        tower_children = tuple(_tower_id(t) for t in tasks if attach_here(code, t))
        children = ext_children + tower_children
        nodes.append(Node(node_id=mlp_id, kind="mlp", code=code,
                          mlp=options.node_mlp(options.expert_dim)))
        nodes.append(_branch_node(options, sw_id, code, code.size + 1,
                                  options.expert_dim, children))
        edges.append(Edge(mlp_id, sw_id, "out"))
        for child in children:
            edges.append(Edge(sw_id, child, child))

    nodes.extend(Node(node_id=_tower_id(t), kind="tower", code=t.code, task=t)
                 for t in tasks)
    arch = _arch(options, kind="mfh", depth=depth)
    return _prune(facets, arch, nodes, edges, tasks)


def build_biasnet(facets: FacetSpec, bias_facet: int,
                  tasks: Iterable[TaskSpec],
                  options: BuildOptions | None = None,
                  body: str = "flat") -> LatticeGraph:
    """Flat or hmtl body plus a side tower on the bias facet's one-hot.

    The side tower's scalar output is added to every task tower's logit;
    the engine feeds it the bias facet's one-hot region indicator.
    """
    options = options or BuildOptions()
    tasks = _check_tasks(facets, tasks)
    if not 0 <= bias_facet < facets.n_facets:
        raise ConfigError(f"bias facet index {bias_facet} out of range")
    for t in tasks:
        if t.code.partition_of(bias_facet) is not None:
            raise ContractError(
                f"task {t.name!r} assigns the bias facet "
                f"{facets.facet_name(bias_facet)!r}; biasnet models that "
                f"facet with the side tower instead")
    if body == "flat":
        g = build_flat(facets, tasks, options)
    elif body == "hmtl":
        remaining = [f for f in range(facets.n_facets) if f != bias_facet]
        covered = {f for t in tasks for f in t.code.assigned_facets()}
        perm = [f for f in remaining if f in covered]
        sub = FacetSpec(tuple(facets.facets[i] for i in perm))
        remap = {old: new for new, old in enumerate(perm)}
        sub_tasks = tuple(
            replace(t, code=Code(tuple((remap[f], p) for f, p in t.code.pairs)))
            for t in tasks)
        g = build_hmtl(sub, range(len(perm)), sub_tasks, options)
        # restore original facet indexing on nodes and tasks
        back = {new: old for old, new in remap.items()}

        def restore(code: Code) -> Code:
            return Code(tuple((back[f], p) for f, p in code.pairs))

        nodes = []
        for nd in g.nodes:
            nd = replace(nd, code=restore(nd.code),
                         task=(replace(nd.task, code=restore(nd.task.code))
                               if nd.task else None))
            nodes.append(nd)
        resolved = {n.task.name: n.task for n in nodes if n.kind == "tower"}
        g = LatticeGraph(facets=facets, arch=g.arch, nodes=tuple(nodes),
                         edges=g.edges,
                         tasks=tuple(resolved[t.name] for t in tasks))
    else:
        raise ConfigError(f"unknown biasnet body {body!r}")

    bias_id = f"bias:{facets.facet_name(bias_facet)}"
    bias_node = Node(node_id=bias_id, kind="bias", code=Code(),
                     mlp=options.bias_mlp(facets.m(bias_facet)),
                     pending_facet=bias_facet)
    edges = list(g.edges)
    for t in g.tasks:
        edges.append(Edge(bias_id, _tower_id(t), "bias"))
    arch = _arch(options, kind="biasnet", bias_facet=bias_facet, body=body)
    return LatticeGraph(facets=facets, arch=arch,
                        nodes=g.nodes + (bias_node,), edges=tuple(edges),
                        tasks=g.tasks)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]
    stats: dict

    @property
    def ok(self) -> bool:
        return not self.violations


def _full_task_set(graph: LatticeGraph) -> bool:
    facets = graph.facets
    want = 1
    for i in range(facets.n_facets):
        want *= facets.m(i)
    full = all(t.code.size == facets.n_facets for t in graph.tasks)
    return full and len(graph.tasks) == want


def validate_graph(graph: LatticeGraph,
                   facets: FacetSpec | None = None) -> ValidationReport:
    """Structural audit; collects violations instead of raising."""
    facets = facets or graph.facets
    violations: list[str] = []
    stats: dict = {}

    try:
        order = graph.topo_order()
    except ContractError as err:
        return ValidationReport(violations=(str(err),), stats={})

    roots = [n for n in graph.nodes if not graph.in_edges(n.node_id)]
    switch_roots = [n for n in roots if n.kind == "switcher"]
    stray = [n for n in roots if n.kind not in ("switcher", "bias")]
    if len(switch_roots) != 1:
        violations.append(f"expected exactly 1 root switcher, found "
                          f"{len(switch_roots)}")
    for n in stray:
        violations.append(f"node {n.node_id!r} has no inbound edge")

    # reachability from the root, and to some tower
    reachable: set[str] = set()
    if switch_roots:
        frontier = [switch_roots[0].node_id]
        while frontier:
            nid = frontier.pop()
            if nid in reachable:
                continue
            reachable.add(nid)
            frontier.extend(e.dst for e in graph.out_edges(nid))
    for n in graph.nodes:
        if n.kind == "tower" and n.node_id not in reachable:
            violations.append(f"tower {n.node_id!r} unreachable from the root")
    to_tower: set[str] = set()
    for nid in reversed(order):
        node = graph.node(nid)
        if node.kind in ("tower", "bias"):
            to_tower.add(nid)
        elif any(e.dst in to_tower for e in graph.out_edges(nid)):
            to_tower.add(nid)
    for n in graph.nodes:
        if n.node_id not in to_tower:
            violations.append(f"node {n.node_id!r} lies on no path to a tower")

    # switcher wiring
    branch_counts: dict[str, int] = {}
    for n in graph.nodes:
        if n.kind != "switcher":
            continue
        out = graph.out_edges(n.node_id)
        branch_counts[n.node_id] = len(out)
        if len(out) < 2:
            violations.append(f"switcher {n.node_id!r} has {len(out)} branches")
        labels = sorted(e.branch for e in out)
        declared = sorted(n.switcher.child_ids)
        if labels != declared:
            violations.append(f"switcher {n.node_id!r} child ids "
                              f"{declared} != edge branches {labels}")

    # width agreement along edges
    for e in graph.edges:
        if e.branch == "bias":
            continue  # scalar added to the tower's logit, not its input
        src, dst = graph.node(e.src), graph.node(e.dst)
        if src.output_dim != dst.input_dim():
            violations.append(f"edge {e.src}->{e.dst}: width {src.output_dim} "
                              f"!= {dst.input_dim()}")

    # census
    mlp_by_size: dict[int, int] = {}
    for n in graph.nodes:
        if n.kind == "mlp" and n.pending_facet is None:
            mlp_by_size[n.code.size] = mlp_by_size.get(n.code.size, 0) + 1
    tower_in: dict[str, int] = {}
    bias_in: dict[str, int] = {}
    for n in graph.towers():
        inbound = graph.in_edges(n.node_id)
        tower_in[n.task.name] = sum(1 for e in inbound if e.branch != "bias")
        bias_in[n.task.name] = sum(1 for e in inbound if e.branch == "bias")

    kind = graph.arch.get("kind")
    if kind in ("flat", "hmtl") or (kind == "biasnet"):
        for t, deg in tower_in.items():
            if deg != 1:
                violations.append(f"tower {t!r} in-degree {deg}, expected 1")
    if kind == "mfh":
        depth = graph.arch["depth"]
        retained = {n.code for n in graph.nodes
                    if n.kind == "mlp" and n.pending_facet is None}
        for t in graph.tasks:
            j = min(depth, t.code.size)
            want = sum(1 for c in t.code.subcodes(j) if c in retained)
            if tower_in.get(t.name) != want:
                violations.append(f"tower {t.name!r} in-degree "
                                  f"{tower_in.get(t.name)}, expected {want}")
        if _full_task_set(graph):
            for j in range(1, depth + 1):
                want = len(enumerate_codes(facets, j))
                if mlp_by_size.get(j, 0) != want:
                    violations.append(f"{mlp_by_size.get(j, 0)} mlp nodes at "
                                      f"code size {j}, formula says {want}")

    stats.update(
        n_nodes=len(graph.nodes),
        n_edges=len(graph.edges),
        n_switchers=sum(1 for n in graph.nodes if n.kind == "switcher"),
        n_mlps=sum(1 for n in graph.nodes if n.kind == "mlp"),
        n_towers=sum(1 for n in graph.nodes if n.kind == "tower"),
        n_bias=sum(1 for n in graph.nodes if n.kind == "bias"),
        mlp_count_by_code_size=mlp_by_size,
        tower_in_degree=tower_in,
        bias_in_degree={k: v for k, v in bias_in.items() if v},
        switcher_branches=branch_counts,
    )
    return ValidationReport(violations=tuple(violations), stats=stats)


# ---------------------------------------------------------------------------
# serialization


class GraphText(NamedTuple):
    dot: str
    json: str


def _kind_text(kind: SwitcherKind) -> str:
    return f"ple:{kind.levels}" if kind.name == "ple" else kind.name


def _mlp_to_dict(spec: MLPSpec) -> dict:
    return {"input_dim": spec.input_dim, "hidden_sizes": list(spec.hidden_sizes)}


def _mlp_from_dict(d: dict) -> MLPSpec:
    return MLPSpec(input_dim=d["input_dim"], hidden_sizes=tuple(d["hidden_sizes"]))


def _switcher_to_dict(spec: SwitcherSpec) -> dict:
    return {
        "kind": _kind_text(spec.kind),
        "input_dim": spec.input_dim,
        "expert_dim": spec.expert_dim,
        "child_ids": list(spec.child_ids),
        "shared_expert_count": spec.shared_expert_count,
        "specific_expert_count_per_child": spec.specific_expert_count_per_child,
        "expert_mlp": _mlp_to_dict(spec.expert_mlp) if spec.expert_mlp else None,
    }


def _switcher_from_dict(d: dict) -> SwitcherSpec:
    return SwitcherSpec(
        kind=parse_kind(d["kind"]),
        input_dim=d["input_dim"],
        expert_dim=d["expert_dim"],
        child_ids=tuple(d["child_ids"]),
        shared_expert_count=d["shared_expert_count"],
        specific_expert_count_per_child=d["specific_expert_count_per_child"],
        expert_mlp=_mlp_from_dict(d["expert_mlp"]) if d["expert_mlp"] else None,
    )


def _code_to_list(code: Code, facets: FacetSpec) -> list:
    return [[facets.facet_name(f), facets.partitions(f)[p]] for f, p in code.pairs]


def _code_from_list(items: list, facets: FacetSpec) -> Code:
    return facets.code_of({f: p for f, p in items})


def _task_to_dict(task: TaskSpec, facets: FacetSpec) -> dict:
    return {
        "name": task.name,
        "code": _code_to_list(task.code, facets),
        "head": task.head,
        "label": task.label,
        "tower_mlp": _mlp_to_dict(task.tower_mlp) if task.tower_mlp else None,
    }


def _task_from_dict(d: dict, facets: FacetSpec) -> TaskSpec:
    return TaskSpec(
        name=d["name"], code=_code_from_list(d["code"], facets), head=d["head"],
        label=d["label"],
        tower_mlp=_mlp_from_dict(d["tower_mlp"]) if d["tower_mlp"] else None,
    )


def export_graph(graph: LatticeGraph) -> GraphText:
    """DOT and JSON renderings, both deterministic in node-id order."""
    facets = graph.facets
    nodes = sorted(graph.nodes, key=lambda n: n.node_id)
    edges = sorted(graph.edges)

    shapes = {"switcher": "diamond", "mlp": "box", "tower": "ellipse",
              "bias": "house"}
    lines = ["digraph lattice {", "  rankdir=LR;"]
    for n in nodes:
        if n.kind == "switcher":
            detail = _kind_text(n.switcher.kind)
        elif n.kind == "tower":
            detail = n.task.head
        else:
            detail = "x".join(str(s) for s in n.mlp.hidden_sizes) or "identity"
        code = n.code.text(facets)
        label = f"{n.kind} {detail}\\n{code}" if code != "()" else f"{n.kind} {detail}"
        lines.append(f'  "{n.node_id}" [shape={shapes[n.kind]}, label="{label}"];')
    for e in edges:
        attr = ' [style=dashed, label="bias"]' if e.branch == "bias" else ""
        lines.append(f'  "{e.src}" -> "{e.dst}"{attr};')
    lines.append("}")
    dot = "\n".join(lines) + "\n"

    node_dicts = []
    for n in nodes:
        if n.kind == "switcher":
            spec = _switcher_to_dict(n.switcher)
        elif n.kind == "tower":
            spec = _task_to_dict(n.task, facets)
        else:
            spec = _mlp_to_dict(n.mlp)
        if n.pending_facet is not None:
            spec = dict(spec, facet=facets.facet_name(n.pending_facet))
        node_dicts.append({"id": n.node_id, "kind": n.kind,
                           "code": _code_to_list(n.code, facets), "spec": spec})
    doc = {
        "facets": [[name, list(parts)] for name, parts in facets.facets],
        "arch_kind": graph.arch,
        "nodes": node_dicts,
        "edges": [{"from": e.src, "to": e.dst, "branch": e.branch}
                  for e in edges],
        "tasks": [_task_to_dict(t, facets) for t in graph.tasks],
    }
    return GraphText(dot=dot, json=json.dumps(doc, indent=2, sort_keys=True) + "\n")


def import_graph(text: str) -> LatticeGraph:
    """Inverse of export_graph's JSON rendering."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"graph JSON does not parse: {err}") from None
    try:
        facets = FacetSpec(tuple((n, tuple(ps)) for n, ps in doc["facets"]))
        nodes = []
        for nd in doc["nodes"]:
            spec = nd["spec"]
            code = _code_from_list(nd["code"], facets)
            pending = (facets.facet_index(spec["facet"])
                       if "facet" in spec else None)
            if nd["kind"] == "switcher":
                nodes.append(Node(node_id=nd["id"], kind="switcher", code=code,
                                  switcher=_switcher_from_dict(spec),
                                  pending_facet=pending))
            elif nd["kind"] == "tower":
                nodes.append(Node(node_id=nd["id"], kind="tower", code=code,
                                  task=_task_from_dict(spec, facets)))
            else:
                nodes.append(Node(node_id=nd["id"], kind=nd["kind"], code=code,
                                  mlp=_mlp_from_dict(spec),
                                  pending_facet=pending))
        edges = tuple(Edge(e["from"], e["to"], e["branch"])
                      for e in doc["edges"])
        tasks = tuple(_task_from_dict(t, facets) for t in doc["tasks"])
        return LatticeGraph(facets=facets, arch=doc["arch_kind"], nodes=tuple(nodes),
                            edges=edges, tasks=tasks)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"graph JSON is malformed: {err!r}") from None
