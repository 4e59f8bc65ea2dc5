"""Micro-level sharing structures: shared-bottom, MMOE, CGC, and PLE.

A switcher takes one input matrix and branches out one representation per
child. All four kinds share the same external contract:

    switcher_forward(spec, params, X) -> ({child_id: batch x expert_dim}, cache)

Gate semantics are the canonical ones. Level-1 gates read the switcher's
raw input; at deeper PLE levels each gate reads its own path's previous
output. Gates are a single linear map plus softmax, no bias. A child gate
sees [its specific experts, then the shared experts]; the intermediate
shared-path gate sees every expert at its level, children first in child
order, shared experts last. Mixing sums run left to right over that
visibility order so results are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .nn import (
    MLPParams,
    MLPSpec,
    MlpCache,
    _init_mlp_layers,
    mlp_backward,
    mlp_forward,
    mlp_param_count,
    node_seed,
    softmax,
)

_KIND_NAMES = ("shared_bottom", "mmoe", "cgc", "ple")


@dataclass(frozen=True)
class SwitcherKind:
    name: str
    levels: int = 1

    def __post_init__(self):
        if self.name not in _KIND_NAMES:
            raise ConfigError(f"unknown switcher kind {self.name!r}")
        if self.name == "ple":
            if self.levels < 1:
                raise ConfigError("ple needs levels >= 1")
        elif self.levels != 1:
            raise ConfigError(f"{self.name} has no levels parameter")


SHARED_BOTTOM = SwitcherKind("shared_bottom")
MMOE = SwitcherKind("mmoe")
CGC = SwitcherKind("cgc")


def ple(levels: int) -> SwitcherKind:
    return SwitcherKind("ple", levels)


def parse_kind(text: str) -> SwitcherKind:
    """Parse "cgc", "mmoe", "shared_bottom", or "ple:<levels>"."""
    name, _, arg = text.strip().partition(":")
    if name == "ple":
        try:
            return ple(int(arg) if arg else 1)
        except ValueError:
            raise ConfigError(f"bad ple level count {arg!r}") from None
    if arg:
        raise ConfigError(f"switcher kind {name!r} takes no argument")
    return SwitcherKind(name)


@dataclass(frozen=True)
class SwitcherSpec:
    kind: SwitcherKind
    input_dim: int
    expert_dim: int
    child_ids: tuple[str, ...]
    shared_expert_count: int = 1
    specific_expert_count_per_child: int = 0
    expert_mlp: MLPSpec | None = None  # None: one hidden layer of expert_dim
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "child_ids", tuple(self.child_ids))
        if self.input_dim < 1 or self.expert_dim < 1:
            raise ConfigError("input_dim and expert_dim must be >= 1")
        if len(self.child_ids) < 2:
            raise ConfigError("a switcher branches out at least 2 children")
        if len(set(self.child_ids)) != len(self.child_ids):
            raise ConfigError(f"duplicate child ids: {self.child_ids}")
        if self.kind.name == "mmoe":
            if self.shared_expert_count < 1:
                raise ConfigError("mmoe needs shared_expert_count >= 1")
            if self.specific_expert_count_per_child != 0:
                raise ConfigError("mmoe has no task-specific experts")
        elif self.kind.name in ("cgc", "ple"):
            if self.shared_expert_count < 1:
                raise ConfigError(f"{self.kind.name} needs shared_expert_count >= 1")
            if self.specific_expert_count_per_child < 0:
                raise ConfigError("specific_expert_count_per_child must be >= 0")
        if self.expert_mlp is not None:
            if self.expert_mlp.input_dim != self.input_dim:
                raise ConfigError("expert_mlp.input_dim must equal switcher input_dim")
        if self.expert_spec(level=1).output_dim != self.expert_dim:
            raise ConfigError("expert output width must equal expert_dim")

    @property
    def n_levels(self) -> int:
        return self.kind.levels if self.kind.name == "ple" else 1

    def level_input_dim(self, level: int) -> int:
        return self.input_dim if level == 1 else self.expert_dim

    def expert_spec(self, level: int) -> MLPSpec:
        """Expert shape at a given level (1-based). Seed is assigned per node."""
        hidden = (self.expert_mlp.hidden_sizes if self.expert_mlp is not None
                  else (self.expert_dim, self.expert_dim))
        return MLPSpec(input_dim=self.level_input_dim(level), hidden_sizes=hidden)

    def child_gate_width(self) -> int:
        return self.specific_expert_count_per_child + self.shared_expert_count

    def shared_gate_width(self) -> int:
        return (len(self.child_ids) * self.specific_expert_count_per_child
                + self.shared_expert_count)


@dataclass(frozen=True)
class LevelParams:
    specific: dict[str, tuple[MLPParams, ...]]
    shared: tuple[MLPParams, ...]
    child_gates: dict[str, np.ndarray]  # child_id -> (visible, in)
    shared_gate: np.ndarray | None  # only on PLE levels below the last


@dataclass(frozen=True)
class SwitcherParams:
    bottom: MLPParams | None = None  # shared_bottom only
    levels: tuple[LevelParams, ...] = ()


@dataclass(frozen=True)
class LevelCache:
    x_children: dict[str, np.ndarray]
    x_shared: np.ndarray
    specific_outs: dict[str, tuple[np.ndarray, ...]]
    specific_caches: dict[str, tuple[MlpCache, ...]]
    shared_outs: tuple[np.ndarray, ...]
    shared_caches: tuple[MlpCache, ...]
    child_gate_w: dict[str, np.ndarray]
    shared_gate_w: np.ndarray | None


@dataclass(frozen=True)
class SwitcherCache:
    x: np.ndarray
    bottom: MlpCache | None = None
    levels: tuple[LevelCache, ...] = ()


# ---------------------------------------------------------------------------
# construction


def _init_gate(seed: int, visible: int, in_dim: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (in_dim + visible))
    return rng.uniform(-limit, limit, size=(visible, in_dim))


def init_switcher(spec: SwitcherSpec) -> SwitcherParams:
    """Parameters fully determined by spec.seed.

    Every expert and gate gets its own seed derived from (seed, role), so a
    child's parameters do not depend on its position in child_ids.
    """
    if spec.kind.name == "shared_bottom":
        body = spec.expert_spec(level=1)
        rng = np.random.default_rng(node_seed(spec.seed, "bottom"))
        return SwitcherParams(bottom=_init_mlp_layers(rng, body.input_dim,
                                                      body.hidden_sizes))
    levels = []
    n_specific = spec.specific_expert_count_per_child
    for lvl in range(1, spec.n_levels + 1):
        espec = spec.expert_spec(lvl)
        in_dim = spec.level_input_dim(lvl)

        def expert(role: str) -> MLPParams:
            rng = np.random.default_rng(node_seed(spec.seed, role))
            return _init_mlp_layers(rng, espec.input_dim, espec.hidden_sizes)

        specific = {c: tuple(expert(f"L{lvl}/{c}/expert{i}") for i in range(n_specific))
                    for c in spec.child_ids}
        shared = tuple(expert(f"L{lvl}/shared/expert{i}")
                       for i in range(spec.shared_expert_count))
        child_gates = {
            c: _init_gate(node_seed(spec.seed, f"L{lvl}/{c}/gate"),
                          spec.child_gate_width(), in_dim)
            for c in spec.child_ids
        }
        shared_gate = None
        if lvl < spec.n_levels:
            # One row per visible expert, seeded by the expert's identity, so
            # reordering child_ids reorders rows instead of reshuffling draws.
            limit = np.sqrt(6.0 / (in_dim + spec.shared_gate_width()))
            roles = [f"L{lvl}/{c}/expert{i}"
                     for c in spec.child_ids for i in range(n_specific)]
            roles += [f"L{lvl}/shared/expert{i}"
                      for i in range(spec.shared_expert_count)]
            rows = [
                np.random.default_rng(node_seed(spec.seed, f"gate-row/{r}"))
                .uniform(-limit, limit, size=in_dim)
                for r in roles
            ]
            shared_gate = np.stack(rows)
        levels.append(LevelParams(specific=specific, shared=shared,
                                  child_gates=child_gates, shared_gate=shared_gate))
    return SwitcherParams(levels=tuple(levels))


def switcher_param_count(spec: SwitcherSpec) -> int:
    """Learnable-scalar count as a pure function of the spec."""
    if spec.kind.name == "shared_bottom":
        return mlp_param_count(spec.expert_spec(level=1))
    total = 0
    n_children = len(spec.child_ids)
    n_specific = spec.specific_expert_count_per_child
    for lvl in range(1, spec.n_levels + 1):
        per_expert = mlp_param_count(spec.expert_spec(lvl))
        in_dim = spec.level_input_dim(lvl)
        total += per_expert * (n_children * n_specific + spec.shared_expert_count)
        total += n_children * spec.child_gate_width() * in_dim
        if lvl < spec.n_levels:
            total += spec.shared_gate_width() * in_dim
    return total


# ---------------------------------------------------------------------------
# forward


def _mix_forward(gate: np.ndarray, gate_in: np.ndarray,
                 visible: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-weighted sum of the visible expert outputs, left to right."""
    if gate.shape[0] != len(visible):
        raise ContractError(f"gate width {gate.shape[0]} != visible {len(visible)}")
    w = softmax(gate_in @ gate.T, axis=-1)
    out = w[:, 0:1] * visible[0]
    for i in range(1, len(visible)):
        out = out + w[:, i : i + 1] * visible[i]
    return out, w


def _mmoe_forward(
    spec: SwitcherSpec, params: SwitcherParams, x: np.ndarray
) -> tuple[dict[str, np.ndarray], SwitcherCache]:
    # Deliberately not routed through the CGC/PLE level loop: keeping MMOE a
    # separate path lets the reduction-ladder tests compare two routes.
    (lp,) = params.levels
    shared_outs, shared_caches = [], []
    for ep in lp.shared:
        o, cc = mlp_forward(ep, x)
        shared_outs.append(o)
        shared_caches.append(cc)
    outputs: dict[str, np.ndarray] = {}
    gate_w: dict[str, np.ndarray] = {}
    for c in spec.child_ids:
        w = softmax(x @ lp.child_gates[c].T, axis=-1)
        mixed = w[:, 0:1] * shared_outs[0]
        for i in range(1, len(shared_outs)):
            mixed = mixed + w[:, i : i + 1] * shared_outs[i]
        outputs[c] = mixed
        gate_w[c] = w
    level = LevelCache(
        x_children={c: x for c in spec.child_ids}, x_shared=x,
        specific_outs={c: () for c in spec.child_ids},
        specific_caches={c: () for c in spec.child_ids},
        shared_outs=tuple(shared_outs), shared_caches=tuple(shared_caches),
        child_gate_w=gate_w, shared_gate_w=None)
    return outputs, SwitcherCache(x=x, levels=(level,))


def _mmoe_backward(
    spec: SwitcherSpec, params: SwitcherParams, cache: SwitcherCache,
    d_children: dict[str, np.ndarray],
) -> tuple[SwitcherParams, np.ndarray]:
    (lp,) = params.levels
    (lc,) = cache.levels
    d_expert_outs = [np.zeros_like(o) for o in lc.shared_outs]
    dx = np.zeros_like(cache.x)
    gate_grads: dict[str, np.ndarray] = {}
    for c in spec.child_ids:
        w = lc.child_gate_w[c]
        dw = np.empty_like(w)
        for i, o in enumerate(lc.shared_outs):
            d_expert_outs[i] += w[:, i : i + 1] * d_children[c]
            dw[:, i] = (d_children[c] * o).sum(axis=1)
        dz = _softmax_vjp(w, dw)
        gate_grads[c] = dz.T @ cache.x
        dx = dx + dz @ lp.child_gates[c]
    shared_grads = []
    d_from_experts = np.zeros_like(cache.x)
    for ep, ec, do in zip(lp.shared, lc.shared_caches, d_expert_outs):
        g, dxe = mlp_backward(ep, ec, do)
        shared_grads.append(g)
        d_from_experts += dxe
    dx = dx + d_from_experts
    level = LevelParams(specific={c: () for c in spec.child_ids},
                        shared=tuple(shared_grads), child_gates=gate_grads,
                        shared_gate=None)
    return SwitcherParams(levels=(level,)), dx


def switcher_forward(
    spec: SwitcherSpec, params: SwitcherParams, x: np.ndarray
) -> tuple[dict[str, np.ndarray], SwitcherCache]:
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"expected batch x {spec.input_dim}, got {x.shape}")
    if spec.kind.name == "shared_bottom":
        out, cache = mlp_forward(params.bottom, x)
        return ({c: out for c in spec.child_ids},
                SwitcherCache(x=x, bottom=cache))
    if len(params.levels) != spec.n_levels:
        raise ContractError("params level count does not match spec")
    if spec.kind.name == "mmoe":
        return _mmoe_forward(spec, params, x)

    x_children = {c: x for c in spec.child_ids}
    x_shared = x
    level_caches = []
    for lvl, lp in enumerate(params.levels, start=1):
        spec_outs: dict[str, tuple[np.ndarray, ...]] = {}
        spec_caches: dict[str, tuple[MlpCache, ...]] = {}
        for c in spec.child_ids:
            outs, caches = [], []
            for ep in lp.specific[c]:
                o, cc = mlp_forward(ep, x_children[c])
                outs.append(o)
                caches.append(cc)
            spec_outs[c], spec_caches[c] = tuple(outs), tuple(caches)
        shared_outs, shared_caches = [], []
        for ep in lp.shared:
            o, cc = mlp_forward(ep, x_shared)
            shared_outs.append(o)
            shared_caches.append(cc)

        next_children: dict[str, np.ndarray] = {}
        child_gate_w: dict[str, np.ndarray] = {}
        for c in spec.child_ids:
            visible = list(spec_outs[c]) + shared_outs
            next_children[c], child_gate_w[c] = _mix_forward(
                lp.child_gates[c], x_children[c], visible)
        shared_gate_w = None
        next_shared = x_shared
        if lp.shared_gate is not None:
            visible = [o for c in spec.child_ids for o in spec_outs[c]] + shared_outs
            next_shared, shared_gate_w = _mix_forward(
                lp.shared_gate, x_shared, visible)

        level_caches.append(LevelCache(
            x_children=x_children, x_shared=x_shared,
            specific_outs=spec_outs, specific_caches=spec_caches,
            shared_outs=tuple(shared_outs), shared_caches=tuple(shared_caches),
            child_gate_w=child_gate_w, shared_gate_w=shared_gate_w))
        x_children, x_shared = next_children, next_shared
    return x_children, SwitcherCache(x=x, levels=tuple(level_caches))


# ---------------------------------------------------------------------------
# backward


def _softmax_vjp(w: np.ndarray, dw: np.ndarray) -> np.ndarray:
    # row-wise softmax Jacobian: dz = w * (dw - sum(dw * w))
    return w * (dw - (dw * w).sum(axis=-1, keepdims=True))


def _mix_backward(
    gate: np.ndarray, gate_in: np.ndarray, w: np.ndarray,
    visible: list[np.ndarray], d_out: np.ndarray,
    d_visible: list[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Grads of the mixing site; adds expert-output grads into d_visible."""
    dw = np.empty_like(w)
    for i, v in enumerate(visible):
        d_visible[i] += w[:, i : i + 1] * d_out
        dw[:, i] = (d_out * v).sum(axis=1)
    dz = _softmax_vjp(w, dw)
    return dz.T @ gate_in, dz @ gate


def switcher_backward(
    spec: SwitcherSpec, params: SwitcherParams, cache: SwitcherCache,
    d_out: dict[str, np.ndarray],
) -> tuple[SwitcherParams, np.ndarray]:
    """Exact gradients; children missing from d_out contribute zeros."""
    for c in d_out:
        if c not in spec.child_ids:
            raise ContractError(f"gradient for unknown child {c!r}")
    batch = cache.x.shape[0]
    for c, d in d_out.items():
        if d.shape != (batch, spec.expert_dim):
            raise DimensionError(f"d_out[{c!r}] has shape {d.shape}, expected "
                                 f"{(batch, spec.expert_dim)}")

    if spec.kind.name == "shared_bottom":
        total = np.zeros((batch, spec.expert_dim))
        for c in spec.child_ids:
            if c in d_out:
                total = total + d_out[c]
        grads, dx = mlp_backward(params.bottom, cache.bottom, total)
        return SwitcherParams(bottom=grads), dx

    d_children = {
        c: d_out.get(c, np.zeros((batch, spec.expert_dim))) for c in spec.child_ids
    }
    if spec.kind.name == "mmoe":
        return _mmoe_backward(spec, params, cache, d_children)
    d_shared: np.ndarray | None = None  # nothing consumes the last shared output
    level_grads: list[LevelParams] = [None] * len(params.levels)
    for lvl in range(len(params.levels), 0, -1):
        lp = params.levels[lvl - 1]
        lc = cache.levels[lvl - 1]
        d_spec_outs = {c: [np.zeros_like(o) for o in lc.specific_outs[c]]
                       for c in spec.child_ids}
        d_shared_outs = [np.zeros_like(o) for o in lc.shared_outs]
        d_x_children = {c: np.zeros_like(lc.x_children[c]) for c in spec.child_ids}
        d_x_shared = np.zeros_like(lc.x_shared)

        gate_grads: dict[str, np.ndarray] = {}
        for c in spec.child_ids:
            visible = list(lc.specific_outs[c]) + list(lc.shared_outs)
            d_visible = d_spec_outs[c] + d_shared_outs
            d_gate, d_in = _mix_backward(lp.child_gates[c], lc.x_children[c],
                                         lc.child_gate_w[c], visible,
                                         d_children[c], d_visible)
            n_spec = len(lc.specific_outs[c])
            d_spec_outs[c] = d_visible[:n_spec]
            d_shared_outs = d_visible[n_spec:]
            gate_grads[c] = d_gate
            d_x_children[c] += d_in
        shared_gate_grad = None
        if lp.shared_gate is not None:
            visible = [o for c in spec.child_ids for o in lc.specific_outs[c]]
            visible += list(lc.shared_outs)
            d_visible = [d for c in spec.child_ids for d in d_spec_outs[c]]
            d_visible += d_shared_outs
            shared_gate_grad, d_in = _mix_backward(
                lp.shared_gate, lc.x_shared, lc.shared_gate_w, visible,
                d_shared, d_visible)
            pos = 0
            for c in spec.child_ids:
                n_spec = len(lc.specific_outs[c])
                d_spec_outs[c] = d_visible[pos : pos + n_spec]
                pos += n_spec
            d_shared_outs = d_visible[pos:]
            d_x_shared += d_in

        spec_grads: dict[str, tuple[MLPParams, ...]] = {}
        for c in spec.child_ids:
            per_child = []
            for ep, ec, do in zip(lp.specific[c], lc.specific_caches[c],
                                  d_spec_outs[c]):
                g, dx = mlp_backward(ep, ec, do)
                per_child.append(g)
                d_x_children[c] += dx
            spec_grads[c] = tuple(per_child)
        shared_grads = []
        for ep, ec, do in zip(lp.shared, lc.shared_caches, d_shared_outs):
            g, dx = mlp_backward(ep, ec, do)
            shared_grads.append(g)
            d_x_shared += dx

        level_grads[lvl - 1] = LevelParams(
            specific=spec_grads, shared=tuple(shared_grads),
            child_gates=gate_grads, shared_gate=shared_gate_grad)
        d_children, d_shared = d_x_children, d_x_shared

    dx = np.zeros_like(cache.x)
    for c in spec.child_ids:
        dx = dx + d_children[c]
    dx = dx + d_shared
    return SwitcherParams(levels=tuple(level_grads)), dx
