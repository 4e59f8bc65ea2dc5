"""Dense-network substrate: seeded MLPs, hand-written backprop, Adam.

Conventions used everywhere in this package:

* a "matrix" is a 2-D ``np.ndarray`` (batch x dim), float64 unless a run
  explicitly selects float32;
* an MLP is a chain of affine layers sized ``input_dim -> sizes[0] -> ...
  -> sizes[-1]``, with ReLU after every layer except the last (the final
  layer is always linear) — an empty ``sizes`` tuple means zero layers,
  i.e. the identity map;
* every operation is a pure function of its inputs plus explicit seeds,
  so repeated calls are bitwise identical.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Callable, Iterator

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

# ---------------------------------------------------------------------------
# parameter trees
#
# Parameters live in nested dataclasses/dicts/tuples with ndarray leaves.
# The helpers below walk two or more trees in lockstep so the optimizer and
# the gradient checker never need to know the concrete layout.


def tree_map(fn: Callable[..., Any], tree: Any, *rest: Any) -> Any:
    """Apply ``fn`` to every ndarray leaf, rebuilding the same structure."""
    if isinstance(tree, np.ndarray):
        return fn(tree, *rest)
    if isinstance(tree, dict):
        return {k: tree_map(fn, tree[k], *(r[k] for r in rest)) for k in sorted(tree)}
    if isinstance(tree, (list, tuple)):
        mapped = [tree_map(fn, v, *(r[i] for r in rest)) for i, v in enumerate(tree)]
        return type(tree)(mapped)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        fields = {}
        for f in dataclasses.fields(tree):
            fields[f.name] = tree_map(
                fn, getattr(tree, f.name), *(getattr(r, f.name) for r in rest)
            )
        return dataclasses.replace(tree, **fields)
    return tree  # scalar metadata (ints, strings, None) passes through


def tree_leaves(tree: Any) -> Iterator[np.ndarray]:
    """Yield ndarray leaves in the deterministic ``tree_map`` order."""
    if isinstance(tree, np.ndarray):
        yield tree
    elif isinstance(tree, dict):
        for k in sorted(tree):
            yield from tree_leaves(tree[k])
    elif isinstance(tree, (list, tuple)):
        for v in tree:
            yield from tree_leaves(v)
    elif dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        for f in dataclasses.fields(tree):
            yield from tree_leaves(getattr(tree, f.name))


def tree_size(tree: Any) -> int:
    return sum(leaf.size for leaf in tree_leaves(tree))


def tree_zeros_like(tree: Any) -> Any:
    return tree_map(np.zeros_like, tree)


def tree_add(a: Any, b: Any) -> Any:
    return tree_map(lambda x, y: x + y, a, b)


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MLPSpec:
    """Shape of an MLP: ``input_dim -> hidden_sizes[0] -> ... -> hidden_sizes[-1]``.

    ``hidden_sizes`` lists every layer's output width, final layer included.
    It may be empty, in which case the MLP is the identity map.
    """

    input_dim: int
    hidden_sizes: tuple[int, ...] = ()
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(s) for s in self.hidden_sizes))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        for s in self.hidden_sizes:
            if s < 1:
                raise ConfigError(f"layer sizes must be >= 1, got {self.hidden_sizes}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def output_dim(self) -> int:
        return self.hidden_sizes[-1] if self.hidden_sizes else self.input_dim


@dataclass(frozen=True)
class MLPParams:
    """Per layer: weight of shape (out, in) and bias of shape (out,)."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class MlpCache:
    x: np.ndarray
    inputs: tuple[np.ndarray, ...]  # input to each layer
    pre: tuple[np.ndarray, ...]  # pre-activation of each layer


def mlp_param_count(spec: MLPSpec) -> int:
    total, fan_in = 0, spec.input_dim
    for out in spec.hidden_sizes:
        total += out * fan_in + out
        fan_in = out
    return total


def init_mlp(spec: MLPSpec) -> MLPParams:
    """Xavier-uniform weights, zero biases, fully determined by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    return _init_mlp_layers(rng, spec.input_dim, spec.hidden_sizes)


def _init_mlp_layers(
    rng: np.random.Generator, input_dim: int, sizes: tuple[int, ...]
) -> MLPParams:
    layers = []
    fan_in = input_dim
    for out in sizes:
        if out < 1 or fan_in < 1:
            raise ConfigError("layer sizes must be >= 1")
        limit = np.sqrt(6.0 / (fan_in + out))
        w = rng.uniform(-limit, limit, size=(out, fan_in))
        b = np.zeros(out)
        layers.append((w, b))
        fan_in = out
    return MLPParams(layers=tuple(layers))


def mlp_forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """ReLU on hidden layers, linear final layer; identity when zero layers."""
    if x.ndim != 2:
        raise DimensionError(f"expected a batch x dim matrix, got shape {x.shape}")
    if params.layers and x.shape[1] != params.layers[0][0].shape[1]:
        raise DimensionError(
            f"input width {x.shape[1]} != layer fan-in {params.layers[0][0].shape[1]}"
        )
    a = x
    inputs, pre = [], []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < last else z
    return a, MlpCache(x=x, inputs=tuple(inputs), pre=tuple(pre))


def mlp_backward(
    params: MLPParams, cache: MlpCache, d_out: np.ndarray
) -> tuple[MLPParams, np.ndarray]:
    """Exact reverse-mode gradients of ``mlp_forward``; returns (grads, dX)."""
    if len(cache.inputs) != len(params.layers):
        raise ContractError("cache does not match params (layer count differs)")
    if not params.layers:
        if d_out.shape != cache.x.shape:
            raise DimensionError("d_out shape differs from forward input")
        return MLPParams(layers=()), d_out
    if d_out.shape != (cache.x.shape[0], params.layers[-1][0].shape[0]):
        raise DimensionError(f"d_out has shape {d_out.shape}, expected "
                             f"{(cache.x.shape[0], params.layers[-1][0].shape[0])}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    dz = d_out
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        if cache.inputs[i].shape[1] != w.shape[1]:
            raise ContractError("cache does not match params (layer shape differs)")
        if i < len(params.layers) - 1:
            dz = dz * (cache.pre[i] > 0.0)
        grads[i] = (dz.T @ cache.inputs[i], dz.sum(axis=0))
        dz = dz @ w
    return MLPParams(layers=tuple(grads)), dz


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    """Moment mirrors of a parameter tree plus the step counter."""

    m: Any
    v: Any
    t: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Any, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=tree_zeros_like(params), v=tree_zeros_like(params),
                     t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Any, grads: Any, state: AdamState) -> tuple[Any, AdamState]:
    """One bias-corrected Adam update; pure, shapes must mirror ``params``."""
    for p, g in zip(tree_leaves(params), tree_leaves(grads)):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.shape}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = tree_map(lambda mm, g: b1 * mm + (1.0 - b1) * g, state.m, grads)
    v = tree_map(lambda vv, g: b2 * vv + (1.0 - b2) * g * g, state.v, grads)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params = tree_map(
        lambda p, mm, vv: p - state.lr * (mm / c1) / (np.sqrt(vv / c2) + state.eps),
        params, m, v,
    )
    return new_params, dataclasses.replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# activations


def softmax(values: np.ndarray | list, axis: int = -1) -> np.ndarray:
    """Stable softmax (max-subtraction); rows sum to 1 within 1e-12."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("softmax of an empty input")
    shifted = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_difference_grads(loss_fn: Callable[[Any], float], params: Any,
                            h: float = 1e-5) -> Any:
    """Central finite differences of a scalar loss over a parameter tree.

    O(2 * param_count) loss evaluations; only usable at test scale.
    """
    def leaf_fd(leaf: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(leaf)
        it = np.nditer(leaf, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = leaf[idx]
            leaf[idx] = orig + h
            up = loss_fn(params)
            leaf[idx] = orig - h
            down = loss_fn(params)
            leaf[idx] = orig
            grad[idx] = (up - down) / (2.0 * h)
        return grad

    # Perturbs leaves in place and restores them; callers keep ownership.
    return tree_map(leaf_fd, params)


def max_grad_rel_error(analytic: Any, numeric: Any) -> float:
    """Worst relative error between two gradient trees of the same shape."""
    worst = 0.0
    for a, n in zip(tree_leaves(analytic), tree_leaves(numeric)):
        if a.shape != n.shape:
            raise DimensionError(f"gradient trees disagree: {a.shape} vs {n.shape}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        if a.size:
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def node_seed(seed: int, name: str) -> int:
    """Stable per-component seed derived from a run seed and a name."""
    import hashlib

    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
