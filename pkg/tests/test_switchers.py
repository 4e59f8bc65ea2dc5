import dataclasses

import numpy as np
import pytest

from mfhlab.errors import ConfigError, ContractError, DimensionError
from mfhlab.nn import (
    MLPSpec,
    finite_difference_grads,
    max_grad_rel_error,
    mlp_forward,
    tree_leaves,
    tree_size,
)
from mfhlab.switchers import (
    CGC,
    MMOE,
    SHARED_BOTTOM,
    SwitcherKind,
    SwitcherSpec,
    init_switcher,
    parse_kind,
    ple,
    switcher_backward,
    switcher_forward,
    switcher_param_count,
)


def _x(batch, dim, seed=0):
    return np.random.default_rng(seed).normal(size=(batch, dim))


# --- kinds and spec validation ----------------------------------------------

def test_parse_kind():
    assert parse_kind("cgc") == CGC
    assert parse_kind("ple:3") == SwitcherKind("ple", 3)
    assert parse_kind("ple") == SwitcherKind("ple", 1)
    with pytest.raises(ConfigError):
        parse_kind("moe")
    with pytest.raises(ConfigError):
        parse_kind("cgc:2")
    with pytest.raises(ConfigError):
        parse_kind("ple:x")


def test_spec_validation():
    with pytest.raises(ConfigError):
        SwitcherSpec(kind=CGC, input_dim=4, expert_dim=4, child_ids=("only",))
    with pytest.raises(ConfigError):
        SwitcherSpec(kind=CGC, input_dim=4, expert_dim=4, child_ids=("a", "a"))
    with pytest.raises(ConfigError):
        SwitcherSpec(kind=MMOE, input_dim=4, expert_dim=4, child_ids=("a", "b"),
                     specific_expert_count_per_child=1)
    with pytest.raises(ConfigError):
        SwitcherSpec(kind=CGC, input_dim=4, expert_dim=4, child_ids=("a", "b"),
                     shared_expert_count=0)
    with pytest.raises(ConfigError):
        SwitcherKind("ple", 0)
    with pytest.raises(ConfigError):
        # zero-layer experts emit the raw input, so widths must agree
        SwitcherSpec(kind=CGC, input_dim=5, expert_dim=3, child_ids=("a", "b"),
                     expert_mlp=MLPSpec(input_dim=5, hidden_sizes=()))


# --- shared bottom -----------------------------------------------------------

def test_shared_bottom_children_identical():
    spec = SwitcherSpec(kind=SHARED_BOTTOM, input_dim=5, expert_dim=3,
                        child_ids=("a", "b", "c"), seed=1)
    params = init_switcher(spec)
    outs, _ = switcher_forward(spec, params, _x(4, 5))
    assert set(outs) == {"a", "b", "c"}
    assert np.array_equal(outs["a"], outs["b"])
    assert np.array_equal(outs["a"], outs["c"])
    assert outs["a"].shape == (4, 3)


def test_shared_bottom_zero_layer_is_identity_with_zero_params():
    spec = SwitcherSpec(kind=SHARED_BOTTOM, input_dim=4, expert_dim=4,
                        child_ids=("a", "b"),
                        expert_mlp=MLPSpec(input_dim=4, hidden_sizes=()))
    assert switcher_param_count(spec) == 0
    x = _x(3, 4)
    outs, _ = switcher_forward(spec, init_switcher(spec), x)
    assert np.array_equal(outs["a"], x)


# --- mmoe ---------------------------------------------------------------------

def test_mmoe_single_expert_passthrough():
    spec = SwitcherSpec(kind=MMOE, input_dim=4, expert_dim=3,
                        child_ids=("a", "b"), shared_expert_count=1, seed=3)
    params = init_switcher(spec)
    x = _x(5, 4, seed=1)
    outs, cache = switcher_forward(spec, params, x)
    expert_out, _ = mlp_forward(params.levels[0].shared[0], x)
    assert np.array_equal(outs["a"], expert_out)
    assert np.array_equal(outs["b"], expert_out)
    # softmax over a single logit is the constant 1, so its gate cannot learn
    grads, _ = switcher_backward(spec, params, cache,
                                 {"a": np.ones((5, 3)), "b": np.ones((5, 3))})
    for g in grads.levels[0].child_gates.values():
        assert np.all(g == 0.0)


def test_mmoe_param_count_worked_example():
    # in=4, experts are one affine layer 4->4, E=2, 3 children:
    # experts 2*(16+4)=40, gates 3*(4*2)=24, total 64
    spec = SwitcherSpec(kind=MMOE, input_dim=4, expert_dim=4,
                        child_ids=("t1", "t2", "t3"), shared_expert_count=2,
                        expert_mlp=MLPSpec(input_dim=4, hidden_sizes=(4,)))
    assert switcher_param_count(spec) == 64
    assert tree_size(init_switcher(spec)) == 64


def test_gate_weights_are_distributions():
    spec = SwitcherSpec(kind=MMOE, input_dim=6, expert_dim=4,
                        child_ids=("a", "b"), shared_expert_count=3, seed=9)
    _, cache = switcher_forward(spec, init_switcher(spec), _x(7, 6, seed=2) * 30)
    for w in cache.levels[0].child_gate_w.values():
        assert np.all(w >= 0.0)
        assert np.all(np.abs(w.sum(axis=1) - 1.0) <= 1e-12)


# --- reduction ladder ---------------------------------------------------------

def _cgc_spec(**kw):
    base = dict(kind=CGC, input_dim=5, expert_dim=3, child_ids=("a", "b"),
                shared_expert_count=2, specific_expert_count_per_child=1, seed=11)
    base.update(kw)
    return SwitcherSpec(**base)


def test_ple1_is_cgc_bitwise():
    cgc = _cgc_spec()
    ple1 = _cgc_spec(kind=ple(1))
    assert switcher_param_count(cgc) == switcher_param_count(ple1)
    x = _x(4, 5, seed=3)
    out_c, _ = switcher_forward(cgc, init_switcher(cgc), x)
    out_p, _ = switcher_forward(ple1, init_switcher(ple1), x)
    for c in ("a", "b"):
        assert np.array_equal(out_c[c], out_p[c])


def test_cgc_zero_specific_matches_mmoe_bitwise():
    mmoe = SwitcherSpec(kind=MMOE, input_dim=5, expert_dim=3,
                        child_ids=("a", "b"), shared_expert_count=2, seed=7)
    cgc = dataclasses.replace(mmoe, kind=CGC)
    params_m = init_switcher(mmoe)
    params_c = init_switcher(cgc)  # same layout: injection is parameter reuse
    for lm, lc in zip(tree_leaves(params_m), tree_leaves(params_c)):
        assert np.array_equal(lm, lc)
    x = _x(4, 5, seed=5)
    out_m, cache_m = switcher_forward(mmoe, params_m, x)
    out_c, cache_c = switcher_forward(cgc, params_m, x)
    for c in ("a", "b"):
        assert np.array_equal(out_m[c], out_c[c])
    d = {"a": _x(4, 3, seed=8), "b": _x(4, 3, seed=9)}
    gm, dxm = switcher_backward(mmoe, params_m, cache_m, d)
    gc, dxc = switcher_backward(cgc, params_m, cache_c, d)
    assert np.array_equal(dxm, dxc)
    for lm, lc in zip(tree_leaves(gm), tree_leaves(gc)):
        assert np.array_equal(lm, lc)


def test_mmoe_single_expert_equals_bare_expert():
    spec = SwitcherSpec(kind=MMOE, input_dim=4, expert_dim=4,
                        child_ids=("a", "b"), shared_expert_count=1, seed=13)
    params = init_switcher(spec)
    x = _x(6, 4, seed=4)
    outs, _ = switcher_forward(spec, params, x)
    bare, _ = mlp_forward(params.levels[0].shared[0], x)
    assert np.array_equal(outs["a"], bare)
    assert np.array_equal(outs["b"], bare)


# --- permutation --------------------------------------------------------------

def test_cgc_child_permutation_only_permutes_outputs():
    spec = _cgc_spec(child_ids=("a", "b", "c"))
    perm = _cgc_spec(child_ids=("c", "a", "b"))
    x = _x(4, 5, seed=6)
    out1, _ = switcher_forward(spec, init_switcher(spec), x)
    out2, _ = switcher_forward(perm, init_switcher(perm), x)
    for c in ("a", "b", "c"):
        assert np.array_equal(out1[c], out2[c])


def test_ple2_child_permutation_only_permutes_outputs():
    spec = _cgc_spec(kind=ple(2), child_ids=("a", "b", "c"))
    perm = _cgc_spec(kind=ple(2), child_ids=("b", "c", "a"))
    x = _x(4, 5, seed=6)
    out1, _ = switcher_forward(spec, init_switcher(spec), x)
    out2, _ = switcher_forward(perm, init_switcher(perm), x)
    # the shared path sums its mixture in child order, so reordering may
    # reassociate the float sum; anything beyond that is a real bug
    for c in ("a", "b", "c"):
        assert np.allclose(out1[c], out2[c], rtol=1e-12, atol=1e-13)


# --- backward ------------------------------------------------------------------

def test_zero_dout_gives_zero_grads():
    spec = _cgc_spec()
    params = init_switcher(spec)
    x = _x(3, 5, seed=1)
    _, cache = switcher_forward(spec, params, x)
    zeros = {c: np.zeros((3, 3)) for c in ("a", "b")}
    grads, dx = switcher_backward(spec, params, cache, zeros)
    assert all(np.all(leaf == 0.0) for leaf in tree_leaves(grads))
    assert np.all(dx == 0.0)


def test_missing_child_gradient_is_zero():
    spec = _cgc_spec()
    params = init_switcher(spec)
    x = _x(3, 5, seed=2)
    _, cache = switcher_forward(spec, params, x)
    d_a = _x(3, 3, seed=10)
    g1, dx1 = switcher_backward(spec, params, cache,
                                {"a": d_a, "b": np.zeros((3, 3))})
    g2, dx2 = switcher_backward(spec, params, cache, {"a": d_a})
    assert np.array_equal(dx1, dx2)
    for l1, l2 in zip(tree_leaves(g1), tree_leaves(g2)):
        assert np.array_equal(l1, l2)


def test_backward_rejects_bad_douts():
    spec = _cgc_spec()
    params = init_switcher(spec)
    _, cache = switcher_forward(spec, params, _x(3, 5))
    with pytest.raises(ContractError):
        switcher_backward(spec, params, cache, {"zz": np.zeros((3, 3))})
    with pytest.raises(DimensionError):
        switcher_backward(spec, params, cache, {"a": np.zeros((3, 4))})


@pytest.mark.parametrize("kind,specific", [
    (SHARED_BOTTOM, 0),
    (MMOE, 0),
    (CGC, 1),
    (CGC, 0),
    (ple(2), 1),
    (ple(3), 2),
])
def test_gradients_match_finite_differences(kind, specific):
    # seed chosen so no hidden pre-activation sits within the h=1e-5 step
    # of a ReLU kink, where central differences go wrong
    spec = SwitcherSpec(kind=kind, input_dim=5, expert_dim=3,
                        child_ids=("a", "b"), shared_expert_count=2,
                        specific_expert_count_per_child=specific, seed=2)
    params = init_switcher(spec)
    rng = np.random.default_rng(31)
    x = rng.normal(size=(3, 5))
    weights = {c: rng.normal(size=(3, 3)) for c in ("a", "b")}

    _, cache = switcher_forward(spec, params, x)
    grads, dx = switcher_backward(spec, params, cache, weights)

    def loss(p):
        outs, _ = switcher_forward(spec, p, x)
        return float(sum((outs[c] * weights[c]).sum() for c in ("a", "b")))

    fd = finite_difference_grads(loss, params)
    assert max_grad_rel_error(grads, fd) < 1e-4

    def loss_x(xv):
        outs, _ = switcher_forward(spec, params, xv)
        return float(sum((outs[c] * weights[c]).sum() for c in ("a", "b")))

    fd_x = finite_difference_grads(loss_x, x)
    assert max_grad_rel_error(dx, fd_x) < 1e-4


# --- counting -------------------------------------------------------------------

@pytest.mark.parametrize("kind,specific,shared", [
    (MMOE, 0, 1), (MMOE, 0, 3),
    (CGC, 0, 1), (CGC, 2, 2),
    (ple(2), 1, 2), (ple(3), 2, 1),
])
def test_param_count_agrees_with_constructed(kind, specific, shared):
    spec = SwitcherSpec(kind=kind, input_dim=6, expert_dim=4,
                        child_ids=("a", "b", "c"), shared_expert_count=shared,
                        specific_expert_count_per_child=specific, seed=2)
    assert switcher_param_count(spec) == tree_size(init_switcher(spec))


def test_init_deterministic():
    spec = _cgc_spec(kind=ple(2))
    a, b = init_switcher(spec), init_switcher(spec)
    for la, lb in zip(tree_leaves(a), tree_leaves(b)):
        assert np.array_equal(la, lb)
