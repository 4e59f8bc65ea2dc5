import numpy as np
import pytest

from mfhlab.errors import ConfigError, ContractError, DimensionError
from mfhlab.nn import (
    AdamState,
    MLPParams,
    MLPSpec,
    adam_init,
    adam_step,
    finite_difference_grads,
    init_mlp,
    max_grad_rel_error,
    mlp_backward,
    mlp_forward,
    mlp_param_count,
    node_seed,
    sigmoid,
    softmax,
    tree_leaves,
    tree_map,
    tree_size,
)


# --- init ------------------------------------------------------------------

def test_init_zero_layers_is_identity_params():
    params = init_mlp(MLPSpec(input_dim=3, hidden_sizes=()))
    assert params.layers == ()


def test_init_deterministic():
    spec = MLPSpec(input_dim=5, hidden_sizes=(7, 2), seed=123)
    a, b = init_mlp(spec), init_mlp(spec)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la[0], lb[0]) and np.array_equal(la[1], lb[1])


def test_init_xavier_bound_1000_draws():
    # in=4, one layer of 8: every weight within +/- sqrt(6/12)
    bound = np.sqrt(6.0 / 12.0)
    for seed in range(1000):
        params = init_mlp(MLPSpec(input_dim=4, hidden_sizes=(8,), seed=seed))
        (w, b), = params.layers
        assert np.all(np.abs(w) <= bound)
        assert np.all(b == 0.0)


def test_init_rejects_zero_sizes():
    with pytest.raises(ConfigError):
        MLPSpec(input_dim=0, hidden_sizes=(4,))
    with pytest.raises(ConfigError):
        MLPSpec(input_dim=4, hidden_sizes=(4, 0))


def test_param_count_matches_construction():
    spec = MLPSpec(input_dim=4, hidden_sizes=(8, 3), seed=1)
    assert mlp_param_count(spec) == 4 * 8 + 8 + 8 * 3 + 3
    assert tree_size(init_mlp(spec)) == mlp_param_count(spec)


# --- forward ---------------------------------------------------------------

def test_forward_zero_layers_identity():
    x = np.array([[1.0, -2.0, 3.0]])
    y, _ = mlp_forward(MLPParams(layers=()), x)
    assert np.array_equal(y, x)


def test_forward_final_layer_is_linear():
    params = MLPParams(layers=((np.eye(2), np.zeros(2)),))
    y, _ = mlp_forward(params, np.array([[-1.0, 2.0]]))
    assert np.array_equal(y, np.array([[-1.0, 2.0]]))


def test_forward_hidden_relu_clamps():
    # first layer produces pre-activation [[-1, 2]]; ReLU gives [[0, 2]]
    w1 = np.array([[-1.0], [2.0]])
    params = MLPParams(layers=((w1, np.zeros(2)), (np.eye(2), np.zeros(2))))
    y, cache = mlp_forward(params, np.array([[1.0]]))
    assert np.array_equal(cache.pre[0], np.array([[-1.0, 2.0]]))
    assert np.array_equal(y, np.array([[0.0, 2.0]]))


def test_forward_shape_mismatch():
    params = init_mlp(MLPSpec(input_dim=3, hidden_sizes=(2,)))
    with pytest.raises(DimensionError):
        mlp_forward(params, np.zeros((4, 5)))
    with pytest.raises(DimensionError):
        mlp_forward(params, np.zeros(3))


# --- backward --------------------------------------------------------------

def test_backward_zero_dout_gives_zero_grads():
    params = init_mlp(MLPSpec(input_dim=3, hidden_sizes=(4, 2), seed=7))
    x = np.random.default_rng(0).normal(size=(3, 3))
    _, cache = mlp_forward(params, x)
    grads, dx = mlp_backward(params, cache, np.zeros((3, 2)))
    assert all(np.all(leaf == 0.0) for leaf in tree_leaves(grads))
    assert np.all(dx == 0.0)


def test_backward_zero_layers_passes_gradient():
    x = np.array([[1.0, 2.0]])
    _, cache = mlp_forward(MLPParams(layers=()), x)
    d = np.array([[0.5, -0.5]])
    grads, dx = mlp_backward(MLPParams(layers=()), cache, d)
    assert grads.layers == () and np.array_equal(dx, d)


def test_backward_matches_finite_differences_tightly():
    # two-layer MLP, loss = sum(Y): rel err < 1e-6 in double precision
    rng = np.random.default_rng(42)
    params = init_mlp(MLPSpec(input_dim=4, hidden_sizes=(5, 3), seed=9))
    x = rng.normal(size=(2, 4))
    y, cache = mlp_forward(params, x)
    grads, _ = mlp_backward(params, cache, np.ones_like(y))

    def loss(p):
        out, _ = mlp_forward(p, x)
        return float(out.sum())

    fd = finite_difference_grads(loss, params)
    assert max_grad_rel_error(grads, fd) < 1e-6


def test_backward_oracle_random_instances():
    # random shapes with dims <= 8, batch <= 4, rel err < 1e-4
    rng = np.random.default_rng(1234)
    for trial in range(10):
        depth = int(rng.integers(0, 4))
        in_dim = int(rng.integers(1, 9))
        sizes = tuple(int(rng.integers(1, 9)) for _ in range(depth))
        batch = int(rng.integers(1, 5))
        params = init_mlp(MLPSpec(input_dim=in_dim, hidden_sizes=sizes, seed=trial))
        x = rng.normal(size=(batch, in_dim))
        w_out = rng.normal(size=(batch, sizes[-1] if sizes else in_dim))

        y, cache = mlp_forward(params, x)
        grads, dx = mlp_backward(params, cache, w_out)

        def loss(p):
            out, _ = mlp_forward(p, x)
            return float((out * w_out).sum())

        fd = finite_difference_grads(loss, params)
        assert max_grad_rel_error(grads, fd) < 1e-4, f"trial {trial}"

        def loss_x(xv):
            out, _ = mlp_forward(params, xv)
            return float((out * w_out).sum())

        fd_x = finite_difference_grads(loss_x, x)
        assert max_grad_rel_error(dx, fd_x) < 1e-4, f"trial {trial} (dX)"


def test_backward_rejects_stale_cache():
    p1 = init_mlp(MLPSpec(input_dim=3, hidden_sizes=(4,), seed=0))
    p2 = init_mlp(MLPSpec(input_dim=3, hidden_sizes=(4, 4), seed=0))
    _, cache = mlp_forward(p1, np.zeros((1, 3)))
    with pytest.raises(ContractError):
        mlp_backward(p2, cache, np.zeros((1, 4)))


# --- adam ------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    params = init_mlp(MLPSpec(input_dim=3, hidden_sizes=(2,), seed=5))
    state = adam_init(params)
    grads = tree_map(np.zeros_like, params)
    new, state2 = adam_step(params, grads, state)
    for a, b in zip(tree_leaves(params), tree_leaves(new)):
        assert np.array_equal(a, b)
    assert state2.t == 1


def test_adam_first_step_magnitude():
    # with |g| >> eps the first update is -lr * sign(g) per entry
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([3.0, -0.25, 10.0])}
    state = adam_init(params, lr=1e-3)
    new, _ = adam_step(params, grads, state)
    delta = new["w"] - params["w"]
    assert np.allclose(delta, -1e-3 * np.sign(grads["w"]), atol=1e-6)


def test_adam_deterministic():
    params = init_mlp(MLPSpec(input_dim=4, hidden_sizes=(3,), seed=2))
    grads = tree_map(lambda a: a * 0.1, params)
    out1 = adam_step(params, grads, adam_init(params))
    out2 = adam_step(params, grads, adam_init(params))
    for a, b in zip(tree_leaves(out1[0]), tree_leaves(out2[0])):
        assert np.array_equal(a, b)


def test_adam_shape_mismatch():
    params = {"w": np.zeros((2, 2))}
    grads = {"w": np.zeros((2, 3))}
    with pytest.raises(DimensionError):
        adam_step(params, grads, adam_init(params))


def test_adam_t_increments():
    params = {"w": np.ones(2)}
    state = adam_init(params)
    for expected in (1, 2, 3):
        params, state = adam_step(params, {"w": np.ones(2)}, state)
        assert state.t == expected


# --- activations -----------------------------------------------------------

def test_softmax_singleton():
    assert softmax([3.7]).tolist() == [1.0]


def test_softmax_symmetry():
    assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]


def test_softmax_ln2_case():
    out = softmax([np.log(2.0), 0.0])
    assert abs(out[0] - 2.0 / 3.0) < 1e-12
    assert abs(out[1] - 1.0 / 3.0) < 1e-12


def test_softmax_rows_sum_to_one_and_equivariant():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(5, 6)) * 50.0
    s = softmax(v, axis=-1)
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)
    perm = rng.permutation(6)
    assert np.allclose(softmax(v[:, perm], axis=-1), s[:, perm], atol=1e-15)


def test_softmax_empty_rejected():
    with pytest.raises(ContractError):
        softmax([])


def test_sigmoid_stable_at_extremes():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert out[0] == 0.0 and out[1] == 0.5 and out[2] == 1.0
    assert np.all(np.isfinite(out))


def test_node_seed_stable_and_distinct():
    assert node_seed(7, "a") == node_seed(7, "a")
    assert node_seed(7, "a") != node_seed(7, "b")
    assert node_seed(7, "a") != node_seed(8, "a")
