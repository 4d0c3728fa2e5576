"""Tests for the reverse-mode autodiff engine, layers and Adam"""

import numpy as np
import pytest

from pcdenoise.core.autodiff import (
    DenseEdgeConv,
    ParamStore,
    SharedMLP,
    Tensor,
    add,
    backward,
    concat,
    constant,
    current_dtype,
    gather_rows,
    gradcheck,
    gradcheck_error,
    linear,
    matmul,
    mean,
    mean_squared_error,
    no_grad,
    objective,
    precision,
    reduce_max,
    relu,
    reshape,
    scale,
    sub,
    sum_of_squares,
)
from pcdenoise.core.errors import InvalidArgumentError, InvalidStateError
from pcdenoise.core.geometry import PointCloud, knn

TRIALS = 50


def param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """ReLU の折れ目から 0.1 以上離れた値"""
    return rng.choice([-1.0, 1.0], size=shape) * (0.1 + np.abs(rng.normal(size=shape)))


def random_shape(rng: np.random.Generator, rank: int = 2):
    return tuple(int(v) for v in rng.integers(1, 6, size=rank))


# --- primitives ---------------------------------------------------------------


def test_relu_example():
    """relu(−1, 0, 2) → (0, 0, 2)、勾配は index 2 のみ"""
    x = param([-1.0, 0.0, 2.0])
    y = relu(x)
    np.testing.assert_array_equal(y.values, [0.0, 0.0, 2.0])

    loss = matmul(reshape(y, (1, 3)), constant(np.ones((3, 1))))
    backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_reduce_max_routes_ties_to_lowest_index():
    x = param([[1.0, 3.0, 3.0, 2.0]])
    out = reduce_max(x, axis=1)
    assert out.values.tolist() == [3.0]

    backward(mean(out))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


def test_sum_of_squares_gradient_and_accumulation():
    """w=(1,2) → grad (2,4)。zero_grad なしで2回呼ぶと倍になる"""
    w = param([1.0, 2.0])
    backward(sum_of_squares(w))
    np.testing.assert_allclose(w.grad, [2.0, 4.0])

    backward(sum_of_squares(w))
    np.testing.assert_allclose(w.grad, [4.0, 8.0])

    w.zero_grad()
    assert w.grad is None


def test_backward_rejects_non_scalar_loss():
    with pytest.raises(InvalidArgumentError):
        backward(param(np.ones(3)))


def test_shape_mismatch_is_invalid_argument():
    with pytest.raises(InvalidArgumentError):
        add(param(np.ones((2, 3))), param(np.ones((3, 2))))
    with pytest.raises(InvalidArgumentError):
        matmul(param(np.ones((2, 3))), param(np.ones((2, 3))))
    with pytest.raises(InvalidArgumentError):
        concat([param(np.ones((2, 3))), param(np.ones((3, 3)))])
    with pytest.raises(InvalidArgumentError):
        gather_rows(param(np.ones((2, 3))), np.array([0, 2]))


def test_precision_and_no_grad_modes():
    assert Tensor([1.0]).values.dtype == np.float32
    with precision(np.float64):
        assert current_dtype() is np.float64
        assert Tensor([1.0]).values.dtype == np.float64
    assert current_dtype() is np.float32

    x = param([1.0, -1.0])
    with no_grad():
        y = relu(x)
    assert not y.requires_grad
    assert y.is_leaf


def test_primitive_gradchecks():
    """全プリミティブが中心差分 (step 1e-3) と相対 1e-3 以内で一致"""
    rng = np.random.default_rng(0)
    with precision(np.float64):
        for _ in range(TRIALS):
            r, c = random_shape(rng)
            d = int(rng.integers(1, 6))
            a = param(rng.normal(size=(r, c)))
            b = param(rng.normal(size=(r, c)))
            w = param(rng.normal(size=(c, d)))
            bias = param(rng.normal(size=d))
            batched = param(rng.normal(size=(2, r, c)))

            checks = [
                (lambda a, w: sum_of_squares(matmul(a, w)), [a, w]),
                (lambda x, w, bias: sum_of_squares(linear(x, w, bias)), [batched, w, bias]),
                (lambda a, b: sum_of_squares(add(a, b)), [a, b]),
                (lambda a, b: sum_of_squares(sub(a, b)), [a, b]),
                (lambda a: sum_of_squares(scale(a, -1.7)), [a]),
                (lambda a, b: sum_of_squares(concat([a, b])), [a, b]),
                (lambda a: mean(a), [a]),
                (lambda a: sum_of_squares(a), [a]),
                (lambda a: sum_of_squares(reshape(a, (c, r))), [a]),
                (lambda a: mean_squared_error(a, np.ones((r, c))), [a]),
            ]
            for fn, inputs in checks:
                assert gradcheck(fn, inputs, eps=1e-3, rtol=1e-3)


def test_relu_gradcheck():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        for _ in range(TRIALS):
            x = param(away_from_zero(rng, random_shape(rng)))
            assert gradcheck(lambda x: sum_of_squares(relu(x)), [x], eps=1e-3, rtol=1e-3)


def test_gather_rows_gradcheck():
    """重複を含む添字行列でも勾配が足し込まれる"""
    rng = np.random.default_rng(2)
    with precision(np.float64):
        for _ in range(TRIALS):
            n, c = random_shape(rng)
            x = param(rng.normal(size=(n, c)))
            index = rng.integers(0, n, size=(int(rng.integers(1, 6)), int(rng.integers(1, 4))))
            assert gradcheck(lambda x: sum_of_squares(gather_rows(x, index)), [x], eps=1e-3, rtol=1e-3)


def test_reduce_max_gradcheck():
    """最大値どうしを 2·eps より離して折れ目を避ける"""
    rng = np.random.default_rng(3)
    with precision(np.float64):
        for _ in range(TRIALS):
            n, k, c = random_shape(rng, rank=3)
            spaced = rng.permutation(n * k * c).reshape(n, k, c) * 0.01
            x = param(spaced + rng.uniform(0, 0.001, size=(n, k, c)))
            assert gradcheck(lambda x: sum_of_squares(reduce_max(x, axis=1)), [x], eps=1e-3, rtol=1e-3)


def test_objective_gradcheck():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        for _ in range(TRIALS):
            x = param(away_from_zero(rng, random_shape(rng)))

            def cubic(x):
                return objective(x, float(np.sum(x.values**3) / 3.0), x.values**2)

            assert gradcheck(cubic, [x], eps=1e-3, rtol=1e-3)


# --- layers -------------------------------------------------------------------


def test_two_layer_mlp_gradcheck():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        for trial in range(TRIALS):
            store = ParamStore()
            mlp = SharedMLP(store, "mlp", [3, 8, 4], np.random.default_rng(trial), final_activation=False)
            x = param(rng.normal(size=(6, 3)))
            inputs = [x] + [store[n] for n in store.names()]
            # 合成関数では折れ目をまたぐ確率を下げるため小さい刻みを使う
            error = gradcheck_error(lambda x, *_: sum_of_squares(mlp(x)), inputs, eps=1e-6)
            assert error <= 1e-3


def dense_conv_fixture(seed: int, n: int = 12, k: int = 4, c: int = 3):
    rng = np.random.default_rng(seed)
    points = rng.random((n, 3))
    store = ParamStore()
    conv = DenseEdgeConv(store, "conv", c, [5, 5], np.random.default_rng(seed + 1))
    features = rng.normal(size=(n, c))
    return points, store, conv, features, knn(PointCloud(points), None, k)


def test_dense_edge_conv_gradcheck():
    with precision(np.float64):
        for trial in range(10):
            _, store, conv, features, graph = dense_conv_fixture(trial)
            x = param(features)
            inputs = [x] + [store[n] for n in store.names()]
            error = gradcheck_error(lambda x, *_: sum_of_squares(conv(x, graph)), inputs, eps=1e-6)
            assert error <= 1e-3


def test_dense_edge_conv_shapes_and_names():
    _, store, conv, features, graph = dense_conv_fixture(0)
    out = conv(constant(features), graph)

    assert out.shape == (12, 10)
    assert conv.out_channels == 10
    assert store.names() == ["conv.block0.weight", "conv.block0.bias", "conv.block1.weight", "conv.block1.bias"]
    # block1 は辺特徴 (2c) と block0 の出力 (5) を受け取る
    assert store["conv.block1.weight"].shape == (2 * 3 + 5, 5)


def test_dense_edge_conv_constant_features():
    """入力特徴が一定なら全点で出力が同じ"""
    _, _, conv, _, graph = dense_conv_fixture(1)
    out = conv(constant(np.tile([0.3, -0.2, 0.5], (12, 1))), graph)
    np.testing.assert_allclose(out.values, np.tile(out.values[0], (12, 1)), rtol=1e-5)


def test_dense_edge_conv_permutation_equivariance():
    with precision(np.float64):
        points, _, conv, features, graph = dense_conv_fixture(2)
        perm = np.random.default_rng(3).permutation(points.shape[0])
        permuted_graph = knn(PointCloud(points[perm]), None, graph.k)

        out = conv(constant(features), graph).values
        permuted = conv(constant(features[perm]), permuted_graph).values
        np.testing.assert_allclose(permuted, out[perm], atol=1e-12)


def test_dense_edge_conv_rejects_mismatched_graph():
    _, _, conv, features, graph = dense_conv_fixture(4)
    with pytest.raises(InvalidArgumentError):
        conv(constant(features[:-1]), graph)
    with pytest.raises(InvalidArgumentError):
        conv(constant(np.ones((12, 4))), graph)


# --- parameters and Adam -------------------------------------------------------


def test_adam_first_step_moves_by_learning_rate():
    """勾配 1・lr=0.1 の初回ステップでパラメータは約 0.1 減る"""
    store = ParamStore()
    w = store.add("w", np.array([1.0]))
    w.grad = np.array([1.0])
    store.adam_step(lr=0.1)

    assert store.step == 1
    assert float(w.values[0]) == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_gradient_is_fixed_point():
    store = ParamStore()
    w = store.add("w", np.array([0.5, -0.25]))
    w.grad = np.zeros(2)
    store.adam_step(lr=0.1)
    np.testing.assert_array_equal(w.values, np.array([0.5, -0.25], dtype=np.float32))


def test_adam_requires_gradients():
    store = ParamStore()
    store.add("w", np.ones(2))
    with pytest.raises(InvalidStateError):
        store.adam_step(lr=0.1)


def test_adam_trajectory_is_deterministic():
    def run():
        store = ParamStore()
        mlp = SharedMLP(store, "mlp", [3, 8, 3], np.random.default_rng(7))
        x = constant(np.random.default_rng(8).normal(size=(10, 3)))
        for _ in range(5):
            store.zero_grad()
            backward(mean_squared_error(mlp(x), np.zeros((10, 3))))
            store.adam_step(lr=1e-2)
        return {n: store[n].values.tobytes() for n in store.names()}

    assert run() == run()


def test_param_store_freeze_snapshot_and_counts():
    store = ParamStore()
    SharedMLP(store, "a", [3, 4], np.random.default_rng(0))
    SharedMLP(store, "b", [4, 2], np.random.default_rng(1))

    assert store.parameter_count() == 3 * 4 + 4 + 4 * 2 + 2
    assert store.parameter_count("b.") == 10
    store.freeze("a.")
    assert store.trainable() == ["b.0.weight", "b.0.bias"]
    store.unfreeze("a.")
    assert len(store.trainable()) == 4

    with pytest.raises(InvalidStateError):
        store.add("a.0.weight", np.ones((3, 4)))

    snapshot = store.snapshot()
    original = store["a.0.weight"].values.copy()
    store["a.0.weight"].values = np.zeros((3, 4), dtype=np.float32)
    store.step = 9
    store.restore(snapshot)
    np.testing.assert_array_equal(store["a.0.weight"].values, original)
    assert store.step == 0
    assert store.all_finite()
