import math

import numpy as np
import pytest

from .. import conftest
from .. import tensor as T
from ..tensor import NumericError, ShapeError, Tape, TapeError, Tensor


def test_matmul_identity(rng):
    m = rng.uniform(-2, 2, (3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_matmul_hand_expanded():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_zeros(rng):
    out = Tensor(np.zeros((2, 3))) @ Tensor(rng.uniform(-2, 2, (3, 2)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_matmul_mismatch_names_shapes():
    with pytest.raises(ShapeError) as ex:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert "(2, 3)" in str(ex.value)


@pytest.mark.parametrize(
    "row, expected",
    [
        pytest.param([2.0, 2.0, 2.0], [1 / 3, 1 / 3, 1 / 3], id="uniform"),
        pytest.param([0.0, math.log(3.0)], [0.25, 0.75], id="log3"),
        pytest.param([0.0, 1000.0], [0.0, 1.0], id="saturated"),
    ],
)
def test_softmax_rows_examples(row, expected):
    out = T.softmax_rows(Tensor([row])).data[0]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_softmax_rows_sum_and_shift_invariance(rng):
    logits = rng.uniform(-2, 2, (5, 7))
    probs = T.softmax_rows(Tensor(logits)).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(probs >= 0)
    shifted = logits.copy()
    shifted[2] += 17.5
    np.testing.assert_allclose(T.softmax_rows(Tensor(shifted)).data, probs, atol=1e-12)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_softmax_rows_rejects_non_finite(bad):
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[0.0, bad]]))


def test_relu_values():
    assert T.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_cross_entropy_uniform_is_log_classes():
    for classes in (2, 8, 10):
        loss = T.cross_entropy(Tensor(np.zeros((4, classes))), np.zeros(4, dtype=int))
        assert loss.item() == pytest.approx(math.log(classes), abs=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_mask_skips_positions():
    logits = Tensor(np.array([[5.0, 0.0], [0.0, 0.0]]))
    loss = T.cross_entropy(logits, np.array([0, 7]), mask=np.array([False, True]))
    assert loss.item() == pytest.approx(math.log(2.0))
    # The masked-out label 7 would be out of range if it were checked.
    with pytest.raises(ValueError):
        T.cross_entropy(logits, np.array([0, 1]), mask=np.array([False, False]))


def test_embedding_lookup_rows(rng):
    table = rng.uniform(-2, 2, (5, 3))
    np.testing.assert_array_equal(T.embedding_lookup(Tensor(table), [0]).data, table[[0]])
    with pytest.raises(IndexError):
        T.embedding_lookup(Tensor(table), [5])


def test_layer_norm_statistics(rng):
    out = T.layer_norm(Tensor(rng.uniform(-2, 2, (4, 16)))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-3)


def test_backward_sum_gives_ones(rng):
    x = conftest.random_tensor(rng, 2, 3, 4)
    with Tape():
        T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_half_square_norm(rng):
    x = conftest.random_tensor(rng, 5)
    with Tape():
        T.backward(T.sum(x * x) * 0.5)
    np.testing.assert_allclose(x.grad, x.data, atol=1e-14)


def test_backward_is_linear(rng):
    x = conftest.random_tensor(rng, 3, 3)
    w = Tensor(rng.uniform(-2, 2, (3, 3)))
    alpha, beta = 0.7, -1.3

    def loss1():
        return T.sum(T.softmax_rows(x @ w))

    def loss2():
        return T.mean(T.relu(x) * x)

    grads = []
    for build in (loss1, loss2, lambda: loss1() * alpha + loss2() * beta):
        x.zero_grad()
        with Tape():
            T.backward(build())
        grads.append(x.grad.copy())
    np.testing.assert_allclose(grads[2], alpha * grads[0] + beta * grads[1], atol=1e-10)


def test_backward_errors(rng):
    x = conftest.random_tensor(rng, 3)
    with Tape():
        with pytest.raises(TapeError):
            T.backward(x * 2.0)
        loss = T.sum(x)
        T.backward(loss)
        with pytest.raises(TapeError):
            T.backward(loss)

    with pytest.raises(TapeError):
        T.backward(T.sum(x))


def test_tape_reset_allows_replay(rng):
    x = conftest.random_tensor(rng, 3)
    with Tape() as tape:
        loss = T.sum(x * x)
        T.backward(loss)
        first = x.grad.copy()
        tape.reset()
        x.zero_grad()
        loss = T.sum(x * x)
        T.backward(loss)
    np.testing.assert_allclose(x.grad, first)


def test_no_grad_records_nothing(rng):
    x = conftest.random_tensor(rng, 3)
    with Tape() as tape:
        with T.no_grad():
            T.sum(x * x)
        assert len(tape) == 0


def test_untracked_inputs_are_not_recorded(rng):
    with Tape() as tape:
        T.sum(Tensor(rng.uniform(-2, 2, 3)) * 2.0)
    assert len(tape) == 0


def _op_cases():
    labels = np.array([1, 0, 2, 2])

    def case(name, shapes, build):
        return pytest.param(shapes, build, id=name)

    return [
        case("add", [(3, 4), (3, 4)], lambda a, b: T.sum(T.add(a, b) * T.add(a, b))),
        case("add-bias", [(2, 3, 4), (4, )], lambda a, b: T.sum(T.relu(a + b) * a)),
        case("sub", [(3, 4), (3, 4)], lambda a, b: T.sum(T.sub(a, b) * a)),
        case("mul", [(3, 4), (4, )], lambda a, b: T.sum(T.mul(a, b) * a)),
        case("scale", [(3, 4)], lambda a: T.sum(T.scale(a, -1.7) * a)),
        case("matmul", [(3, 4), (4, 2)], lambda a, b: T.sum((a @ b) * (a @ b))),
        case("matmul-batched", [(2, 3, 4), (4, 2)], lambda a, b: T.sum((a @ b) * (a @ b))),
        case("transpose", [(3, 4)], lambda a: T.sum(T.transpose(a) @ a)),
        case("reshape", [(3, 4)], lambda a: T.sum(T.reshape(a, (2, 6)) @ T.reshape(a, (6, 2)))),
        case("take-columns", [(3, 4)], lambda a: T.sum(T.take_columns(a, 1, 3) * T.take_columns(a, 0, 2))),
        case("take-rows", [(4, 3)], lambda a: T.sum(T.take_rows(a, [2, 0, 2]) * T.take_rows(a, [1, 1, 3]))),
        case("concat", [(3, 2), (3, 4)], lambda a, b: T.sum(T.concat([a, b], axis=-1) @ T.transpose(T.concat([b, a], axis=-1)))),
        case("relu", [(3, 4)], lambda a: T.sum(T.relu(a) * a)),
        case("softmax", [(3, 4)], lambda a: T.sum(T.softmax_rows(a) * a)),
        case("mean", [(3, 4)], lambda a: T.mean(a * a)),
        case("layer-norm", [(3, 5)], lambda a: T.sum(T.layer_norm(a) * T.relu(a))),
        case("softmax-cross-entropy", [(4, 3)], lambda a: T.cross_entropy(T.softmax_rows(a) * 3.0, labels)),
        case("cross-entropy", [(4, 3)], lambda a: T.cross_entropy(a, labels)),
    ]


@pytest.mark.parametrize("shapes, build", _op_cases())
def test_gradients_match_finite_differences(rng, shapes, build):
    params = [conftest.random_tensor(rng, *shape, name=f"in{idx}") for idx, shape in enumerate(shapes)]
    conftest.assert_gradients_match(lambda: build(*params), params)


def test_embedding_lookup_gradient(rng):
    table = conftest.random_tensor(rng, 6, 3, name="table")
    indices = np.array([[0, 2, 2], [5, 1, 0]])
    conftest.assert_gradients_match(
        lambda: T.sum(T.embedding_lookup(table, indices) * T.embedding_lookup(table, indices)),
        [table],
    )


def test_bias_broadcast_only():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 4))) + Tensor(np.zeros((3, )))
