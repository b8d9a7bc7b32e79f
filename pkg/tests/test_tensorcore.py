import numpy as np
import pytest

from bispike import tensorcore as tc
from bispike.gradcheck import rel_error


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert tc.tensor([1.0, 2.0]).dtype == np.float32

    def test_zero_dimension_rejected(self):
        with pytest.raises(tc.ShapeError):
            tc.tensor(np.zeros((0, 3)))

    def test_data_length_matches_shape(self):
        t = tc.tensor(np.arange(24).reshape(2, 3, 4))
        assert t.data.size == np.prod(t.shape) == 24

    def test_dtype_context(self):
        with tc.default_dtype(np.float64):
            assert tc.tensor([1.0]).dtype == np.float64
        assert tc.tensor([1.0]).dtype == np.float32


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(tc.tensor(np.eye(2)), tc.tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_orthogonal_rows(self):
        out = tc.matmul(tc.tensor([[1, 0]]), tc.tensor([[0], [5]]))
        np.testing.assert_array_equal(out.data, [[0]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        out = tc.matmul(tc.tensor(a), tc.tensor(b)).data
        np.testing.assert_allclose(out, naive_matmul(a, b), rtol=1e-6, atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(tc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(tc.tensor(np.ones((2, 3))), tc.tensor(np.ones((2, 3))))


class TestTensorMap:
    def test_clip_saturates(self):
        out = tc.tensor_map(tc.tensor([-2, 0.5, 2]), "clip", -1, 1)
        np.testing.assert_array_equal(out.data, [-1, 0.5, 1])

    def test_mean_after_abs(self):
        x = tc.tensor([1, -1, 2, -2])
        assert tc.tensor_map(tc.tensor_map(x, "abs"), "mean").data == pytest.approx(1.5)

    def test_clip_gradient_inside_outside_and_boundary(self):
        x = tc.parameter([0.5, 2.0, 1.0, -1.0])
        with tc.Tape() as tape:
            loss = tc.tsum(tc.clip(x, -1, 1))
        g = tape.backward(loss)[x]
        np.testing.assert_array_equal(g, [1, 0, 0, 0])

    def test_clip_requires_lo_below_hi(self):
        with pytest.raises(ValueError):
            tc.clip(tc.tensor([0.0]), 1.0, 1.0)

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(tc.ShapeError):
            tc.add(tc.tensor(np.ones(3)), tc.tensor(np.ones(4)))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            tc.tensor_map(tc.tensor([1.0]), "tanh")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_result_is_an_error(self):
        with pytest.raises(tc.NonFiniteError):
            tc.exp(tc.tensor([1000.0]))


class TestCustomGrad:
    def test_dead_gradient(self):
        x = tc.parameter([2.0])
        with tc.Tape() as tape:
            y = tc.custom_grad(x, np.array([5.0]), np.array([0.0]))
            loss = tc.tsum(tc.scale(y, 7.0))
        np.testing.assert_array_equal(tape.backward(loss)[x], [0.0])
        np.testing.assert_array_equal(y.data, [5.0])

    def test_identity_jacobian(self):
        rng = np.random.default_rng(1)
        xv = rng.normal(size=5)
        w = rng.normal(size=5)
        grads = []
        for use_custom in (False, True):
            x = tc.parameter(xv)
            with tc.Tape() as tape:
                y = tc.custom_grad(x, x.data, np.ones(5)) if use_custom else x
                loss = tc.tsum(tc.mul(y, tc.tensor(w)))
            grads.append(tape.backward(loss)[x])
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_clip_expectation_gradient_matches_finite_difference(self):
        # spike forward with the straight-through jacobian vs d/dm of clip(m, -1, 1)
        rng = np.random.default_rng(2)
        m = rng.uniform(-2, 2, size=50)
        m = m[np.abs(np.abs(m) - 1) > 0.01]
        w = rng.normal(size=m.size)
        with tc.default_dtype(np.float64):
            x = tc.parameter(m)
            with tc.Tape() as tape:
                s = tc.custom_grad(x, np.sign(m) * (np.abs(m) >= 1), (np.abs(m) < 1).astype(float))
                loss = tc.tsum(tc.mul(s, tc.tensor(w)))
            g = tape.backward(loss)[x]
            work = m.copy()
            (fd,) = tc.central_difference(lambda: float(np.sum(np.clip(work, -1, 1) * w)), [work], h=1e-3)
        assert rel_error(g, fd) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(tc.ShapeError):
            tc.custom_grad(tc.tensor(np.ones(3)), np.ones(3), np.ones(4))


class TestBackward:
    def test_linear_outer_product(self):
        rng = np.random.default_rng(3)
        W = tc.parameter(rng.normal(size=(4, 3)))
        x = rng.normal(size=(2, 4))
        with tc.Tape() as tape:
            loss = tc.tsum(tc.matmul(tc.tensor(x), W))
        g = tape.backward(loss)[W]
        np.testing.assert_allclose(g, np.outer(x.sum(axis=0), np.ones(3)), rtol=1e-6)

    def test_square(self):
        x = tc.parameter([3.0])
        with tc.Tape() as tape:
            loss = tc.tsum(tc.square(x))
        np.testing.assert_allclose(tape.backward(loss)[x], [6.0])
        np.testing.assert_allclose(x.grad, [6.0])

    def test_visits_nodes_in_reverse_creation_order(self):
        x = tc.parameter([1.0, 2.0])
        with tc.Tape() as tape:
            a = tc.square(x)
            b = tc.scale(a, 2.0)
            c = tc.add(b, a)
            loss = tc.tsum(c)
        tape.backward(loss)
        assert tape.visit_order == list(range(len(tape.nodes)))[::-1]
        assert [n.op for n in tape.nodes] == ["square", "scale", "add", "sum"]

    def test_non_scalar_loss_rejected(self):
        x = tc.parameter([1.0, 2.0])
        with tc.Tape() as tape:
            y = tc.square(x)
        with pytest.raises(tc.ShapeError):
            tape.backward(y)

    def test_second_backward_is_stale(self):
        x = tc.parameter([1.0])
        with tc.Tape() as tape:
            loss = tc.tsum(tc.square(x))
        tape.backward(loss)
        with pytest.raises(tc.StaleTapeError):
            tape.backward(loss)
        with pytest.raises(tc.StaleTapeError):
            with tape:
                pass

    def test_loss_from_another_tape_rejected(self):
        x = tc.parameter([1.0])
        with tc.Tape():
            loss = tc.tsum(tc.square(x))
        with tc.Tape() as other:
            tc.square(x)
        with pytest.raises(tc.StaleTapeError):
            other.backward(loss)

    def test_fan_out_accumulates(self):
        x = tc.parameter([2.0])
        with tc.Tape() as tape:
            loss = tc.tsum(tc.mul(x, x))
        np.testing.assert_allclose(tape.backward(loss)[x], [4.0])

    def test_bit_identical_reruns(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
        outs = []
        for _ in range(2):
            A = tc.parameter(a)
            with tc.Tape() as tape:
                loss = tc.tsum(tc.softmax(tc.matmul(A, tc.tensor(b))))
            outs.append((loss.data.tobytes(), tape.backward(loss)[A].tobytes()))
        assert outs[0] == outs[1]


class TestFusedOps:
    def test_softmax_rows_sum_to_one(self):
        p = tc.softmax(tc.tensor(np.random.default_rng(5).normal(size=(4, 7)))).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-6)

    def test_layer_norm_standardises(self):
        x = np.random.default_rng(6).normal(3.0, 2.0, size=(5, 16))
        y = tc.layer_norm(tc.tensor(x), tc.tensor(np.ones(16)), tc.tensor(np.zeros(16)), eps=0.0).data
        np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-5)
        np.testing.assert_allclose(y.std(axis=-1), 1, rtol=1e-4)

    def test_cross_entropy_uniform_logits(self):
        loss = tc.cross_entropy(tc.tensor(np.zeros((3, 10))), np.array([1, 2, 3]))
        assert float(loss.data) == pytest.approx(np.log(10), rel=1e-6)

    def test_embedding_gathers_rows(self):
        table = np.arange(12.0).reshape(4, 3)
        out = tc.embedding(tc.tensor(table), np.array([[3, 0]]))
        np.testing.assert_array_equal(out.data, table[[[3, 0]]])

    def test_embedding_index_out_of_range(self):
        with pytest.raises(IndexError):
            tc.embedding(tc.tensor(np.ones((4, 3))), np.array([4]))
