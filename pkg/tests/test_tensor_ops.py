import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docbench import ops
from docbench.tensor import ShapeError, Tensor, load_tensors, save_tensors, trace
from helpers import conv2d_loops, maxpool_scan


class TestConv2d:
    def test_all_ones_window_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
        w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros(1))
        out = ops.conv2d(x, w, b)
        assert out.shape == (1, 1, 2, 2)
        assert np.allclose(out.data, 4.0)

    def test_valid_output_extent_384(self):
        x = Tensor(np.zeros((1, 1, 384, 384)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        assert ops.conv2d(x, w).shape == (1, 1, 382, 382)
        assert ops.conv_output_dims(384, 384, 3) == (382, 382)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        want = conv2d_loops(x, w, b)
        assert np.max(np.abs(got - want)) < 1e-12

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_strided_matches_oracle(self, stride):
        rng = np.random.default_rng(stride)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        got = ops.conv2d(Tensor(x), Tensor(w), stride=stride).data
        assert np.max(np.abs(got - conv2d_loops(x, w, stride=stride))) < 1e-12

    def test_same_padding_keeps_ceil_extent(self):
        x = Tensor(np.zeros((1, 2, 7, 7)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        assert ops.conv2d(x, w, padding="same").shape == (1, 4, 7, 7)
        assert ops.conv2d(x, w, stride=2, padding="same").shape == (1, 4, 4, 4)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 5, 5)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="channels"):
            ops.conv2d(x, w)

    def test_oversized_filter_raises(self):
        with pytest.raises(ShapeError, match="exceeds"):
            ops.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_zero_extent_input_rejected(self):
        with pytest.raises(ShapeError, match="zero-extent"):
            Tensor(np.zeros((1, 1, 0, 3)))


class TestDepthwise:
    def test_unit_filters_are_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 2, 4, 4))
        w = np.ones((2, 1, 1, 1))
        out = ops.depthwise_conv2d(Tensor(x), Tensor(w)).data
        assert np.array_equal(out, x)

    def test_matches_per_channel_conv2d(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 3, 5, 5))
        w = rng.standard_normal((3, 1, 3, 3))
        got = ops.depthwise_conv2d(Tensor(x), Tensor(w)).data
        for c in range(3):
            per = ops.conv2d(Tensor(x[:, c : c + 1]), Tensor(w[c : c + 1])).data
            assert np.max(np.abs(got[:, c : c + 1] - per)) < 1e-12

    def test_output_extent(self):
        out = ops.depthwise_conv2d(Tensor(np.zeros((1, 3, 5, 5))),
                                   Tensor(np.zeros((3, 1, 3, 3))))
        assert out.shape == (1, 3, 3, 3)

    def test_channel_count_mismatch_raises(self):
        with pytest.raises(ShapeError, match="per channel"):
            ops.depthwise_conv2d(Tensor(np.zeros((1, 3, 5, 5))),
                                 Tensor(np.zeros((2, 1, 3, 3))))

    def test_channels_stay_independent(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((2, 1, 3, 3))
        base = ops.depthwise_conv2d(Tensor(x), Tensor(w)).data
        x2 = x.copy()
        x2[:, 1] += 100.0
        bumped = ops.depthwise_conv2d(Tensor(x2), Tensor(w)).data
        assert np.array_equal(base[:, 0], bumped[:, 0])
        assert not np.allclose(base[:, 1], bumped[:, 1])


class TestMaxPool:
    def test_single_window(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert ops.maxpool2d(x, 2, 2).data.reshape(()) == 4.0

    def test_constant_input(self):
        x = Tensor(np.full((1, 1, 4, 4), 7.0), requires_grad=True)
        out = ops.maxpool2d(x, 2, 2)
        assert np.allclose(out.data, 7.0)
        out.sum().backward()
        # one unit of gradient per window
        assert x.grad.sum() == 4.0
        assert set(np.unique(x.grad)) == {0.0, 1.0}

    def test_matches_window_scan_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 1, 6, 6))
        got = ops.maxpool2d(Tensor(x), 2, 2).data
        assert np.array_equal(got, maxpool_scan(x, 2, 2))

    def test_pool_larger_than_input_raises(self):
        with pytest.raises(ShapeError, match="exceeds"):
            ops.maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)

    def test_tie_gradient_goes_to_first(self):
        x = Tensor(np.array([[[[5.0, 5.0], [5.0, 5.0]]]]), requires_grad=True)
        ops.maxpool2d(x, 2, 2).sum().backward()
        assert np.array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


class TestSoftmaxCrossentropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 16)))
        loss = ops.softmax_crossentropy(logits, np.array([0, 5, 15]))
        assert abs(loss.item() - math.log(16)) < 1e-12

    def test_saturated_true_class(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1000.0
        loss = ops.softmax_crossentropy(Tensor(logits), np.array([2]))
        assert loss.item() < 1e-9

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((4, 6))
        labels = rng.integers(0, 6, size=4)
        logits = Tensor(z, requires_grad=True)
        ops.softmax_crossentropy(logits, labels).backward()
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1.0
        assert np.max(np.abs(logits.grad - p / 4)) < 1e-10

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            ops.softmax_crossentropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_rows_on_simplex(self, seed):
        z = np.random.default_rng(seed).standard_normal((3, 8)) * 10
        p = ops.softmax(Tensor(z)).data
        assert (p >= 0).all()
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-6


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_fanout_gradients_sum(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x * Tensor(3.0)  # two consumers of x
        y.backward()
        assert x.grad == 2 * 2.0 + 3.0

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            (x * x).backward()

    def test_grad_accumulates_across_calls(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        (x * x).backward()
        assert x.grad == 12.0

    def test_trace_is_topologically_ordered(self):
        x = Tensor(np.ones(4), requires_grad=True)
        y = (x * 2.0 + 1.0).sum()
        g = trace(y)
        for pos, node in enumerate(g.nodes):
            assert all(i < pos for i in node.inputs)
        assert g.nodes[-1].tensor is y

    def test_each_node_visited_once(self):
        x = Tensor(2.0, requires_grad=True)
        shared = x * x
        y = shared + shared  # diamond
        calls = []
        orig = shared._vjp
        shared._vjp = lambda g: (calls.append(1), orig(g))[1]
        y.backward()
        assert len(calls) == 1
        assert x.grad == 2 * (2 * 2.0)  # d/dx 2x^2

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            out = ops.softmax(a @ b).sum()
            out.backward()
            return out.data.copy(), a.grad.copy()

        (o1, g1), (o2, g2) = run(), run()
        assert np.array_equal(o1, o2)
        assert np.array_equal(g1, g2)


class TestFiniteForward:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_ops_finite_on_finite_inputs(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        out = ops.swish(ops.conv2d(x, w, padding="same", stride=2))
        out = ops.maxpool2d(out, 2, 1)
        assert np.isfinite(out.data).all()
        assert np.isfinite(ops.softmax(out.reshape(2, -1)).data).all()


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "w": rng.standard_normal((3, 4)),
            "b": rng.standard_normal(4).astype(np.float32),
        }
        path = tmp_path / "ckpt.bin"
        save_tensors(path, arrays, meta={"kind": "test"})
        loaded, meta = load_tensors(path)
        assert meta == {"kind": "test"}
        for name, arr in arrays.items():
            assert loaded[name].dtype == arr.dtype
            assert np.array_equal(loaded[name], arr)

    def test_payload_is_little_endian_flat(self, tmp_path):
        path = tmp_path / "t.bin"
        arr = np.arange(6, dtype=np.float64).reshape(2, 3)
        save_tensors(path, {"x": arr})
        raw = path.read_bytes()
        header, payload = raw.split(b"\n", 1)
        assert b'"docbench-tensors-v1"' in header
        assert np.array_equal(np.frombuffer(payload, dtype="<f8"), np.arange(6.0))

    def test_deterministic_bytes(self, tmp_path):
        arr = {"x": np.ones((2, 2))}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_tensors(p1, arr)
        save_tensors(p2, arr)
        assert p1.read_bytes() == p2.read_bytes()


class TestShapeAlgebra:
    @given(extent=st.integers(1, 64), field=st.integers(1, 9), stride=st.integers(1, 4))
    @settings(max_examples=200, deadline=None)
    def test_output_dim_equations(self, extent, field, stride):
        if field <= extent:
            oh, _ = ops.conv_output_dims(extent, extent, field, stride, "valid")
            assert oh == (extent - field) // stride + 1
            if stride == 1:
                assert oh == extent - field + 1
        oh, _ = ops.conv_output_dims(extent, extent, field, stride, "same")
        assert oh == -(-extent // stride)

    def test_examples_from_shape_table(self):
        assert ops.conv_output_dims(5, 5, 3, 1, "valid") == (3, 3)
        assert ops.conv_output_dims(384, 384, 3, 1, "valid") == (382, 382)
        assert ops.conv_output_dims(224, 224, 3, 2, "same") == (112, 112)
