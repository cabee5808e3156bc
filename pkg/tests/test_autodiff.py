import numpy as np
import pytest

from piave import autodiff as ad
from piave.autodiff import Tensor
from piave.errors import ConfigError, DimensionError, GraphError, ParameterError


def scalar(fn):
    """Wrap an op so grad_check sees a scalar objective."""
    return lambda *ts: ad.tsum(ad.square(fn(*ts)))


# One entry per registered op: (name, objective, input shapes, sampler kwargs)
OP_CASES = [
    ("add", scalar(lambda a, b: a + b), [(3, 4), (3, 4)], {}),
    ("add_broadcast", scalar(lambda a, b: a + b), [(2, 3, 5), (3, 1)], {}),
    ("sub", scalar(lambda a, b: a - b), [(3, 4), (3, 4)], {}),
    ("mul", scalar(lambda a, b: a * b), [(3, 4), (3, 4)], {}),
    ("div", scalar(lambda a, b: a / b), [(3, 4), (3, 4)], {"positive": True}),
    ("neg", scalar(lambda a: -a), [(5,)], {}),
    ("square", scalar(ad.square), [(4, 3)], {}),
    ("sqrt", scalar(ad.sqrt), [(4, 3)], {"positive": True}),
    ("log", lambda a: ad.tsum(ad.log(a)), [(4, 3)], {"positive": True}),
    ("relu", scalar(ad.relu), [(2, 3, 5)], {}),
    ("sigmoid", scalar(ad.sigmoid), [(3, 4)], {}),
    ("prelu", scalar(ad.prelu), [(2, 3, 5), (3,)], {}),
    ("matmul", scalar(ad.matmul), [(3, 4), (4, 2)], {}),
    ("mean_all", lambda a: ad.mean(a), [(3, 4)], {}),
    ("mean_axis", scalar(lambda a: ad.mean(a, axis=1, keepdims=True)), [(3, 4)], {}),
    ("sum_axis", scalar(lambda a: ad.tsum(a, axis=-1)), [(2, 3, 4)], {}),
    ("reshape", scalar(lambda a: ad.reshape(a, (6, 2))), [(3, 4)], {}),
    ("concat", scalar(lambda a, b: ad.concat([a, b], axis=1)), [(2, 3, 4), (2, 2, 4)], {}),
    ("crop", scalar(lambda a: ad.crop_pad_time(a, 3)), [(2, 2, 5)], {}),
    ("pad", scalar(lambda a: ad.crop_pad_time(a, 8)), [(2, 2, 5)], {}),
    ("upsample", scalar(lambda a: ad.nearest_upsample_time(a, 11)), [(2, 3, 4)], {}),
    ("conv1x1", scalar(lambda x, w, b: ad.conv1d(x, w, b)), [(2, 3, 6), (4, 3, 1), (4,)], {}),
    (
        "conv_strided",
        scalar(lambda x, w, b: ad.conv1d(x, w, b, stride=2, padding=2, dilation=2)),
        [(2, 3, 12), (4, 3, 3), (4,)],
        {},
    ),
    (
        "depthwise",
        scalar(lambda x, w, b: ad.depthwise_conv1d(x, w, b, padding=2, dilation=2)),
        [(2, 3, 9), (3, 3), (3,)],
        {},
    ),
    (
        "depthwise_separable",
        scalar(lambda x, dw, pw, b: ad.depthwise_separable_conv1d(x, dw, pw, b, padding=1)),
        [(2, 3, 7), (3, 3), (5, 3, 1), (5,)],
        {},
    ),
    (
        "transposed_conv",
        scalar(lambda x, w, b: ad.transposed_conv1d(x, w, b, stride=3)),
        [(2, 3, 5), (3, 2, 4), (2,)],
        {},
    ),
    (
        "global_layer_norm",
        scalar(lambda x, g, b: ad.global_layer_norm(x, g, b)),
        [(2, 3, 5), (3,), (3,)],
        {},
    ),
]


@pytest.mark.parametrize("name,fn,shapes,kwargs", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_gradients_match_finite_differences(name, fn, shapes, kwargs):
    worst = max(ad.grad_check(fn, shapes, seed=seed, **kwargs) for seed in range(20))
    assert worst < 1e-4, f"{name}: max rel error {worst:.2e}"


class TestForwardExamples:
    def test_add_mul_identities(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]))
        np.testing.assert_array_equal((x + 0.0).data, x.data)
        np.testing.assert_array_equal((x * 1.0).data, x.data)

    def test_conv_arithmetic(self):
        x = Tensor(np.array([[[1.0, 2, 3, 4, 5]]]))
        w = Tensor(np.array([[[1.0, 0, -1]]]))
        np.testing.assert_array_equal(ad.conv1d(x, w).data, [[[-2.0, -2.0, -2.0]]])

    def test_upsample_copy_pattern(self):
        x = Tensor(np.array([[[10.0, 20.0]]]))
        out = ad.nearest_upsample_time(x, 5)
        np.testing.assert_array_equal(out.data, [[[10.0, 10, 10, 20, 20]]])

    def test_upsample_by_factor(self):
        x = Tensor(np.array([[[1.0, 2.0]]]))
        np.testing.assert_array_equal(
            ad.nearest_upsample_time(x, factor=2).data, [[[1.0, 1, 2, 2]]]
        )

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(DimensionError):
            ad.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((3, 4, 1))))

    def test_invalid_conv_params(self):
        x, w = Tensor(np.zeros((1, 1, 8))), Tensor(np.zeros((1, 1, 3)))
        with pytest.raises(ParameterError):
            ad.conv1d(x, w, stride=0)
        with pytest.raises(ParameterError):
            ad.conv1d(x, w, dilation=0)
        with pytest.raises(ParameterError):
            ad.conv1d(x, w, padding=-1)

    def test_too_short_input(self):
        with pytest.raises(DimensionError):
            ad.conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 5))))


class TestBackward:
    def test_simple_product(self):
        w = Tensor(np.array(2.0), requires_grad=True)
        loss = w * 3.0
        ad.backward(loss)
        assert float(w.grad) == 3.0

    def test_detached_input_gets_no_grad(self):
        w = Tensor(np.array(2.0), requires_grad=True)
        x = Tensor(np.array(3.0))
        loss = w * x
        ad.backward(loss)
        assert x.grad is None and float(w.grad) == 3.0

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            ad.backward(w * 2.0)

    def test_backward_twice_rejected(self):
        w = Tensor(np.array(1.0), requires_grad=True)
        loss = w * w
        ad.backward(loss)
        with pytest.raises(GraphError):
            ad.backward(loss)

    def test_diamond_graph_accumulates(self):
        # loss = x*x via two paths: d/dx (x*x) = 2x
        x = Tensor(np.array(3.0), requires_grad=True)
        loss = x * x
        ad.backward(loss)
        assert float(x.grad) == 6.0

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(0)
        a_data = rng.standard_normal((3, 4))
        b_data = rng.standard_normal((3, 4))

        def grads(fn):
            a = Tensor(a_data.copy(), requires_grad=True)
            b = Tensor(b_data.copy(), requires_grad=True)
            ad.backward(fn(a, b))
            return a.grad, b.grad

        f = lambda a, b: ad.tsum(a * b)
        g = lambda a, b: ad.mean(ad.square(a + b))
        fa, fb = grads(f)
        ga, gb = grads(g)
        sa, sb = grads(lambda a, b: f(a, b) + g(a, b))
        np.testing.assert_allclose(sa, fa + ga, atol=1e-12)
        np.testing.assert_allclose(sb, fb + gb, atol=1e-12)

    def test_no_grad_builds_no_graph(self):
        w = Tensor(np.array(1.0), requires_grad=True)
        with ad.no_grad():
            out = w * 2.0
        assert not out.requires_grad
        with pytest.raises(GraphError):
            ad.backward(out)


class TestGradCheckGuards:
    def test_linear_op_is_exact(self):
        err = ad.grad_check(lambda a: ad.tsum(a * 2.5), [(4, 4)], seed=0)
        assert err < 1e-10

    def test_sigmoid_chain(self):
        err = ad.grad_check(
            lambda a: ad.tsum(ad.sigmoid(ad.sigmoid(a))), [(3, 3)], seed=1
        )
        assert err < 1e-6

    def test_constant_input_resampled(self):
        # A constant input sits on layer norm's zero-variance degeneracy; the
        # guard must resample rather than difference through it.
        err = ad.grad_check(
            lambda x, g, b: ad.tsum(ad.square(ad.global_layer_norm(x, g, b))),
            [(1, 2, 4), (2,), (2,)],
            seed=2,
            x0=[np.full((1, 2, 4), 0.7), np.ones(2), np.zeros(2)],
        )
        assert err < 1e-4

    def test_kink_input_resampled(self):
        # x0 sits right on the ReLU kink; finite differences there would be
        # garbage, so the sampler must draw a fresh point.
        err = ad.grad_check(
            lambda x: ad.tsum(ad.relu(x)), [(3, 3)], seed=3, x0=[np.full((3, 3), 1e-9)]
        )
        assert err < 1e-6


class TestNorms:
    def test_gln_zero_mean_unit_variance(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((3, 8, 50)))
        out = ad.global_layer_norm(
            x, Tensor(np.ones(8)), Tensor(np.zeros(8))
        ).data
        for b in range(3):
            assert abs(out[b].mean()) < 1e-6
            assert abs(out[b].var() - 1.0) < 1e-6

    def test_gln_shape_contract(self):
        with pytest.raises(DimensionError):
            ad.global_layer_norm(
                Tensor(np.zeros((2, 3, 4))), Tensor(np.ones(4)), Tensor(np.zeros(4))
            )


class TestDeterminism:
    def test_bit_identical_runs(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((2, 3, 20)).astype(np.float32))
            w = Tensor(
                rng.standard_normal((4, 3, 3)).astype(np.float32), requires_grad=True
            )
            g = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
            b = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
            y = ad.global_layer_norm(ad.conv1d(x, w, padding=1), g, b)
            loss = ad.mean(ad.square(y))
            ad.backward(loss)
            return y.data.copy(), w.grad.copy()

        y1, g1 = run()
        y2, g2 = run()
        assert np.array_equal(y1, y2)
        assert np.array_equal(g1, g2)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        params = {
            "b.w": Tensor(rng.standard_normal((3, 2)).astype(np.float32)),
            "a.v": Tensor(rng.standard_normal(5)),
        }
        path = tmp_path / "ckpt.bin"
        ad.save_checkpoint(path, params, extra={"note": "x"})
        arrays, extra = ad.load_checkpoint(path)
        assert extra == {"note": "x"}
        assert set(arrays) == {"a.v", "b.w"}
        np.testing.assert_array_equal(arrays["b.w"], params["b.w"].data)
        np.testing.assert_array_equal(arrays["a.v"], params["a.v"].data)
        assert arrays["b.w"].dtype == np.float32

    def test_version_field_mandatory(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        ad.save_checkpoint(path, {"x": Tensor(np.ones(2))})
        sidecar = ad.sidecar_path(path)
        doc = sidecar.read_text().replace('"version": 1', '"version": 99')
        sidecar.write_text(doc)
        with pytest.raises(ConfigError):
            ad.load_checkpoint(path)
        import json

        doc2 = json.loads(sidecar.read_text())
        del doc2["version"]
        sidecar.write_text(json.dumps(doc2))
        with pytest.raises(ConfigError):
            ad.load_checkpoint(path)

    def test_deterministic_bytes(self, tmp_path):
        params = {"a": Tensor(np.arange(4.0)), "b": Tensor(np.ones((2, 2)))}
        p1, p2 = tmp_path / "c1.bin", tmp_path / "c2.bin"
        ad.save_checkpoint(p1, params)
        ad.save_checkpoint(p2, params)
        assert p1.read_bytes() == p2.read_bytes()
