import numpy as np
import pytest

from mspn.engine import ParamSet, Tensor, backward, grad_check, ops
from mspn.errors import ConfigError, DataError, NumericError

from _oracles import naive_conv2d, naive_conv_transpose2d


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_average_of_constant():
    x = np.full((1, 5, 6), 2.5, dtype=np.float64)
    k = np.full((1, 1, 3, 3), 1 / 9)
    out = ops.conv2d(Tensor(x), Tensor(k), padding=1).data
    np.testing.assert_allclose(out[0, 1:-1, 1:-1], 2.5, atol=1e-12)


def test_conv_matches_naive_small():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 1, 3, 3))
    np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, naive_conv2d(x, w, padding=1), atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 2, 5), (2, 0, 3)])
def test_conv_matches_naive_random(seed, stride, padding, k):
    rng = np.random.default_rng(seed)
    c, h, w = rng.integers(1, 9), rng.integers(k, 17), rng.integers(k, 17)
    x = rng.normal(size=(c, h, w)).astype(np.float32)
    kern = rng.normal(size=(3, c, k, k)).astype(np.float32)
    bias = rng.normal(size=3).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(kern), Tensor(bias), stride=stride, padding=padding).data
    want = naive_conv2d(x.astype(np.float64), kern.astype(np.float64), bias, stride, padding)
    assert got.shape == (3, (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1)
    np.testing.assert_allclose(got, want, atol=1e-5 * max(1, np.abs(want).max()))


def test_conv_large_matches_naive_to_1e6():
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(8, 16, 16)), rng.normal(size=(2, 8, 3, 3))
    np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, naive_conv2d(x, w, padding=1), atol=1e-6)


def test_conv_transpose_matches_naive():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 2, 3, 3))
    got = ops.conv_transpose2d(Tensor(x), Tensor(w)).data
    assert got.shape == (2, 8, 10)
    np.testing.assert_allclose(got, naive_conv_transpose2d(x, w), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ConfigError, match=r"\(2, 4, 4\)"):
        ops.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ConfigError):
        ops.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    const = Tensor(np.full((2, 3, 3), 4.0))
    np.testing.assert_array_equal(ops.layer_norm(const, ones, zeros).data, 0.0)
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1))
    np.testing.assert_allclose(ops.layer_norm(x, ones, zeros, eps=1e-12).data.ravel(), [-1.0, 1.0], atol=1e-9)
    rng = np.random.default_rng(1)
    y = ops.layer_norm(Tensor(rng.normal(size=(2, 4, 4))), zeros, Tensor(np.full(2, 5.0)))
    np.testing.assert_array_equal(y.data, 5.0)
    with pytest.raises(ConfigError):
        ops.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_backward_quadratic():
    ps = ParamSet({"w": np.array([1.0, 2.0])})
    w = ps["w"]
    g = backward(ops.sum_all(w * w), ps)
    np.testing.assert_array_equal(g["w"], [2.0, 4.0])


def test_unused_parameter_gets_zero_gradient():
    ps = ParamSet({"w": np.array([1.0, 2.0]), "unused": np.ones((2, 3))})
    g = backward(ops.sum_all(ps["w"]), ps)
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 3)))


def test_backward_rejects_non_scalar():
    ps = ParamSet({"w": np.ones(3)})
    with pytest.raises(ConfigError):
        backward(ps["w"] * 2.0, ps)


def test_backward_linearity_exact():
    rng = np.random.default_rng(5)
    ps = ParamSet({"a": rng.normal(size=(3, 4, 4)), "w": rng.normal(size=(2, 3, 3, 3))})

    def loss1(p):
        return ops.sum_all(ops.square(ops.conv2d(p["a"], p["w"], padding=1)))

    def loss2(p):
        return ops.mean_all(ops.relu(p["a"]) * 3.0)

    g1, g2 = backward(loss1(ps), ps), backward(loss2(ps), ps)
    g12 = backward(loss1(ps) + loss2(ps), ps)
    for name in ps:
        np.testing.assert_array_equal(g12[name], g1[name] + g2[name])


def test_nan_fails_fast():
    with pytest.raises(NumericError, match="log"):
        ops.log(Tensor(np.array([-1.0, 1.0])))


def test_non_finite_gradient_names_node():
    ps = ParamSet({"w": np.array([0.0, 1.0])})
    with pytest.raises(NumericError, match="sqrt"):
        backward(ops.sum_all(ops.sqrt(ps["w"])), ps)


def _op_cases():
    rng = np.random.default_rng(11)
    q = rng.normal(size=(3, 5, 6))
    k = rng.normal(size=(3, 5, 6))
    valid = ops.window_valid(5, 6, 3)
    cases = {
        "conv2d": (
            {"x": rng.normal(size=(2, 6, 5)), "w": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)},
            lambda p: ops.conv2d(p["x"], p["w"], p["b"], stride=2, padding=1),
        ),
        "conv_transpose2d": (
            {"x": rng.normal(size=(2, 3, 4)), "w": rng.normal(size=(2, 3, 3, 3)), "b": rng.normal(size=3)},
            lambda p: ops.conv_transpose2d(p["x"], p["w"], p["b"]),
        ),
        "layer_norm": (
            {"x": rng.normal(size=(4, 3, 3)), "g": rng.normal(size=4), "b": rng.normal(size=4)},
            lambda p: ops.layer_norm(p["x"], p["g"], p["b"]),
        ),
        "softplus": ({"x": rng.normal(size=(4, 4))}, lambda p: ops.softplus(p["x"])),
        "relu": ({"x": rng.normal(size=(4, 4)) + 0.05}, lambda p: ops.relu(p["x"])),
        "log_exp": ({"x": rng.uniform(0.5, 2, size=(5,))}, lambda p: ops.exp(ops.log(p["x"]) * 0.5)),
        "sqrt_abs": ({"x": rng.uniform(0.5, 2, size=(5,)) * rng.choice([-1, 1], 5)}, lambda p: ops.sqrt(ops.absolute(p["x"]))),
        "div": ({"a": rng.normal(size=(3,)), "b": rng.uniform(1, 2, size=(3,))}, lambda p: p["a"] / p["b"]),
        "broadcast_mul": ({"a": rng.normal(size=(3, 4, 4)), "b": rng.normal(size=(1, 4, 4))}, lambda p: p["a"] * p["b"] - p["b"]),
        "concat_crop": (
            {"a": rng.normal(size=(1, 4, 4)), "b": rng.normal(size=(2, 4, 4))},
            lambda p: ops.crop(ops.concat([p["a"], p["b"]]), 1, 0, 2, 3),
        ),
        "pad_reflect": ({"x": rng.normal(size=(2, 5, 4))}, lambda p: ops.pad2d(p["x"], 1, 3, 0, 2)),
        "pad_edge": ({"x": rng.normal(size=(2, 3, 4))}, lambda p: ops.pad2d(p["x"], 2, 1, 1, 3, "edge")),
        "pad_constant": ({"x": rng.normal(size=(3, 4))}, lambda p: ops.pad2d(p["x"], 1, 0, 2, 1, "constant")),
        "take": ({"x": rng.normal(size=(4, 4))}, lambda p: ops.take(p["x"], np.array([0, 5, 5, 15]))),
        "window_logits": (
            {"q": q, "k": k, "b": rng.normal(size=9)},
            lambda p: ops.masked_softmax(ops.window_logits(p["q"], p["k"], p["b"], 3), valid),
        ),
        "window_aggregate": (
            {"a": rng.uniform(size=(9, 5, 6)), "x": rng.normal(size=(2, 5, 6))},
            lambda p: ops.window_aggregate(p["a"], p["x"], 3),
        ),
    }
    return cases


@pytest.mark.parametrize("name", list(_op_cases()))
def test_op_gradients_match_central_differences(name):
    init, fn = _op_cases()[name]
    weights = np.random.default_rng(2).normal(size=fn(ParamSet(init)).shape)

    def f(p):
        out = fn(p)
        return ops.sum_all(out * Tensor(weights.astype(out.dtype)))

    assert grad_check(f, ParamSet(init), eps=1e-6, samples_per_param=100) < 1e-4


def test_grad_check_sum_of_squares_and_eps():
    ps = ParamSet({"w": np.random.default_rng(0).normal(size=(10,))})

    def f(p):
        return ops.sum_all(ops.square(p["w"]))

    assert grad_check(f, ps) < 1e-8
    with pytest.raises(ConfigError):
        grad_check(f, ps, eps=0.0)


def test_grad_check_detects_nondeterminism():
    ps = ParamSet({"w": np.ones(3)})
    rng = np.random.default_rng(0)

    def f(p):
        return ops.sum_all(p["w"] * float(rng.normal()))

    with pytest.raises(NumericError):
        grad_check(f, ps)


def test_paramset_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    ps = ParamSet({
        "layer0.f_q.weight": rng.normal(size=(4, 5, 1, 1)).astype(np.float32),
        "layer0.bias": rng.normal(size=(9,)).astype(np.float32),
        "scalar": np.asarray(np.float32(3.5)),
        "ünïcode": np.array([np.float32(-0.0), np.float32(1e-40)]),
    })
    path = tmp_path / "p.bin"
    ps.save(path)
    back = ParamSet.load(path)
    assert list(back) == list(ps)
    for n in ps:
        assert back[n].data.tobytes() == ps[n].data.tobytes()
    assert path.read_bytes()[:5] == b"SDRK1"


def test_paramset_rejects_bad_files():
    with pytest.raises(DataError):
        ParamSet.from_bytes(b"NOPE!\x00\x00\x00\x00")
    good = ParamSet({"a": np.ones(4, np.float32)}).to_bytes()
    with pytest.raises(DataError):
        ParamSet.from_bytes(good[:-3])


def test_paramset_unique_names_and_fixed_shapes():
    ps = ParamSet({"a": np.ones(2)})
    with pytest.raises(ConfigError):
        ps.add("a", np.ones(2))
    with pytest.raises(ConfigError):
        ps.set_data("a", np.ones(3))
