import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contact_forecast import autodiff as ad
from contact_forecast.autodiff import Tensor
from contact_forecast.errors import InvalidInputError, ParseError, ShapeError

rng = np.random.default_rng(0)


def leaf(*shape, lo=-1.0, hi=1.0, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(lo, hi, size=shape), requires_grad=True)


def weighted(t, seed=99):
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ad.tensor_sum(ad.mul(t, w))


# forward values ------------------------------------------------------------

def test_matmul_identity():
    A = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), A).data, A)


def test_symmetry_points():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.tanh(Tensor(0.0)).item() == 0.0


def test_broadcast_add_matches_loop():
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
    out = ad.add(a, b).data
    for i in range(2):
        for j in range(3):
            assert out[i, j] == a[i, j] + b[0, j]


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((4, 3)))


def test_numpy_operands_defer_to_tensor():
    t = Tensor(np.ones(3), requires_grad=True)
    out = np.full(3, 2.0) * t
    assert isinstance(out, Tensor)


# backward ------------------------------------------------------------------

def test_square_grad():
    x = Tensor([3.0], requires_grad=True)
    (g,) = ad.backward(ad.tensor_sum(ad.square(x)), wrt=[x])
    assert g.tolist() == [6.0]


def test_unreached_leaf_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    gx, gy = ad.backward(ad.tensor_sum(x * x), wrt=[x, y])
    assert gy.tolist() == [0.0]
    assert gx.tolist() == [2.0, 4.0]


def test_non_scalar_loss():
    with pytest.raises(InvalidInputError):
        ad.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_chain_matches_finite_difference():
    W = rng.normal(size=(4, 3))
    x = rng.normal(size=(3, 1))
    err = ad.grad_check(lambda w: ad.tensor_sum(ad.square(ad.tanh(ad.matmul(w, x)))), W)
    assert err < 1e-6


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (g,) = ad.backward(ad.tensor_sum(y + y * 3.0), wrt=[x])
    assert g.tolist() == [16.0]


def test_topological_orders_agree():
    a, b = leaf(3, 4, seed=1), leaf(4, 2, seed=2)

    def build():
        h = ad.tanh(ad.matmul(a, b))
        return ad.tensor_sum(ad.square(h) + ad.exp(h) * ad.sigmoid(h))

    ga = [g.copy() for g in ad.backward(build(), wrt=[a, b])]
    ad.zero_grad([a, b])
    gb = ad.backward(build(), wrt=[a, b], reverse_parents=True)
    for x, y in zip(ga, gb):
        np.testing.assert_allclose(x, y, atol=1e-10)


# gradient checks per primitive ---------------------------------------------

PRIMITIVES = {
    "add": lambda: (lambda a, b: ad.add(a, b), [leaf(2, 3, seed=1), leaf(1, 3, seed=2)]),
    "sub": lambda: (lambda a, b: ad.sub(a, b), [leaf(2, 3, seed=1), leaf(3, seed=2)]),
    "mul": lambda: (lambda a, b: ad.mul(a, b), [leaf(2, 3, seed=1), leaf(2, 1, seed=2)]),
    "div": lambda: (lambda a, b: ad.div(a, b), [leaf(2, 3, seed=1), leaf(1, 3, lo=0.5, hi=2.0, seed=2)]),
    "neg": lambda: (lambda a: ad.neg(a), [leaf(4, seed=1)]),
    "matmul": lambda: (lambda a, b: ad.matmul(a, b), [leaf(3, 4, seed=1), leaf(4, 2, seed=2)]),
    "concat": lambda: (lambda a, b: ad.concat([a, b], axis=1), [leaf(2, 3, seed=1), leaf(2, 2, seed=2)]),
    "slice": lambda: (lambda a: a[1:, ::2], [leaf(3, 5, seed=1)]),
    "reshape": lambda: (lambda a: ad.reshape(a, (6, 2)), [leaf(3, 4, seed=1)]),
    "transpose": lambda: (lambda a: ad.transpose(a, (2, 0, 1)), [leaf(2, 3, 4, seed=1)]),
    "sum": lambda: (lambda a: ad.tensor_sum(a, axis=1, keepdims=True), [leaf(3, 4, seed=1)]),
    "mean": lambda: (lambda a: ad.mean(a, axis=(0, 2)), [leaf(2, 3, 4, seed=1)]),
    "exp": lambda: (lambda a: ad.exp(a), [leaf(5, seed=1)]),
    "tanh": lambda: (lambda a: ad.tanh(a), [leaf(5, seed=1)]),
    "sigmoid": lambda: (lambda a: ad.sigmoid(a), [leaf(5, lo=-3, hi=3, seed=1)]),
    "square": lambda: (lambda a: ad.square(a), [leaf(5, seed=1)]),
    "sqrt": lambda: (lambda a: ad.sqrt(a), [leaf(5, lo=0.5, hi=2.0, seed=1)]),
    "sin": lambda: (lambda a: ad.sin(a), [leaf(5, seed=1)]),
    "cos": lambda: (lambda a: ad.cos(a), [leaf(5, seed=1)]),
    "gather_rows": lambda: (lambda a: ad.gather_rows(a, [2, 0, 2, 1]), [leaf(3, 2, seed=1)]),
    "scatter_add_rows": lambda: (lambda a: ad.scatter_add_rows(a, [1, 1, 0, 3], 4), [leaf(4, 2, seed=1)]),
    "conv3d": lambda: (lambda x, w, b: ad.conv3d(x, w, b),
                       [leaf(3, 2, 4, 2, seed=1), leaf(27, 2, 3, seed=2), leaf(3, seed=3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, leaves = PRIMITIVES[name]()
    err = ad.grad_check(lambda: weighted(fn(*leaves)), leaves)
    assert err < 1e-6, f"{name}: {err}"


def test_grad_check_linear_function():
    assert ad.grad_check(lambda t: ad.tensor_sum(t), rng.normal(size=(3, 2))) < 1e-10


def test_grad_check_sigmoid():
    assert ad.grad_check(lambda t: ad.tensor_sum(ad.sigmoid(t)), rng.normal(size=7), eps=1e-5) < 1e-6


def test_grad_check_detects_wrong_gradient():
    def bad_square(a):
        return ad._node(a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    assert ad.grad_check(lambda t: ad.tensor_sum(bad_square(t)), np.array([1.0, 2.0])) > 0.1


def test_gather_out_of_range():
    with pytest.raises(ShapeError):
        ad.gather_rows(np.ones((2, 2)), [2])


def test_conv3d_matches_direct_loop():
    x = rng.normal(size=(3, 3, 2, 2))
    w = rng.normal(size=(27, 2, 1))
    out = ad.conv3d(x, w).data
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((3, 3, 2, 1))
    for a in range(3):
        for b in range(3):
            for c in range(2):
                for k in range(27):
                    i, j, l = k // 9, (k // 3) % 3, k % 3
                    ref[a, b, c] += xp[a + i, b + j, c + l] @ w[k]
    np.testing.assert_allclose(out, ref, atol=1e-12)


# Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point():
    p = [np.array([1.0, -2.0])]
    ad.adam_step(p, [np.zeros(2)], ad.AdamState(lr=0.1))
    assert p[0].tolist() == [1.0, -2.0]


def test_adam_descends_quadratic():
    p = [np.array([1.0])]
    state = ad.AdamState(lr=0.001)
    ad.adam_step(p, [2 * p[0]], state)
    assert p[0][0] < 1.0 and state.step == 1
    np.testing.assert_allclose(p[0], 1.0 - 0.001, atol=1e-9)


def test_adam_two_groups():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = ad.Adam([{"params": [a], "lr": 0.0005}, {"params": [b], "lr": 0.001}])
    ad.backward(ad.tensor_sum(a * a + b * b))
    opt.step()
    np.testing.assert_allclose(a.data, 1 - 0.0005, atol=1e-9)
    np.testing.assert_allclose(b.data, 1 - 0.001, atol=1e-9)


def test_adam_deterministic():
    def run():
        p = [np.array([0.3, -0.7])]
        s = ad.AdamState(lr=0.01)
        for k in range(5):
            ad.adam_step(p, [np.sin(p[0] * (k + 1))], s)
        return p[0]

    assert run().tobytes() == run().tobytes()


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.adam_step([np.ones(2)], [np.ones(3)], ad.AdamState())


def test_glorot_bounds():
    w = ad.glorot_uniform(np.random.default_rng(0), 30, 10)
    assert w.shape == (30, 10)
    assert np.abs(w).max() <= np.sqrt(6 / 40)


# checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    tensors = {"enc.w": rng.normal(size=(3, 4)), "bias": np.arange(5.0), "scalar": np.array(2.5),
               "ünï": np.zeros((0, 2))}
    path = tmp_path / "m.camf"
    ad.save_checkpoint(path, tensors)
    back = ad.load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k], dtype=np.float64).tobytes()
    assert path.read_bytes()[:4] == b"CAMF"


def test_checkpoint_header_layout():
    buf = ad.checkpoint_bytes({"ab": np.ones((2, 1))})
    assert buf[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert buf[12:14] == (2).to_bytes(2, "little") and buf[14:16] == b"ab"
    assert buf[16] == 2
    assert len(buf) == 16 + 1 + 8 + 16


def test_checkpoint_truncation_is_parse_error():
    buf = ad.checkpoint_bytes({"w": np.ones((3, 3)), "b": np.ones(3)})
    for n in range(len(buf)):
        with pytest.raises(ParseError):
            ad.checkpoint_from_bytes(buf[:n])
    with pytest.raises(ParseError):
        ad.checkpoint_from_bytes(buf + b"\0")


@settings(max_examples=200)
@given(st.binary(max_size=200), st.integers(0, 120))
def test_checkpoint_fuzz(junk, cut):
    buf = ad.checkpoint_bytes({"w": np.ones((2, 3))})
    mutated = buf[:cut] + junk
    try:
        ad.checkpoint_from_bytes(mutated)
    except ParseError:
        pass
