import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechmotion import gradtape as gt
from speechmotion.errors import BadLoss, NonFiniteGradient, ShapeError

F64 = np.float64


def gradcheck(fn, arrays, seed=0, h=1e-6, samples=30):
    """Largest relative error between tape gradients and central differences.

    The loss is a fixed random projection of ``fn``'s output. Error is
    measured per input over sampled coordinates, relative to the norm of
    the finite-difference vector.
    """
    rng = np.random.default_rng(seed)
    tensors = [gt.Tensor(np.array(a, dtype=F64), requires_grad=True) for a in arrays]
    with gt.Tape() as tape:
        out = fn(*tensors)
        proj = gt.Tensor(rng.standard_normal(out.shape))
        loss = gt.mean(gt.mul(out, proj))
    grads = gt.backward(tape, loss)

    def value(arrs):
        o = fn(*[gt.Tensor(a) for a in arrs])
        return float(np.mean(o.data * proj.data))

    worst = 0.0
    for i, t in enumerate(tensors):
        base = [np.array(a, dtype=F64) for a in arrays]
        flat = base[i].reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        fd, an = [], []
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            up = value(base)
            flat[j] = old - h
            down = value(base)
            flat[j] = old
            fd.append((up - down) / (2 * h))
            an.append(grads[t].reshape(-1)[j])
        fd, an = np.array(fd), np.array(an)
        denom = max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, np.linalg.norm(fd - an) / denom)
    return worst


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# -- forward semantics ------------------------------------------------------

def naive_conv3d(x, w, b, stride, pad):
    C, N = x.shape[:2]
    O, _, k = w.shape[:3]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    outs = [gt.conv_out_size(s, k, stride, pad) for s in x.shape[2:]]
    y = np.zeros((O, N, *outs))
    for o in range(O):
        for n in range(N):
            for i in range(outs[0]):
                for j in range(outs[1]):
                    for l in range(outs[2]):
                        patch = xp[:, n, i * stride:i * stride + k, j * stride:j * stride + k,
                                   l * stride:l * stride + k]
                        y[o, n, i, j, l] = np.sum(patch * w[o]) + (b[o] if b is not None else 0)
    return y


def naive_conv2d_transpose(x, w, b, stride, pad):
    N, C, H, W = x.shape
    O, k = w.shape[1], w.shape[2]
    full = np.zeros((N, O, (H - 1) * stride + k, (W - 1) * stride + k))
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    full[n, :, i * stride:i * stride + k, j * stride:j * stride + k] += x[n, c, i, j] * w[c]
    Ho, Wo = gt.conv_transpose_out_size(H, k, stride, pad), gt.conv_transpose_out_size(W, k, stride, pad)
    y = full[:, :, pad:pad + Ho, pad:pad + Wo]
    return y + b[None, :, None, None]


def test_conv3d_all_ones_is_27():
    y = gt.conv3d(gt.Tensor(np.ones((1, 1, 3, 3, 3))), gt.Tensor(np.ones((1, 1, 3, 3, 3))))
    assert y.shape == (1, 1, 1, 1, 1) and y.item() == 27.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 1), (2, 0)])
def test_conv3d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 6, 5, 7))
    w = rng.standard_normal((4, 2, 3, 3, 3))
    b = rng.standard_normal(4)
    got = gt.conv3d(gt.Tensor(x), gt.Tensor(w), gt.Tensor(b), stride=stride, pad=pad).data
    want = naive_conv3d(x, w, b, stride, pad)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) <= 1e-6 * np.max(np.abs(want))


def test_conv_transpose_shape_4_to_8():
    assert gt.conv_transpose_out_size(4, 4, 2, 1) == 8
    y = gt.conv2d_transpose(gt.Tensor(np.ones((1, 2, 4, 4))), gt.Tensor(np.ones((2, 3, 4, 4))),
                            gt.Tensor(np.zeros(3)), stride=2, pad=1)
    assert y.shape == (1, 3, 8, 8)


@pytest.mark.parametrize("stride,pad,k", [(2, 1, 4), (1, 0, 3), (2, 0, 2), (3, 1, 4)])
def test_conv2d_transpose_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(2)
    got = gt.conv2d_transpose(gt.Tensor(x), gt.Tensor(w), gt.Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, naive_conv2d_transpose(x, w, b, stride, pad), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 12), k=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv3d_output_shape_formula(n, k, stride, pad):
    if n + 2 * pad < k:
        return
    y = gt.conv3d(gt.Tensor(np.zeros((1, 1, n, n, n))), gt.Tensor(np.zeros((1, 1, k, k, k))),
                  stride=stride, pad=pad)
    o = (n + 2 * pad - k) // stride + 1
    assert y.shape == (1, 1, o, o, o)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 6), k=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 1))
def test_conv_transpose_output_shape_formula(h, k, stride, pad):
    o = (h - 1) * stride - 2 * pad + k
    if o < 1:
        return
    y = gt.conv2d_transpose(gt.Tensor(np.zeros((1, 1, h, h))), gt.Tensor(np.zeros((1, 1, k, k))),
                            stride=stride, pad=pad)
    assert y.shape == (1, 1, o, o)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), axis=st.sampled_from([0, 1, -1]))
def test_softmax_sums_to_one(seed, axis):
    x = np.random.default_rng(seed).standard_normal((4, 5, 6)) * 10
    s = gt.softmax(gt.Tensor(x), axis=axis).data
    assert np.max(np.abs(s.sum(axis=axis) - 1)) <= 1e-12


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        gt.matmul(gt.Tensor(np.zeros((2, 3))), gt.Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        gt.add(gt.Tensor(np.zeros((2, 3))), gt.Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        gt.mse(gt.Tensor(np.zeros(3)), gt.Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        gt.conv3d(gt.Tensor(np.zeros((2, 1, 4, 4, 4))), gt.Tensor(np.zeros((1, 3, 3, 3, 3))))


def test_default_dtype_is_float32():
    assert gt.Tensor([1, 2, 3]).dtype == np.float32
    assert gt.Tensor(np.zeros(2)).dtype == np.float64


# -- gradients --------------------------------------------------------------

TOL = 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_add_and_bias(seed):
    rng = np.random.default_rng(seed)
    assert gradcheck(gt.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], seed) <= TOL
    assert gradcheck(gt.add, [rng.standard_normal((2, 3, 4)), rng.standard_normal(4)], seed) <= TOL


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_mul(seed):
    rng = np.random.default_rng(seed)
    assert gradcheck(gt.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], seed) <= TOL
    assert gradcheck(lambda a: gt.mul(a, 0.37), [rng.standard_normal(5)], seed) <= TOL


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_matmul(seed):
    rng = np.random.default_rng(seed)
    assert gradcheck(gt.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], seed) <= TOL
    assert gradcheck(gt.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))], seed) <= TOL


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
def test_gradcheck_conv3d(stride, pad):
    rng = np.random.default_rng(stride)
    args = [rng.standard_normal((2, 2, 5, 5, 5)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)]
    f = lambda x, w, b: gt.conv3d(x, w, b, stride=stride, pad=pad)
    assert gradcheck(f, args, stride) <= TOL


@pytest.mark.parametrize("stride,pad", [(2, 1), (1, 0)])
def test_gradcheck_conv2d_transpose(stride, pad):
    rng = np.random.default_rng(stride)
    args = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3, 2, 4, 4)), rng.standard_normal(2)]
    f = lambda x, w, b: gt.conv2d_transpose(x, w, b, stride=stride, pad=pad)
    assert gradcheck(f, args, stride) <= TOL


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_activations(seed):
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng, (4, 6))
    assert gradcheck(lambda a: gt.leaky_relu(a, 0.1), [x], seed) <= TOL
    assert gradcheck(gt.sigmoid, [x], seed) <= TOL
    assert gradcheck(lambda a: gt.softmax(a, axis=-1), [x], seed) <= TOL
    assert gradcheck(lambda a: gt.softmax(a, axis=0), [x], seed) <= TOL


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_reductions_and_shape_ops(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4))
    assert gradcheck(lambda a: gt.mean(a), [x], seed) <= TOL
    assert gradcheck(lambda a: gt.mean(a, axis=(1, 2)), [x], seed) <= TOL
    assert gradcheck(lambda a: gt.reshape(a, (6, 4)), [x], seed) <= TOL
    assert gradcheck(lambda a: gt.transpose(a, (2, 0, 1)), [x], seed) <= TOL
    target = rng.standard_normal((2, 3, 4))
    assert gradcheck(lambda a: gt.mse(a, target), [x], seed) <= TOL


def test_gradcheck_composite_attention_block():
    # the attention wiring used by the translator, with a nonzero-gradient bias path
    rng = np.random.default_rng(7)

    def block(e, wq, wk, b):
        q = gt.matmul(e, wq)
        k = gt.matmul(e, wk)
        s = gt.softmax(gt.matmul(gt.reshape(q, (1, 5, 4)), gt.transpose(gt.reshape(k, (1, 5, 4)), (0, 2, 1))))
        return gt.sigmoid(gt.add(gt.reshape(gt.matmul(s, gt.reshape(e, (1, 5, 4))), (5, 4)), b))

    args = [rng.standard_normal((5, 4)), rng.standard_normal((4, 4)), rng.standard_normal((4, 4)),
            rng.standard_normal(4)]
    assert gradcheck(block, args, 7) <= TOL


def test_sum_of_squares_gradient_is_2x():
    x = gt.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with gt.Tape() as tape:
        loss = gt.mul(gt.mean(gt.mul(x, x)), 3.0)
    g = gt.backward(tape, loss)[x]
    np.testing.assert_allclose(g, 2 * x.data, atol=1e-15)


def test_linear_least_squares_closed_form():
    rng = np.random.default_rng(0)
    W = gt.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x, y = rng.standard_normal((4, 1)), rng.standard_normal((3, 1))
    with gt.Tape() as tape:
        loss = gt.mse(gt.matmul(W, gt.Tensor(x)), gt.Tensor(y))
    g = gt.backward(tape, loss)[W]
    np.testing.assert_allclose(g, 2 * (W.data @ x - y) @ x.T / 3, atol=1e-14)


def test_non_scalar_loss_rejected_and_tape_cleared():
    x = gt.Tensor(np.ones(3), requires_grad=True)
    with gt.Tape() as tape:
        y = gt.mul(x, 2.0)
    with pytest.raises(BadLoss):
        gt.backward(tape, y)
    assert len(tape) == 0


def test_backward_leaves_no_tape_nodes():
    x = gt.Tensor(np.ones((2, 2)), requires_grad=True)
    with gt.Tape() as tape:
        loss = gt.mean(gt.sigmoid(gt.matmul(x, x)))
    assert len(tape) == 3
    gt.backward(tape, loss)
    assert len(tape) == 0


def test_constants_are_not_recorded():
    with gt.Tape() as tape:
        gt.matmul(gt.Tensor(np.ones((2, 2))), gt.Tensor(np.ones((2, 2))))
    assert len(tape) == 0


def test_tapes_on_separate_threads_do_not_mix():
    results, errors = {}, []

    def work(tag, scale):
        try:
            x = gt.Tensor(np.full(4, scale), requires_grad=True)
            with gt.Tape() as tape:
                loss = gt.mean(gt.mul(x, x))
                n = len(tape)
            results[tag] = (n, gt.backward(tape, loss)[x])
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(i, float(i + 1))) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    for i in range(4):
        assert results[i][0] == 2
        np.testing.assert_allclose(results[i][1], np.full(4, (i + 1) / 2))


def test_debug_mode_catches_non_finite(monkeypatch):
    monkeypatch.setattr(gt, "DEBUG_FINITE", True)
    with pytest.raises(FloatingPointError):
        gt.mul(gt.Tensor(np.array([np.inf])), 0.0)


# -- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": np.array([1.0, 2.0])}
    p1, s1 = gt.adam_step(p, {"w": np.array([1.0, -1.0])}, gt.AdamState(), lr=0.1)
    p2, s2 = gt.adam_step(p1, {"w": np.zeros(2)}, s1, lr=0.1)
    m1, v1 = s1.moments("w", {"w": (2,)})
    m2, v2 = s2.moments("w", {"w": (2,)})
    np.testing.assert_allclose(m2, 0.9 * m1)
    np.testing.assert_allclose(v2, 0.999 * v1)
    # the zero gradient still moves params through momentum; the gradient itself contributes nothing
    p3, _ = gt.adam_step({"w": np.array([1.0, 2.0])}, {"w": np.zeros(2)}, gt.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p3["w"], [1.0, 2.0])


def test_adam_first_step_is_minus_lr():
    p, _ = gt.adam_step({"x": np.array([0.5])}, {"x": np.array([1.0])}, gt.AdamState(), lr=0.01)
    assert p["x"][0] == pytest.approx(0.5 - 0.01, abs=1e-9)


def test_adam_converges_on_quadratic_bowl():
    center = np.array([1.5, -0.7, 0.2])
    scale = np.array([1.0, 3.0, 0.5])
    params, state = {"x": np.zeros(3)}, gt.AdamState()
    for _ in range(200):
        grad = 2 * scale * (params["x"] - center)
        params, state = gt.adam_step(params, {"x": grad}, state, lr=0.05)
    assert np.max(np.abs(params["x"] - center)) <= 1e-3


def test_adam_rejects_nan_and_mismatches():
    with pytest.raises(NonFiniteGradient):
        gt.adam_step({"a": np.zeros(2)}, {"a": np.array([np.nan, 0.0])}, gt.AdamState())
    with pytest.raises(ShapeError):
        gt.adam_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, gt.AdamState())
    _, s = gt.adam_step({"a": np.zeros(2)}, {"a": np.ones(2)}, gt.AdamState())
    with pytest.raises(ShapeError):
        gt.adam_step({"b": np.zeros(2)}, {"b": np.ones(2)}, s)
