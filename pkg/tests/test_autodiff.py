import numpy as np
import pytest

from deepmmsa import autodiff as ad
from deepmmsa.autodiff.functional import conv3d_output_shape
from oracles import grad_check, naive_conv3d

CASES = range(20)
TOL = 1e-4


def away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


@pytest.fixture(autouse=True)
def float64():
    with ad.default_dtype(np.float64):
        yield


# ---------------------------------------------------------------- forward examples


def test_conv3d_scalar():
    out = ad.conv3d(ad.Tensor(np.full((1, 1, 1, 1, 1), 3.0)), ad.Tensor(np.full((1, 1, 1, 1, 1), 2.0)),
                    ad.Tensor([0.0]))
    assert out.data.reshape(-1).tolist() == [6.0]


@pytest.mark.parametrize("method", ["im2col", "direct"])
def test_conv3d_identity_kernel(method, rng):
    x = rng.standard_normal((2, 1, 3, 4, 5))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    out = ad.conv3d(ad.Tensor(x), ad.Tensor(w), padding=1, method=method)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("case", range(6))
def test_conv3d_paths_match_naive_loops(case):
    rng = np.random.default_rng(case)
    c, f = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    stride = tuple(int(s) for s in rng.integers(1, 3, 3))
    pad = tuple(int(p) for p in rng.integers(0, 2, 3))
    x = rng.standard_normal((2, c, 4, 5, 3))
    w = rng.standard_normal((f, c, 3, 2, 3))
    b = rng.standard_normal(f)
    ref = naive_conv3d(x, w, b, stride, pad)
    for method in ("im2col", "direct"):
        out = ad.conv3d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride, pad, method=method).data
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_conv3d_output_shape_floors():
    assert conv3d_output_shape((8, 24, 24), (3, 7, 7), (2, 2, 2), (1, 3, 3)) == (4, 12, 12)
    assert conv3d_output_shape((5, 5, 5), (2, 2, 2), (2, 2, 2), (0, 0, 0)) == (2, 2, 2)


def test_conv3d_errors():
    with pytest.raises(ValueError, match="channel"):
        ad.conv3d(ad.Tensor(np.zeros((1, 2, 3, 3, 3))), ad.Tensor(np.zeros((1, 1, 1, 1, 1))))
    with pytest.raises(ValueError):
        ad.conv3d(ad.Tensor(np.zeros((1, 1, 2, 2, 2))), ad.Tensor(np.zeros((1, 1, 3, 3, 3))))


def test_batch_norm_hand_example():
    out = ad.batch_norm(ad.Tensor([[1.0], [2.0], [3.0]]), ad.Tensor([1.0]), ad.Tensor([0.0]), eps=1e-8)
    np.testing.assert_allclose(out.data.ravel(), [-1.2247448, 0.0, 1.2247448], atol=1e-6)


def test_batch_norm_centering_and_gamma_zero(rng):
    z = rng.standard_normal((7, 4)) * 10 + 3
    out = ad.batch_norm(ad.Tensor(z), ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
    assert np.max(np.abs(out.data.mean(axis=0))) <= 1e-6
    beta = rng.standard_normal(4)
    out = ad.batch_norm(ad.Tensor(z), ad.Tensor(np.zeros(4)), ad.Tensor(beta))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta, z.shape))


def test_batch_norm_batch_of_one_rejected_in_train_mode():
    with pytest.raises(ValueError, match="at least 2"):
        ad.batch_norm(ad.Tensor([[1.0, 2.0]]), ad.Tensor([1.0, 1.0]), ad.Tensor([0.0, 0.0]))


def test_batch_norm_running_stats_and_eval_mode():
    running = ad.RunningStats.fresh(1, np.float64)
    z = ad.Tensor([[1.0], [2.0], [3.0]])
    ad.batch_norm(z, ad.Tensor([1.0]), ad.Tensor([0.0]), running=running)
    assert running.mean.tolist() == pytest.approx([0.2])
    assert running.var.tolist() == pytest.approx([0.9 + 0.1 * 1.0])  # unbiased batch variance is 1
    out = ad.batch_norm(ad.Tensor([[0.2]]), ad.Tensor([1.0]), ad.Tensor([0.0]), training=False, running=running)
    assert out.data.item() == pytest.approx(0.0)


def test_linear_identity_and_zero_weight(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ad.linear(ad.Tensor(x), ad.Tensor(np.eye(4)), ad.Tensor(np.zeros(4))).data, x)
    b = rng.standard_normal(2)
    np.testing.assert_array_equal(ad.linear(ad.Tensor(x), ad.Tensor(np.zeros((2, 4))), ad.Tensor(b)).data,
                                  np.broadcast_to(b, (3, 2)))
    with pytest.raises(ValueError):
        ad.linear(ad.Tensor(x), ad.Tensor(np.zeros((2, 3))))


def test_sigmoid_values():
    assert ad.sigmoid(ad.Tensor([0.0])).data.item() == 0.5
    for v in (0.5, 5.0, 50.0):
        s = ad.sigmoid(ad.Tensor([v, -v])).data
        assert s.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all(np.isfinite(ad.sigmoid(ad.Tensor([-1000.0, 1000.0])).data))


def test_relu_subgradients():
    x = ad.Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    ad.backward(ad.mean(ad.relu(x)), [x])
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0 / 3])


def test_mse_l2_examples():
    y = ad.Tensor([0.3, 0.7])
    assert ad.mse_l2_objective(y, y.data).item() == 0.0
    assert ad.mse_l2_objective(ad.Tensor([0.0]), [1.0]).item() == 1.0
    w = ad.Tensor([2.0], requires_grad=True)
    assert ad.mse_l2_objective(y, y.data, [w], lam=1.0).item() == 4.0
    with pytest.raises(ValueError):
        ad.mse_l2_objective(ad.Tensor(np.zeros(0)), np.zeros(0))
    with pytest.raises(ValueError):
        ad.mse_l2_objective(y, y.data, [w], lam=-1.0)


# ---------------------------------------------------------------- gradient checks


@pytest.mark.parametrize("case", CASES)
def test_grad_conv3d(case):
    rng = np.random.default_rng(100 + case)
    c, f = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = tuple(int(v) for v in rng.integers(1, 4, 3))
    stride = tuple(int(v) for v in rng.integers(1, 3, 3))
    pad = tuple(int(v) for v in rng.integers(0, 2, 3))
    spatial = tuple(int(v) for v in rng.integers(3, 5, 3))
    method = "direct" if case % 2 else "im2col"
    x = rng.standard_normal((2, c) + spatial)
    w = rng.standard_normal((f, c) + k)
    b = rng.standard_normal(f)
    err = grad_check(lambda t: ad.conv3d(t[0], t[1], t[2], stride, pad, method=method), [x, w, b], rng)
    assert err <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_batch_norm(case):
    rng = np.random.default_rng(200 + case)
    k = int(rng.integers(1, 4))
    shape = (int(rng.integers(2, 6)), k) if case % 2 else (int(rng.integers(2, 4)), k, 2, 2, 3)
    z = rng.standard_normal(shape)
    g, b = rng.standard_normal(k), rng.standard_normal(k)
    if case % 4 == 3:
        running = ad.RunningStats(rng.standard_normal(k), rng.random(k) + 0.5)
        fn = lambda t: ad.batch_norm(t[0], t[1], t[2], training=False, running=running)
    else:
        fn = lambda t: ad.batch_norm(t[0], t[1], t[2])
    assert grad_check(fn, [z, g, b], rng) <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_linear(case):
    rng = np.random.default_rng(300 + case)
    n, i, o = (int(v) for v in rng.integers(1, 6, 3))
    args = [rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)]
    assert grad_check(lambda t: ad.linear(*t), args, rng) <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_relu(case):
    rng = np.random.default_rng(400 + case)
    x = away_from_zero(rng, tuple(int(v) for v in rng.integers(1, 5, 2)))
    assert grad_check(lambda t: ad.relu(t[0]), [x], rng) <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_sigmoid(case):
    rng = np.random.default_rng(500 + case)
    x = rng.standard_normal(tuple(int(v) for v in rng.integers(1, 5, 2))) * 4
    assert grad_check(lambda t: ad.sigmoid(t[0]), [x], rng) <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_add(case):
    rng = np.random.default_rng(600 + case)
    shape = tuple(int(v) for v in rng.integers(1, 4, int(rng.integers(1, 4))))
    args = [rng.standard_normal(shape), rng.standard_normal(shape)]
    assert grad_check(lambda t: ad.add(t[0], t[1]), args, rng) <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_concat(case):
    rng = np.random.default_rng(700 + case)
    n = int(rng.integers(1, 4))
    args = [rng.standard_normal((n, int(rng.integers(1, 5)))) for _ in range(int(rng.integers(2, 4)))]
    assert grad_check(lambda t: ad.concat(t, axis=1), args, rng) <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_global_avg_pool(case):
    rng = np.random.default_rng(800 + case)
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 3))) +
                           tuple(int(v) for v in rng.integers(1, 4, 3)))
    assert grad_check(lambda t: ad.global_avg_pool3d(t[0]), [x], rng) <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_mse_l2(case):
    rng = np.random.default_rng(900 + case)
    n = int(rng.integers(1, 6))
    y = rng.random(n)
    args = [rng.random(n), rng.standard_normal((2, 3)), rng.standard_normal(4)]
    lam = float(rng.choice([0.0, 1e-3, 0.5]))
    fn = lambda t: ad.mse_l2_objective(t[0], y, t[1:], lam)
    assert grad_check(fn, args, rng) <= TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_reshape_mean_scale(case):
    rng = np.random.default_rng(1000 + case)
    x = rng.standard_normal((2, 3, int(rng.integers(1, 4))))
    assert grad_check(lambda t: ad.reshape(t[0], (2, -1)), [x], rng) <= TOL
    assert grad_check(lambda t: ad.mean(ad.scale(t[0], 1.7)), [x], rng) <= TOL
    assert grad_check(lambda t: ad.sum_squares(t[0]), [x], rng) <= TOL


# ---------------------------------------------------------------- engine semantics


def test_backward_twice_doubles_grads(rng):
    w = ad.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    x = ad.Tensor(rng.standard_normal((4, 2)))
    loss = ad.mean(ad.sigmoid(ad.linear(x, w)))
    ad.backward(loss, [w])
    once = w.grad.copy()
    ad.backward(loss, [w])
    np.testing.assert_array_equal(w.grad, 2 * once)


def test_unused_param_gets_zero_grad():
    used = ad.Tensor([1.0, 2.0], requires_grad=True)
    unused = ad.Tensor([[3.0]], requires_grad=True)
    ad.backward(ad.sum_squares(used), [used, unused])
    assert unused.grad is not None and unused.grad.tolist() == [[0.0]]


def test_loss_self_gradient_is_one():
    x = ad.Tensor([0.5], requires_grad=True)
    y = ad.Tensor._from_op(np.asarray(2 * x.data[0]), (x,), lambda g: [np.full(1, 2 * g)])
    ad.backward(y, [x])
    assert x.grad.tolist() == [2.0]


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(ad.relu(ad.Tensor([1.0, 2.0], requires_grad=True)))


def test_default_dtype_context_restores():
    assert ad.Tensor([1.0]).dtype == np.float64
    with ad.default_dtype(np.float32):
        assert ad.Tensor([1.0]).dtype == np.float32
    assert ad.get_default_dtype() is np.float64


def test_forward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((2, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    a = ad.conv3d(ad.Tensor(x), ad.Tensor(w), padding=1).data
    b = ad.conv3d(ad.Tensor(x), ad.Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = ad.Tensor([1.0, -2.0], requires_grad=True)
    state = ad.AdamState(lr=0.1)
    ad.adam_step([p], state, [np.zeros(2)])
    assert p.data.tolist() == [1.0, -2.0]
    assert state.step_count == 1


def test_adam_first_step_moves_by_lr_times_sign(rng):
    p0 = rng.standard_normal(50)
    g = rng.standard_normal(50) * 10 + np.sign(rng.standard_normal(50))
    p = ad.Tensor(p0.copy(), requires_grad=True)
    ad.adam_step([p], ad.AdamState(lr=0.01), [g])
    delta = p.data - p0
    np.testing.assert_array_equal(np.sign(delta), -np.sign(g))
    assert np.all(np.abs(delta) <= 0.01)
    assert np.all(np.abs(delta) >= 0.01 * (1 - 1e-6))


def test_adam_matches_reference_over_steps(rng):
    p = ad.Tensor(rng.standard_normal(5), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = ad.AdamState(lr=0.05)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        ad.adam_step([p], state, [g])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_identical_params_stay_identical(rng):
    a = ad.Tensor([0.3, 0.1], requires_grad=True)
    b = ad.Tensor([0.3, 0.1], requires_grad=True)
    state = ad.AdamState(lr=0.01)
    for _ in range(3):
        g = rng.standard_normal(2)
        ad.adam_step([a, b], state, [g, g])
    np.testing.assert_array_equal(a.data, b.data)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.weight": rng.standard_normal((2, 3)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    path = ad.save_checkpoint(tmp_path / "ck.json", tensors, {"note": "x"})
    loaded, meta = ad.load_checkpoint(path)
    assert meta["note"] == "x"
    for k, v in tensors.items():
        np.testing.assert_array_equal(loaded[k], v)
    blob = (tmp_path / "ck.bin").read_bytes()
    assert len(blob) == 4 * 10
    assert np.frombuffer(blob[:4], "<f4")[0] == tensors["a.weight"][0, 0]


def test_checkpoint_truncated_blob(tmp_path):
    path = ad.save_checkpoint(tmp_path / "ck.json", {"a": np.ones(4, dtype=np.float32)})
    (tmp_path / "ck.bin").write_bytes(b"\0" * 12)
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(path)
