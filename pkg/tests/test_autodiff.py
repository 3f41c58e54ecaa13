import numpy as np
import pytest

from cltb import autodiff as ad
from cltb import models
from cltb.autodiff import Tensor


def half_sq_norm(x: Tensor) -> Tensor:
    # 0.5 * ||x||^2 via the self-product x @ x^T (x used as input and weight)
    zero_bias = Tensor(np.zeros(1, dtype=x.dtype))
    return ad.scale(ad.total(ad.affine(x, x, zero_bias)), 0.5)


# ---------------------------------------------------------------------------
# forward


def test_identity_affine_passes_input_through():
    w = Tensor(np.eye(3), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    v = np.array([[0.3, -1.2, 4.0]])
    out = ad.affine(Tensor(v), w, b)
    np.testing.assert_array_equal(out.data, v)


def test_zero_weights_give_zero_logits():
    w = Tensor(np.zeros((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    out = ad.affine(Tensor(np.random.default_rng(0).normal(size=(5, 3))), w, b)
    np.testing.assert_array_equal(out.data, np.zeros((5, 4)))


def test_two_layer_mlp_matches_hand_arithmetic():
    w1 = np.array([[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]])
    b1 = np.array([0.5, 0.0])
    w2 = np.array([[1.0, 1.0], [2.0, -1.0]])
    b2 = np.array([0.0, 1.0])
    x = np.array([[1.0, 2.0, 3.0]])
    # hidden: [1+6+0.5, -2+3] = [7.5, 1.0]; logits: [8.5, 2*7.5-1+1] = [8.5, 15.0]
    out = ad.affine(ad.relu(ad.affine(Tensor(x), Tensor(w1, True), Tensor(b1, True))),
                    Tensor(w2, True), Tensor(b2, True))
    np.testing.assert_allclose(out.data, [[8.5, 15.0]], rtol=1e-12)


def test_affine_shape_mismatch_raises():
    w = Tensor(np.zeros((2, 4)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.affine(Tensor(np.zeros((1, 3))), w, b)


# ---------------------------------------------------------------------------
# backward basics


def test_softmax_ce_gradient_at_uniform_logits():
    n_classes = 5
    logits = Tensor(np.zeros((1, n_classes)), requires_grad=True)
    ad.total(ad.softmax_cross_entropy(logits, np.array([2]))).backward()
    expected = np.full((1, n_classes), 1.0 / n_classes)
    expected[0, 2] -= 1.0
    np.testing.assert_allclose(logits.grad, expected, atol=1e-12)


def test_linear_scalar_model_input_gradient_is_weight():
    w = np.array([[0.7, -2.0, 0.1]])
    x = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
    ad.total(ad.affine(x, Tensor(w, True), Tensor(np.zeros(1), True))).backward()
    np.testing.assert_allclose(x.grad, w, rtol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    out = ad.relu(x)
    with pytest.raises(ad.GraphError):
        out.backward()


def test_backward_requires_grad_path():
    out = ad.relu(Tensor(np.zeros((1, 1))))
    with pytest.raises(ad.GraphError):
        ad.total(out).backward()


def test_untouched_leaf_keeps_no_gradient():
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    unused = Tensor(np.ones((1, 2)), requires_grad=True)
    ad.total(ad.relu(x)).backward()
    assert unused.grad is None  # treated as zero by the optimizer
    opt = ad.SGD({"u": unused}, lr=1.0)
    opt.step()
    np.testing.assert_array_equal(unused.data, np.ones((1, 2)))


def test_backward_linearity():
    rng = np.random.default_rng(5)
    x_val = rng.normal(size=(3, 4))
    y = rng.integers(0, 4, 3)
    a, b = 0.7, -1.3

    def grad_of(scale_1, scale_2):
        x = Tensor(x_val.copy(), requires_grad=True)
        l1 = ad.mean(ad.softmax_cross_entropy(x, y))
        l2 = half_sq_norm(x)
        ad.add(ad.scale(l1, scale_1), ad.scale(l2, scale_2)).backward()
        return x.grad

    combined = grad_of(a, b)
    separate = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
    np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-14)


def test_forward_backward_determinism():
    def run():
        net = models.build_mlp(input_dim=6, hidden=(5,), head_width=3, seed=9)
        x = Tensor(np.linspace(0, 1, 12, dtype=np.float32).reshape(2, 6),
                   requires_grad=True)
        loss = ad.mean(ad.softmax_cross_entropy(net.forward(x), np.array([0, 2])))
        loss.backward()
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_quadratic():
    x = Tensor(np.array([0.3, -1.1, 2.0]).reshape(1, 3), requires_grad=True)
    err = ad.grad_check(lambda: half_sq_norm(x), [x], step=1e-4)
    assert err <= 1e-6


def test_grad_check_constant_loss_is_exactly_zero():
    x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)

    def loss():
        return ad.shift(ad.total(ad.scale(x, 0.0)), 3.0)

    assert ad.grad_check(loss, [x], step=1e-3) == 0.0


def test_grad_check_relu_away_from_kink():
    step = 1e-5
    vals = np.array([[0.5, -0.4, 1.2, -2.0]])  # all |v| > 10*step
    x = Tensor(vals, requires_grad=True)
    err = ad.grad_check(lambda: ad.total(ad.relu(x)), [x], step=step)
    assert err <= 1e-4


def test_grad_check_rejects_bad_step():
    x = Tensor(np.ones((1, 1)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.grad_check(lambda: ad.total(x), [x], step=0.0)


def test_grad_check_flags_non_finite_loss():
    x = Tensor(np.ones((1, 1)), requires_grad=True)
    with pytest.raises(ad.NumericError):
        ad.grad_check(lambda: ad.total(ad.scale(x, np.inf)), [x], step=1e-4)


# every primitive: analytic adjoint vs central differences (float64)
def _check(loss_fn, tensors, tol=1e-4, step=1e-5):
    assert ad.grad_check(loss_fn, tensors, step=step) <= tol


def test_primitive_gradients_match_finite_differences():
    rng = np.random.default_rng(11)

    x = Tensor(rng.uniform(0.1, 0.9, (3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 4)) * 0.4, requires_grad=True)
    b = Tensor(rng.normal(size=5) * 0.1, requires_grad=True)
    y5 = rng.integers(0, 5, 3)
    _check(lambda: ad.mean(ad.softmax_cross_entropy(ad.affine(x, w, b), y5)),
           [x, w, b])

    soft = rng.uniform(0, 1, (3, 4))
    soft /= soft.sum(axis=1, keepdims=True)
    _check(lambda: ad.mean(ad.softmax_cross_entropy_soft(x, soft)), [x])

    targets = rng.uniform(0, 1, (3, 4))
    cmask = np.array([1.0, 0.0, 1.0, 1.0])
    _check(lambda: ad.mean(ad.sigmoid_bce(x, targets, cmask)), [x])

    teacher = rng.normal(size=(3, 4))
    _check(lambda: ad.mean(ad.kl_div_logits(x, teacher, 2.5)), [x])

    z = Tensor(np.array([[3.0, 1.0, 0.2, -1.0], [0.5, 2.5, 1.0, 0.0]]),
               requires_grad=True)
    _check(lambda: ad.total(ad.dlr_loss(z, np.array([0, 2]))), [z], step=1e-6)

    feats = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    labels = np.array([0, 1, 0, 1, 0])
    _check(lambda: ad.supcon_loss(ad.l2_normalize(feats), labels, 0.5), [feats],
           step=1e-6)

    img = Tensor(rng.uniform(0, 1, (2, 2, 6, 6)), requires_grad=True)
    kern = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
    kb = Tensor(np.zeros(3), requires_grad=True)
    y3 = rng.integers(0, 3, 2)

    def conv_loss():
        h = ad.relu(ad.conv2d(img, kern, kb, stride=1, padding=1))
        pooled = ad.flatten(ad.avg_pool2d(h, 2))
        picked = ad.take_cols(pooled, np.arange(3))
        return ad.mean(ad.softmax_cross_entropy(picked, y3))

    _check(conv_loss, [img, kern, kb])

    rows = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    _check(lambda: ad.total(ad.relu(ad.take_rows(rows, np.array([0, 2, 2])))),
           [rows])

    shifted = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    other = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    _check(lambda: ad.total(ad.add(ad.scale(shifted, 1.7),
                                   ad.shift(other, np.array([1.0, -2.0, 0.5])))),
           [shifted, other])


def test_dlr_value_matches_hand_arithmetic():
    z = Tensor(np.array([[3.0, 1.0, 0.0]]))
    val = ad.dlr_loss(z, np.array([0])).data[0]
    assert val == pytest.approx(-(3 - 1) / (3 - 0 + 1e-12), rel=1e-9)


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_single_step_examples():
    p = Tensor(np.zeros(1), requires_grad=True)
    ad.SGD({"p": p}, lr=1.0).step.__self__  # noqa: B018 - construct below
    opt = ad.SGD({"p": p}, lr=1.0, momentum=0.0, weight_decay=0.0)
    p.grad = np.ones(1)
    opt.step()
    np.testing.assert_allclose(p.data, [-1.0])

    q = Tensor(np.array([0.5]), requires_grad=True)
    opt2 = ad.SGD({"q": q}, lr=0.3, momentum=0.9, weight_decay=0.0)
    q.grad = np.zeros(1)
    opt2.step()
    np.testing.assert_allclose(q.data, [0.5])


def test_sgd_momentum_two_step_recurrence():
    # v1 = 1 -> theta1 = -0.1; v2 = 0.9 + 1 = 1.9 -> theta2 = -0.29
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = ad.SGD({"p": p}, lr=0.1, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        p.grad = np.ones(1)
        opt.step()
    np.testing.assert_allclose(p.data, [-0.29], rtol=1e-12)


def test_sgd_validates_hyperparameters():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ValueError):
        ad.SGD({"p": p}, lr=0.0)
    with pytest.raises(ValueError):
        ad.SGD({"p": p}, lr=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        ad.SGD({"p": p}, lr=0.1, weight_decay=-0.1)
