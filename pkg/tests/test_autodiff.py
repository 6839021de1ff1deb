from __future__ import annotations

import numpy as np
import pytest

from spoofqa import autodiff as ad
from spoofqa.autodiff import Tensor


def _fd_grads(f, arrays, eps=1e-5):
    """Central finite differences of the scalar f() w.r.t. each array (in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def _check(build, shapes, seed=0, tol=1e-6):
    """build(tensors) -> output Tensor; compares backward grads with FD."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(0, 1, s) for s in shapes]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    proj = rng.normal(0, 1, out.data.shape)
    loss = ad.tensor_sum(ad.mul(out, Tensor(proj)))
    loss.backward()

    def scalar():
        with ad.no_grad():
            vals = [Tensor(a) for a in arrays]
            return float(np.sum(build(*vals).data * proj))

    fd = _fd_grads(scalar, arrays)
    for t, g in zip(tensors, fd):
        denom = np.maximum(np.abs(g), 1e-6)
        assert t.grad is not None
        assert np.max(np.abs(t.grad - g) / denom) < tol


def test_add_broadcast():
    _check(lambda a, b: ad.add(a, b), [(3, 4), (4,)])


def test_sub_broadcast():
    _check(lambda a, b: ad.sub(a, b), [(2, 3, 4), (3, 1)])


def test_mul_broadcast():
    _check(lambda a, b: ad.mul(a, b), [(3, 4), (3, 1)])


def test_div():
    def build(a, b):
        return ad.div(a, ad.add(ad.mul(b, b), 1.0))

    _check(build, [(3, 3), (3, 3)])


def test_matmul_2d():
    _check(lambda a, b: ad.matmul(a, b), [(3, 4), (4, 5)])


def test_matmul_batched():
    _check(lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 5)])


def test_matmul_broadcast_rhs():
    _check(lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)])


def test_matmul_4d():
    _check(lambda a, b: ad.matmul(a, b), [(2, 2, 3, 4), (2, 2, 4, 3)])


def test_pow_exp_log():
    def build(a):
        return ad.log(ad.add(ad.exp(ad.pow_const(a, 2.0)), 1.0))

    _check(build, [(4, 3)])


def test_sum_axes():
    _check(lambda a: ad.tensor_sum(a, axis=1), [(3, 4, 2)])
    _check(lambda a: ad.tensor_sum(a, axis=-1, keepdims=True), [(3, 4)])
    _check(lambda a: ad.tensor_sum(a), [(5,)])


def test_mean_axes():
    _check(lambda a: ad.mean(a, axis=-1, keepdims=True), [(3, 4)])
    _check(lambda a: ad.mean(a), [(2, 3)])


def test_reshape_transpose():
    _check(lambda a: ad.reshape(a, (2, 6)), [(3, 4)])
    _check(lambda a: ad.transpose(a, (0, 2, 1, 3)), [(2, 3, 4, 2)])


def test_concat_narrow():
    _check(lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)])
    _check(lambda a: ad.narrow(a, 1, 1, 2), [(3, 5)])


def test_embedding_gather():
    ids = np.array([[0, 2, 1], [2, 2, 0]])
    _check(lambda w: ad.embedding(w, ids), [(3, 4)])


def test_take_rows_with_repeats():
    idx = np.array([0, 2, 2, 1])
    _check(lambda a: ad.take_rows(a, idx), [(3, 4)])


def test_take_per_row():
    idx = np.array([1, 0, 3])
    _check(lambda a: ad.take_per_row(a, idx), [(3, 4)])


def test_gelu():
    _check(lambda a: ad.gelu(a), [(4, 4)])


def test_softmax():
    _check(lambda a: ad.softmax(a, axis=-1), [(3, 5)])


def test_softmax_with_neg_inf_mask_exact_zero():
    mask = np.triu(np.full((4, 4), -np.inf), k=1)
    x = np.random.default_rng(0).normal(0, 1, (4, 4))
    t = Tensor(x, requires_grad=True)
    out = ad.softmax(ad.add(t, Tensor(mask)))
    assert np.all(out.data[np.triu_indices(4, k=1)] == 0.0)
    loss = ad.tensor_sum(ad.mul(out, Tensor(np.ones((4, 4)))))
    loss.backward()
    assert np.all(np.isfinite(t.grad))


def test_layer_norm():
    def build(x, g, b):
        return ad.layer_norm(x, g, b)

    _check(build, [(2, 3, 8), (8,), (8,)])


def test_cross_entropy_matches_manual():
    rng = np.random.default_rng(1)
    logits = rng.normal(0, 2, (6, 9))
    targets = rng.integers(0, 9, 6)
    t = Tensor(logits, requires_grad=True)
    loss = ad.cross_entropy_mean(t, targets)
    # manual oracle
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(6), targets]))
    assert abs(loss.item() - expected) < 1e-12
    loss.backward()
    manual = p.copy()
    manual[np.arange(6), targets] -= 1.0
    manual /= 6
    assert np.max(np.abs(t.grad - manual)) < 1e-12


def test_cross_entropy_fd():
    targets = np.array([1, 0, 2])

    def build(a):
        return ad.cross_entropy_mean(a, targets)

    _check(build, [(3, 4)])


def test_dropout_train_and_scale():
    rng = np.random.default_rng(0)
    t = Tensor(np.ones((1000,)), requires_grad=True)
    out = ad.dropout(t, 0.25, rng)
    kept = out.data[out.data > 0]
    assert np.allclose(kept, 1.0 / 0.75)
    assert abs(out.data.mean() - 1.0) < 0.1
    assert ad.dropout(t, 0.0, rng) is t


def test_no_grad_blocks_graph():
    t = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(t, 2.0)
    assert not out.requires_grad
    assert out._backward is None


def test_grad_linearity_exact():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 1, (4, 4))
    t1 = Tensor(x.copy(), requires_grad=True)
    loss1 = ad.tensor_sum(ad.gelu(ad.matmul(t1, t1)))
    loss1.backward()
    t2 = Tensor(x.copy(), requires_grad=True)
    loss2 = ad.mul(ad.tensor_sum(ad.gelu(ad.matmul(t2, t2))), 2.0)
    loss2.backward()
    assert np.array_equal(t2.grad, 2.0 * t1.grad)


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(t, 1.0).backward()


def test_grad_accumulates_across_reuse():
    t = Tensor(np.array([3.0]), requires_grad=True)
    out = ad.add(ad.mul(t, 2.0), ad.mul(t, 5.0))
    ad.tensor_sum(out).backward()
    assert np.allclose(t.grad, [7.0])
