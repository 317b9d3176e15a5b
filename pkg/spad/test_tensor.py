#
# python-spad: structured pruning adapters.
#
# This program is free software: you can redistribute it and/or modify it under
# the terms of the GNU Lesser General Public License as published by the Free
# Software Foundation, either version 3 of the License, or (at your option) any
# later version.
#
# This program is distributed in the hope that it will be useful, but WITHOUT
# ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS
# FOR A PARTICULAR PURPOSE.  See the GNU Lesser General Public License for more
# details.
#
# You should have received a copy of the GNU General Public License along with
# this program.  If not, see <http://www.gnu.org/licenses/>.
#

import threading

import numpy as np

from .compat import get_rng
from .tensor import (BackwardError, GraphError, NonFiniteError, Node, Tape,
                     Tensor, TensorError, add, backward, batch_norm,
                     check_finite, conv2d, forward_graph, global_avg_pool,
                     matmul, mul, reduce_mean, reduce_sum, relu, reshape,
                     softmax_cross_entropy, sub, transpose)
from .testutils import numeric_grad, rel_error


def _check_grads(fn, *shapes, seed=0):
    """fn maps leaf tensors to a scalar; compare its gradients to differences."""
    rng = get_rng(seed)
    leaves = [Tensor(rng.normal(0.0, 1.0, s), requires_grad=True) for s in shapes]

    def loss():
        with Tape():
            return fn(*leaves)

    backward(loss())
    for leaf in leaves:
        expected = numeric_grad(lambda: loss().item(), leaf.data)
        assert rel_error(leaf.grad, expected) < 1e-6


def test_elementwise_grads_broadcast():
    _check_grads(lambda a, b: reduce_sum(mul(add(a, b), sub(a, b))), (3, 4), (4,))
    _check_grads(lambda a, b: reduce_mean(mul(a, b)), (2, 3), (2, 1))


def test_matmul_transpose_reshape_grads():
    _check_grads(lambda a, b: reduce_sum(mul(matmul(a, transpose(b)),
                                             matmul(a, transpose(b)))),
                 (3, 4), (2, 4))
    _check_grads(lambda a: reduce_sum(mul(reshape(a, (6,)), Tensor(np.arange(6.0)))),
                 (2, 3))


def _naive_conv(x, w, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, wd = xp.shape
    o, _, k, _ = w.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


def test_conv2d_forward():
    rng = get_rng(1)
    x = rng.normal(0.0, 1.0, (2, 3, 7, 7))
    w = rng.normal(0.0, 1.0, (4, 3, 3, 3))
    for stride, padding in ((1, 0), (1, 1), (2, 1), (3, 0)):
        out = conv2d(Tensor(x), Tensor(w), stride, padding).data
        assert np.allclose(out, _naive_conv(x, w, stride, padding), atol=1e-12)


def test_conv2d_grads():
    for stride, padding in ((1, 1), (2, 1), (2, 0)):
        _check_grads(lambda x, w: reduce_sum(mul(conv2d(x, w, stride, padding),
                                                 conv2d(x, w, stride, padding))),
                     (2, 2, 5, 5), (3, 2, 3, 3), seed=stride + padding)


def test_batch_norm_training_and_eval():
    rng = get_rng(2)
    x = Tensor(rng.normal(3.0, 2.0, (16, 4)))
    gamma, beta = Tensor(np.ones(4)), Tensor(np.zeros(4))
    mean, var = np.zeros(4), np.ones(4)

    out = batch_norm(x, gamma, beta, mean, var, training=True, momentum=1.0)
    assert np.allclose(out.data.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(out.data.std(axis=0), 1.0, atol=1e-4)
    assert np.allclose(mean, x.data.mean(axis=0))
    assert np.allclose(var, x.data.var(axis=0, ddof=1))

    before = mean.copy(), var.copy()
    batch_norm(x, gamma, beta, mean, var, training=False)
    assert np.array_equal(mean, before[0]) and np.array_equal(var, before[1])


def test_batch_norm_grads():
    rng = get_rng(3)
    mean, var = np.zeros(3), np.ones(3)
    weights = Tensor(rng.normal(0.0, 1.0, (4, 3, 2, 2)))

    _check_grads(lambda x, g, b: reduce_sum(mul(batch_norm(x, g, b, mean, var),
                                                weights)),
                 (4, 3, 2, 2), (3,), (3,))


def test_pool_relu_grads():
    _check_grads(lambda x: reduce_sum(mul(global_avg_pool(relu(x)),
                                          Tensor([[1.0, -2.0]]))),
                 (1, 2, 3, 3), seed=4)


def test_softmax_cross_entropy():
    with Tape():
        logits = Tensor(np.zeros((2, 4)), requires_grad=True)
        loss = softmax_cross_entropy(logits, [0, 3])
    assert abs(loss.item() - np.log(4)) < 1e-12
    backward(loss)
    assert np.allclose(logits.grad.sum(axis=1), 0.0)

    labels = np.array([1, 0, 2])
    _check_grads(lambda z: softmax_cross_entropy(z, labels), (3, 3), seed=5)


def test_backward_zero_fills_unreached_params():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = reduce_sum(mul(a, a))
    backward(loss, [a, b])
    assert a.grad.tolist() == [2.0, 4.0]
    assert b.grad.tolist() == [0.0]


def test_backward_accumulates_leaf_grads():
    a = Tensor([1.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            loss = reduce_sum(mul(a, Tensor([3.0])))
        backward(loss)
    assert a.grad.tolist() == [6.0]


def test_backward_is_linear_in_the_loss():
    rng = get_rng(9)
    x = rng.normal(0.0, 1.0, (4, 3))
    w0, b0 = rng.normal(0.0, 1.0, (3, 5)), rng.normal(0.0, 1.0, 5)
    labels = np.array([0, 4, 2, 2])

    def grads(scale):
        w = Tensor(w0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        with Tape():
            loss = softmax_cross_entropy(relu(add(matmul(Tensor(x), w), b)), labels)
            loss = mul(loss, Tensor(scale))
        backward(loss, [w, b])
        return w.grad, b.grad

    w1, b1 = grads(1.0)
    for a in (2.5, -0.75, 0.0):
        wa, ba = grads(a)
        assert np.allclose(wa, a * w1, rtol=1e-12, atol=1e-15)
        assert np.allclose(ba, a * b1, rtol=1e-12, atol=1e-15)


def test_backward_errors():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        vector = mul(a, a)
    try:
        backward(vector)
        assert False
    except BackwardError:
        pass

    with Tape():
        loss = reduce_sum(vector)
    errors = []

    def other_thread():
        try:
            backward(loss)
        except BackwardError as e:
            errors.append(e)

    t = threading.Thread(target=other_thread)
    t.start()
    t.join()
    assert len(errors) == 1


def test_forward_graph_errors():
    try:
        forward_graph(Tensor([1.0]), [Node("out", add, ("input", "missing"))])
        assert False
    except GraphError as e:
        assert "missing" in str(e)

    try:
        forward_graph(Tensor([1.0]), [Node("input", relu)])
        assert False
    except GraphError:
        pass


def test_forward_graph_stores_values():
    tape = Tape()
    x = Tensor([[-1.0, 2.0]])
    forward_graph(x, [Node("r", relu), Node("s", add, ("r", "input"))], tape)
    assert tape.values["r"].data.tolist() == [[0.0, 2.0]]
    assert tape.values["s"].data.tolist() == [[-1.0, 4.0]]


def test_tensor_guards():
    try:
        Tensor(np.zeros((0, 3)))
        assert False
    except TensorError:
        pass

    check_finite(Tensor([1.0, 2.0]), "fine")
    try:
        check_finite(np.array([1.0, np.nan]), "loss")
        assert False
    except NonFiniteError as e:
        assert "loss" in str(e)
