"""Tests for the tensor core, autodiff, gradient checking and checkpoints."""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import threading

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.tensor.checkpoint import (
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_meta, save_checkpoint,
)
from src.tensor.core import (
    Tensor, backward, concat, l2_normalize, log, matmul, relu, sigmoid, softmax, tape, tsum, zero_grad,
)
from src.tensor.gradcheck import grad_check
from src.tensor.module import Module
from src.tensor.random import make_rng, uniform_init
from src.utils.errors import FormatError, ShapeError


def param(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert_allclose(matmul(a, np.eye(2)).data, a.data)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    assert matmul(Tensor([[0.0, 0.0]]), Tensor([[5.0], [7.0]])).data.tolist() == [[0.0]]


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert_allclose(softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], rtol=1e-12)
    assert_allclose(softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)


def test_softmax_sums_to_one_and_is_shift_invariant():
    rng = make_rng(0, "sample")
    x = rng.normal(scale=10.0, size=(7, 5))
    out = softmax(Tensor(x), axis=-1).data
    assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert_allclose(softmax(Tensor(x + 123.0), axis=-1).data, out, atol=1e-12)


def test_sigmoid_relu_concat():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    assert abs(sigmoid(Tensor(100.0)).item() - 1.0) < 1e-12
    assert_allclose(sigmoid(Tensor(-1.0)).item(), 1.0 - sigmoid(Tensor(1.0)).item(), rtol=1e-15)
    assert relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    joined = concat([Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 2)))], axis=1)
    assert joined.shape == (2, 3)
    with pytest.raises(ShapeError):
        concat([Tensor(np.ones((2, 1))), Tensor(np.zeros((3, 1)))], axis=1)


def test_l2_normalize_examples():
    assert_allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    assert l2_normalize(Tensor([0.0, 0.0]), eps=1e-6).data.tolist() == [0.0, 0.0]
    assert_allclose(l2_normalize(Tensor([-3.0, 4.0])).data, [-0.6, 0.8])


def test_backward_sum_of_squares():
    x = param([1.0, 2.0])
    with tape() as graph:
        loss = tsum(x * x)
    (grad,) = backward(graph, loss, [x])
    assert grad.tolist() == [2.0, 4.0]


def test_backward_constant_loss_gives_zero_grads():
    x = param([1.0, 2.0])
    with tape() as graph:
        loss = Tensor(3.0) + 0.0
    (grad,) = backward(graph, loss, [x])
    assert grad.tolist() == [0.0, 0.0]


def test_backward_rejects_non_scalar():
    x = param([1.0, 2.0])
    with tape() as graph:
        out = x * 2.0
    with pytest.raises(ShapeError):
        backward(graph, out, [x])


def test_backward_accumulates_shared_inputs():
    x = param([3.0])
    with tape() as graph:
        loss = tsum(x * x + x)
    (grad,) = backward(graph, loss, [x])
    assert grad.tolist() == [7.0]


def test_backward_replays_identically_after_zero_grad():
    rng = make_rng(5, "sample")
    w = param(rng.normal(size=(4, 3)))
    b = param(rng.normal(size=(3,)))
    x = rng.normal(size=(6, 4))
    with tape() as graph:
        loss = tsum(log(softmax(l2_normalize(matmul(x, w) + b), axis=-1)) * x[:, :3])
    first = [g.copy() for g in backward(graph, loss, [w, b])]
    zero_grad([w, b])
    second = backward(graph, loss, [w, b])
    for a, c in zip(first, second):
        assert np.array_equal(a, c)
    doubled = backward(graph, loss, [w, b])
    assert np.array_equal(doubled[0], 2.0 * first[0])


def test_no_recording_outside_tape():
    x = param([1.0])
    with tape() as graph:
        pass
    y = x * 2.0
    assert len(graph) == 0
    assert not y.requires_grad


def test_grad_check_quadratic():
    x = param([0.3, -1.2, 2.0])
    assert grad_check(lambda: tsum(x * x), [x]) < 1e-8


def test_grad_check_softmax_cross_entropy():
    rng = make_rng(1, "sample")
    logits = param(rng.normal(size=(4, 6)))
    targets = np.eye(6)[[0, 3, 5, 1]]

    def loss():
        return -tsum(targets * log(softmax(logits, axis=-1))) / 4.0

    assert grad_check(loss, [logits]) < 1e-6


def test_grad_check_l2_normalize_and_broadcast():
    rng = make_rng(2, "sample")
    a = param(rng.normal(size=(3, 4)))
    b = param(rng.normal(size=(4,)))
    w = rng.normal(size=(3, 4))

    def loss():
        return tsum(l2_normalize(a + b, axis=0) * w)

    assert grad_check(loss, [a, b]) < 1e-6


def test_inference_is_thread_safe():
    rng = make_rng(3, "sample")
    w = param(rng.normal(size=(8, 8)))
    x = rng.normal(size=(16, 8))
    expected = softmax(Tensor(x) @ w).data
    results = []

    def worker():
        results.append(softmax(Tensor(x) @ w).data)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    for result in results:
        assert np.array_equal(result, expected)


def test_random_streams_are_reproducible_and_independent():
    a = make_rng(42, "init").normal(size=5)
    b = make_rng(42, "init").normal(size=5)
    c = make_rng(42, "sample").normal(size=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(KeyError):
        make_rng(42, "nope")


def test_uniform_init_bounds():
    values = uniform_init(make_rng(0, "init"), (100, 50), fan_in=25)
    assert np.all(np.abs(values) <= 0.2)


class TwoLayer(Module):
    def __init__(self, rng):
        super().__init__("toy")
        self.w = self.uniform_param("w", (3, 4), rng)
        self.b = self.uniform_param("b", (4,), rng, fan_in=3)


def test_module_state_dict_round_trip():
    first = TwoLayer(make_rng(0, "init"))
    second = TwoLayer(make_rng(1, "init"))
    assert [name for name, _ in first.named_parameters()] == ["toy/w", "toy/b"]
    second.load_state_dict(first.state_dict())
    assert np.array_equal(second.w.data, first.w.data)
    with pytest.raises(ShapeError):
        second.load_state_dict({"toy/w": np.zeros((3, 4))})
    with pytest.raises(ShapeError):
        second.load_state_dict({"toy/w": np.zeros((4, 3)), "toy/b": np.zeros(4)})


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    rng = make_rng(5, "sample")
    state = {
        "netvlad/centers": rng.normal(size=(3, 4)),
        "moe/expert_b": rng.normal(size=(6,)),
        "scalar": np.array(1.0 / 3.0),
    }
    payload = encode_checkpoint(state)
    decoded = decode_checkpoint(payload)
    assert list(decoded) == list(state)
    for name in state:
        assert np.array_equal(decoded[name], state[name])
        assert decoded[name].shape == state[name].shape
    assert encode_checkpoint(decoded) == payload

    path = save_checkpoint(tmp_path / "model.sgv", state, {"family": "netvlad"})
    assert path.read_bytes() == payload
    assert load_checkpoint_meta(path) == {"family": "netvlad"}
    assert encode_checkpoint(load_checkpoint(path)) == payload


def test_checkpoint_header_layout():
    payload = encode_checkpoint({"ab": np.zeros((2, 1))})
    assert payload[:4] == b"SGV1"
    assert payload[4:6] == b"\x01\x00"
    assert payload[6:8] == b"\x02\x00"
    assert payload[8:10] == b"ab"
    assert payload[10] == 2
    assert len(payload) == 11 + 8 + 16


def test_checkpoint_errors():
    payload = encode_checkpoint({"w": np.ones((2, 2))})
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + payload[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(payload[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(payload[:4] + b"\x09\x00" + payload[6:])
