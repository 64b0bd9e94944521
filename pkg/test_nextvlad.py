"""Tests for NeXtVLAD, SECG and the mixture of NeXtVLAD models."""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit, softmax as np_softmax

from src.models.netvlad import NetVladEncoder, netvlad_encode
from src.models.nextvlad import (
    MixtureGate, NeXtVladConfig, NeXtVladEncoder, SecgGate, expand_reshape,
    group_attention, mix_logits, nextvlad_encode, secg,
)
from src.models.registry import build_model
from src.tensor.core import Tensor
from src.tensor.gradcheck import grad_check
from src.tensor.random import make_rng
from src.utils.errors import ConfigError, ShapeError


def encoder(feature_dim, groups, clusters, expansion, attention=True, seed=0):
    config = NeXtVladConfig(groups=groups, clusters=clusters, expansion=expansion, group_attention=attention)
    return NeXtVladEncoder("nextvlad/0", feature_dim, config, make_rng(seed, "init"))


def brute_force_nextvlad(frames, enc):
    """Quadruple loop over clusters, group features, frames and groups."""
    expanded = frames @ enc.expansion_w.data + enc.expansion_b.data
    count = frames.shape[0]
    G, K, d = enc.groups, enc.clusters, enc.group_dim
    attention = expit(expanded @ enc.group_w.data + enc.group_b.data)
    assign = np_softmax((expanded @ enc.assign_w.data + enc.assign_b.data).reshape(count, G, K), axis=2)
    grouped = expanded.reshape(count, G, d)
    out = np.zeros((d, K))
    for k in range(K):
        for j in range(d):
            total = 0.0
            for i in range(count):
                for g in range(G):
                    total += attention[i, g] * assign[i, g, k] * (grouped[i, g, j] - enc.centers.data[k, j])
            out[j, k] = total
    for k in range(K):
        out[:, k] /= max(np.linalg.norm(out[:, k]), enc.eps)
    return out


def test_expand_reshape_shapes():
    assert expand_reshape(np.ones((4, 6)), encoder(6, 3, 2, 2)).shape == (4, 3, 4)
    assert encoder(1152, 8, 2, 2).group_dim == 288
    enc = encoder(5, 1, 2, 1)
    frames = make_rng(0, "sample").normal(size=(3, 5))
    assert_allclose(expand_reshape(frames, enc).data[:, 0, :], enc.expand(frames).data, rtol=0, atol=0)


def test_indivisible_groups_raise():
    with pytest.raises(ConfigError):
        encoder(5, 3, 2, 1)


def test_group_attention_examples():
    enc = encoder(4, 2, 3, 2)
    enc.group_w.data[:] = 0.0
    enc.group_b.data[:] = 0.0
    expanded = enc.expand(make_rng(0, "sample").normal(size=(5, 4)))
    assert_allclose(group_attention(expanded, enc).data, 0.5)
    enc.group_b.data[:] = 100.0
    assert_allclose(group_attention(expanded, enc).data, 1.0, atol=1e-12)
    enc.group_w.data = make_rng(1, "sample").normal(size=enc.group_w.shape)
    low = group_attention(expanded, enc).data
    enc.group_b.data[:] = 101.0
    assert np.all(group_attention(expanded, enc).data >= low)


def test_reduces_to_netvlad_bit_for_bit():
    rng = make_rng(3, "sample")
    frames = rng.normal(size=(2, 6, 4))
    enc = encoder(4, 1, 3, 1, attention=False)
    enc.expansion_w.data = np.eye(4)
    enc.expansion_b.data = np.zeros(4)
    plain = NetVladEncoder("netvlad", 4, 3, make_rng(0, "init"))
    plain.centers.data = enc.centers.data.copy()
    plain.assign_w.data = enc.assign_w.data.copy()
    plain.assign_b.data = enc.assign_b.data.copy()
    assert np.array_equal(nextvlad_encode(frames, enc).data, netvlad_encode(frames, plain).data)


def test_zero_residuals_under_hard_assignment():
    enc = encoder(4, 2, 2, 1, attention=False)
    enc.expansion_w.data = np.eye(4)
    enc.expansion_b.data = np.zeros(4)
    enc.centers.data = np.array([[1.0, 2.0], [0.0, 0.0]])
    enc.assign_w.data[:] = 0.0
    enc.assign_b.data = np.array([100.0, -100.0, 100.0, -100.0])
    frames = np.tile([1.0, 2.0, 1.0, 2.0], (3, 1))
    assert_allclose(nextvlad_encode(frames, enc).data, 0.0, atol=1e-12)


def test_encode_matches_quadruple_loop_oracle():
    for instance in range(20):
        rng = make_rng(instance, "sample")
        enc = encoder(6, 3, 4, 2, seed=instance)
        frames = rng.normal(size=(5, 6))
        assert_allclose(nextvlad_encode(frames, enc).data[0], brute_force_nextvlad(frames, enc), rtol=0, atol=1e-12)


def test_encode_is_permutation_invariant():
    rng = make_rng(9, "sample")
    enc = encoder(6, 2, 3, 2, seed=9)
    frames = rng.normal(size=(7, 6))
    shuffled = frames[rng.permutation(7)]
    assert_allclose(nextvlad_encode(shuffled, enc).data, nextvlad_encode(frames, enc).data, rtol=0, atol=1e-12)


def test_encode_rejects_empty_input():
    with pytest.raises(ShapeError):
        nextvlad_encode(np.zeros((0, 4)), encoder(4, 2, 2, 1))


def test_secg_examples_and_bound():
    gate = SecgGate("nextvlad/0/secg", 32, 16, make_rng(0, "init"))
    h = make_rng(0, "sample").normal(size=(3, 32))
    assert np.all(np.abs(secg(h, gate).data) <= np.abs(h))
    assert secg(np.zeros((1, 32)), gate).data.tolist() == [[0.0] * 32]
    for tensor in gate.parameters():
        tensor.data = np.zeros_like(tensor.data)
    assert_allclose(secg(h, gate).data, 0.5 * h)


def test_secg_parameter_count_against_context_gate():
    H, r = 64, 16
    gate = SecgGate("secg", H, r, make_rng(0, "init"))
    assert gate.num_parameters() == 2 * H * H // r + H // r + H
    context_gate_count = H * H + H
    assert context_gate_count / gate.num_parameters() == pytest.approx(7.76, abs=0.01)


def test_mix_logits_examples():
    rng = make_rng(0, "init")
    mixture = MixtureGate("mixture", 4, 3, rng)
    mixture.gate_w.data[:] = 0.0
    mixture.gate_b.data[:] = 0.0
    z = [Tensor(np.full((1, 2), v)) for v in (1.0, 2.0, 6.0)]
    assert_allclose(mix_logits(z, np.zeros((1, 4)), mixture).data, 3.0)

    mixture.gate_b.data = np.log([0.7, 0.2, 0.1])
    z = [Tensor(np.full((1, 2), v)) for v in (1.0, 2.0, 3.0)]
    assert_allclose(mix_logits(z, np.zeros((1, 4)), mixture).data, 1.4, rtol=1e-12)

    single = MixtureGate("mixture", 4, 1, rng)
    only = Tensor(np.array([[0.3, -0.7]]))
    assert_allclose(mix_logits([only], np.ones((1, 4)), single).data, only.data, rtol=1e-15)


def test_mix_weights_sum_to_one():
    mixture = MixtureGate("mixture", 4, 3, make_rng(1, "init"))
    weights = mixture.weights(make_rng(1, "sample").normal(size=(5, 4))).data
    assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def small_mixture(seed=0):
    config = {"groups": 2, "clusters": 2, "expansion": 2, "hidden_size": 4, "gating_reduction": 2, "submodels": 3}
    return build_model("nextvlad_mix", 3, 1, 3, config, seed=seed)


def test_mixture_namespaces():
    names = [name for name, _ in small_mixture().named_parameters()]
    prefixes = {name.rsplit("/", 1)[0] for name in names}
    assert {"nextvlad/0", "nextvlad/1", "nextvlad/2", "mixture"} <= prefixes
    assert all(name.startswith(("nextvlad/", "mixture/")) for name in names)


def test_mixture_gradients_match_finite_differences():
    model = small_mixture(seed=2)
    rng = make_rng(2, "sample")
    frames = rng.normal(size=(2, 5, 4))
    labels = (rng.random(size=(2, 3)) < 0.5).astype(float)
    error = grad_check(lambda: model.loss(frames, labels), model.parameters())
    assert error < 1e-4


def test_mixture_probabilities_in_unit_interval():
    model = small_mixture(seed=5)
    probs = model.predict(make_rng(5, "sample").normal(size=(3, 5, 4)))
    assert probs.shape == (3, 3)
    assert np.all((probs > 0) & (probs < 1))


def test_invalid_reduction_is_rejected():
    with pytest.raises(ConfigError):
        build_model("nextvlad_mix", 3, 1, 3, {"hidden_size": 10, "gating_reduction": 4})
