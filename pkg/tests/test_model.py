import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from antidiff.core.model import (
    GROUPS,
    TINY_CONFIG,
    ModelConfig,
    ToyLDM,
    UNet,
    checksums,
    count_parameters,
    cross_attention,
    parameter_group,
)
from conftest import assert_grad_matches_fd


def test_cross_attention_identical_keys_average_values():
    q = torch.randn(1, 3)
    k = torch.ones(2, 3)
    v = torch.tensor([[1.0, 2.0], [3.0, 6.0]])
    out, m = cross_attention(q, k, v)
    assert m.tolist() == [[0.5, 0.5]]
    assert torch.allclose(out, v.mean(0, keepdim=True))


def test_cross_attention_hand_evaluated_softmax():
    q = torch.tensor([[1.0]], dtype=torch.float64)
    k = torch.tensor([[math.log(2.0)], [0.0]], dtype=torch.float64)
    v = torch.eye(2, dtype=torch.float64)
    out, m = cross_attention(q, k, v)
    assert m[0].tolist() == pytest.approx([2 / 3, 1 / 3], abs=1e-15)
    assert torch.equal(out, m @ v)


@pytest.mark.parametrize("shapes", [((2, 3), (4, 2), (4, 5)), ((2, 3), (4, 3), (5, 3))])
def test_cross_attention_rejects_mismatch(shapes):
    q, k, v = (torch.zeros(*s) for s in shapes)
    with pytest.raises(ValueError):
        cross_attention(q, k, v)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 6), L=st.integers(1, 9), d=st.integers(1, 8), scale=st.floats(0.01, 30.0), seed=st.integers(0, 10**6))
def test_cross_attention_rows_are_distributions(n, L, d, scale, seed):
    gen = torch.Generator().manual_seed(seed)
    q = scale * torch.randn(2, n, d, generator=gen)
    k = scale * torch.randn(2, L, d, generator=gen)
    v = torch.randn(2, L, 3, generator=gen)
    _, m = cross_attention(q, k, v)
    assert float(m.min()) >= 0.0
    assert torch.allclose(m.sum(-1), torch.ones(2, n), atol=1e-6, rtol=0)


def test_default_model_shapes_and_capture():
    model = ToyLDM()
    x = torch.rand(3, 3, 32, 32)
    z = model.encode(x)
    assert z.shape == (3, 4, 8, 8)
    f = model.embed([0] * 8)
    assert f.shape == (8, 32)
    eps, cap = model.predict_noise(z, 5, f)
    assert eps.shape == z.shape and cap is None
    with torch.no_grad():
        eps, cap = model.predict_noise(z, torch.tensor([1, 50, 100]), f, capture=True)
    assert cap.layer_ids == list(UNet.layer_ids)
    assert [tuple(m.shape) for m in cap.maps] == [(3, 2, 64, 8), (3, 2, 16, 8)]
    for m in cap.maps:
        assert float(m.min()) >= 0
        assert torch.allclose(m.sum(-1), torch.ones(m.shape[:-1]), atol=1e-6, rtol=0)


def test_capture_layer_subset_and_unknown_layer():
    model = ToyLDM(TINY_CONFIG)
    z = torch.randn(1, *model.latent_shape)
    f = model.embed([0] * 8)
    _, cap = model.predict_noise(z, 3, f, capture=True, layers=["mid.attn"])
    assert cap.layer_ids == ["mid.attn"] and len(cap.maps) == 1
    with pytest.raises(KeyError):
        model.predict_noise(z, 3, f, capture=True, layers=["up.attn"])


@pytest.mark.parametrize("t", [0, 101])
def test_predict_noise_rejects_bad_timestep(t):
    model = ToyLDM(TINY_CONFIG)
    with pytest.raises(ValueError):
        model.predict_noise(torch.randn(1, *model.latent_shape), t, model.embed([0] * 8))


def test_shape_errors():
    model = ToyLDM(TINY_CONFIG)
    with pytest.raises(ValueError):
        model.encode(torch.rand(1, 3, 16, 16))
    with pytest.raises(ValueError):
        model.decode(torch.randn(1, 4, 4, 4))
    with pytest.raises(ValueError):
        model.predict_noise(torch.randn(1, 3, 8, 8), 1, model.embed([0] * 8))
    with pytest.raises(ValueError):
        model.predict_noise(torch.randn(1, *model.latent_shape), 1, torch.zeros(8, 5))


def test_encode_is_deterministic_and_decode_is_clamped():
    model = ToyLDM(TINY_CONFIG)
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(model.encode(x), model.encode(x))
    wild = 1e3 * torch.randn(2, *model.latent_shape)
    with torch.no_grad():
        out = model.decode(wild)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_same_seed_same_parameters():
    a, b = ToyLDM(TINY_CONFIG, seed=4), ToyLDM(TINY_CONFIG, seed=4)
    assert checksums(a) == checksums(b)
    assert checksums(a) != checksums(ToyLDM(TINY_CONFIG, seed=5))


def test_construction_leaves_global_rng_alone():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    ToyLDM(TINY_CONFIG, seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_parameter_groups_partition_the_state():
    model = ToyLDM()
    groups = {parameter_group(n) for n in model.state_dict()}
    assert groups == set(GROUPS)


def test_tiny_model_is_small_enough_for_fd():
    assert count_parameters(ToyLDM(TINY_CONFIG)) <= 5e4


def test_config_round_trip():
    cfg = ModelConfig(unet_channels=(8, 24), T=50)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_predict_noise_gradient_matches_fd(tiny64):
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(2, *tiny64.latent_shape, generator=gen, dtype=torch.float64)
    f = tiny64.embed([0, 1, 2, 3, 0, 0, 0, 0]).detach()
    w = torch.randn(2, *tiny64.latent_shape, generator=gen, dtype=torch.float64)
    assert_grad_matches_fd(lambda zz: (tiny64.predict_noise(zz, torch.tensor([7, 60]), f)[0] * w).sum(), z)
